//! MNIST in the IDX format: big-endian headers, magic `0x00000803` for image
//! files (n, rows, cols, then n*rows*cols bytes) and `0x00000801` for label
//! files (n, then n bytes).

use std::fs;
use std::path::Path;

use crate::error::{DrnetError, Result};
use crate::tensor::Tensor;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

/// Labelled single-channel images with pixels in `[0, 1]`.
///
/// An image's id is its index in the dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    rows: usize,
    cols: usize,
    pixels: Vec<f64>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(rows: usize, cols: usize, pixels: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        if rows == 0 || cols == 0 || pixels.len() != rows * cols * labels.len() {
            return Err(DrnetError::invalid(format!(
                "{} pixels do not form {} images of {rows}x{cols}",
                pixels.len(),
                labels.len()
            )));
        }
        Ok(Dataset {
            rows,
            cols,
            pixels,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [1, self.rows, self.cols]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, id: usize) -> usize {
        self.labels[id]
    }

    pub fn pixels(&self, id: usize) -> &[f64] {
        let n = self.rows * self.cols;
        &self.pixels[id * n..(id + 1) * n]
    }

    /// `[1, 1, rows, cols]` tensor for one image.
    pub fn image(&self, id: usize) -> Tensor {
        self.batch(&[id])
    }

    /// `[ids.len(), 1, rows, cols]` tensor.
    pub fn batch(&self, ids: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(ids.len() * self.rows * self.cols);
        for &id in ids {
            data.extend_from_slice(self.pixels(id));
        }
        Tensor::new(vec![ids.len(), 1, self.rows, self.cols], data).expect("batch shape")
    }

    /// Images with ids `ids`, renumbered from zero.
    pub fn subset(&self, ids: &[usize]) -> Dataset {
        let mut pixels = Vec::with_capacity(ids.len() * self.rows * self.cols);
        for &id in ids {
            pixels.extend_from_slice(self.pixels(id));
        }
        Dataset {
            rows: self.rows,
            cols: self.cols,
            pixels,
            labels: ids.iter().map(|&id| self.labels[id]).collect(),
        }
    }

    /// First `n` images.
    pub fn head(&self, n: usize) -> Dataset {
        let ids: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&ids)
    }

    /// Distinct labels in ascending order.
    pub fn classes(&self) -> Vec<usize> {
        let mut c = self.labels.clone();
        c.sort_unstable();
        c.dedup();
        c
    }

    /// Ids of images whose label is in `classes`, in ascending id order.
    pub fn ids_with_labels(&self, classes: &[usize]) -> Vec<usize> {
        (0..self.len()).filter(|&i| classes.contains(&self.labels[i])).collect()
    }
}

fn parse_err(path: &Path, offset: usize, msg: impl Into<String>) -> DrnetError {
    DrnetError::Parse {
        path: path.to_path_buf(),
        offset: offset as u64,
        msg: msg.into(),
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| parse_err(path, bytes.len(), format!("truncated header: missing {what}")))
}

fn check_magic(bytes: &[u8], path: &Path, expected: u32) -> Result<()> {
    let magic = be_u32(bytes, 0, path, "magic number")?;
    if magic != expected {
        return Err(parse_err(
            path,
            0,
            format!("expected magic 0x{expected:08x}, found 0x{magic:08x}"),
        ));
    }
    Ok(())
}

/// Returns `(rows, cols, raw pixels)`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    check_magic(bytes, path, IMAGE_MAGIC)?;
    let n = be_u32(bytes, 4, path, "image count")? as usize;
    let rows = be_u32(bytes, 8, path, "row count")? as usize;
    let cols = be_u32(bytes, 12, path, "column count")? as usize;
    let need = n * rows * cols;
    let payload = &bytes[16..];
    if payload.len() < need {
        return Err(parse_err(
            path,
            bytes.len(),
            format!("truncated payload: {n} images of {rows}x{cols} need {need} bytes, found {}", payload.len()),
        ));
    }
    if payload.len() > need {
        return Err(parse_err(path, 16 + need, "trailing bytes after image payload"));
    }
    Ok((rows, cols, payload.to_vec()))
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    check_magic(bytes, path, LABEL_MAGIC)?;
    let n = be_u32(bytes, 4, path, "label count")? as usize;
    let payload = &bytes[8..];
    if payload.len() < n {
        return Err(parse_err(
            path,
            bytes.len(),
            format!("truncated payload: {n} labels, found {} bytes", payload.len()),
        ));
    }
    if payload.len() > n {
        return Err(parse_err(path, 8 + n, "trailing bytes after label payload"));
    }
    Ok(payload.to_vec())
}

pub fn encode_idx_images(rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let n = pixels.len() / (rows * cols);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGE_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| DrnetError::io(path, e))
}

/// Loads one image/label file pair; pixels are divided by 255.
pub fn load_idx_pair(images: &Path, labels: &Path) -> Result<Dataset> {
    let (rows, cols, raw) = parse_idx_images(&read(images)?, images)?;
    let lab = parse_idx_labels(&read(labels)?, labels)?;
    let n_images = raw.len() / (rows * cols).max(1);
    if n_images != lab.len() {
        return Err(DrnetError::Integrity {
            path: labels.to_path_buf(),
            msg: format!(
                "{} labels for {n_images} images in {}",
                lab.len(),
                images.display()
            ),
        });
    }
    Dataset::new(
        rows,
        cols,
        raw.iter().map(|&b| f64::from(b) / 255.0).collect(),
        lab.iter().map(|&l| usize::from(l)).collect(),
    )
}

/// Loads `(train, test)` from a directory holding the four standard IDX files.
pub fn load_mnist(dir: &Path) -> Result<(Dataset, Dataset)> {
    let train = load_idx_pair(&dir.join(TRAIN_IMAGES), &dir.join(TRAIN_LABELS))?;
    let test = load_idx_pair(&dir.join(TEST_IMAGES), &dir.join(TEST_LABELS))?;
    Ok((train, test))
}
