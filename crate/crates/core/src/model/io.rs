//! `.drnm` model files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      4 bytes  "DRNM"
//! version    u32      1
//! arch_len   u32      byte length of the architecture string
//! arch       utf-8    e.g. "input(1,28,28);conv2d(1,8,3,1,1);relu;..."
//! then, for every conv2d/dense layer in order:
//!   layer    u32      index in the layer list
//!   n_w      u64      weight count, followed by n_w f64 values
//!   n_b      u64      bias count, followed by n_b f64 values
//! ```
//!
//! Trailing bytes after the last block are rejected.

use std::fs;
use std::path::Path;

use super::{Architecture, GatedNetwork, Layer};
use crate::error::{DrnetError, Result};

const MAGIC: &[u8; 4] = b"DRNM";
const VERSION: u32 = 1;

pub fn write_model(net: &GatedNetwork) -> Vec<u8> {
    let arch = net.architecture().to_string();
    let mut buf = Vec::with_capacity(16 + arch.len() + net.param_count() * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(arch.len() as u32).to_le_bytes());
    buf.extend_from_slice(arch.as_bytes());
    for (i, layer) in net.layers().iter().enumerate() {
        let (w, b) = match layer {
            Layer::Conv2d(c) => (&c.weights, &c.bias),
            Layer::Dense(d) => (&d.weights, &d.bias),
            _ => continue,
        };
        buf.extend_from_slice(&(i as u32).to_le_bytes());
        for t in [w, b] {
            buf.extend_from_slice(&(t.len() as u64).to_le_bytes());
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    buf
}

pub fn save_model(net: &GatedNetwork, path: &Path) -> Result<()> {
    fs::write(path, write_model(net)).map_err(|e| DrnetError::io(path, e))
}

pub fn load_model(path: &Path) -> Result<GatedNetwork> {
    let bytes = fs::read(path).map_err(|e| DrnetError::io(path, e))?;
    read_model(&bytes, path)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn parse_err(&self, msg: impl Into<String>) -> DrnetError {
        DrnetError::Parse {
            path: self.path.to_path_buf(),
            offset: self.pos as u64,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.parse_err(format!(
                "truncated while reading {what}: need {n} bytes, {} left",
                self.bytes.len() - self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Decodes a model; `path` is only used in error messages.
pub fn read_model(bytes: &[u8], path: &Path) -> Result<GatedNetwork> {
    let mut cur = Cursor { bytes, pos: 0, path };
    if cur.take(4, "magic")? != MAGIC {
        cur.pos = 0;
        return Err(cur.parse_err("bad magic, expected \"DRNM\""));
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(cur.parse_err(format!("unsupported version {version}")));
    }
    let arch_len = cur.u32("architecture length")? as usize;
    let arch_at = cur.pos;
    let arch_bytes = cur.take(arch_len, "architecture string")?;
    let arch: Architecture = std::str::from_utf8(arch_bytes)
        .map_err(|e| e.to_string())
        .and_then(str::parse)
        .map_err(|msg| DrnetError::Parse {
            path: path.to_path_buf(),
            offset: arch_at as u64,
            msg,
        })?;
    let integrity = |msg: String| DrnetError::Integrity {
        path: path.to_path_buf(),
        msg,
    };
    let mut net = GatedNetwork::zeros(arch).map_err(|e| match e {
        DrnetError::InvalidInput(msg) => integrity(msg),
        other => other,
    })?;

    let param_layers: Vec<usize> = net
        .layers()
        .iter()
        .enumerate()
        .filter(|(_, l)| matches!(l, Layer::Conv2d(_) | Layer::Dense(_)))
        .map(|(i, _)| i)
        .collect();
    let kinds: Vec<&'static str> = net.architecture().layers.iter().map(|l| l.kind()).collect();
    let mut params = net.params_mut().into_iter();
    for &expected in &param_layers {
        let index = cur.u32("layer index")? as usize;
        if index != expected {
            return Err(integrity(format!(
                "parameter block for layer {index} found where layer {expected} ({}) was expected",
                kinds[expected]
            )));
        }
        for what in ["weights", "bias"] {
            let t = params.next().expect("two tensors per parametric layer");
            let count = cur.u64(what)? as usize;
            if count != t.len() {
                return Err(integrity(format!(
                    "layer {index} ({}): {what} block declares {count} values, architecture needs {}",
                    kinds[index],
                    t.len()
                )));
            }
            let raw = cur.take(count * 8, what)?;
            for (v, chunk) in t.data_mut().iter_mut().zip(raw.chunks_exact(8)) {
                *v = f64::from_le_bytes(chunk.try_into().unwrap());
            }
        }
    }
    if cur.pos != bytes.len() {
        return Err(cur.parse_err(format!("{} trailing bytes", bytes.len() - cur.pos)));
    }
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LayerSpec;
    use crate::tensor::Tensor;

    fn p() -> &'static Path {
        Path::new("test.drnm")
    }

    #[test]
    fn round_trip_is_bitwise() {
        let net = GatedNetwork::init(Architecture::mnist5(), 9).unwrap();
        let back = read_model(&write_model(&net), p()).unwrap();
        assert_eq!(back, net);
        let x = Tensor::new(vec![1, 1, 28, 28], (0..784).map(|i| (i % 7) as f64 / 7.0).collect()).unwrap();
        let a = net.forward(&x).unwrap();
        let b = back.forward(&x).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn truncation_is_a_parse_error() {
        let bytes = write_model(&GatedNetwork::init(Architecture::mnist5(), 1).unwrap());
        for cut in [0, 3, 10, 40, bytes.len() / 2, bytes.len() - 1] {
            match read_model(&bytes[..cut], p()) {
                Err(DrnetError::Parse { offset, .. }) => assert!(offset as usize <= cut),
                other => panic!("cut {cut}: expected parse error, got {other:?}"),
            }
        }
    }

    #[test]
    fn bad_magic_and_trailing_bytes() {
        let mut bytes = write_model(&GatedNetwork::init(Architecture::mnist5(), 1).unwrap());
        bytes.push(0);
        assert!(matches!(read_model(&bytes, p()), Err(DrnetError::Parse { .. })));
        bytes[0] = b'X';
        let err = read_model(&bytes, p()).unwrap_err();
        assert!(matches!(err, DrnetError::Parse { offset: 0, .. }));
    }

    #[test]
    fn mismatched_channel_count_names_layer() {
        let net = GatedNetwork::init(Architecture::mnist5(), 2).unwrap();
        let bytes = write_model(&net);
        let good = net.architecture().to_string();
        let bad = good.replace("conv2d(8,16,3,1,1)", "conv2d(8,12,3,1,1)");
        assert_eq!(good.len(), bad.len());
        let mut tampered = bytes.clone();
        tampered[12..12 + good.len()].copy_from_slice(bad.as_bytes());
        let err = read_model(&tampered, p()).unwrap_err();
        match &err {
            DrnetError::Integrity { msg, .. } => assert!(msg.contains("layer 6 (conv2d)"), "{msg}"),
            other => panic!("expected integrity error, got {other:?}"),
        }
    }

    #[test]
    fn weight_count_mismatch_is_integrity_error() {
        let mut arch = Architecture::mnist5();
        let net = GatedNetwork::init(arch.clone(), 2).unwrap();
        let bytes = write_model(&net);
        // Same string length, different dense fan-out: blocks no longer fit.
        arch.layers[12] = LayerSpec::Dense { inputs: 64, outputs: 9 };
        let a = Architecture::mnist5().to_string();
        let b = arch.to_string();
        let mut tampered = Vec::new();
        tampered.extend_from_slice(&bytes[..8]);
        tampered.extend_from_slice(&(b.len() as u32).to_le_bytes());
        tampered.extend_from_slice(b.as_bytes());
        tampered.extend_from_slice(&bytes[12 + a.len()..]);
        let err = read_model(&tampered, p()).unwrap_err();
        match &err {
            DrnetError::Integrity { msg, .. } => assert!(msg.contains("layer 12 (dense)"), "{msg}"),
            other => panic!("expected integrity error, got {other:?}"),
        }
    }
}
