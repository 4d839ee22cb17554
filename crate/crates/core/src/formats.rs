//! CSV and PGM artifact files. Floats are written with Rust's shortest
//! round-trip formatting, so reading a file back reproduces every value exactly.

use std::fs;
use std::path::Path;

use crate::analysis::{LayerShare, SubTaskResult};
use crate::dissect::{Cdrp, ChannelImportanceVector, ClassFallback};
use crate::error::{DrnetError, Result};
use crate::infer::CostReport;
use crate::reconstruct::{CombineMethod, CombinedCiv};

pub(crate) fn csv_io(path: &Path, e: csv::Error) -> DrnetError {
    let offset = e.position().map_or(0, |p| p.byte());
    match e.into_kind() {
        csv::ErrorKind::Io(source) => DrnetError::io(path, source),
        other => DrnetError::Parse {
            path: path.to_path_buf(),
            offset,
            msg: format!("{other:?}"),
        },
    }
}

/// Writes `header` and `rows` to `path`.
pub fn write_csv<I>(path: &Path, header: &[String], rows: I) -> Result<()>
where
    I: IntoIterator<Item = Vec<String>>,
{
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    w.write_record(header).map_err(|e| csv_io(path, e))?;
    for r in rows {
        w.write_record(&r).map_err(|e| csv_io(path, e))?;
    }
    w.flush().map_err(|e| DrnetError::io(path, e))
}

struct Table {
    header: Vec<String>,
    rows: Vec<(u64, Vec<String>)>,
}

fn read_csv(path: &Path) -> Result<Table> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_io(path, e))?;
    let header = r.headers().map_err(|e| csv_io(path, e))?.iter().map(String::from).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_io(path, e))?;
        let at = rec.position().map_or(0, |p| p.byte());
        rows.push((at, rec.iter().map(String::from).collect()));
    }
    Ok(Table { header, rows })
}

fn bad(path: &Path, offset: u64, msg: impl Into<String>) -> DrnetError {
    DrnetError::Parse {
        path: path.to_path_buf(),
        offset,
        msg: msg.into(),
    }
}

fn field<T: std::str::FromStr>(path: &Path, offset: u64, name: &str, s: &str) -> Result<T> {
    s.parse()
        .map_err(|_| bad(path, offset, format!("column `{name}`: cannot parse `{s}`")))
}

fn expect_prefix(path: &Path, header: &[String], prefix: &[&str]) -> Result<()> {
    if header.len() < prefix.len() || header[..prefix.len()] != *prefix {
        return Err(bad(path, 0, format!("header must start with {}", prefix.join(","))));
    }
    Ok(())
}

fn floats(vs: &[f64]) -> impl Iterator<Item = String> + '_ {
    vs.iter().map(ToString::to_string)
}

fn class_list(classes: &[usize]) -> String {
    classes.iter().map(ToString::to_string).collect::<Vec<_>>().join(";")
}

fn parse_class_list(path: &Path, offset: u64, s: &str) -> Result<Vec<usize>> {
    s.split(';').map(|c| field(path, offset, "classes", c)).collect()
}

/// `class_id,sample_count,<channel labels>`, one row per class.
pub fn write_civs(path: &Path, labels: &[String], civs: &[ChannelImportanceVector]) -> Result<()> {
    let header: Vec<String> = ["class_id", "sample_count"].map(String::from).into_iter().chain(labels.iter().cloned()).collect();
    write_csv(
        path,
        &header,
        civs.iter().map(|c| {
            [c.class_id.to_string(), c.sample_count.to_string()]
                .into_iter()
                .chain(floats(&c.values))
                .collect()
        }),
    )
}

/// Returns the channel labels and the vectors.
pub fn read_civs(path: &Path) -> Result<(Vec<String>, Vec<ChannelImportanceVector>)> {
    let t = read_csv(path)?;
    expect_prefix(path, &t.header, &["class_id", "sample_count"])?;
    let labels = t.header[2..].to_vec();
    let mut civs = Vec::with_capacity(t.rows.len());
    for (at, row) in &t.rows {
        let values = row[2..]
            .iter()
            .zip(&labels)
            .map(|(v, l)| field::<f64>(path, *at, l, v))
            .collect::<Result<Vec<_>>>()?;
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(bad(path, *at, "importance values must be finite and >= 0"));
        }
        civs.push(ChannelImportanceVector {
            class_id: field(path, *at, "class_id", &row[0])?,
            sample_count: field(path, *at, "sample_count", &row[1])?,
            values,
        });
    }
    Ok((labels, civs))
}

/// `image_id,class,fallback,<channel labels>`, one row per image.
pub fn write_cdrps(path: &Path, labels: &[String], cdrps: &[Cdrp]) -> Result<()> {
    let header: Vec<String> = ["image_id", "class", "fallback"].map(String::from).into_iter().chain(labels.iter().cloned()).collect();
    write_csv(
        path,
        &header,
        cdrps.iter().map(|c| {
            [c.image_id.to_string(), c.class_label.to_string(), u8::from(c.fallback).to_string()]
                .into_iter()
                .chain(floats(&c.values))
                .collect()
        }),
    )
}

pub fn read_cdrps(path: &Path) -> Result<Vec<Cdrp>> {
    let t = read_csv(path)?;
    expect_prefix(path, &t.header, &["image_id", "class", "fallback"])?;
    t.rows
        .iter()
        .map(|(at, row)| {
            Ok(Cdrp {
                image_id: field(path, *at, "image_id", &row[0])?,
                class_label: field(path, *at, "class", &row[1])?,
                fallback: field::<u8>(path, *at, "fallback", &row[2])? != 0,
                values: row[3..].iter().map(|v| field(path, *at, "gate", v)).collect::<Result<_>>()?,
            })
        })
        .collect()
}

/// `class_id,fallbacks,samples,rate`.
pub fn write_fallback(path: &Path, stats: &[ClassFallback]) -> Result<()> {
    write_csv(
        path,
        &["class_id", "fallbacks", "samples", "rate"].map(String::from),
        stats.iter().map(|s| {
            vec![
                s.class_id.to_string(),
                s.fallbacks.to_string(),
                s.samples.to_string(),
                (s.fallbacks as f64 / s.samples as f64).to_string(),
            ]
        }),
    )
}

/// `classes,method,threshold,<channel labels>` with one row; classes are `;`-separated
/// and mask entries are `0` or `1`.
pub fn write_cciv(path: &Path, labels: &[String], cciv: &CombinedCiv) -> Result<()> {
    let header: Vec<String> = ["classes", "method", "threshold"].map(String::from).into_iter().chain(labels.iter().cloned()).collect();
    let row = [class_list(&cciv.classes), cciv.method.to_string(), cciv.threshold.to_string()]
        .into_iter()
        .chain(cciv.mask.iter().map(|&m| u8::from(m).to_string()))
        .collect();
    write_csv(path, &header, [row])
}

pub fn read_cciv(path: &Path) -> Result<CombinedCiv> {
    let t = read_csv(path)?;
    expect_prefix(path, &t.header, &["classes", "method", "threshold"])?;
    let [(at, row)] = t.rows.as_slice() else {
        return Err(bad(path, 0, format!("expected exactly one mask row, found {}", t.rows.len())));
    };
    let mask = row[3..]
        .iter()
        .map(|v| match v.as_str() {
            "0" => Ok(false),
            "1" => Ok(true),
            other => Err(bad(path, *at, format!("mask entries must be 0 or 1, found `{other}`"))),
        })
        .collect::<Result<_>>()?;
    Ok(CombinedCiv {
        classes: parse_class_list(path, *at, &row[0])?,
        method: row[1].parse::<CombineMethod>().map_err(|e| bad(path, *at, e.to_string()))?,
        threshold: field(path, *at, "threshold", &row[2])?,
        mask,
    })
}

pub const RESULT_HEADER: [&str; 14] = [
    "classes",
    "method",
    "threshold",
    "images",
    "full_acc",
    "sub_acc",
    "acc_drop",
    "running_channels",
    "total_channels",
    "running_channel_frac",
    "running_params",
    "total_params",
    "running_param_frac",
    "mac_frac",
];

pub fn write_results(path: &Path, results: &[SubTaskResult]) -> Result<()> {
    write_csv(
        path,
        &RESULT_HEADER.map(String::from),
        results.iter().map(|r| {
            vec![
                class_list(&r.classes),
                r.method.to_string(),
                r.threshold.to_string(),
                r.images.to_string(),
                r.full_accuracy.to_string(),
                r.masked_accuracy.to_string(),
                (r.full_accuracy - r.masked_accuracy).to_string(),
                r.running_channels.to_string(),
                r.total_channels.to_string(),
                r.running_fraction().to_string(),
                r.running_params.to_string(),
                r.total_params.to_string(),
                r.param_fraction().to_string(),
                (r.macs as f64 / r.full_macs as f64).to_string(),
            ]
        }),
    )
}

/// `classes,threshold,running_channel_frac`.
pub fn write_sweep(path: &Path, rows: &[(String, f64, f64)]) -> Result<()> {
    write_csv(
        path,
        &["classes", "threshold", "running_channel_frac"].map(String::from),
        rows.iter()
            .map(|(c, t, f)| vec![c.clone(), t.to_string(), f.to_string()]),
    )
}

/// `classes,conv_layer,channels,running,fraction`.
pub fn write_layer_distribution(path: &Path, rows: &[(Vec<usize>, Vec<LayerShare>)]) -> Result<()> {
    write_csv(
        path,
        &["classes", "conv_layer", "channels", "running", "fraction"].map(String::from),
        rows.iter().flat_map(|(c, shares)| {
            shares.iter().map(move |s| {
                vec![
                    class_list(c),
                    s.conv_layer.to_string(),
                    s.channels.to_string(),
                    s.running.to_string(),
                    s.fraction().to_string(),
                ]
            })
        }),
    )
}

/// `layer,kind,total_channels,running_channels,total_params,running_params`
/// followed by a `total` row. Dense layers are counted in full.
pub fn write_cost(path: &Path, report: &CostReport) -> Result<()> {
    let mut rows: Vec<Vec<String>> = report
        .per_layer
        .iter()
        .map(|l| {
            vec![
                l.layer.to_string(),
                l.kind.to_string(),
                l.total_channels.to_string(),
                l.running_channels.to_string(),
                l.total_params.to_string(),
                l.running_params.to_string(),
            ]
        })
        .collect();
    rows.push(vec![
        "total".into(),
        String::new(),
        report.total_channels.to_string(),
        report.running_channels.to_string(),
        report.total_params.to_string(),
        report.running_params.to_string(),
    ]);
    write_csv(
        path,
        &["layer", "kind", "total_channels", "running_channels", "total_params", "running_params"].map(String::from),
        rows,
    )
}

/// Square matrix with a `class` column and one column per class.
pub fn write_similarity(path: &Path, classes: &[usize], matrix: &[Vec<f64>]) -> Result<()> {
    let header: Vec<String> = std::iter::once("class".to_string())
        .chain(classes.iter().map(ToString::to_string))
        .collect();
    write_csv(
        path,
        &header,
        classes.iter().zip(matrix).map(|(c, row)| std::iter::once(c.to_string()).chain(floats(row)).collect()),
    )
}

/// Binary greyscale PGM of a matrix with values in `[0, 1]`, each cell drawn as
/// a `cell`×`cell` block; 1 is white.
pub fn write_pgm(path: &Path, matrix: &[Vec<f64>], cell: usize) -> Result<()> {
    let rows = matrix.len();
    let cols = matrix.first().map_or(0, Vec::len);
    let (w, h) = (cols * cell, rows * cell);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    for row in matrix {
        let line: Vec<u8> = row
            .iter()
            .flat_map(|&v| std::iter::repeat_n((v.clamp(0.0, 1.0) * 255.0).round() as u8, cell))
            .collect();
        for _ in 0..cell {
            out.extend_from_slice(&line);
        }
    }
    fs::write(path, out).map_err(|e| DrnetError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("0.{i}")).collect()
    }

    #[test]
    fn civ_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.civ.csv");
        let civs = vec![
            ChannelImportanceVector { class_id: 3, values: vec![0.1, 1.0 / 3.0, 9.999999999999998], sample_count: 100 },
            ChannelImportanceVector { class_id: 7, values: vec![0.0, 1e-300, 2.5], sample_count: 1 },
        ];
        write_civs(&p, &labels(3), &civs).unwrap();
        let (l, back) = read_civs(&p).unwrap();
        assert_eq!(l, labels(3));
        assert_eq!(back, civs);
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("class_id,sample_count,0.0,0.1,0.2\n"), "{text}");
    }

    #[test]
    fn cciv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.cciv.csv");
        let c = CombinedCiv { classes: vec![3, 5], mask: vec![true, false, true], method: CombineMethod::Xor, threshold: 0.125 };
        write_cciv(&p, &labels(3), &c).unwrap();
        assert_eq!(read_cciv(&p).unwrap(), c);
        assert!(fs::read_to_string(&p).unwrap().contains("3;5,xor,0.125,1,0,1"));
    }

    #[test]
    fn cdrp_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cdrp.csv");
        let c = vec![Cdrp { image_id: 12, class_label: 4, values: vec![0.5, 10.0], fallback: true }];
        write_cdrps(&p, &labels(2), &c).unwrap();
        assert_eq!(read_cdrps(&p).unwrap(), c);
    }

    #[test]
    fn malformed_files_are_parse_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.civ.csv");
        fs::write(&p, "class_id,sample_count,0.0\n1,10,abc\n").unwrap();
        let err = read_civs(&p).unwrap_err();
        assert!(matches!(err, DrnetError::Parse { offset: 26, .. }), "{err:?}");
        fs::write(&p, "class,n\n").unwrap();
        assert!(matches!(read_civs(&p), Err(DrnetError::Parse { .. })));
        fs::write(&p, "class_id,sample_count,0.0\n1,10\n").unwrap();
        assert!(matches!(read_civs(&p), Err(DrnetError::Parse { .. })));
        fs::write(&p, "classes,method,threshold,0.0\n3;5,union,0.4,2\n").unwrap();
        assert!(read_cciv(&p).is_err());
        assert!(matches!(read_civs(&dir.path().join("missing")), Err(DrnetError::Io { .. })));
    }

    #[test]
    fn pgm_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.pgm");
        write_pgm(&p, &[vec![1.0, 0.0], vec![0.5, 1.0]], 2).unwrap();
        let bytes = fs::read(&p).unwrap();
        let header = b"P5\n4 4\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(&bytes[header.len()..], &[255, 255, 0, 0, 255, 255, 0, 0, 128, 128, 255, 255, 128, 128, 255, 255]);
    }
}
