//! Combining class importance vectors into a binary run/skip mask.
//!
//! Both combiners make one pass over the channels and never touch the network.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dissect::ChannelImportanceVector;
use crate::error::{DrnetError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CombineMethod {
    /// Keep channel `j` when `max_c civ_c[j] >= thr`.
    Union,
    /// Two classes only: keep channel `j` when `|civ_a[j] - civ_b[j]| >= thr`.
    Xor,
}

impl fmt::Display for CombineMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CombineMethod::Union => "union",
            CombineMethod::Xor => "xor",
        })
    }
}

impl FromStr for CombineMethod {
    type Err = DrnetError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "union" => Ok(CombineMethod::Union),
            "xor" => Ok(CombineMethod::Xor),
            other => Err(DrnetError::invalid(format!(
                "unknown method `{other}`, expected union or xor"
            ))),
        }
    }
}

/// Class subset of a classification task: distinct ids, at least two, stored ascending.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SubTask {
    classes: Vec<usize>,
}

impl SubTask {
    pub fn new(classes: &[usize], num_classes: usize) -> Result<Self> {
        let mut sorted = classes.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != classes.len() {
            return Err(DrnetError::invalid(format!("duplicate class ids in {classes:?}")));
        }
        if sorted.len() < 2 {
            return Err(DrnetError::invalid("a sub-task needs at least two classes"));
        }
        if let Some(&c) = sorted.iter().find(|&&c| c >= num_classes) {
            return Err(DrnetError::invalid(format!(
                "class {c} outside the {num_classes} classes"
            )));
        }
        Ok(SubTask { classes: sorted })
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }
}

impl fmt::Display for SubTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ids: Vec<String> = self.classes.iter().map(ToString::to_string).collect();
        f.write_str(&ids.join(";"))
    }
}

/// Binary channel mask serving one class set.
#[derive(Clone, Debug, PartialEq)]
pub struct CombinedCiv {
    pub classes: Vec<usize>,
    pub mask: Vec<bool>,
    pub method: CombineMethod,
    pub threshold: f64,
}

impl CombinedCiv {
    /// Mask that keeps every channel.
    pub fn all_ones(classes: &[usize], channels: usize) -> Self {
        CombinedCiv {
            classes: classes.to_vec(),
            mask: vec![true; channels],
            method: CombineMethod::Union,
            threshold: 0.0,
        }
    }

    pub fn running_channels(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn running_fraction(&self) -> f64 {
        running_fraction(&self.mask)
    }
}

pub fn running_fraction(mask: &[bool]) -> f64 {
    mask.iter().filter(|&&m| m).count() as f64 / mask.len() as f64
}

fn check_threshold(thr: f64) -> Result<()> {
    if !(thr >= 0.0) || thr.is_infinite() {
        return Err(DrnetError::invalid(format!("threshold must be finite and >= 0, got {thr}")));
    }
    Ok(())
}

fn common_len(civs: &[&[f64]]) -> Result<usize> {
    let len = civs
        .first()
        .map(|c| c.len())
        .ok_or_else(|| DrnetError::invalid("no importance vectors to combine"))?;
    if civs.iter().any(|c| c.len() != len) {
        return Err(DrnetError::invalid(format!(
            "importance vectors differ in length: {:?}",
            civs.iter().map(|c| c.len()).collect::<Vec<_>>()
        )));
    }
    Ok(len)
}

/// Union mask: `max_c civs[c][j] >= thr`.
pub fn union_mask(civs: &[&[f64]], thr: f64) -> Result<Vec<bool>> {
    check_threshold(thr)?;
    let len = common_len(civs)?;
    Ok((0..len)
        .map(|j| civs.iter().map(|c| c[j]).fold(f64::NEG_INFINITY, f64::max) >= thr)
        .collect())
}

/// XOR mask: `|a[j] - b[j]| >= thr`.
pub fn xor_mask(a: &[f64], b: &[f64], thr: f64) -> Result<Vec<bool>> {
    check_threshold(thr)?;
    common_len(&[a, b])?;
    Ok(a.iter().zip(b).map(|(x, y)| (x - y).abs() >= thr).collect())
}

fn class_ids(civs: &[&ChannelImportanceVector]) -> Vec<usize> {
    civs.iter().map(|c| c.class_id).collect()
}

pub fn union_combine(civs: &[&ChannelImportanceVector], union_thr: f64) -> Result<CombinedCiv> {
    let values: Vec<&[f64]> = civs.iter().map(|c| c.values.as_slice()).collect();
    Ok(CombinedCiv {
        classes: class_ids(civs),
        mask: union_mask(&values, union_thr)?,
        method: CombineMethod::Union,
        threshold: union_thr,
    })
}

pub fn xor_combine(civs: &[&ChannelImportanceVector], xor_thr: f64) -> Result<CombinedCiv> {
    let [a, b] = civs else {
        return Err(DrnetError::invalid(format!(
            "xor combines exactly two classes, got {}",
            civs.len()
        )));
    };
    Ok(CombinedCiv {
        classes: class_ids(civs),
        mask: xor_mask(&a.values, &b.values, xor_thr)?,
        method: CombineMethod::Xor,
        threshold: xor_thr,
    })
}

pub fn combine(civs: &[&ChannelImportanceVector], method: CombineMethod, thr: f64) -> Result<CombinedCiv> {
    match method {
        CombineMethod::Union => union_combine(civs, thr),
        CombineMethod::Xor => xor_combine(civs, thr),
    }
}

/// Looks up the importance vectors of `task`'s classes.
pub fn civs_for<'a>(civs: &'a [ChannelImportanceVector], task: &SubTask) -> Result<Vec<&'a ChannelImportanceVector>> {
    task.classes()
        .iter()
        .map(|&c| {
            civs.iter()
                .find(|v| v.class_id == c)
                .ok_or_else(|| DrnetError::invalid(format!("no importance vector for class {c}")))
        })
        .collect()
}

/// Running-channel fraction per threshold. Thresholds must be ascending.
pub fn sweep_threshold(
    civs: &[&ChannelImportanceVector],
    method: CombineMethod,
    thresholds: &[f64],
) -> Result<Vec<(f64, f64)>> {
    if thresholds.windows(2).any(|w| w[0] > w[1]) {
        return Err(DrnetError::invalid("thresholds must be sorted ascending"));
    }
    thresholds
        .iter()
        .map(|&t| Ok((t, combine(civs, method, t)?.running_fraction())))
        .collect()
}

/// Every threshold at which some mask in `tasks` can change, plus zero, ascending.
///
/// The running fraction is a step function of the threshold that only moves at
/// these values, so a sweep over them is exhaustive.
pub fn breakpoints(civs: &[ChannelImportanceVector], tasks: &[SubTask], method: CombineMethod) -> Result<Vec<f64>> {
    let mut points = vec![0.0];
    for task in tasks {
        let vs = civs_for(civs, task)?;
        match method {
            CombineMethod::Union => {
                let len = vs[0].values.len();
                points.extend((0..len).map(|j| vs.iter().map(|c| c.values[j]).fold(f64::NEG_INFINITY, f64::max)));
            }
            CombineMethod::Xor => {
                if let [a, b] = vs.as_slice() {
                    points.extend(a.values.iter().zip(&b.values).map(|(x, y)| (x - y).abs()));
                }
            }
        }
    }
    points.retain(|p| p.is_finite() && *p >= 0.0);
    points.sort_by(f64::total_cmp);
    points.dedup();
    Ok(points)
}

/// Mean running fraction over `tasks` at threshold `thr`.
pub fn mean_running_fraction(
    civs: &[ChannelImportanceVector],
    tasks: &[SubTask],
    method: CombineMethod,
    thr: f64,
) -> Result<f64> {
    let mut sum = 0.0;
    for task in tasks {
        sum += combine(&civs_for(civs, task)?, method, thr)?.running_fraction();
    }
    Ok(sum / tasks.len() as f64)
}

/// Smallest threshold whose mean running fraction over `tasks` is at most `target`.
pub fn select_threshold(
    civs: &[ChannelImportanceVector],
    tasks: &[SubTask],
    method: CombineMethod,
    target: f64,
) -> Result<f64> {
    if tasks.is_empty() {
        return Err(DrnetError::invalid("threshold selection needs at least one sub-task"));
    }
    let points = breakpoints(civs, tasks, method)?;
    for &t in &points {
        if mean_running_fraction(civs, tasks, method, t)? <= target {
            return Ok(t);
        }
    }
    // Strictly above every breakpoint nothing runs.
    let top = points.last().copied().unwrap_or(0.0);
    Ok(if top == 0.0 { f64::MIN_POSITIVE } else { top * (1.0 + 1e-12) + f64::MIN_POSITIVE })
}
