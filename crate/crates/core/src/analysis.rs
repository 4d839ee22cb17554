//! Sub-task accuracy of reconstructed networks and structure of the importance vectors.

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dissect::ChannelImportanceVector;
use crate::error::{DrnetError, Result};
use crate::infer::{argmax_in_set, cost_report, masked_forward_counted};
use crate::mnist::Dataset;
use crate::model::GatedNetwork;
use crate::reconstruct::{civs_for, combine, CombineMethod, CombinedCiv, SubTask};

const CHUNK: usize = 256;

/// Accuracy of the full and the reconstructed network on one sub-task.
#[derive(Clone, Debug, PartialEq)]
pub struct SubTaskResult {
    pub classes: Vec<usize>,
    pub method: CombineMethod,
    pub threshold: f64,
    pub images: usize,
    pub full_accuracy: f64,
    pub masked_accuracy: f64,
    pub running_channels: usize,
    pub total_channels: usize,
    pub running_params: usize,
    pub total_params: usize,
    pub macs: u64,
    pub full_macs: u64,
}

impl SubTaskResult {
    /// Accuracy lost by the reconstruction, in percentage points.
    pub fn drop_pp(&self) -> f64 {
        100.0 * (self.full_accuracy - self.masked_accuracy)
    }

    pub fn running_fraction(&self) -> f64 {
        self.running_channels as f64 / self.total_channels as f64
    }

    pub fn param_fraction(&self) -> f64 {
        self.running_params as f64 / self.total_params as f64
    }
}

/// Top-1 within `civ.classes` for every test image of those classes, full network
/// versus masked network. Both predictions go through the same class restriction.
pub fn evaluate_combined(net: &GatedNetwork, test: &Dataset, civ: &CombinedCiv) -> Result<SubTaskResult> {
    let ids = test.ids_with_labels(&civ.classes);
    if ids.is_empty() {
        return Err(DrnetError::invalid(format!(
            "no test images for classes {:?}",
            civ.classes
        )));
    }
    let set = &civ.classes;
    let per_chunk: Vec<(usize, usize, u64, u64)> = ids
        .par_chunks(CHUNK)
        .map(|chunk| {
            let x = test.batch(chunk);
            let full = net.forward(&x)?;
            let masked = masked_forward_counted(net, &x, &civ.mask)?;
            let k = net.num_classes();
            let mut right = (0, 0);
            for (i, &id) in chunk.iter().enumerate() {
                let label = test.label(id);
                if argmax_in_set(&full.data()[i * k..(i + 1) * k], set) == label {
                    right.0 += 1;
                }
                if argmax_in_set(&masked.logits.data()[i * k..(i + 1) * k], set) == label {
                    right.1 += 1;
                }
            }
            Ok((right.0, right.1, masked.macs, masked.full_macs))
        })
        .collect::<Result<_>>()?;
    let full_right: usize = per_chunk.iter().map(|c| c.0).sum();
    let masked_right: usize = per_chunk.iter().map(|c| c.1).sum();
    let cost = cost_report(net, &civ.mask)?;
    let n = ids.len() as f64;
    Ok(SubTaskResult {
        classes: civ.classes.clone(),
        method: civ.method,
        threshold: civ.threshold,
        images: ids.len(),
        full_accuracy: full_right as f64 / n,
        masked_accuracy: masked_right as f64 / n,
        running_channels: cost.running_channels,
        total_channels: cost.total_channels,
        running_params: cost.running_params,
        total_params: cost.total_params,
        macs: per_chunk.iter().map(|c| c.2).sum(),
        full_macs: per_chunk.iter().map(|c| c.3).sum(),
    })
}

/// Builds the mask for `task` and evaluates it.
pub fn evaluate_subtask(
    net: &GatedNetwork,
    test: &Dataset,
    civs: &[ChannelImportanceVector],
    task: &SubTask,
    method: CombineMethod,
    threshold: f64,
) -> Result<SubTaskResult> {
    let combined = combine(&civs_for(civs, task)?, method, threshold)?;
    evaluate_combined(net, test, &combined)
}

/// `count` distinct unordered class pairs drawn with a seeded generator.
pub fn random_pairs(num_classes: usize, count: usize, seed: u64) -> Result<Vec<SubTask>> {
    let mut all = Vec::new();
    for a in 0..num_classes {
        for b in a + 1..num_classes {
            all.push([a, b]);
        }
    }
    if count > all.len() {
        return Err(DrnetError::invalid(format!(
            "{count} pairs requested, only {} exist among {num_classes} classes",
            all.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    all.shuffle(&mut rng);
    all.truncate(count);
    all.iter().map(|p| SubTask::new(p, num_classes)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    pub tasks: usize,
    pub mean_drop_pp: f64,
    pub min_drop_pp: f64,
    pub max_drop_pp: f64,
    pub mean_running_fraction: f64,
    pub mean_param_fraction: f64,
}

pub fn summarize(results: &[SubTaskResult]) -> Result<EvalSummary> {
    if results.is_empty() {
        return Err(DrnetError::invalid("no results to summarize"));
    }
    let n = results.len() as f64;
    let drops: Vec<f64> = results.iter().map(SubTaskResult::drop_pp).collect();
    Ok(EvalSummary {
        tasks: results.len(),
        mean_drop_pp: drops.iter().sum::<f64>() / n,
        min_drop_pp: drops.iter().copied().fold(f64::INFINITY, f64::min),
        max_drop_pp: drops.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        mean_running_fraction: results.iter().map(SubTaskResult::running_fraction).sum::<f64>() / n,
        mean_param_fraction: results.iter().map(SubTaskResult::param_fraction).sum::<f64>() / n,
    })
}

/// Running channels per gated conv layer under `mask`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerShare {
    pub conv_layer: usize,
    pub channels: usize,
    pub running: usize,
}

impl LayerShare {
    pub fn fraction(&self) -> f64 {
        self.running as f64 / self.channels as f64
    }
}

pub fn layer_distribution(net: &GatedNetwork, mask: &[bool]) -> Result<Vec<LayerShare>> {
    if mask.len() != net.total_gated_channels() {
        return Err(DrnetError::invalid(format!(
            "mask has {} entries, network has {} gated channels",
            mask.len(),
            net.total_gated_channels()
        )));
    }
    Ok(net
        .gate_map()
        .iter()
        .map(|s| LayerShare {
            conv_layer: s.conv_layer,
            channels: s.channels(),
            running: mask[s.range.clone()].iter().filter(|&&m| m).count(),
        })
        .collect())
}

/// Mean running fraction of the last gated layer minus that of the first.
pub fn depth_trend(distributions: &[Vec<LayerShare>]) -> Option<f64> {
    if distributions.is_empty() || distributions.iter().any(|d| d.is_empty()) {
        return None;
    }
    let n = distributions.len() as f64;
    let first: f64 = distributions.iter().map(|d| d[0].fraction()).sum::<f64>() / n;
    let last: f64 = distributions.iter().map(|d| d[d.len() - 1].fraction()).sum::<f64>() / n;
    Some(last - first)
}

/// Channels whose importance exceeds `eps`.
pub fn important_channel_set(civ: &ChannelImportanceVector, eps: f64) -> Vec<usize> {
    civ.values
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > eps)
        .map(|(j, _)| j)
        .collect()
}

/// Intersection over union of two ascending index sets. Two empty sets give 0.
pub fn iou(a: &[usize], b: &[usize]) -> f64 {
    let (mut i, mut j, mut inter) = (0, 0, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Pairwise IoU of the classes' important-channel sets, in the order of `civs`.
///
/// The diagonal is 1 for every class with a nonempty set.
pub fn similarity_matrix(civs: &[ChannelImportanceVector], eps: f64) -> Vec<Vec<f64>> {
    let sets: Vec<Vec<usize>> = civs.iter().map(|c| important_channel_set(c, eps)).collect();
    sets.iter()
        .map(|a| sets.iter().map(|b| iou(a, b)).collect())
        .collect()
}

/// Mean similarity of row `row` to every other class.
pub fn off_diagonal_row_mean(matrix: &[Vec<f64>], row: usize) -> f64 {
    let others: Vec<f64> = matrix[row]
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != row)
        .map(|(_, &v)| v)
        .collect();
    others.iter().sum::<f64>() / others.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn civ(class_id: usize, values: &[f64]) -> ChannelImportanceVector {
        ChannelImportanceVector {
            class_id,
            values: values.to_vec(),
            sample_count: 1,
        }
    }

    #[test]
    fn iou_cases() {
        assert_eq!(iou(&[0, 1, 2], &[1, 2, 3]), 0.5);
        assert_eq!(iou(&[], &[]), 0.0);
        assert_eq!(iou(&[4], &[]), 0.0);
        assert_eq!(iou(&[1, 5], &[1, 5]), 1.0);
    }

    #[test]
    fn similarity_is_symmetric_with_unit_diagonal() {
        let civs = vec![
            civ(0, &[0.5, 0.0, 0.2, 0.0]),
            civ(1, &[0.0, 0.3, 0.2, 0.0]),
            civ(2, &[0.9, 0.9, 0.9, 0.9]),
        ];
        let m = similarity_matrix(&civs, 1e-2);
        for i in 0..3 {
            assert_eq!(m[i][i], 1.0);
            for j in 0..3 {
                assert_eq!(m[i][j], m[j][i]);
            }
        }
        assert_eq!(m[0][1], 1.0 / 3.0);
        assert_eq!(m[0][2], 0.5);
        assert!((off_diagonal_row_mean(&m, 0) - (1.0 / 3.0 + 0.5) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn eps_is_strict() {
        assert_eq!(important_channel_set(&civ(0, &[0.01, 0.02, 0.0]), 0.01), vec![1]);
    }

    #[test]
    fn random_pairs_are_distinct_and_seeded() {
        let a = random_pairs(10, 45, 7).unwrap();
        let mut keys: Vec<Vec<usize>> = a.iter().map(|t| t.classes().to_vec()).collect();
        keys.sort();
        keys.dedup();
        assert_eq!(keys.len(), 45);
        assert_eq!(random_pairs(10, 10, 7).unwrap(), random_pairs(10, 10, 7).unwrap());
        assert_ne!(random_pairs(10, 10, 7).unwrap(), random_pairs(10, 10, 8).unwrap());
        assert!(random_pairs(10, 46, 7).is_err());
    }

    #[test]
    fn trend_and_distribution() {
        let net = GatedNetwork::zeros(crate::model::Architecture::mnist5()).unwrap();
        let mut mask = vec![true; 8];
        mask.extend(vec![false; 16]);
        mask.extend(vec![true; 8]);
        mask.extend(vec![false; 24]);
        let d = layer_distribution(&net, &mask).unwrap();
        let fr: Vec<f64> = d.iter().map(LayerShare::fraction).collect();
        assert_eq!(fr, vec![1.0, 0.0, 0.25]);
        assert_eq!(depth_trend(&[d]), Some(-0.75));
        assert!(layer_distribution(&net, &[true; 3]).is_err());
    }
}
