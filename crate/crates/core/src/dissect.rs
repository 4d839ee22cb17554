//! Per-image control-gate optimization and per-class aggregation.
//!
//! For one image the gates start at 1 and follow momentum SGD on
//! `KL(p || q) + gamma * |gates|_1`, where `p` is the frozen network's softmax
//! and `q` the gated network's. Gates are clipped after every step. If the
//! optimized gates change the top-1 prediction, the image falls back to the
//! all-ones vector. A class's importance vector is the mean of its images'
//! gate vectors.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{DrnetError, Result};
use crate::mnist::Dataset;
use crate::model::GatedNetwork;
use crate::tensor::{log_softmax, softmax, Tensor};
use crate::train::argmax;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateOptConfig {
    /// L1 weight on the gates.
    pub gamma: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub clip_min: f64,
    pub clip_max: f64,
}

impl Default for GateOptConfig {
    fn default() -> Self {
        GateOptConfig {
            gamma: 0.05,
            iterations: 30,
            learning_rate: 0.1,
            momentum: 0.9,
            clip_min: 0.0,
            clip_max: 10.0,
        }
    }
}

impl GateOptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) {
            return Err(DrnetError::invalid("gamma must be >= 0"));
        }
        if self.iterations == 0 {
            return Err(DrnetError::invalid("iterations must be >= 1"));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(DrnetError::invalid("learning_rate must be > 0 and momentum in [0, 1)"));
        }
        if !(0.0 <= self.clip_min && self.clip_min < self.clip_max) {
            return Err(DrnetError::invalid("clip range must satisfy 0 <= clip_min < clip_max"));
        }
        Ok(())
    }
}

/// Optimized gate vector for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Cdrp {
    pub image_id: usize,
    pub class_label: usize,
    pub values: Vec<f64>,
    /// The optimized gates flipped the top-1 prediction and were replaced by ones.
    pub fallback: bool,
}

/// Mean gate vector over a class's images.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelImportanceVector {
    pub class_id: usize,
    pub values: Vec<f64>,
    pub sample_count: usize,
}

/// `KL(softmax(original) || softmax(gated))` and its gradient with respect to
/// `gated_logits`. The original distribution is a constant target.
pub fn soft_target_loss(original_logits: &[f64], gated_logits: &[f64]) -> Result<(f64, Vec<f64>)> {
    if original_logits.len() != gated_logits.len() {
        return Err(DrnetError::shape(
            "soft_target_loss",
            format!("{} vs {} logits", original_logits.len(), gated_logits.len()),
        ));
    }
    let log_p = log_softmax(original_logits);
    let log_q = log_softmax(gated_logits);
    let loss = log_p
        .iter()
        .zip(&log_q)
        .map(|(&lp, &lq)| {
            let p = lp.exp();
            if p == 0.0 {
                0.0
            } else {
                p * (lp - lq)
            }
        })
        .sum();
    let p = softmax(original_logits);
    let grad = softmax(gated_logits).iter().zip(&p).map(|(q, p)| q - p).collect();
    Ok((loss, grad))
}

/// Soft-target loss at `gates` and its gradient with respect to the gates.
pub fn soft_target_gate_gradient(
    net: &GatedNetwork,
    image: &Tensor,
    original_logits: &[f64],
    gates: &[f64],
) -> Result<(f64, Vec<f64>)> {
    let (logits, cache) = net.forward_cached(image, Some(gates))?;
    let (loss, grad) = soft_target_loss(original_logits, logits.data())?;
    let grad = Tensor::new(logits.shape().to_vec(), grad)?;
    let grads = net.backward(&cache, Some(gates), grad, false)?;
    Ok((loss, grads.gates.expect("gate gradient requested")))
}

/// `gamma * sign(g)` with `sign(0) = 0`.
pub fn l1_subgradient(gates: &[f64], gamma: f64) -> Vec<f64> {
    gates
        .iter()
        .map(|&g| {
            if g > 0.0 {
                gamma
            } else if g < 0.0 {
                -gamma
            } else {
                0.0
            }
        })
        .collect()
}

/// Gates after the optimization loop, before the top-1 check.
#[derive(Clone, Debug, PartialEq)]
pub struct GateTrajectory {
    pub gates: Vec<f64>,
    pub top1_preserved: bool,
    pub final_loss: f64,
}

/// Runs the optimization loop without applying the fallback rule.
pub fn run_gate_optimization(net: &GatedNetwork, image: &Tensor, config: &GateOptConfig) -> Result<GateTrajectory> {
    config.validate()?;
    if image.batch() != 1 {
        return Err(DrnetError::invalid("gate optimization takes exactly one image"));
    }
    let original = net.forward(image)?;
    let n = net.total_gated_channels();
    let mut gates = vec![1.0; n];
    let mut velocity = vec![0.0; n];
    let mut final_loss = 0.0;
    for it in 0..config.iterations {
        let (loss, kl_grad) = soft_target_gate_gradient(net, image, original.data(), &gates)?;
        if !loss.is_finite() || kl_grad.iter().any(|g| !g.is_finite()) {
            return Err(DrnetError::Numeric(format!(
                "non-finite gate gradient at iteration {it}"
            )));
        }
        final_loss = loss;
        let l1 = l1_subgradient(&gates, config.gamma);
        for ((g, v), (dk, dl)) in gates.iter_mut().zip(&mut velocity).zip(kl_grad.iter().zip(&l1)) {
            *v = config.momentum * *v + (dk + dl);
            *g = (*g - config.learning_rate * *v).clamp(config.clip_min, config.clip_max);
        }
    }
    let gated = net.forward_gated(image, &gates)?;
    Ok(GateTrajectory {
        top1_preserved: argmax(gated.data()) == argmax(original.data()),
        gates,
        final_loss,
    })
}

/// Optimizes the gate vector of one image.
pub fn optimize_gates(
    net: &GatedNetwork,
    image: &Tensor,
    image_id: usize,
    class_label: usize,
    config: &GateOptConfig,
) -> Result<Cdrp> {
    let run = run_gate_optimization(net, image, config)?;
    let fallback = !run.top1_preserved;
    Ok(Cdrp {
        image_id,
        class_label,
        values: if fallback {
            vec![1.0; run.gates.len()]
        } else {
            run.gates
        },
        fallback,
    })
}

/// Elementwise mean of one class's CDRPs.
pub fn aggregate_civ(cdrps: &[Cdrp]) -> Result<ChannelImportanceVector> {
    let first = cdrps
        .first()
        .ok_or_else(|| DrnetError::invalid("cannot aggregate an empty CDRP set"))?;
    let len = first.values.len();
    if let Some(c) = cdrps.iter().find(|c| c.class_label != first.class_label) {
        return Err(DrnetError::invalid(format!(
            "mixed classes: image {} is class {}, expected {}",
            c.image_id, c.class_label, first.class_label
        )));
    }
    if cdrps.iter().any(|c| c.values.len() != len) {
        return Err(DrnetError::invalid("CDRPs differ in length"));
    }
    let mut sum = vec![0.0; len];
    for c in cdrps {
        for (s, v) in sum.iter_mut().zip(&c.values) {
            *s += v;
        }
    }
    let n = cdrps.len() as f64;
    Ok(ChannelImportanceVector {
        class_id: first.class_label,
        values: sum.into_iter().map(|s| s / n).collect(),
        sample_count: cdrps.len(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassFallback {
    pub class_id: usize,
    pub fallbacks: usize,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dissection {
    /// One per class present in the dataset, ascending class id.
    pub civs: Vec<ChannelImportanceVector>,
    /// All CDRPs, grouped by class then ascending image id.
    pub cdrps: Vec<Cdrp>,
    pub fallback: Vec<ClassFallback>,
}

impl Dissection {
    pub fn fallback_rate(&self) -> f64 {
        let f: usize = self.fallback.iter().map(|c| c.fallbacks).sum();
        f as f64 / self.cdrps.len() as f64
    }
}

/// Dissects the first `per_class_n` images (by id) of every class present in `data`.
///
/// Images are optimized in parallel; results are assembled in id order.
pub fn dissect_dataset(
    net: &GatedNetwork,
    data: &Dataset,
    per_class_n: usize,
    config: &GateOptConfig,
) -> Result<Dissection> {
    config.validate()?;
    if per_class_n == 0 {
        return Err(DrnetError::invalid("per_class_n must be >= 1"));
    }
    let classes = data.classes();
    if classes.is_empty() {
        return Err(DrnetError::invalid("dataset is empty"));
    }
    let mut jobs = Vec::with_capacity(classes.len() * per_class_n);
    for &c in &classes {
        if c >= net.num_classes() {
            return Err(DrnetError::invalid(format!(
                "class {c} outside the network's {} classes",
                net.num_classes()
            )));
        }
        let ids: Vec<usize> = (0..data.len())
            .filter(|&i| data.label(i) == c)
            .take(per_class_n)
            .collect();
        if ids.len() < per_class_n {
            return Err(DrnetError::invalid(format!(
                "class {c} has {} images, {per_class_n} required",
                ids.len()
            )));
        }
        jobs.extend(ids.into_iter().map(|id| (id, c)));
    }
    let cdrps: Vec<Cdrp> = jobs
        .par_iter()
        .map(|&(id, c)| optimize_gates(net, &data.image(id), id, c, config))
        .collect::<Result<_>>()?;

    let mut civs = Vec::with_capacity(classes.len());
    let mut fallback = Vec::with_capacity(classes.len());
    for group in cdrps.chunks(per_class_n) {
        civs.push(aggregate_civ(group)?);
        fallback.push(ClassFallback {
            class_id: group[0].class_label,
            fallbacks: group.iter().filter(|c| c.fallback).count(),
            samples: group.len(),
        });
    }
    Ok(Dissection {
        civs,
        cdrps,
        fallback,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Architecture;

    #[test]
    fn identical_logits_zero_loss() {
        let (loss, grad) = soft_target_loss(&[0.3, 1.0, -2.0], &[0.3, 1.0, -2.0]).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn one_hot_target_against_uniform() {
        let (loss, _) = soft_target_loss(&[1000.0, 0.0], &[0.0, 0.0]).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12, "{loss}");
    }

    #[test]
    fn soft_target_gradient_matches_finite_differences() {
        let p = [0.4, -1.0, 2.2, 0.1];
        let q = [1.3, 0.2, -0.5, 0.9];
        let (_, g) = soft_target_loss(&p, &q).unwrap();
        let h = 1e-5;
        for i in 0..4 {
            let mut a = q;
            a[i] += h;
            let mut b = q;
            b[i] -= h;
            let num = (soft_target_loss(&p, &a).unwrap().0 - soft_target_loss(&p, &b).unwrap().0) / (2.0 * h);
            assert!((num - g[i]).abs() / g[i].abs().max(1e-8) < 1e-6, "{i}: {num} vs {}", g[i]);
        }
        assert!(soft_target_loss(&p, &q[..3]).is_err());
    }

    #[test]
    fn l1_sign_convention() {
        assert_eq!(l1_subgradient(&[2.0, 0.0, -1.0], 0.5), vec![0.5, 0.0, -0.5]);
    }

    fn cdrp(id: usize, class: usize, v: &[f64]) -> Cdrp {
        Cdrp {
            image_id: id,
            class_label: class,
            values: v.to_vec(),
            fallback: false,
        }
    }

    #[test]
    fn aggregate_means() {
        let civ = aggregate_civ(&[cdrp(0, 1, &[0.0, 2.0, 1.0]), cdrp(1, 1, &[2.0, 0.0, 1.0])]).unwrap();
        assert_eq!(civ.values, vec![1.0, 1.0, 1.0]);
        assert_eq!(civ.sample_count, 2);
        assert_eq!(civ.class_id, 1);
        let single = aggregate_civ(&[cdrp(4, 3, &[0.25, 7.0])]).unwrap();
        assert_eq!(single.values, vec![0.25, 7.0]);
        assert!(aggregate_civ(&[cdrp(0, 1, &[0.0]), cdrp(1, 2, &[0.0])]).is_err());
        assert!(aggregate_civ(&[]).is_err());
    }

    fn toy() -> (GatedNetwork, Dataset) {
        let net = GatedNetwork::init(Architecture::mnist5(), 21).unwrap();
        let pixels = (0..4 * 784).map(|i| ((i * 31) % 97) as f64 / 97.0).collect();
        (net, Dataset::new(28, 28, pixels, vec![3, 7, 3, 7]).unwrap())
    }

    #[test]
    fn zero_gamma_keeps_identity_gates() {
        let (net, data) = toy();
        let cfg = GateOptConfig {
            gamma: 0.0,
            ..Default::default()
        };
        let c = optimize_gates(&net, &data.image(0), 0, 3, &cfg).unwrap();
        assert!(c.values.iter().all(|&v| v == 1.0));
        assert!(!c.fallback);
    }

    #[test]
    fn gates_stay_clipped() {
        let (net, data) = toy();
        let cfg = GateOptConfig {
            gamma: 0.5,
            learning_rate: 1.0,
            clip_max: 1.5,
            ..Default::default()
        };
        let run = run_gate_optimization(&net, &data.image(1), &cfg).unwrap();
        assert!(run.gates.iter().all(|&g| (0.0..=1.5).contains(&g)));
        assert!(run.gates.contains(&0.0), "strong L1 should hit the floor");
    }

    #[test]
    fn toy_dissection_cardinality_and_determinism() {
        let (net, data) = toy();
        let cfg = GateOptConfig {
            iterations: 5,
            ..Default::default()
        };
        let a = dissect_dataset(&net, &data, 1, &cfg).unwrap();
        assert_eq!(a.civs.len(), 2);
        assert_eq!(a.civs[0].class_id, 3);
        assert_eq!(a.cdrps.iter().map(|c| c.image_id).collect::<Vec<_>>(), vec![0, 1]);
        let b = dissect_dataset(&net, &data, 1, &cfg).unwrap();
        assert_eq!(a, b);
        for c in &a.cdrps {
            if c.fallback {
                assert!(c.values.iter().all(|&v| v == 1.0));
            }
        }
        let err = dissect_dataset(&net, &data, 3, &cfg).unwrap_err();
        assert!(err.to_string().contains("class 3"), "{err}");
    }
}
