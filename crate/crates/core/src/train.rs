//! Mini-batch SGD with momentum and cross-entropy for the base network.

use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{DrnetError, Result};
use crate::mnist::Dataset;
use crate::model::GatedNetwork;
use crate::tensor::{log_softmax, softmax, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 1e-5,
            batch_size: 64,
            epochs: 5,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(DrnetError::invalid("learning_rate must be > 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(DrnetError::invalid("momentum must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(DrnetError::invalid("weight_decay must be >= 0"));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(DrnetError::invalid("batch_size and epochs must be >= 1"));
        }
        Ok(())
    }
}

/// `-log softmax(logits)[label]` and its gradient `softmax(logits) - onehot(label)`.
pub fn cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let loss = -log_softmax(logits)[label];
    let mut grad = softmax(logits);
    grad[label] -= 1.0;
    (loss, grad)
}

/// SGD with classic momentum: `v = m*v + (g + wd*w)`, `w -= lr*v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(learning_rate: f64, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            learning_rate,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor]) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter tensor");
        if self.velocity.is_empty() {
            self.velocity = grads.iter().map(|g| vec![0.0; g.len()]).collect();
        }
        for ((p, g), v) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            for ((w, &dw), vel) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                let d = if self.weight_decay != 0.0 {
                    dw + self.weight_decay * *w
                } else {
                    dw
                };
                *vel = self.momentum * *vel + d;
                *w -= self.learning_rate * *vel;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    /// `None` when no test set was supplied.
    pub test_accuracy: Option<f64>,
}

fn check_labels(net: &GatedNetwork, data: &Dataset) -> Result<()> {
    if let Some((id, &l)) = data
        .labels()
        .iter()
        .enumerate()
        .find(|(_, &l)| l >= net.num_classes())
    {
        return Err(DrnetError::invalid(format!(
            "image {id} has label {l}, network has {} classes",
            net.num_classes()
        )));
    }
    Ok(())
}

/// Trains `net` in place and returns one metrics row per epoch.
///
/// Data order is drawn from `config.seed`, so equal inputs give bitwise-equal weights.
pub fn train(
    net: &mut GatedNetwork,
    data: &Dataset,
    test: Option<&Dataset>,
    config: &TrainConfig,
) -> Result<Vec<EpochMetrics>> {
    config.validate()?;
    if data.is_empty() {
        return Err(DrnetError::invalid("training set is empty"));
    }
    check_labels(net, data)?;
    if let Some(t) = test {
        check_labels(net, t)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut opt = Sgd::new(config.learning_rate, config.momentum, config.weight_decay);
    let mut metrics = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for ids in order.chunks(config.batch_size) {
            let x = data.batch(ids);
            let (logits, cache) = net.forward_cached(&x, None)?;
            let classes = net.num_classes();
            let scale = 1.0 / ids.len() as f64;
            let mut grad = Vec::with_capacity(logits.len());
            for (row, &id) in logits.data().chunks_exact(classes).zip(ids) {
                let (loss, g) = cross_entropy(row, data.label(id));
                loss_sum += loss;
                grad.extend(g.into_iter().map(|v| v * scale));
            }
            let grad = Tensor::new(vec![ids.len(), classes], grad)?;
            let grads = net.backward(&cache, None, grad, true)?.params.expect("params requested");
            if grads.iter().any(|g| !g.is_finite()) {
                return Err(DrnetError::Numeric(format!("non-finite parameter gradient in epoch {epoch}")));
            }
            opt.step(net.params_mut(), &grads);
        }
        let test_accuracy = test.map(|t| accuracy(net, t)).transpose()?;
        metrics.push(EpochMetrics {
            epoch,
            train_loss: loss_sum / data.len() as f64,
            test_accuracy,
        });
    }
    Ok(metrics)
}

const EVAL_CHUNK: usize = 256;

/// Argmax predictions for every image, in id order.
pub fn predict(net: &GatedNetwork, data: &Dataset) -> Result<Vec<usize>> {
    let ids: Vec<usize> = (0..data.len()).collect();
    let chunks: Vec<Vec<usize>> = ids
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| {
            let logits = net.forward(&data.batch(chunk))?;
            Ok(logits.data().chunks_exact(net.num_classes()).map(argmax).collect())
        })
        .collect::<Result<_>>()?;
    Ok(chunks.concat())
}

pub fn accuracy(net: &GatedNetwork, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(DrnetError::invalid("cannot measure accuracy on an empty set"));
    }
    let pred = predict(net, data)?;
    let correct = pred.iter().zip(data.labels()).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / data.len() as f64)
}

/// Index of the first maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// `epoch,train_loss,test_acc`; the accuracy column is empty when no test set was used.
pub fn write_metrics_csv(path: &Path, metrics: &[EpochMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| crate::formats::csv_io(path, e))?;
    let mut rows = vec![vec!["epoch".to_string(), "train_loss".into(), "test_acc".into()]];
    for m in metrics {
        rows.push(vec![
            m.epoch.to_string(),
            m.train_loss.to_string(),
            m.test_accuracy.map(|a| a.to_string()).unwrap_or_default(),
        ]);
    }
    for r in rows {
        w.write_record(&r).map_err(|e| crate::formats::csv_io(path, e))?;
    }
    w.flush().map_err(|e| DrnetError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Architecture;

    #[test]
    fn cross_entropy_hand_values() {
        let (loss, grad) = cross_entropy(&[0.0, 0.0], 0);
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(grad, vec![-0.5, 0.5]);
        let (loss, _) = cross_entropy(&[100.0, 0.0], 0);
        assert!(loss < 1e-40);
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let z = [0.3, -1.1, 2.0, 0.7];
        let (_, g) = cross_entropy(&z, 2);
        let h = 1e-5;
        for i in 0..z.len() {
            let mut p = z;
            p[i] += h;
            let mut m = z;
            m[i] -= h;
            let num = (cross_entropy(&p, 2).0 - cross_entropy(&m, 2).0) / (2.0 * h);
            assert!((num - g[i]).abs() / g[i].abs().max(1e-8) < 1e-6, "{i}: {num} vs {}", g[i]);
        }
    }

    #[test]
    fn zero_weight_decay_is_plain_sgd() {
        let w0: Vec<f64> = (0..20).map(|i| (i as f64 * 0.37).sin()).collect();
        let grads: Vec<Vec<f64>> = (0..3)
            .map(|s| (0..20).map(|i| ((i + 7 * s) as f64 * 0.11).cos()).collect())
            .collect();

        let mut t = Tensor::from_vec(w0.clone());
        let mut opt = Sgd::new(0.05, 0.9, 0.0);
        for g in &grads {
            opt.step(vec![&mut t], &[Tensor::from_vec(g.clone())]);
        }

        let mut w = w0;
        let mut v = [0.0; 20];
        for g in &grads {
            for i in 0..20 {
                v[i] = 0.9 * v[i] + g[i];
                w[i] -= 0.05 * v[i];
            }
        }
        assert!(t.data().iter().zip(&w).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    fn toy_data(n: usize) -> Dataset {
        let pixels = (0..n * 784).map(|i| ((i * 7919) % 256) as f64 / 255.0).collect();
        Dataset::new(28, 28, pixels, (0..n).map(|i| i % 10).collect()).unwrap()
    }

    #[test]
    fn single_step_reduces_loss() {
        let mut net = GatedNetwork::init(Architecture::mnist5(), 5).unwrap();
        let data = toy_data(1);
        let x = data.image(0);
        let before = cross_entropy(net.forward(&x).unwrap().data(), 0).0;
        let cfg = TrainConfig {
            learning_rate: 0.01,
            momentum: 0.0,
            weight_decay: 0.0,
            batch_size: 1,
            epochs: 1,
            seed: 0,
        };
        train(&mut net, &data, None, &cfg).unwrap();
        let after = cross_entropy(net.forward(&x).unwrap().data(), 0).0;
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn training_is_seed_deterministic() {
        let data = toy_data(40);
        let cfg = TrainConfig {
            batch_size: 8,
            epochs: 2,
            ..TrainConfig::default()
        };
        let run = |seed| {
            let mut net = GatedNetwork::init(Architecture::mnist5(), 1).unwrap();
            let m = train(&mut net, &data, Some(&data), &TrainConfig { seed, ..cfg.clone() }).unwrap();
            (net, m)
        };
        let (a, ma) = run(3);
        let (b, mb) = run(3);
        assert_eq!(ma, mb);
        for (x, y) in a.params().iter().zip(b.params()) {
            assert!(x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
        let (c, _) = run(4);
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_out_of_range_label() {
        let mut net = GatedNetwork::init(Architecture::mnist5(), 5).unwrap();
        let data = Dataset::new(28, 28, vec![0.0; 784], vec![10]).unwrap();
        let err = train(&mut net, &data, None, &TrainConfig::default()).unwrap_err();
        assert!(err.to_string().contains("label 10"), "{err}");
    }

    #[test]
    fn config_validation() {
        let bad = [
            TrainConfig { learning_rate: 0.0, ..Default::default() },
            TrainConfig { momentum: 1.0, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
        ];
        for c in bad {
            assert!(c.validate().is_err());
        }
    }
}
