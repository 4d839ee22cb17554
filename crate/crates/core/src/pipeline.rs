//! Pipeline stages. Each stage reads its inputs from disk and writes its
//! artifacts to disk, so any stage can be rerun on its own.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use crate::analysis::{self, EvalSummary, LayerShare, SubTaskResult};
use crate::config::PipelineConfig;
use crate::dissect::{dissect_dataset, ChannelImportanceVector};
use crate::error::{DrnetError, Result};
use crate::formats;
use crate::infer::{argmax_in_set, cost_report, masked_forward_counted, masked_softmax, CostReport};
use crate::mnist::{self, Dataset};
use crate::model::{load_model, save_model, Architecture, GatedNetwork};
use crate::reconstruct::{self, civs_for, combine, CombineMethod, CombinedCiv, SubTask};
use crate::train::{self, EpochMetrics};

pub const TRAIN_METRICS: &str = "train_metrics.csv";
pub const CDRPS: &str = "cdrps.csv";
pub const FALLBACK: &str = "fallback.csv";
pub const COST: &str = "cost.csv";
pub const RESULTS: &str = "results.csv";
pub const SWEEP: &str = "sweep.csv";
pub const SIMILARITY: &str = "similarity.csv";
pub const SIMILARITY_PGM: &str = "similarity.pgm";
pub const LAYERS: &str = "layer_distribution.csv";

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => fs::create_dir_all(p).map_err(|e| DrnetError::io(p, e)),
        _ => Ok(()),
    }
}

fn ensure_output_dir(cfg: &PipelineConfig) -> Result<()> {
    let d = &cfg.paths.output_dir;
    fs::create_dir_all(d).map_err(|e| DrnetError::io(d, e))
}

fn train_set(cfg: &PipelineConfig) -> Result<Dataset> {
    let d = &cfg.paths.data_dir;
    mnist::load_idx_pair(&d.join(mnist::TRAIN_IMAGES), &d.join(mnist::TRAIN_LABELS))
}

fn test_set(cfg: &PipelineConfig) -> Result<Dataset> {
    let d = &cfg.paths.data_dir;
    mnist::load_idx_pair(&d.join(mnist::TEST_IMAGES), &d.join(mnist::TEST_LABELS))
}

fn load_civs(cfg: &PipelineConfig, net: Option<&GatedNetwork>) -> Result<Vec<ChannelImportanceVector>> {
    let path = &cfg.paths.civ;
    let (labels, civs) = formats::read_civs(path)?;
    if let Some(net) = net {
        if labels != net.channel_labels() {
            return Err(DrnetError::Integrity {
                path: path.clone(),
                msg: format!(
                    "{} importance columns do not match the model's {} gated channels",
                    labels.len(),
                    net.total_gated_channels()
                ),
            });
        }
    }
    Ok(civs)
}

fn class_tag(classes: &[usize]) -> String {
    classes.iter().map(ToString::to_string).collect::<Vec<_>>().join("_")
}

pub struct TrainReport {
    pub metrics: Vec<EpochMetrics>,
    pub param_count: usize,
    pub model: PathBuf,
}

impl fmt::Display for TrainReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for m in &self.metrics {
            write!(f, "epoch {}: train loss {:.5}", m.epoch, m.train_loss)?;
            if let Some(a) = m.test_accuracy {
                write!(f, ", test accuracy {:.4}", a)?;
            }
            writeln!(f)?;
        }
        write!(f, "{} parameters saved to {}", self.param_count, self.model.display())
    }
}

/// Trains the base network and writes the model and per-epoch metrics.
pub fn run_train(cfg: &PipelineConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let (tr, te) = mnist::load_mnist(&cfg.paths.data_dir)?;
    let mut net = GatedNetwork::init(Architecture::mnist5(), cfg.train.seed)?;
    let metrics = train::train(&mut net, &tr, Some(&te), &cfg.train)?;
    ensure_output_dir(cfg)?;
    ensure_parent(&cfg.paths.model)?;
    save_model(&net, &cfg.paths.model)?;
    train::write_metrics_csv(&cfg.output(TRAIN_METRICS), &metrics)?;
    Ok(TrainReport {
        metrics,
        param_count: net.param_count(),
        model: cfg.paths.model.clone(),
    })
}

pub struct DissectReport {
    pub classes: usize,
    pub images: usize,
    pub fallback_rate: f64,
    pub civ: PathBuf,
}

impl fmt::Display for DissectReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "dissected {} images over {} classes, fallback rate {:.4}; importance vectors in {}",
            self.images,
            self.classes,
            self.fallback_rate,
            self.civ.display()
        )
    }
}

/// Optimizes gates on the first `per_class_n` training images of every class.
pub fn run_dissect(cfg: &PipelineConfig) -> Result<DissectReport> {
    cfg.validate()?;
    let net = load_model(&cfg.paths.model)?;
    let data = train_set(cfg)?;
    let d = dissect_dataset(&net, &data, cfg.per_class_n, &cfg.dissect)?;
    let labels = net.channel_labels();
    ensure_output_dir(cfg)?;
    ensure_parent(&cfg.paths.civ)?;
    formats::write_civs(&cfg.paths.civ, &labels, &d.civs)?;
    formats::write_cdrps(&cfg.output(CDRPS), &labels, &d.cdrps)?;
    formats::write_fallback(&cfg.output(FALLBACK), &d.fallback)?;
    Ok(DissectReport {
        classes: d.civs.len(),
        images: d.cdrps.len(),
        fallback_rate: d.fallback_rate(),
        civ: cfg.paths.civ.clone(),
    })
}

/// Threshold from the config, or the smallest one meeting the target fraction on `tasks`.
pub fn resolve_threshold(
    cfg: &PipelineConfig,
    civs: &[ChannelImportanceVector],
    tasks: &[SubTask],
    method: CombineMethod,
) -> Result<f64> {
    match cfg.reconstruct.threshold {
        Some(t) => Ok(t),
        None => reconstruct::select_threshold(civs, tasks, method, cfg.reconstruct.target_fraction),
    }
}

pub struct ReconstructReport {
    pub cciv: CombinedCiv,
    pub path: PathBuf,
}

impl fmt::Display for ReconstructReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} mask for classes {:?} at threshold {}: {}/{} channels running; written to {}",
            self.cciv.method,
            self.cciv.classes,
            self.cciv.threshold,
            self.cciv.running_channels(),
            self.cciv.mask.len(),
            self.path.display()
        )
    }
}

/// Combines the importance vectors of `classes` into a mask file.
///
/// Uses `cfg.reconstruct` for the method and threshold; `out` defaults to
/// `output_dir/classes_<ids>.cciv.csv`.
pub fn run_reconstruct(cfg: &PipelineConfig, classes: &[usize], out: Option<&Path>) -> Result<ReconstructReport> {
    cfg.validate()?;
    let (labels, civs) = formats::read_civs(&cfg.paths.civ)?;
    let num_classes = civs.iter().map(|c| c.class_id + 1).max().unwrap_or(0);
    let task = SubTask::new(classes, num_classes)?;
    let method = cfg.reconstruct.method;
    let thr = resolve_threshold(cfg, &civs, std::slice::from_ref(&task), method)?;
    let cciv = combine(&civs_for(&civs, &task)?, method, thr)?;
    let path = match out {
        Some(p) => p.to_path_buf(),
        None => cfg.output(&format!("classes_{}.cciv.csv", class_tag(task.classes()))),
    };
    ensure_parent(&path)?;
    formats::write_cciv(&path, &labels, &cciv)?;
    Ok(ReconstructReport { cciv, path })
}

pub struct InferReport {
    pub image_id: usize,
    pub label: usize,
    pub classes: Vec<usize>,
    pub full_top1: usize,
    pub masked_top1: usize,
    pub probabilities: Vec<f64>,
    pub macs: u64,
    pub full_macs: u64,
    pub cost: CostReport,
}

impl fmt::Display for InferReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "image {} (label {}), classes {:?}", self.image_id, self.label, self.classes)?;
        for &c in &self.classes {
            writeln!(f, "  class {c}: {:.6}", self.probabilities[c])?;
        }
        writeln!(f, "top-1 full network {}, sub-network {}", self.full_top1, self.masked_top1)?;
        writeln!(
            f,
            "multiply-accumulates {} of {} ({:.4})",
            self.macs,
            self.full_macs,
            self.macs as f64 / self.full_macs as f64
        )?;
        write!(f, "{}", self.cost.table())
    }
}

/// Runs one test image through the sub-network a mask file defines.
pub fn run_infer(cfg: &PipelineConfig, cciv_path: &Path, image_id: usize) -> Result<InferReport> {
    let net = load_model(&cfg.paths.model)?;
    let cciv = formats::read_cciv(cciv_path)?;
    let test = test_set(cfg)?;
    if image_id >= test.len() {
        return Err(DrnetError::invalid(format!(
            "image {image_id} out of range, test set has {}",
            test.len()
        )));
    }
    let x = test.image(image_id);
    let full = net.forward(&x)?;
    let out = masked_forward_counted(&net, &x, &cciv.mask)?;
    let probabilities = masked_softmax(out.logits.data(), &cciv.classes)?;
    let cost = cost_report(&net, &cciv.mask)?;
    ensure_output_dir(cfg)?;
    formats::write_cost(&cfg.output(COST), &cost)?;
    Ok(InferReport {
        image_id,
        label: test.label(image_id),
        full_top1: argmax_in_set(full.data(), &cciv.classes),
        masked_top1: argmax_in_set(out.logits.data(), &cciv.classes),
        classes: cciv.classes,
        probabilities,
        macs: out.macs,
        full_macs: out.full_macs,
        cost,
    })
}

/// Sub-tasks to evaluate.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Tasks {
    Classes(Vec<usize>),
    RandomPairs { count: usize, seed: u64 },
}

impl Tasks {
    pub fn resolve(&self, num_classes: usize) -> Result<Vec<SubTask>> {
        match self {
            Tasks::Classes(c) => Ok(vec![SubTask::new(c, num_classes)?]),
            Tasks::RandomPairs { count, seed } => analysis::random_pairs(num_classes, *count, *seed),
        }
    }
}

pub struct EvalReport {
    pub threshold: f64,
    pub results: Vec<SubTaskResult>,
    pub summary: EvalSummary,
    pub path: PathBuf,
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "threshold {}", self.threshold)?;
        writeln!(f, "{:<10} {:>9} {:>9} {:>9} {:>9}", "classes", "full", "sub", "drop pp", "running")?;
        for r in &self.results {
            let c: Vec<String> = r.classes.iter().map(ToString::to_string).collect();
            writeln!(
                f,
                "{:<10} {:>9.4} {:>9.4} {:>9.3} {:>9.3}",
                c.join(","),
                r.full_accuracy,
                r.masked_accuracy,
                r.drop_pp(),
                r.running_fraction()
            )?;
        }
        let s = &self.summary;
        writeln!(
            f,
            "{} sub-tasks: drop pp mean {:.3} min {:.3} max {:.3}; running channels {:.3}, params {:.3}",
            s.tasks, s.mean_drop_pp, s.min_drop_pp, s.max_drop_pp, s.mean_running_fraction, s.mean_param_fraction
        )?;
        write!(f, "results in {}", self.path.display())
    }
}

/// Full versus reconstructed accuracy on each sub-task.
pub fn run_eval(cfg: &PipelineConfig, tasks: &Tasks) -> Result<EvalReport> {
    cfg.validate()?;
    let net = load_model(&cfg.paths.model)?;
    let civs = load_civs(cfg, Some(&net))?;
    let test = test_set(cfg)?;
    let subtasks = tasks.resolve(net.num_classes())?;
    let method = cfg.reconstruct.method;
    let threshold = resolve_threshold(cfg, &civs, &subtasks, method)?;
    let results = subtasks
        .iter()
        .map(|t| analysis::evaluate_subtask(&net, &test, &civs, t, method, threshold))
        .collect::<Result<Vec<_>>>()?;
    let summary = analysis::summarize(&results)?;
    ensure_output_dir(cfg)?;
    let path = cfg.output(RESULTS);
    formats::write_results(&path, &results)?;
    Ok(EvalReport {
        threshold,
        results,
        summary,
        path,
    })
}

pub struct SweepReport {
    /// `(threshold, mean running fraction over the sub-tasks)`.
    pub mean: Vec<(f64, f64)>,
    pub path: PathBuf,
}

impl fmt::Display for SweepReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:>12} {:>10}", "threshold", "running")?;
        for (t, fr) in &self.mean {
            writeln!(f, "{t:>12.6} {fr:>10.4}")?;
        }
        write!(f, "table in {}", self.path.display())
    }
}

/// `steps + 1` evenly spaced thresholds from 0 to the largest importance value.
pub fn default_thresholds(civs: &[ChannelImportanceVector], steps: usize) -> Vec<f64> {
    let top = civs
        .iter()
        .flat_map(|c| c.values.iter().copied())
        .fold(0.0, f64::max);
    (0..=steps).map(|i| top * i as f64 / steps as f64).collect()
}

/// Running-channel fraction per threshold for each sub-task and on average.
pub fn run_sweep(cfg: &PipelineConfig, tasks: &Tasks, thresholds: Option<&[f64]>) -> Result<SweepReport> {
    cfg.validate()?;
    let civs = load_civs(cfg, None)?;
    let num_classes = civs.iter().map(|c| c.class_id + 1).max().unwrap_or(0);
    let subtasks = tasks.resolve(num_classes)?;
    let grid = match thresholds {
        Some(t) => t.to_vec(),
        None => default_thresholds(&civs, 20),
    };
    let method = cfg.reconstruct.method;
    let mut rows = Vec::new();
    let mut sums = vec![0.0; grid.len()];
    for task in &subtasks {
        let table = reconstruct::sweep_threshold(&civs_for(&civs, task)?, method, &grid)?;
        for (s, &(t, fr)) in sums.iter_mut().zip(&table) {
            *s += fr;
            rows.push((task.to_string(), t, fr));
        }
    }
    let mean: Vec<(f64, f64)> = grid
        .iter()
        .zip(&sums)
        .map(|(&t, &s)| (t, s / subtasks.len() as f64))
        .collect();
    rows.extend(mean.iter().map(|&(t, fr)| ("mean".to_string(), t, fr)));
    ensure_output_dir(cfg)?;
    let path = cfg.output(SWEEP);
    formats::write_sweep(&path, &rows)?;
    Ok(SweepReport { mean, path })
}

pub struct AnalyzeReport {
    pub classes: Vec<usize>,
    pub similarity: Vec<Vec<f64>>,
    /// Mean similarity of class 1 to the other classes, when class 1 is present.
    pub class_one_mean: Option<f64>,
    pub threshold: f64,
    pub layers: Vec<(Vec<usize>, Vec<LayerShare>)>,
    /// Last-layer minus first-layer running fraction, averaged over sub-tasks.
    pub depth_trend: Option<f64>,
}

impl fmt::Display for AnalyzeReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "similarity of important channel sets")?;
        write!(f, "     ")?;
        for c in &self.classes {
            write!(f, "{c:>6}")?;
        }
        writeln!(f)?;
        for (c, row) in self.classes.iter().zip(&self.similarity) {
            write!(f, "{c:>5}")?;
            for v in row {
                write!(f, "{v:>6.2}")?;
            }
            writeln!(f)?;
        }
        if let Some(m) = self.class_one_mean {
            writeln!(f, "class 1 mean similarity to others: {m:.4}")?;
        }
        writeln!(f, "layer-wise running fraction at threshold {}:", self.threshold)?;
        for (classes, shares) in &self.layers {
            let fr: Vec<String> = shares.iter().map(|s| format!("{:.3}", s.fraction())).collect();
            writeln!(f, "  {:?}: {}", classes, fr.join(" "))?;
        }
        match self.depth_trend {
            Some(t) => write!(f, "last minus first layer running fraction: {t:+.4}"),
            None => write!(f, "no layer trend available"),
        }
    }
}

/// Similarity matrix of the classes and layer-wise running channels of each sub-task.
pub fn run_analyze(cfg: &PipelineConfig, tasks: &Tasks) -> Result<AnalyzeReport> {
    cfg.validate()?;
    let net = load_model(&cfg.paths.model)?;
    let civs = load_civs(cfg, Some(&net))?;
    let classes: Vec<usize> = civs.iter().map(|c| c.class_id).collect();
    let similarity = analysis::similarity_matrix(&civs, cfg.analyze.epsilon);
    let class_one_mean = classes
        .iter()
        .position(|&c| c == 1)
        .filter(|_| classes.len() > 1)
        .map(|row| analysis::off_diagonal_row_mean(&similarity, row));

    let subtasks = tasks.resolve(net.num_classes())?;
    let method = cfg.reconstruct.method;
    let threshold = resolve_threshold(cfg, &civs, &subtasks, method)?;
    let mut layers = Vec::with_capacity(subtasks.len());
    for t in &subtasks {
        let cciv = combine(&civs_for(&civs, t)?, method, threshold)?;
        layers.push((t.classes().to_vec(), analysis::layer_distribution(&net, &cciv.mask)?));
    }
    let shares: Vec<Vec<LayerShare>> = layers.iter().map(|(_, s)| s.clone()).collect();

    ensure_output_dir(cfg)?;
    formats::write_similarity(&cfg.output(SIMILARITY), &classes, &similarity)?;
    formats::write_pgm(&cfg.output(SIMILARITY_PGM), &similarity, 16)?;
    formats::write_layer_distribution(&cfg.output(LAYERS), &layers)?;
    Ok(AnalyzeReport {
        classes,
        similarity,
        class_one_mean,
        threshold,
        depth_trend: analysis::depth_trend(&shares),
        layers,
    })
}
