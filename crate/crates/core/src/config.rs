//! Pipeline configuration, stored as TOML with one section per stage.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dissect::GateOptConfig;
use crate::error::{DrnetError, Result};
use crate::reconstruct::CombineMethod;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    /// Directory holding the four MNIST IDX files.
    pub data_dir: PathBuf,
    pub model: PathBuf,
    pub civ: PathBuf,
    pub output_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            data_dir: "data/mnist".into(),
            model: "out/mnist5.drnm".into(),
            civ: "out/mnist5.civ.csv".into(),
            output_dir: "out".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconstructConfig {
    pub method: CombineMethod,
    /// Fixed threshold. When absent, the smallest threshold reaching
    /// `target_fraction` on the evaluated sub-tasks is used.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    pub target_fraction: f64,
    /// Number of random class pairs for `eval`, `sweep` and `analyze`.
    pub pairs: usize,
}

impl Default for ReconstructConfig {
    fn default() -> Self {
        ReconstructConfig {
            method: CombineMethod::Union,
            threshold: None,
            target_fraction: 0.4,
            pairs: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyzeConfig {
    /// Importance above which a channel counts as used by a class.
    pub epsilon: f64,
}

impl Default for AnalyzeConfig {
    fn default() -> Self {
        AnalyzeConfig { epsilon: 1e-2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Seed for sampling evaluation sub-tasks.
    pub seed: u64,
    /// Images per class used to build each importance vector.
    pub per_class_n: usize,
    pub paths: Paths,
    pub train: TrainConfig,
    pub dissect: GateOptConfig,
    pub reconstruct: ReconstructConfig,
    pub analyze: AnalyzeConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 7,
            per_class_n: 100,
            paths: Paths::default(),
            train: TrainConfig::default(),
            dissect: GateOptConfig::default(),
            reconstruct: ReconstructConfig::default(),
            analyze: AnalyzeConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.dissect.validate()?;
        if self.per_class_n == 0 {
            return Err(DrnetError::invalid("per_class_n must be >= 1"));
        }
        if let Some(t) = self.reconstruct.threshold {
            if !(t >= 0.0) || t.is_infinite() {
                return Err(DrnetError::invalid("reconstruct.threshold must be finite and >= 0"));
            }
        }
        if !(0.0..=1.0).contains(&self.reconstruct.target_fraction) {
            return Err(DrnetError::invalid("reconstruct.target_fraction must lie in [0, 1]"));
        }
        if self.reconstruct.pairs == 0 {
            return Err(DrnetError::invalid("reconstruct.pairs must be >= 1"));
        }
        if !(self.analyze.epsilon >= 0.0) {
            return Err(DrnetError::invalid("analyze.epsilon must be >= 0"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str, path: &Path) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| DrnetError::Parse {
            path: path.to_path_buf(),
            offset: e.span().map_or(0, |s| s.start as u64),
            msg: e.message().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| DrnetError::io(path, e))?;
        Self::from_toml(&text, path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()).map_err(|e| DrnetError::io(path, e))
    }

    /// `output_dir/name`.
    pub fn output(&self, name: &str) -> PathBuf {
        self.paths.output_dir.join(name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_lossless() {
        let mut cfg = PipelineConfig::default();
        cfg.seed = u64::MAX;
        cfg.dissect.gamma = 0.1 + 0.2;
        cfg.reconstruct.threshold = Some(1.0 / 3.0);
        cfg.reconstruct.method = CombineMethod::Xor;
        let back = PipelineConfig::from_toml(&cfg.to_toml(), Path::new("c.toml")).unwrap();
        assert_eq!(back, cfg);
        let dflt = PipelineConfig::default();
        assert_eq!(PipelineConfig::from_toml(&dflt.to_toml(), Path::new("c.toml")).unwrap(), dflt);
    }

    #[test]
    fn seed_is_mandatory() {
        let text = PipelineConfig::default().to_toml();
        let without: String = text.lines().filter(|l| !l.starts_with("seed")).map(|l| format!("{l}\n")).collect();
        let err = PipelineConfig::from_toml(&without, Path::new("c.toml")).unwrap_err();
        assert!(matches!(err, DrnetError::Parse { .. }), "{err}");
        assert!(err.to_string().contains("seed"), "{err}");
    }

    #[test]
    fn unknown_keys_and_bad_values_rejected() {
        let text = PipelineConfig::default().to_toml();
        assert!(PipelineConfig::from_toml(&format!("bogus = 1\n{text}"), Path::new("c")).is_err());
        let zero = text.replace("per_class_n = 100", "per_class_n = 0");
        assert!(matches!(PipelineConfig::from_toml(&zero, Path::new("c")), Err(DrnetError::InvalidInput(_))));
    }
}
