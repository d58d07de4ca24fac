//! Run configuration: one JSON document, overridable from the command line.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::denoisers::{GuideModelSpec, MgConfig};
use crate::sampler::{DiscreteFormat, Method, Weights};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot parse config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub seed: u64,
    pub count: usize,
    /// Defaults to `<out>/data.jsonl`.
    pub path: Option<PathBuf>,
    /// Fraction written to `train.jsonl`; the rest goes to `heldout.jsonl`.
    pub split: Option<f64>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            seed: 1,
            count: 20_000,
            path: None,
            split: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelsConfig {
    /// Defaults to `<out>/models.json`.
    pub path: Option<PathBuf>,
    pub guide: GuideModelSpec,
    pub mg: MgConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub steps: usize,
    pub eta: f64,
    pub count: usize,
    pub seed: u64,
    /// Fixed target property; joint `(n, c)` draws when absent.
    pub target: Option<f64>,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            steps: 100,
            eta: 0.0,
            count: 1000,
            seed: 0,
            target: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TuneKeyword {
    Tune,
}

/// Fixed weights or the keyword `"tune"`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WeightSetting {
    Tune(TuneKeyword),
    Fixed(Weights),
}

impl WeightSetting {
    pub fn fixed(&self) -> Option<Weights> {
        match *self {
            WeightSetting::Fixed(w) => Some(w),
            WeightSetting::Tune(_) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    pub method: Method,
    pub format: DiscreteFormat,
    pub weights: WeightSetting,
    /// Weight embedded in the model-guidance key.
    pub mg_weight: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            method: Method::Cfg,
            format: DiscreteFormat::LogProb,
            weights: WeightSetting::Fixed(Weights::Two { w1: 1.0, w2: 2.5 }),
            mg_weight: 1.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuneConfig {
    pub n_initial: usize,
    pub n_iterations: usize,
    /// Molecules sampled per objective evaluation.
    pub eval_count: usize,
    pub seed: u64,
    pub four_weights: bool,
}

impl Default for TuneConfig {
    fn default() -> Self {
        TuneConfig {
            n_initial: 10,
            n_iterations: 40,
            eval_count: 1000,
            seed: 0,
            four_weights: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    /// One report set per step count.
    pub steps: Vec<usize>,
    /// Used when no tuned incumbent is found in the output directory.
    pub cfg: Weights,
    pub ag: Weights,
    pub mg_weight: f64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            steps: vec![100],
            cfg: Weights::Two { w1: 1.0, w2: 2.5 },
            ag: Weights::Two { w1: 2.0, w2: 1.5 },
            mg_weight: 1.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub models: ModelsConfig,
    pub sampling: SamplingConfig,
    pub guidance: GuidanceConfig,
    pub tune: TuneConfig,
    pub benchmark: BenchmarkConfig,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: DatasetConfig::default(),
            models: ModelsConfig::default(),
            sampling: SamplingConfig::default(),
            guidance: GuidanceConfig::default(),
            tune: TuneConfig::default(),
            benchmark: BenchmarkConfig::default(),
            out: PathBuf::from("out"),
        }
    }
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

fn check_weights(what: &str, w: &[f64]) -> Result<(), ConfigError> {
    if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(invalid(format!("{what} weights must be finite and >= 0, got {w:?}")));
    }
    Ok(())
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.dataset.count < 100 {
            return Err(invalid("dataset.count must be >= 100"));
        }
        if let Some(f) = self.dataset.split {
            if !(f > 0.0 && f < 1.0) {
                return Err(invalid(format!("dataset.split {f} outside (0, 1)")));
            }
        }
        self.models
            .guide
            .validate()
            .map_err(|e| invalid(e.to_string()))?;
        let mg = &self.models.mg;
        if !(mg.lr_mean >= 0.0 && mg.lr_logits >= 0.0 && (0.0..=1.0).contains(&mg.ema_decay)) {
            return Err(invalid("models.mg learning rates must be >= 0 and ema_decay in [0, 1]"));
        }
        if mg.uncond_fraction < 0.0
            || mg.guided_fraction < 0.0
            || mg.uncond_fraction + mg.guided_fraction > 1.0
        {
            return Err(invalid("models.mg fractions must be >= 0 and sum to <= 1"));
        }
        if self.sampling.steps < 2 {
            return Err(invalid("sampling.steps must be >= 2"));
        }
        if self.sampling.count == 0 {
            return Err(invalid("sampling.count must be >= 1"));
        }
        if !(self.sampling.eta >= 0.0 && self.sampling.eta.is_finite()) {
            return Err(invalid("sampling.eta must be finite and >= 0"));
        }
        if let Some(w) = self.guidance.weights.fixed() {
            check_weights("guidance", &w.as_vec())?;
        }
        check_weights("guidance mg", &[self.guidance.mg_weight])?;
        if self.tune.n_initial < 2 {
            return Err(invalid("tune.n_initial must be >= 2"));
        }
        if self.tune.eval_count == 0 {
            return Err(invalid("tune.eval_count must be >= 1"));
        }
        if self.benchmark.steps.is_empty() || self.benchmark.steps.iter().any(|&s| s < 2) {
            return Err(invalid("benchmark.steps must be nonempty with every entry >= 2"));
        }
        check_weights("benchmark cfg", &self.benchmark.cfg.as_vec())?;
        check_weights("benchmark ag", &self.benchmark.ag.as_vec())?;
        check_weights("benchmark mg", &[self.benchmark.mg_weight])?;
        Ok(())
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.dataset
            .path
            .clone()
            .unwrap_or_else(|| self.out.join("data.jsonl"))
    }

    pub fn models_path(&self) -> PathBuf {
        self.models
            .path
            .clone()
            .unwrap_or_else(|| self.out.join("models.json"))
    }

    /// Short hash of the experiment-defining fields. File locations are
    /// excluded so the same experiment hashes the same in any directory.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out = PathBuf::new();
        c.dataset.path = None;
        c.models.path = None;
        let digest = Sha256::digest(serde_json::to_string(&c).expect("config serializes").as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_losslessly() {
        let mut c = RunConfig::default();
        c.guidance.weights = WeightSetting::Fixed(Weights::Four {
            positions: 1.1,
            atoms: 2.2,
            charges: 0.1 + 0.2,
            bonds: 3.0,
        });
        c.sampling.target = Some(2.5);
        c.dataset.split = Some(0.5);
        let back: RunConfig = serde_json::from_str(&c.to_json()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn tune_keyword_parses() {
        let c: RunConfig = serde_json::from_str(r#"{"guidance": {"weights": "tune"}}"#).unwrap();
        assert_eq!(c.guidance.weights, WeightSetting::Tune(TuneKeyword::Tune));
        assert_eq!(c.guidance.weights.fixed(), None);
        let c: RunConfig =
            serde_json::from_str(r#"{"guidance": {"weights": {"kind": "two", "w1": 2.0, "w2": 1.5}}}"#).unwrap();
        assert_eq!(c.guidance.weights.fixed(), Some(Weights::Two { w1: 2.0, w2: 1.5 }));
    }

    #[test]
    fn empty_document_is_the_default() {
        let c: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(c, RunConfig::default());
        c.validate().unwrap();
    }

    #[test]
    fn nested_model_specs_accept_partial_objects() {
        let c: RunConfig =
            serde_json::from_str(r#"{"models": {"guide": {"smoothing": 1.0}, "mg": {"epochs": 2}}}"#).unwrap();
        assert_eq!(c.models.guide.smoothing, 1.0);
        assert_eq!(c.models.guide.subsample_fraction, GuideModelSpec::default().subsample_fraction);
        assert_eq!(c.models.mg.epochs, 2);
        assert!(serde_json::from_str::<RunConfig>(r#"{"models": {"guide": {"rho": 1.0}}}"#).is_err());
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"sampling": {"stpes": 5}}"#).is_err());
    }

    #[test]
    fn hash_ignores_locations_only() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.out = PathBuf::from("/elsewhere");
        b.dataset.path = Some(PathBuf::from("x.jsonl"));
        assert_eq!(a.hash(), b.hash());
        b.sampling.seed = 9;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
    }

    #[test]
    fn validation_catches_bad_fields() {
        let mut c = RunConfig::default();
        c.sampling.steps = 1;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.dataset.split = Some(1.0);
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.guidance.weights = WeightSetting::Fixed(Weights::Two { w1: -1.0, w2: 1.0 });
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.models.guide.subsample_fraction = 0.0;
        assert!(c.validate().is_err());
    }
}
