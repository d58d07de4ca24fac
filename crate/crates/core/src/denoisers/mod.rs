//! Exact and trained stand-ins for the denoising networks.

pub mod gaussian;
pub mod guide;
pub mod mg;
pub mod posterior;

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use gaussian::{gaussian_velocity, GaussianFit, GaussianVelocityModel};
pub use guide::{build_guide, held_out_nll, GuideModelSpec};
pub use mg::{train_mg, MgConfig, MgKey, MgModel, MgParams, WeightClass, WeightSampler};
pub use posterior::{EmpiricalPosterior, MatchTracker, NoisyStateClassifier, Stratum};

use crate::toymol::Dataset;

pub const MODEL_FILE_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("empty dataset")]
    EmptyDataset,
    #[error("no model entry for n = {n}, bin = {bin:?}")]
    UnresolvedKey { n: usize, bin: Option<usize> },
    #[error("time {0} outside [0, 1)")]
    TimeOutOfRange(f64),
    #[error("dimension mismatch: {0} vs {1}")]
    Shape(usize, usize),
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("model-guidance training diverged at step {step}: loss {loss} vs initial {initial}")]
    Diverged { step: u64, loss: f64, initial: f64 },
}

#[derive(Debug, Error)]
pub enum ModelFileError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("model file version {got}, expected {expected}")]
    Version { got: u32, expected: u32 },
    #[error("model file was fitted on {expected} molecules, dataset has {got}")]
    DatasetMismatch { got: usize, expected: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Everything the samplers read: the main models, the autoguidance guide,
/// and optionally the model-guidance tables.
#[derive(Clone, Debug)]
pub struct ModelSet {
    pub velocity: GaussianVelocityModel,
    pub posterior: EmpiricalPosterior,
    pub guide_spec: GuideModelSpec,
    pub guide_velocity: GaussianVelocityModel,
    pub guide_posterior: EmpiricalPosterior,
    pub mg: Option<MgModel>,
}

/// Serialized form; token posteriors are rebuilt from the dataset on load.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub version: u32,
    pub dataset_count: usize,
    pub velocity: GaussianVelocityModel,
    pub guide_spec: GuideModelSpec,
    pub guide_velocity: GaussianVelocityModel,
    pub mg: Option<MgModel>,
}

impl ModelSet {
    pub fn fit(
        ds: &Dataset,
        guide_spec: GuideModelSpec,
        mg: Option<MgConfig>,
    ) -> Result<Self, ModelError> {
        if ds.is_empty() {
            return Err(ModelError::EmptyDataset);
        }
        let velocity = GaussianVelocityModel::fit(ds, true)?;
        let posterior = EmpiricalPosterior::from_dataset(ds);
        let (guide_posterior, guide_velocity) = build_guide(ds, &guide_spec)?;
        let mg = mg
            .map(|cfg| train_mg(ds, &velocity, &posterior, cfg))
            .transpose()?;
        Ok(ModelSet {
            velocity,
            posterior,
            guide_spec,
            guide_velocity,
            guide_posterior,
            mg,
        })
    }

    /// Replaces the guide with one built from `spec`.
    pub fn with_guide(mut self, ds: &Dataset, spec: GuideModelSpec) -> Result<Self, ModelError> {
        let (p, v) = build_guide(ds, &spec)?;
        self.guide_spec = spec;
        self.guide_posterior = p;
        self.guide_velocity = v;
        Ok(self)
    }

    pub fn to_file(&self, ds: &Dataset) -> ModelFile {
        ModelFile {
            version: MODEL_FILE_VERSION,
            dataset_count: ds.len(),
            velocity: self.velocity.clone(),
            guide_spec: self.guide_spec,
            guide_velocity: self.guide_velocity.clone(),
            mg: self.mg.clone(),
        }
    }

    pub fn from_file(file: ModelFile, ds: &Dataset) -> Result<Self, ModelFileError> {
        if file.version != MODEL_FILE_VERSION {
            return Err(ModelFileError::Version {
                got: file.version,
                expected: MODEL_FILE_VERSION,
            });
        }
        if file.dataset_count != ds.len() {
            return Err(ModelFileError::DatasetMismatch {
                got: ds.len(),
                expected: file.dataset_count,
            });
        }
        let guide_idx = guide::guide_indices(ds, &file.guide_spec);
        let mut mg = file.mg;
        if let Some(m) = mg.as_mut() {
            m.reindex();
        }
        Ok(ModelSet {
            velocity: file.velocity,
            posterior: EmpiricalPosterior::from_dataset(ds),
            guide_spec: file.guide_spec,
            guide_velocity: file.guide_velocity,
            guide_posterior: EmpiricalPosterior::from_dataset_indices(
                ds,
                &guide_idx,
                file.guide_spec.smoothing,
            ),
            mg,
        })
    }

    pub fn save(&self, ds: &Dataset, path: &Path) -> Result<(), ModelFileError> {
        let json = serde_json::to_string(&self.to_file(ds))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path, ds: &Dataset) -> Result<Self, ModelFileError> {
        let file: ModelFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        Self::from_file(file, ds)
    }
}
