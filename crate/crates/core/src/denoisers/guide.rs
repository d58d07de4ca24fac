//! Degraded guide models for autoguidance.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EmpiricalPosterior, GaussianVelocityModel, ModelError};
use crate::ctmc::LOG_FLOOR;
use crate::flowcore::{molecule_tokens, MASK};
use crate::toymol::{Dataset, PropertyBins};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuideModelSpec {
    /// Fraction `ρ ∈ (0, 1]` of each atom-count stratum kept.
    pub subsample_fraction: f64,
    /// Additive label smoothing on counts; the position variances are scaled by `1 + α`.
    pub smoothing: f64,
    /// Ignore the property condition in the guide's position model.
    pub marginalize_positions: bool,
    pub seed: u64,
}

impl GuideModelSpec {
    pub const IDENTITY: GuideModelSpec = GuideModelSpec {
        subsample_fraction: 1.0,
        smoothing: 0.0,
        marginalize_positions: false,
        seed: 0,
    };

    pub fn validate(&self) -> Result<(), ModelError> {
        let rho = self.subsample_fraction;
        if !(rho > 0.0 && rho <= 1.0) {
            return Err(ModelError::InvalidSpec(format!(
                "subsample fraction {rho} outside (0, 1]"
            )));
        }
        if !(self.smoothing >= 0.0 && self.smoothing.is_finite()) {
            return Err(ModelError::InvalidSpec(format!(
                "smoothing {} must be finite and >= 0",
                self.smoothing
            )));
        }
        Ok(())
    }
}

impl Default for GuideModelSpec {
    fn default() -> Self {
        GuideModelSpec {
            subsample_fraction: 0.25,
            smoothing: 2.0,
            marginalize_positions: false,
            seed: 0,
        }
    }
}

/// Indices kept by the subsample: `ceil(ρ · size)` per atom-count stratum, so
/// every stratum the main model knows stays resolvable.
pub fn guide_indices(ds: &Dataset, spec: &GuideModelSpec) -> Vec<usize> {
    if spec.subsample_fraction >= 1.0 {
        return (0..ds.len()).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut keep = Vec::new();
    for n in crate::toymol::N_MIN..=crate::toymol::N_MAX {
        let mut idx: Vec<usize> = (0..ds.len())
            .filter(|&i| ds.molecules()[i].n_atoms() == n)
            .collect();
        if idx.is_empty() {
            continue;
        }
        idx.shuffle(&mut rng);
        let k = ((idx.len() as f64) * spec.subsample_fraction).ceil() as usize;
        keep.extend_from_slice(&idx[..k.max(1)]);
    }
    keep.sort_unstable();
    keep
}

/// Builds the guide posterior and position model.
pub fn build_guide(
    ds: &Dataset,
    spec: &GuideModelSpec,
) -> Result<(EmpiricalPosterior, GaussianVelocityModel), ModelError> {
    spec.validate()?;
    let idx = guide_indices(ds, spec);
    let posterior = EmpiricalPosterior::from_dataset_indices(ds, &idx, spec.smoothing);
    let mut velocity = GaussianVelocityModel::fit_indices(ds, &idx, !spec.marginalize_positions)?;
    if spec.smoothing > 0.0 {
        let inflate = 1.0 + spec.smoothing;
        velocity.map_fits(|f| f.var.iter_mut().for_each(|v| *v *= inflate));
    }
    Ok((posterior, velocity))
}

/// Mean held-out negative log-likelihood: the position density at the
/// molecule's `(n, bin)` key plus the all-masked per-slot token likelihoods.
pub fn held_out_nll(
    posterior: &EmpiricalPosterior,
    velocity: &GaussianVelocityModel,
    bins: &PropertyBins,
    heldout: &Dataset,
) -> Result<f64, ModelError> {
    let mut total = 0.0;
    for (mol, &c) in heldout.molecules().iter().zip(heldout.properties()) {
        let n = mol.n_atoms();
        let bin = Some(bins.bin_of(c));
        total += velocity.resolve(n, bin)?.nll(&mol.flat_positions());
        let toks = molecule_tokens(mol);
        let tr = posterior.tracker(n, bin)?;
        debug_assert!(toks.iter().all(|&t| t != MASK));
        for (slot, &tok) in toks.iter().enumerate() {
            total -= tr.posterior(slot, true)[tok as usize].max(LOG_FLOOR).ln();
        }
    }
    Ok(total / heldout.len() as f64)
}
