//! Diagonal Gaussian fits of canonical-ordered positions and their exact
//! flow-matching velocity under the linear interpolant from `N(0, I)`.

use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::toymol::{Dataset, N_MAX, N_MIN};

/// Keys with fewer samples than this fall back to the pooled fit.
pub const MIN_KEY_COUNT: usize = 5;
pub const VARIANCE_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianFit {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

impl GaussianFit {
    /// Sample mean and (maximum-likelihood) variance of the given rows.
    pub fn from_rows<'a>(rows: impl Iterator<Item = &'a [f64]>, dim: usize) -> Option<Self> {
        let mut count = 0usize;
        let mut sum = vec![0.0; dim];
        let mut sq = vec![0.0; dim];
        let rows: Vec<&[f64]> = rows.collect();
        for r in &rows {
            count += 1;
            for (s, v) in sum.iter_mut().zip(r.iter()) {
                *s += v;
            }
        }
        if count == 0 {
            return None;
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        for r in &rows {
            for ((q, v), m) in sq.iter_mut().zip(r.iter()).zip(&mean) {
                *q += (v - m) * (v - m);
            }
        }
        let var = sq
            .iter()
            .map(|q| (q / count as f64).max(VARIANCE_FLOOR))
            .collect();
        Some(GaussianFit { mean, var, count })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Negative log-density of `x` under the diagonal Gaussian.
    pub fn nll(&self, x: &[f64]) -> f64 {
        x.iter()
            .zip(&self.mean)
            .zip(&self.var)
            .map(|((x, m), v)| 0.5 * ((x - m) * (x - m) / v + (2.0 * std::f64::consts::PI * v).ln()))
            .sum()
    }
}

/// Exact velocity `E[x1 | x_t] − E[x0 | x_t]` for a diagonal Gaussian target.
pub fn gaussian_velocity(mean: &[f64], var: &[f64], x: &[f64], t: f64, out: &mut [f64]) {
    let (a, b) = (1.0 - t, t);
    for (((o, &m), &s2), &xi) in out.iter_mut().zip(mean).zip(var).zip(x) {
        let v = a * a + b * b * s2;
        let r = xi - b * m;
        *o = (m + b * s2 * r / v) - a * r / v;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianStratum {
    pub n: usize,
    pub pooled: GaussianFit,
    /// Per property bin; `None` where the bin has too few samples.
    pub by_bin: Vec<Option<GaussianFit>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianVelocityModel {
    pub conditional: bool,
    pub strata: Vec<GaussianStratum>,
}

impl GaussianVelocityModel {
    /// Fits every `(n, bin)` key and the pooled `(n, ∅)` key.
    pub fn fit(ds: &Dataset, conditional: bool) -> Result<Self, ModelError> {
        Self::fit_indices(ds, &(0..ds.len()).collect::<Vec<_>>(), conditional)
    }

    /// Fits on a subset of dataset rows (bins taken from the dataset).
    pub fn fit_indices(ds: &Dataset, idx: &[usize], conditional: bool) -> Result<Self, ModelError> {
        if idx.is_empty() {
            return Err(ModelError::EmptyDataset);
        }
        let flat: Vec<Vec<f64>> = idx
            .iter()
            .map(|&i| ds.molecules()[i].flat_positions())
            .collect();
        let mut strata = Vec::new();
        for n in N_MIN..=N_MAX {
            let members: Vec<usize> = (0..idx.len())
                .filter(|&k| ds.molecules()[idx[k]].n_atoms() == n)
                .collect();
            let Some(pooled) =
                GaussianFit::from_rows(members.iter().map(|&k| flat[k].as_slice()), 3 * n)
            else {
                continue;
            };
            let by_bin = (0..ds.num_bins())
                .map(|b| {
                    if !conditional {
                        return None;
                    }
                    let rows = members
                        .iter()
                        .filter(|&&k| ds.bin_index()[idx[k]] == b)
                        .map(|&k| flat[k].as_slice());
                    GaussianFit::from_rows(rows, 3 * n).filter(|f| f.count >= MIN_KEY_COUNT)
                })
                .collect();
            strata.push(GaussianStratum { n, pooled, by_bin });
        }
        Ok(GaussianVelocityModel {
            conditional,
            strata,
        })
    }

    pub fn stratum(&self, n: usize) -> Option<&GaussianStratum> {
        self.strata.iter().find(|s| s.n == n)
    }

    /// Fit for `(n, bin)`, or the pooled fit for `bin = None` and sparse bins.
    pub fn resolve(&self, n: usize, bin: Option<usize>) -> Result<&GaussianFit, ModelError> {
        let s = self
            .stratum(n)
            .ok_or(ModelError::UnresolvedKey { n, bin })?;
        Ok(bin
            .and_then(|b| s.by_bin.get(b).and_then(|f| f.as_ref()))
            .unwrap_or(&s.pooled))
    }

    pub fn velocity(
        &self,
        n: usize,
        bin: Option<usize>,
        x: &[f64],
        t: f64,
    ) -> Result<Vec<f64>, ModelError> {
        if !(0.0..1.0).contains(&t) {
            return Err(ModelError::TimeOutOfRange(t));
        }
        let fit = self.resolve(n, bin)?;
        if x.len() != fit.dim() {
            return Err(ModelError::Shape(x.len(), fit.dim()));
        }
        let mut out = vec![0.0; x.len()];
        gaussian_velocity(&fit.mean, &fit.var, x, t, &mut out);
        Ok(out)
    }

    /// Applies `f` to every fit (pooled and per-bin).
    pub(crate) fn map_fits(&mut self, mut f: impl FnMut(&mut GaussianFit)) {
        for s in &mut self.strata {
            f(&mut s.pooled);
            for fit in s.by_bin.iter_mut().flatten() {
                f(fit);
            }
        }
    }
}
