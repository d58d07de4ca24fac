//! Gaussian-process Bayesian optimization with expected improvement.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};
use thiserror::Error;

pub const JITTER: f64 = 1e-6;
pub const EI_XI: f64 = 0.01;
pub const CANDIDATES: usize = 2048;
pub const POLISH_STARTS: usize = 5;

const LENGTHSCALE_RANGE: (f64, f64) = (0.03, 5.0);
const SIGNAL_RANGE: (f64, f64) = (0.05, 20.0);
const NOISE_RANGE: (f64, f64) = (1e-6, 1.0);

#[derive(Debug, Error)]
pub enum BoError {
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error("objective failed at {weights:?}: {message}")]
    ObjectiveFailure { weights: Vec<f64>, message: String },
    #[error("kernel matrix is not positive definite")]
    NotPositiveDefinite,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoProblem {
    pub bounds: Vec<(f64, f64)>,
    pub n_initial: usize,
    pub n_iterations: usize,
    pub seed: u64,
}

impl BoProblem {
    pub fn cfg(seed: u64) -> Self {
        BoProblem {
            bounds: vec![(1.0, 4.0); 2],
            n_initial: 10,
            n_iterations: 40,
            seed,
        }
    }

    pub fn ag(seed: u64) -> Self {
        BoProblem {
            bounds: vec![(1.0, 4.3), (1.0, 1.8)],
            n_initial: 10,
            n_iterations: 40,
            seed,
        }
    }

    pub fn mg(seed: u64) -> Self {
        BoProblem {
            bounds: vec![(1.0, 2.0)],
            n_initial: 5,
            n_iterations: 10,
            seed,
        }
    }

    pub fn dim(&self) -> usize {
        self.bounds.len()
    }

    pub fn validate(&self) -> Result<(), BoError> {
        if self.bounds.is_empty() {
            return Err(BoError::InvalidProblem("no dimensions".into()));
        }
        for &(lo, hi) in &self.bounds {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(BoError::InvalidProblem(format!("bad bounds [{lo}, {hi}]")));
            }
        }
        if self.n_initial < 2 {
            return Err(BoError::InvalidProblem("n_initial must be >= 2".into()));
        }
        Ok(())
    }

    fn to_weights(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .zip(&self.bounds)
            .map(|(&u, &(lo, hi))| lo + u.clamp(0.0, 1.0) * (hi - lo))
            .collect()
    }
}

/// SE-ARD kernel hyperparameters, stored as natural logs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpHyper {
    pub log_lengthscales: Vec<f64>,
    pub log_signal_var: f64,
    pub log_noise_var: f64,
}

impl GpHyper {
    pub fn default_for(dim: usize) -> Self {
        GpHyper {
            log_lengthscales: vec![0.3f64.ln(); dim],
            log_signal_var: 0.0,
            log_noise_var: 1e-3f64.ln(),
        }
    }

    fn to_vec(&self) -> Vec<f64> {
        let mut v = self.log_lengthscales.clone();
        v.push(self.log_signal_var);
        v.push(self.log_noise_var);
        v
    }

    fn from_vec(v: &[f64]) -> Self {
        let d = v.len() - 2;
        let clip = |x: f64, (lo, hi): (f64, f64)| x.clamp(lo.ln(), hi.ln());
        GpHyper {
            log_lengthscales: v[..d].iter().map(|&x| clip(x, LENGTHSCALE_RANGE)).collect(),
            log_signal_var: clip(v[d], SIGNAL_RANGE),
            log_noise_var: clip(v[d + 1], NOISE_RANGE),
        }
    }

    fn kernel(&self, a: &[f64], b: &[f64]) -> f64 {
        let r2: f64 = a
            .iter()
            .zip(b)
            .zip(&self.log_lengthscales)
            .map(|((x, y), l)| ((x - y) / l.exp()).powi(2))
            .sum();
        self.log_signal_var.exp() * (-0.5 * r2).exp()
    }
}

/// Gaussian process on unit-box inputs with standardized outputs.
#[derive(Clone, Debug)]
pub struct GpSurrogate {
    x: Vec<Vec<f64>>,
    y_mean: f64,
    y_scale: f64,
    hyper: GpHyper,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
    nll: f64,
}

impl GpSurrogate {
    pub fn with_hyper(x: &[Vec<f64>], y: &[f64], hyper: GpHyper) -> Result<Self, BoError> {
        assert_eq!(x.len(), y.len());
        assert!(!x.is_empty());
        let n = y.len() as f64;
        let y_mean = y.iter().sum::<f64>() / n;
        let sd = (y.iter().map(|v| (v - y_mean).powi(2)).sum::<f64>() / n).sqrt();
        let y_scale = if sd > 1e-12 { sd } else { 1.0 };
        let ys = DVector::from_iterator(y.len(), y.iter().map(|v| (v - y_mean) / y_scale));
        let noise = hyper.log_noise_var.exp() + JITTER;
        let k = DMatrix::from_fn(x.len(), x.len(), |i, j| {
            hyper.kernel(&x[i], &x[j]) + if i == j { noise } else { 0.0 }
        });
        let chol = k.cholesky().ok_or(BoError::NotPositiveDefinite)?;
        let alpha = chol.solve(&ys);
        let log_det: f64 = chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum();
        let nll = 0.5 * ys.dot(&alpha) + log_det + 0.5 * n * (2.0 * std::f64::consts::PI).ln();
        Ok(GpSurrogate {
            x: x.to_vec(),
            y_mean,
            y_scale,
            hyper,
            chol,
            alpha,
            nll,
        })
    }

    /// Fits hyperparameters by minimizing the negative log marginal likelihood
    /// with Nelder-Mead, started from the defaults and from `warm` if given.
    pub fn fit(x: &[Vec<f64>], y: &[f64], warm: Option<&GpHyper>) -> Result<Self, BoError> {
        let dim = x[0].len();
        let objective = |v: &[f64]| {
            GpSurrogate::with_hyper(x, y, GpHyper::from_vec(v))
                .map(|g| g.nll)
                .unwrap_or(f64::INFINITY)
        };
        let mut starts = vec![GpHyper::default_for(dim).to_vec()];
        if let Some(w) = warm {
            starts.push(w.to_vec());
        }
        let mut best: Option<(f64, Vec<f64>)> = None;
        for s in starts {
            let (v, f) = nelder_mead(&objective, &s, 0.7, 300);
            if best.as_ref().is_none_or(|(bf, _)| f < *bf) {
                best = Some((f, v));
            }
        }
        let (_, v) = best.expect("at least one start");
        GpSurrogate::with_hyper(x, y, GpHyper::from_vec(&v))
    }

    pub fn hyper(&self) -> &GpHyper {
        &self.hyper
    }

    pub fn neg_log_marginal_likelihood(&self) -> f64 {
        self.nll
    }

    /// Posterior mean and standard deviation in the original output units.
    pub fn predict(&self, u: &[f64]) -> (f64, f64) {
        let k = DVector::from_iterator(self.x.len(), self.x.iter().map(|xi| self.hyper.kernel(xi, u)));
        let mu = k.dot(&self.alpha);
        let v = self.chol.solve(&k);
        let var = (self.hyper.log_signal_var.exp() - k.dot(&v)).max(0.0);
        (self.y_mean + self.y_scale * mu, self.y_scale * var.sqrt())
    }
}

/// Expected improvement for minimization below `best`.
pub fn expected_improvement(mu: f64, sigma: f64, best: f64, xi: f64) -> f64 {
    if sigma <= 0.0 {
        return 0.0;
    }
    let gap = best - mu - xi;
    let z = gap / sigma;
    let n = Normal::standard();
    (gap * n.cdf(z) + sigma * n.pdf(z)).max(0.0)
}

pub fn ei(gp: &GpSurrogate, u: &[f64], best: f64) -> f64 {
    let (mu, sigma) = gp.predict(u);
    expected_improvement(mu, sigma, best, EI_XI)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub weights: Vec<f64>,
    pub value: f64,
    pub incumbent: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoResult {
    pub best_weights: Vec<f64>,
    pub best_value: f64,
    pub trace: Vec<TraceRow>,
}

impl BoResult {
    /// CSV with columns iteration, w1..wd, value, incumbent.
    pub fn trace_csv(&self) -> String {
        let d = self.best_weights.len();
        let mut out = String::from("iteration");
        for i in 1..=d {
            out.push_str(&format!(",w{i}"));
        }
        out.push_str(",mae,incumbent_mae\n");
        for r in &self.trace {
            out.push_str(&r.iteration.to_string());
            for w in &r.weights {
                out.push_str(&format!(",{w:.6}"));
            }
            out.push_str(&format!(",{:.6},{:.6}\n", r.value, r.incumbent));
        }
        out
    }
}

/// Latin-hypercube sample of `n` points in the unit box.
pub fn latin_hypercube<R: Rng + ?Sized>(n: usize, dim: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut pts = vec![vec![0.0; dim]; n];
    for d in 0..dim {
        let mut strata: Vec<usize> = (0..n).collect();
        strata.shuffle(rng);
        for (p, s) in pts.iter_mut().zip(strata) {
            p[d] = (s as f64 + rng.random::<f64>()) / n as f64;
        }
    }
    pts
}

const PRIMES: [u64; 8] = [2, 3, 5, 7, 11, 13, 17, 19];

fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut f = inv;
    let mut out = 0.0;
    while i > 0 {
        out += (i % base) as f64 * f;
        i /= base;
        f *= inv;
    }
    out
}

/// Halton points `1..=n` with a random toroidal shift per dimension.
pub fn shifted_halton<R: Rng + ?Sized>(n: usize, dim: usize, rng: &mut R) -> Vec<Vec<f64>> {
    assert!(dim <= PRIMES.len());
    let shift: Vec<f64> = (0..dim).map(|_| rng.random()).collect();
    (1..=n as u64)
        .map(|i| {
            (0..dim)
                .map(|d| (radical_inverse(i, PRIMES[d]) + shift[d]).fract())
                .collect()
        })
        .collect()
}

/// Minimal Nelder-Mead. Returns the best vertex and its value.
fn nelder_mead(f: &dyn Fn(&[f64]) -> f64, x0: &[f64], step: f64, max_iter: usize) -> (Vec<f64>, f64) {
    let n = x0.len();
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    simplex.push((x0.to_vec(), f(x0)));
    for i in 0..n {
        let mut v = x0.to_vec();
        v[i] += step;
        let fv = f(&v);
        simplex.push((v, fv));
    }
    let along = |c: &[f64], w: &[f64], t: f64| -> Vec<f64> {
        c.iter().zip(w).map(|(c, w)| c + t * (w - c)).collect()
    };
    for _ in 0..max_iter {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        if (simplex[n].1 - simplex[0].1).abs() < 1e-10 {
            break;
        }
        let mut c = vec![0.0; n];
        for (v, _) in &simplex[..n] {
            for (ci, vi) in c.iter_mut().zip(v) {
                *ci += vi / n as f64;
            }
        }
        let worst = simplex[n].0.clone();
        let xr = along(&c, &worst, -1.0);
        let fr = f(&xr);
        if fr < simplex[0].1 {
            let xe = along(&c, &worst, -2.0);
            let fe = f(&xe);
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < simplex[n - 1].1 {
            simplex[n] = (xr, fr);
        } else {
            let xc = if fr < simplex[n].1 {
                along(&c, &xr, 0.5)
            } else {
                along(&c, &worst, 0.5)
            };
            let fc = f(&xc);
            if fc < fr.min(simplex[n].1) {
                simplex[n] = (xc, fc);
            } else {
                let best = simplex[0].0.clone();
                for (v, fv) in simplex.iter_mut().skip(1) {
                    *v = along(&best, v, 0.5);
                    *fv = f(v);
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    simplex.swap_remove(0)
}

/// Maximizes EI over shifted Halton candidates, then polishes the best few
/// with Nelder-Mead inside the unit box.
fn propose<R: Rng + ?Sized>(gp: &GpSurrogate, dim: usize, best: f64, rng: &mut R) -> Vec<f64> {
    let cands = shifted_halton(CANDIDATES, dim, rng);
    let mut scored: Vec<(f64, Vec<f64>)> = cands.into_iter().map(|u| (ei(gp, &u, best), u)).collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let neg_ei = |u: &[f64]| {
        if u.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return f64::INFINITY;
        }
        -ei(gp, u, best)
    };
    let mut top = scored[0].clone();
    for (_, start) in scored.iter().take(POLISH_STARTS) {
        let (u, f) = nelder_mead(&neg_ei, start, 0.05, 100);
        if -f > top.0 {
            top = (-f, u);
        }
    }
    top.1
}

/// Runs Latin-hypercube initialization followed by EI rounds. The incumbent
/// changes only on strict improvement.
pub fn optimize<F, E>(problem: &BoProblem, mut objective: F) -> Result<BoResult, BoError>
where
    F: FnMut(&[f64]) -> Result<f64, E>,
    E: std::fmt::Display,
{
    problem.validate()?;
    let dim = problem.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(problem.seed);
    let mut xs: Vec<Vec<f64>> = Vec::new();
    let mut ys: Vec<f64> = Vec::new();
    let mut trace = Vec::new();
    let mut best_idx = 0usize;
    let mut eval = |u: Vec<f64>, xs: &mut Vec<Vec<f64>>, ys: &mut Vec<f64>| -> Result<(), BoError> {
        let w = problem.to_weights(&u);
        let v = objective(&w).map_err(|e| BoError::ObjectiveFailure {
            weights: w.clone(),
            message: e.to_string(),
        })?;
        if !v.is_finite() {
            return Err(BoError::ObjectiveFailure {
                weights: w,
                message: format!("non-finite objective {v}"),
            });
        }
        if ys.is_empty() || v < ys[best_idx] {
            best_idx = ys.len();
        }
        xs.push(u);
        ys.push(v);
        trace.push(TraceRow {
            iteration: ys.len() - 1,
            weights: w,
            value: v,
            incumbent: ys[best_idx],
        });
        Ok(())
    };
    for u in latin_hypercube(problem.n_initial, dim, &mut rng) {
        eval(u, &mut xs, &mut ys)?;
    }
    let mut hyper: Option<GpHyper> = None;
    for _ in 0..problem.n_iterations {
        let gp = GpSurrogate::fit(&xs, &ys, hyper.as_ref())?;
        hyper = Some(gp.hyper().clone());
        let best = ys.iter().copied().fold(f64::INFINITY, f64::min);
        let u = propose(&gp, dim, best, &mut rng);
        eval(u, &mut xs, &mut ys)?;
    }
    let best = trace
        .iter()
        .min_by(|a, b| a.value.total_cmp(&b.value))
        .expect("nonempty trace");
    // first occurrence of the minimum, matching the strict-improvement incumbent
    let first = trace.iter().find(|r| r.value == best.value).expect("present");
    Ok(BoResult {
        best_weights: first.weights.clone(),
        best_value: first.value,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal as NormalDist};

    fn quadratic(w: &[f64]) -> Result<f64, String> {
        Ok((w[0] - 2.0).powi(2) + (w[1] - 1.5).powi(2))
    }

    #[test]
    fn ei_examples() {
        assert_eq!(expected_improvement(1.0, 0.0, 2.0, EI_XI), 0.0);
        let s = 0.7;
        let v = expected_improvement(2.0 - EI_XI, s, 2.0, EI_XI);
        assert!((v - s * 0.398_942_280_401_432_7).abs() < 1e-12);
    }

    #[test]
    fn ei_matches_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &(mu, sigma, best) in &[(1.0, 0.5, 1.2), (0.3, 0.1, 0.1), (2.0, 1.5, 1.0)] {
            let d = NormalDist::new(mu, sigma).unwrap();
            let n = 1_000_000;
            let (mut s, mut s2) = (0.0, 0.0);
            for _ in 0..n {
                let y: f64 = d.sample(&mut rng);
                let g = (best - y - EI_XI).max(0.0);
                s += g;
                s2 += g * g;
            }
            let mean = s / n as f64;
            let se = ((s2 / n as f64 - mean * mean) / n as f64).sqrt();
            let exact = expected_improvement(mu, sigma, best, EI_XI);
            assert!((exact - mean).abs() < 3.0 * se, "{exact} vs {mean} ± {se}");
        }
    }

    #[test]
    fn gp_interpolates_with_vanishing_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = latin_hypercube(8, 2, &mut rng);
        let y: Vec<f64> = x.iter().map(|u| (3.0 * u[0]).sin() + u[1] * u[1]).collect();
        let hyper = GpHyper {
            log_noise_var: 1e-12f64.ln(),
            ..GpHyper::default_for(2)
        };
        let gp = GpSurrogate::with_hyper(&x, &y, hyper).unwrap();
        for (u, &v) in x.iter().zip(&y) {
            let (mu, sd) = gp.predict(u);
            assert!((mu - v).abs() < 1e-3, "{mu} vs {v}");
            assert!(sd < 1e-2);
        }
    }

    #[test]
    fn fitting_improves_marginal_likelihood() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = latin_hypercube(15, 2, &mut rng);
        let y: Vec<f64> = x.iter().map(|u| 4.0 * u[0] + 0.01 * u[1]).collect();
        let base = GpSurrogate::with_hyper(&x, &y, GpHyper::default_for(2)).unwrap();
        let fit = GpSurrogate::fit(&x, &y, None).unwrap();
        assert!(fit.neg_log_marginal_likelihood() <= base.neg_log_marginal_likelihood());
        // the irrelevant second input should get the longer lengthscale
        let l = &fit.hyper().log_lengthscales;
        assert!(l[1] > l[0]);
    }

    #[test]
    fn latin_hypercube_hits_every_stratum() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts = latin_hypercube(10, 3, &mut rng);
        for d in 0..3 {
            let mut s: Vec<usize> = pts.iter().map(|p| (p[d] * 10.0) as usize).collect();
            s.sort_unstable();
            assert_eq!(s, (0..10).collect::<Vec<_>>());
        }
    }

    #[test]
    fn halton_base_two_prefix() {
        let v: Vec<f64> = (1..=4).map(|i| radical_inverse(i, 2)).collect();
        assert_eq!(v, vec![0.5, 0.25, 0.75, 0.125]);
        assert!((radical_inverse(5, 3) - (2.0 / 3.0 + 1.0 / 9.0)).abs() < 1e-15);
    }

    #[test]
    fn nelder_mead_finds_rosenbrock_minimum() {
        let f = |v: &[f64]| (1.0 - v[0]).powi(2) + 100.0 * (v[1] - v[0] * v[0]).powi(2);
        let (x, fx) = nelder_mead(&f, &[-1.2, 1.0], 0.5, 2000);
        assert!(fx < 1e-6, "{fx} at {x:?}");
    }

    #[test]
    fn quadratic_incumbent_is_close_to_the_minimum() {
        for seed in 0..5 {
            let r = optimize(&BoProblem::cfg(seed), quadratic).unwrap();
            let d = ((r.best_weights[0] - 2.0).powi(2) + (r.best_weights[1] - 1.5).powi(2)).sqrt();
            assert!(d < 0.1, "seed {seed}: {:?}", r.best_weights);
            assert_eq!(r.trace.len(), 50);
        }
    }

    #[test]
    fn trace_is_monotone_and_in_bounds() {
        let p = BoProblem::ag(9);
        let r = optimize(&p, |w: &[f64]| Ok::<_, String>((w[0] - 3.0).abs() + (w[1] - 1.2).powi(2))).unwrap();
        for pair in r.trace.windows(2) {
            assert!(pair[1].incumbent <= pair[0].incumbent);
        }
        for row in &r.trace {
            for (w, (lo, hi)) in row.weights.iter().zip(&p.bounds) {
                assert!(w >= lo && w <= hi);
            }
        }
        assert_eq!(r.best_value, r.trace.last().unwrap().incumbent);
    }

    #[test]
    fn constant_objective_keeps_the_first_point() {
        let r = optimize(&BoProblem::mg(1), |_: &[f64]| Ok::<_, String>(0.5)).unwrap();
        assert_eq!(r.best_weights, r.trace[0].weights);
        assert!(r.trace.iter().all(|t| t.value == 0.5 && t.incumbent == 0.5));
    }

    #[test]
    fn deterministic_given_seed() {
        let a = optimize(&BoProblem::cfg(3), quadratic).unwrap();
        let b = optimize(&BoProblem::cfg(3), quadratic).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn objective_failure_carries_the_weights() {
        let err = optimize(&BoProblem::mg(0), |w: &[f64]| {
            if w[0] > 0.0 {
                Err("boom")
            } else {
                Ok(0.0)
            }
        })
        .unwrap_err();
        assert!(matches!(err, BoError::ObjectiveFailure { ref weights, .. } if weights.len() == 1));
    }

    #[test]
    fn invalid_problems_are_rejected() {
        let mut p = BoProblem::cfg(0);
        p.bounds[0] = (2.0, 1.0);
        assert!(optimize(&p, quadratic).is_err());
        let mut p = BoProblem::cfg(0);
        p.n_initial = 1;
        assert!(optimize(&p, quadratic).is_err());
    }
}
