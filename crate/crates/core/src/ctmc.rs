//! Masking-CTMC rate rows built from denoising posteriors, Euler transition
//! sampling, and the guidance operators acting on posteriors or rate rows.
//!
//! A row lives over the real tokens `0..K` plus the mask state at index `K`.
//! Off-diagonal entries are jump rates; the entry at the current state is
//! the diagonal, kept equal to minus the sum of the off-diagonals.

use arrayvec::ArrayVec;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flowcore::MASK;

/// Largest real-token alphabet handled by a row.
pub const MAX_ALPHABET: usize = 4;
/// Floor applied before logarithms and fractional powers.
pub const LOG_FLOOR: f64 = 1e-12;

/// A categorical distribution over the real tokens of one slot.
pub type Categorical = ArrayVec<f64, MAX_ALPHABET>;

#[derive(Debug, Error, PartialEq)]
pub enum CtmcError {
    #[error("rate requested at t = {0}; the unmasking rate diverges at t >= 1")]
    TerminalTime(f64),
}

/// Interpolation family shared by posterior and rate guidance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Blend {
    Linear,
    Log,
}

/// Remasking stochasticity `η ≥ 0`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stochasticity(f64);

impl Stochasticity {
    pub const NONE: Stochasticity = Stochasticity(0.0);

    pub fn new(eta: f64) -> Option<Self> {
        (eta >= 0.0 && eta.is_finite()).then_some(Stochasticity(eta))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RateRow {
    /// Index of the current state (`K` for the mask).
    state: usize,
    alphabet: usize,
    rates: ArrayVec<f64, { MAX_ALPHABET + 1 }>,
}

fn state_index(token: u8, alphabet: usize) -> usize {
    if token == MASK {
        alphabet
    } else {
        debug_assert!((token as usize) < alphabet);
        token as usize
    }
}

fn index_token(idx: usize, alphabet: usize) -> u8 {
    if idx == alphabet {
        MASK
    } else {
        idx as u8
    }
}

impl RateRow {
    /// Builds a row from off-diagonal rates; the entry at `state` is replaced by the conserving diagonal.
    pub fn from_rates(state: u8, rates: &[f64]) -> Self {
        let alphabet = rates.len() - 1;
        assert!(alphabet <= MAX_ALPHABET);
        let mut row = RateRow {
            state: state_index(state, alphabet),
            alphabet,
            rates: rates.iter().copied().collect(),
        };
        row.conserve();
        row
    }

    fn zeros(state: u8, alphabet: usize) -> Self {
        RateRow {
            state: state_index(state, alphabet),
            alphabet,
            rates: std::iter::repeat_n(0.0, alphabet + 1).collect(),
        }
    }

    fn conserve(&mut self) {
        let s = self.state;
        self.rates[s] = 0.0;
        let off: f64 = self.rates.iter().sum();
        self.rates[s] = -off;
    }

    pub fn state(&self) -> u8 {
        index_token(self.state, self.alphabet)
    }

    pub fn alphabet(&self) -> usize {
        self.alphabet
    }

    /// Rate towards `token` (the diagonal when `token` is the current state).
    pub fn rate(&self, token: u8) -> f64 {
        self.rates[state_index(token, self.alphabet)]
    }

    pub fn diagonal(&self) -> f64 {
        self.rates[self.state]
    }

    /// All entries indexed by state, mask last.
    pub fn entries(&self) -> &[f64] {
        &self.rates
    }

    /// Off-diagonal rate total.
    pub fn exit_rate(&self) -> f64 {
        -self.diagonal()
    }

    pub fn is_zero(&self) -> bool {
        self.rates.iter().all(|&r| r == 0.0)
    }

    /// Euler transition probabilities `δ + R·dt`, stay mass clamped at 0 and renormalized.
    pub fn transition_probs(&self, dt: f64) -> ArrayVec<f64, { MAX_ALPHABET + 1 }> {
        let mut p: ArrayVec<f64, { MAX_ALPHABET + 1 }> = self
            .rates
            .iter()
            .enumerate()
            .map(|(k, &r)| if k == self.state { 0.0 } else { r * dt })
            .collect();
        let jump: f64 = p.iter().sum();
        if jump <= 1.0 {
            p[self.state] = 1.0 - jump;
        } else {
            for v in p.iter_mut() {
                *v /= jump;
            }
        }
        p
    }
}

/// Rate row of one slot from its denoising posterior `p(x1 | x_t)`.
///
/// From the mask: `p(a)·(1 + ηt)/(1 − t)` towards each real token `a`.
/// From a real token: `η` towards the mask, nothing else.
pub fn rate_from_posterior(
    p1t: &[f64],
    x_t: u8,
    t: f64,
    eta: Stochasticity,
) -> Result<RateRow, CtmcError> {
    if t >= 1.0 {
        return Err(CtmcError::TerminalTime(t));
    }
    let alphabet = p1t.len();
    let mut row = RateRow::zeros(x_t, alphabet);
    if x_t == MASK {
        let scale = (1.0 + eta.value() * t) / (1.0 - t);
        for (k, &p) in p1t.iter().enumerate() {
            row.rates[k] = p * scale;
        }
    } else {
        row.rates[alphabet] = eta.value();
    }
    row.conserve();
    Ok(row)
}

/// Samples the state after one Euler step of length `dt`.
pub fn step<R: Rng + ?Sized>(row: &RateRow, dt: f64, rng: &mut R) -> u8 {
    if row.is_zero() {
        return row.state();
    }
    let probs = row.transition_probs(dt);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return index_token(k, row.alphabet);
        }
    }
    // rounding left u above the cumulative mass; fall on the last non-empty entry
    let last = probs.iter().rposition(|&p| p > 0.0).unwrap_or(row.state);
    index_token(last, row.alphabet)
}

fn log_blend(anchor: f64, target: f64, w: f64) -> f64 {
    if anchor == 0.0 && target == 0.0 {
        return 0.0;
    }
    let la = anchor.max(LOG_FLOOR).ln();
    let lt = target.max(LOG_FLOOR).ln();
    (la + w * (lt - la)).exp()
}

fn linear_blend(anchor: f64, target: f64, w: f64) -> f64 {
    (anchor + w * (target - anchor)).max(0.0)
}

/// Guided posterior from unconditional (or guide) and conditional posteriors.
///
/// Linear: `(1 − w)·p_u + w·p_c`, negatives clamped. Log: `p_c^w · p_u^(1−w)`
/// with a `1e-12` floor. Both are renormalized; `w = 0` and `w = 1` return the
/// endpoints unchanged.
pub fn guide_prob(p_uncond: &[f64], p_cond: &[f64], w: f64, blend: Blend) -> Categorical {
    debug_assert_eq!(p_uncond.len(), p_cond.len());
    if w == 1.0 {
        return p_cond.iter().copied().collect();
    }
    if w == 0.0 || p_uncond == p_cond {
        return p_uncond.iter().copied().collect();
    }
    let mut out: Categorical = p_uncond
        .iter()
        .zip(p_cond)
        .map(|(&u, &c)| match blend {
            Blend::Linear => linear_blend(u, c, w),
            Blend::Log => log_blend(u, c, w),
        })
        .collect();
    let total: f64 = out.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        log::warn!("degenerate guided distribution at w = {w}; using the conditional posterior");
        return p_cond.iter().copied().collect();
    }
    for v in out.iter_mut() {
        *v /= total;
    }
    out
}

/// Guided rate row; off-diagonals are blended, the diagonal recomputed.
pub fn guide_rate(r_uncond: &RateRow, r_cond: &RateRow, w: f64, blend: Blend) -> RateRow {
    debug_assert_eq!(r_uncond.state, r_cond.state);
    debug_assert_eq!(r_uncond.alphabet, r_cond.alphabet);
    if w == 1.0 {
        return r_cond.clone();
    }
    if w == 0.0 || r_uncond == r_cond {
        return r_uncond.clone();
    }
    let mut out = r_cond.clone();
    for k in 0..out.rates.len() {
        if k == out.state {
            continue;
        }
        let (u, c) = (r_uncond.rates[k], r_cond.rates[k]);
        out.rates[k] = match blend {
            Blend::Linear => linear_blend(u, c, w),
            Blend::Log => log_blend(u, c, w),
        };
    }
    out.conserve();
    out
}

/// Predictor (classifier) guidance: scales each off-diagonal by the
/// likelihood ratio `p(y | x̃) / p(y | x_t)` raised to `w`.
pub fn predictor_guide_rate(row: &RateRow, ratios: &[f64], w: f64) -> RateRow {
    debug_assert_eq!(ratios.len(), row.rates.len());
    let mut out = row.clone();
    for k in 0..out.rates.len() {
        if k == out.state || out.rates[k] == 0.0 {
            continue;
        }
        out.rates[k] *= ratios[k].max(LOG_FLOOR).powf(w);
    }
    out.conserve();
    out
}
