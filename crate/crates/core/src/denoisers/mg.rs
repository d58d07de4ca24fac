//! Model guidance: a tabular model trained against the guided target
//! `û = u + w · sg(û_EMA(c) − û_EMA(∅))` so sampling needs a single pass.
//!
//! Every key `(n, bin or ∅, weight class)` owns a position mean (velocities
//! use the frozen variances of the vanilla fit) and one logit offset per
//! token cell. Token posteriors are `softmax(ln p_emp + θ)` where `p_emp` is
//! the exact empirical posterior of the key's condition.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::gaussian::gaussian_velocity;
use super::{EmpiricalPosterior, GaussianVelocityModel, MatchTracker, ModelError};
use crate::ctmc::{Categorical, LOG_FLOOR};
use crate::flowcore::{molecule_tokens, SlotLayout, MASK};
use crate::toymol::Dataset;

/// Number of equal-width weight bins over `[1, 2]`.
pub const WEIGHT_BINS: u8 = 8;

/// Quantized guidance-weight embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum WeightClass {
    Zero,
    One,
    Bin(u8),
}

impl WeightClass {
    /// `0 → Zero`, `1 → One`, `(1, ∞) → Bin` (clamped to the last bin);
    /// weights in `(0, 1)` snap to the nearer of `Zero` and `One`.
    pub fn of(w: f64) -> Self {
        if w == 1.0 {
            WeightClass::One
        } else if w <= 0.0 {
            WeightClass::Zero
        } else if w < 1.0 {
            if w < 0.5 {
                WeightClass::Zero
            } else {
                WeightClass::One
            }
        } else {
            let j = ((w - 1.0) * WEIGHT_BINS as f64).floor() as i64;
            WeightClass::Bin(j.clamp(0, WEIGHT_BINS as i64 - 1) as u8)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MgKey {
    pub n: usize,
    pub bin: Option<usize>,
    pub class: WeightClass,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MgParams {
    pub mean: Vec<f64>,
    pub logits: Vec<f64>,
}

impl MgParams {
    pub fn len(&self) -> usize {
        self.mean.len() + self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat view used by the finite-difference checks.
    pub fn get(&self, i: usize) -> f64 {
        if i < self.mean.len() {
            self.mean[i]
        } else {
            self.logits[i - self.mean.len()]
        }
    }

    pub fn get_mut(&mut self, i: usize) -> &mut f64 {
        let m = self.mean.len();
        if i < m {
            &mut self.mean[i]
        } else {
            &mut self.logits[i - m]
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MgEntry {
    pub key: MgKey,
    pub online: MgParams,
    pub ema: MgParams,
    pub updates: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WeightSampler {
    Uniform { lo: f64, hi: f64 },
    Constant { w: f64 },
}

impl WeightSampler {
    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            WeightSampler::Uniform { lo, hi } => lo + (hi - lo) * rng.random::<f64>(),
            WeightSampler::Constant { w } => w,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MgConfig {
    pub epochs: usize,
    pub lr_mean: f64,
    pub lr_logits: f64,
    pub uncond_fraction: f64,
    pub guided_fraction: f64,
    pub w_sampler: WeightSampler,
    /// Steps before the guidance correction enters the target.
    pub warmup: u64,
    pub ema_decay: f64,
    pub divergence_factor: f64,
    pub seed: u64,
}

impl Default for MgConfig {
    fn default() -> Self {
        MgConfig {
            epochs: 2,
            lr_mean: 0.05,
            lr_logits: 0.1,
            uncond_fraction: 0.1,
            guided_fraction: 0.2,
            w_sampler: WeightSampler::Uniform { lo: 1.0, hi: 2.0 },
            warmup: 1000,
            ema_decay: 0.9999,
            divergence_factor: 10.0,
            seed: 0,
        }
    }
}

/// `u + w · Δ`: the guided regression target for positions.
pub fn modified_velocity_target(u_t: f64, w: f64, delta: f64) -> f64 {
    u_t + w * delta
}

/// `onehot + w · (p_c − p_∅)`, clamped at zero and renormalized.
pub fn modified_token_target(token: usize, w: f64, p_cond: &[f64], p_uncond: &[f64]) -> Categorical {
    let mut q: Categorical = p_cond
        .iter()
        .zip(p_uncond)
        .enumerate()
        .map(|(a, (c, u))| {
            let one = if a == token { 1.0 } else { 0.0 };
            (one + w * (c - u)).max(0.0)
        })
        .collect();
    let z: f64 = q.iter().sum();
    if z > 0.0 {
        q.iter_mut().for_each(|v| *v /= z);
    } else {
        q.iter_mut().enumerate().for_each(|(a, v)| *v = (a == token) as u8 as f64);
    }
    q
}

/// `softmax(ln max(p, 1e-12) + θ)`
pub fn tilted_probs(base: &[f64], theta: &[f64]) -> Categorical {
    let logits: Categorical = base
        .iter()
        .zip(theta)
        .map(|(p, th)| p.max(LOG_FLOOR).ln() + th)
        .collect();
    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Categorical = logits.iter().map(|l| (l - mx).exp()).collect();
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= z);
    out
}

/// One fully specified training example: the noisy state, the empirical
/// posterior of the key's condition, and the (already stop-gradiented) target.
#[derive(Clone, Debug)]
pub struct MgItem {
    pub key: MgKey,
    pub t: f64,
    pub x_t: Vec<f64>,
    pub var: Vec<f64>,
    pub target_velocity: Vec<f64>,
    pub masked: Vec<usize>,
    /// Empirical posterior per cell of the key's condition (masked slots only).
    pub base: Vec<f64>,
    /// Target distribution per cell (masked slots only).
    pub target_probs: Vec<f64>,
}

/// Loss and gradient w.r.t. the online parameters. The target is treated as
/// a constant, which is where the stop-gradient lives.
pub fn mg_loss_and_grad(params: &MgParams, item: &MgItem, layout: &SlotLayout) -> (f64, MgParams) {
    let d = item.x_t.len();
    let mut u = vec![0.0; d];
    gaussian_velocity(&params.mean, &item.var, &item.x_t, item.t, &mut u);
    let (a, b) = (1.0 - item.t, item.t);
    let mut loss = 0.0;
    let mut grad = MgParams {
        mean: vec![0.0; d],
        logits: vec![0.0; params.logits.len()],
    };
    for k in 0..d {
        let r = u[k] - item.target_velocity[k];
        loss += 0.5 * r * r / d as f64;
        let v = a * a + b * b * item.var[k];
        grad.mean[k] = r * (a / v) / d as f64;
    }
    let slots = layout.len() as f64;
    for &s in &item.masked {
        let (off, k) = (layout.offset(s), layout.alphabet(s));
        let p = tilted_probs(&item.base[off..off + k], &params.logits[off..off + k]);
        for a in 0..k {
            let q = item.target_probs[off + a];
            if q > 0.0 {
                loss -= q * p[a].ln() / slots;
            }
            grad.logits[off + a] = (p[a] - q) / slots;
        }
    }
    (loss, grad)
}

/// Largest value of `(a / v)²` over `t ∈ [0, 1]` for variance `s`.
fn curvature_cap(s: f64) -> f64 {
    let a = (s / (1.0 + s)).sqrt();
    let g = a / (a * a + (1.0 - a) * (1.0 - a) * s);
    (g * g).max(1.0)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MgModel {
    pub config: MgConfig,
    pub entries: Vec<MgEntry>,
    #[serde(skip)]
    index: HashMap<MgKey, usize>,
}

impl PartialEq for MgModel {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.entries == other.entries
    }
}

impl MgModel {
    pub fn new(config: MgConfig) -> Self {
        MgModel {
            config,
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Rebuilds the key index after deserialization.
    pub fn reindex(&mut self) {
        self.index = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| (e.key, i))
            .collect();
    }

    pub fn entry(&self, key: &MgKey) -> Option<&MgEntry> {
        self.index.get(key).map(|&i| &self.entries[i])
    }

    fn ensure(&mut self, key: MgKey, vel: &GaussianVelocityModel) -> Result<usize, ModelError> {
        if let Some(&i) = self.index.get(&key) {
            return Ok(i);
        }
        let fit = vel.resolve(key.n, key.bin)?;
        let cells = SlotLayout::molecule(key.n).cells();
        let params = MgParams {
            mean: fit.mean.clone(),
            logits: vec![0.0; cells],
        };
        self.entries.push(MgEntry {
            key,
            online: params.clone(),
            ema: params,
            updates: 0,
        });
        let i = self.entries.len() - 1;
        self.index.insert(key, i);
        Ok(i)
    }

    /// EMA parameters for sampling: exact key, then the same condition at
    /// weight one, then the untrained initialization.
    pub fn sampling_params(
        &self,
        key: &MgKey,
        vel: &GaussianVelocityModel,
    ) -> Result<MgParams, ModelError> {
        let fallback = MgKey {
            class: WeightClass::One,
            ..*key
        };
        if let Some(e) = self.entry(key).or_else(|| self.entry(&fallback)) {
            return Ok(e.ema.clone());
        }
        let fit = vel.resolve(key.n, key.bin)?;
        Ok(MgParams {
            mean: fit.mean.clone(),
            logits: vec![0.0; SlotLayout::molecule(key.n).cells()],
        })
    }

    fn ema_update(&mut self, i: usize) {
        let e = &mut self.entries[i];
        let k = e.updates as f64;
        let d = self.config.ema_decay.min((1.0 + k) / (10.0 + k));
        for (s, o) in e.ema.mean.iter_mut().zip(&e.online.mean) {
            *s = d * *s + (1.0 - d) * o;
        }
        for (s, o) in e.ema.logits.iter_mut().zip(&e.online.logits) {
            *s = d * *s + (1.0 - d) * o;
        }
        e.updates += 1;
    }

    /// Applies one preconditioned gradient step to a key and refreshes its EMA.
    pub fn apply(&mut self, key: &MgKey, grad: &MgParams, var: &[f64], slots: usize) {
        let i = self.index[key];
        let (lr_m, lr_l) = (self.config.lr_mean, self.config.lr_logits);
        let e = &mut self.entries[i];
        let d = e.online.mean.len() as f64;
        for ((m, g), s) in e.online.mean.iter_mut().zip(&grad.mean).zip(var) {
            *m -= lr_m * g * d / curvature_cap(*s);
        }
        for (th, g) in e.online.logits.iter_mut().zip(&grad.logits) {
            *th -= lr_l * g * slots as f64;
        }
        self.ema_update(i);
    }
}

struct Draw {
    key: MgKey,
    coef: f64,
}

/// Trains the model-guidance tables on `ds` by single-example SGD.
pub fn train_mg(
    ds: &Dataset,
    vel: &GaussianVelocityModel,
    post: &EmpiricalPosterior,
    config: MgConfig,
) -> Result<MgModel, ModelError> {
    if ds.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let mut model = MgModel::new(config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let mut step: u64 = 0;
    let window = 200usize;
    let mut initial: Option<f64> = None;
    let mut acc = 0.0;
    let mut seen = 0usize;
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let mol = &ds.molecules()[i];
            let n = mol.n_atoms();
            let bin = ds.bin_index()[i];
            let u: f64 = rng.random();
            let draw = if u < config.uncond_fraction {
                Draw {
                    key: MgKey { n, bin: None, class: WeightClass::Zero },
                    coef: 0.0,
                }
            } else if u < config.uncond_fraction + config.guided_fraction {
                let w = config.w_sampler.draw(&mut rng);
                Draw {
                    key: MgKey { n, bin: Some(bin), class: WeightClass::of(w) },
                    coef: if step >= config.warmup { w } else { 0.0 },
                }
            } else {
                Draw {
                    key: MgKey { n, bin: Some(bin), class: WeightClass::One },
                    coef: 0.0,
                }
            };
            let t: f64 = rng.random();
            let x1 = mol.flat_positions();
            let x0: Vec<f64> = (0..x1.len()).map(|_| rng.sample(StandardNormal)).collect();
            let clean = molecule_tokens(mol);
            let toks: Vec<u8> = clean
                .iter()
                .map(|&c| if rng.random::<f64>() < t { c } else { MASK })
                .collect();
            let mut tracker = post.tracker(n, Some(bin))?;
            tracker.observe(&toks);
            let item = build_item(&mut model, vel, &tracker, &draw, t, &x0, &x1, &toks, &clean)?;
            let layout = tracker.layout().clone();
            let idx = model.ensure(draw.key, vel)?;
            let (loss, grad) = mg_loss_and_grad(&model.entries[idx].online, &item, &layout);
            model.apply(&draw.key, &grad, &item.var, layout.len());
            step += 1;
            acc += loss;
            seen += 1;
            if seen == window {
                let mean = acc / window as f64;
                match initial {
                    None => initial = Some(mean),
                    Some(l0) if mean > config.divergence_factor * l0 => {
                        return Err(ModelError::Diverged { step, loss: mean, initial: l0 });
                    }
                    _ => {}
                }
                acc = 0.0;
                seen = 0;
            }
        }
    }
    Ok(model)
}

#[allow(clippy::too_many_arguments)]
fn build_item(
    model: &mut MgModel,
    vel: &GaussianVelocityModel,
    tracker: &MatchTracker<'_>,
    draw: &Draw,
    t: f64,
    x0: &[f64],
    x1: &[f64],
    toks: &[u8],
    clean: &[u8],
) -> Result<MgItem, ModelError> {
    let key = draw.key;
    let n = key.n;
    let layout = tracker.layout();
    let var = vel.resolve(n, key.bin)?.var.clone();
    let x_t: Vec<f64> = x0.iter().zip(x1).map(|(a, b)| (1.0 - t) * a + t * b).collect();
    let mut target_velocity: Vec<f64> = x1.iter().zip(x0).map(|(a, b)| a - b).collect();
    let masked: Vec<usize> = (0..toks.len()).filter(|&s| toks[s] == MASK).collect();
    let conditional = key.bin.is_some();
    let mut base = vec![0.0; layout.cells()];
    let mut target_probs = vec![0.0; layout.cells()];
    for &s in &masked {
        let off = layout.offset(s);
        let p = tracker.posterior(s, conditional);
        base[off..off + p.len()].copy_from_slice(&p);
        target_probs[off + clean[s] as usize] = 1.0;
    }
    if draw.coef != 0.0 {
        let bin = key.bin.expect("guided examples are conditional");
        let kc = MgKey { n, bin: Some(bin), class: WeightClass::One };
        let ku = MgKey { n, bin: None, class: WeightClass::Zero };
        let ic = model.ensure(kc, vel)?;
        let iu = model.ensure(ku, vel)?;
        let (ec, eu) = (&model.entries[ic].ema, &model.entries[iu].ema);
        let mut uc = vec![0.0; x_t.len()];
        let mut uu = vec![0.0; x_t.len()];
        gaussian_velocity(&ec.mean, &vel.resolve(n, Some(bin))?.var, &x_t, t, &mut uc);
        gaussian_velocity(&eu.mean, &vel.resolve(n, None)?.var, &x_t, t, &mut uu);
        for (k, tv) in target_velocity.iter_mut().enumerate() {
            *tv = modified_velocity_target(*tv, draw.coef, uc[k] - uu[k]);
        }
        for &s in &masked {
            let (off, k) = (layout.offset(s), layout.alphabet(s));
            let pc = tilted_probs(&tracker.posterior(s, true), &ec.logits[off..off + k]);
            let pu = tilted_probs(&tracker.posterior(s, false), &eu.logits[off..off + k]);
            let q = modified_token_target(clean[s] as usize, draw.coef, &pc, &pu);
            target_probs[off..off + k].copy_from_slice(&q);
        }
    }
    Ok(MgItem {
        key,
        t,
        x_t,
        var,
        target_velocity,
        masked,
        base,
        target_probs,
    })
}
