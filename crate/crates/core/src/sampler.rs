//! The hybrid guided sampling loop: Euler integration of positions and
//! Euler CTMC stepping of atom types, charges and bonds, under vanilla,
//! classifier-free, auto- or model guidance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ctmc::{
    self, guide_prob, guide_rate, predictor_guide_rate, rate_from_posterior, Blend, Categorical,
    RateRow, Stochasticity,
};
use crate::denoisers::mg::tilted_probs;
use crate::denoisers::{
    gaussian_velocity, EmpiricalPosterior, GuideModelSpec, MatchTracker, MgKey, ModelError,
    ModelSet, WeightClass,
};
use crate::flowcore::{decode_molecule_tokens, Modality, SlotLayout, TimeGrid, MASK};
use crate::toymol::{Dataset, MoleculeError, ToyMolecule};

#[derive(Debug, Error, PartialEq)]
pub enum SampleError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Molecule(#[from] MoleculeError),
    #[error("invalid guidance spec: {0}")]
    InvalidSpec(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Vanilla,
    Cfg,
    Ag,
    Mg,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Vanilla, Method::Cfg, Method::Ag, Method::Mg];

    /// Denoiser evaluations per integration step.
    pub fn forward_passes(self) -> u32 {
        match self {
            Method::Vanilla | Method::Mg => 1,
            Method::Cfg | Method::Ag => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Vanilla => "vanilla",
            Method::Cfg => "cfg",
            Method::Ag => "ag",
            Method::Mg => "mg",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscreteFormat {
    LinearProb,
    LogProb,
    LinearRate,
    LogRate,
}

impl DiscreteFormat {
    pub const ALL: [DiscreteFormat; 4] = [
        DiscreteFormat::LinearProb,
        DiscreteFormat::LogProb,
        DiscreteFormat::LinearRate,
        DiscreteFormat::LogRate,
    ];

    pub fn blend(self) -> Blend {
        match self {
            DiscreteFormat::LinearProb | DiscreteFormat::LinearRate => Blend::Linear,
            DiscreteFormat::LogProb | DiscreteFormat::LogRate => Blend::Log,
        }
    }

    pub fn on_rates(self) -> bool {
        matches!(self, DiscreteFormat::LinearRate | DiscreteFormat::LogRate)
    }

    pub fn name(self) -> &'static str {
        match self {
            DiscreteFormat::LinearProb => "linear_prob",
            DiscreteFormat::LogProb => "log_prob",
            DiscreteFormat::LinearRate => "linear_rate",
            DiscreteFormat::LogRate => "log_rate",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Weights {
    /// Continuous `w1`, one discrete `w2` shared by all token modalities.
    Two { w1: f64, w2: f64 },
    Four {
        positions: f64,
        atoms: f64,
        charges: f64,
        bonds: f64,
    },
}

impl Weights {
    pub fn continuous(&self) -> f64 {
        match *self {
            Weights::Two { w1, .. } => w1,
            Weights::Four { positions, .. } => positions,
        }
    }

    pub fn discrete(&self, m: Modality) -> f64 {
        match *self {
            Weights::Two { w2, .. } => w2,
            Weights::Four {
                atoms,
                charges,
                bonds,
                ..
            } => match m {
                Modality::AtomTypes => atoms,
                Modality::Charges => charges,
                Modality::Bonds => bonds,
            },
        }
    }

    pub fn as_vec(&self) -> Vec<f64> {
        match *self {
            Weights::Two { w1, w2 } => vec![w1, w2],
            Weights::Four {
                positions,
                atoms,
                charges,
                bonds,
            } => vec![positions, atoms, charges, bonds],
        }
    }

    pub fn from_slice(w: &[f64]) -> Option<Self> {
        match *w {
            [w1, w2] => Some(Weights::Two { w1, w2 }),
            [positions, atoms, charges, bonds] => Some(Weights::Four {
                positions,
                atoms,
                charges,
                bonds,
            }),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceSpec {
    pub method: Method,
    pub format: DiscreteFormat,
    pub weights: Weights,
    /// The guide the autoguidance models were built with, if pinned.
    #[serde(default)]
    pub ag_guide: Option<GuideModelSpec>,
    /// Weight embedded in the model-guidance key.
    #[serde(default = "one")]
    pub mg_weight: f64,
}

fn one() -> f64 {
    1.0
}

impl GuidanceSpec {
    pub fn vanilla() -> Self {
        GuidanceSpec {
            method: Method::Vanilla,
            format: DiscreteFormat::LogProb,
            weights: Weights::Two { w1: 1.0, w2: 1.0 },
            ag_guide: None,
            mg_weight: 1.0,
        }
    }

    pub fn cfg(format: DiscreteFormat, w1: f64, w2: f64) -> Self {
        GuidanceSpec {
            method: Method::Cfg,
            format,
            weights: Weights::Two { w1, w2 },
            ..Self::vanilla()
        }
    }

    pub fn ag(format: DiscreteFormat, w1: f64, w2: f64) -> Self {
        GuidanceSpec {
            method: Method::Ag,
            ..Self::cfg(format, w1, w2)
        }
    }

    pub fn mg(weight: f64) -> Self {
        GuidanceSpec {
            method: Method::Mg,
            mg_weight: weight,
            ..Self::vanilla()
        }
    }

    pub fn validate(&self) -> Result<(), SampleError> {
        let mut ws = self.weights.as_vec();
        ws.push(self.mg_weight);
        if ws.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(SampleError::InvalidSpec(format!(
                "weights must be finite and >= 0, got {ws:?}"
            )));
        }
        Ok(())
    }

    /// Stable short hash of the serialized spec.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("spec serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConditionMode {
    /// Draw `(n, c)` from the dataset's joint table.
    Joint,
    /// Fixed target value; `n` is drawn given its bin.
    Target { value: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleRequest {
    pub count: usize,
    pub grid: TimeGrid,
    pub seed: u64,
    pub condition: ConditionMode,
    pub eta: Stochasticity,
}

impl SampleRequest {
    pub fn new(count: usize, seed: u64) -> Self {
        SampleRequest {
            count,
            grid: TimeGrid::default(),
            seed,
            condition: ConditionMode::Joint,
            eta: Stochasticity::NONE,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub molecule: ToyMolecule,
    pub target: f64,
    pub bin: usize,
}

/// Velocity under the spec's continuous rule at key `(n, bin)`.
pub fn guided_velocity(
    spec: &GuidanceSpec,
    models: &ModelSet,
    x: &[f64],
    t: f64,
    n: usize,
    bin: usize,
) -> Result<Vec<f64>, SampleError> {
    if !(0.0..1.0).contains(&t) {
        return Err(ModelError::TimeOutOfRange(t).into());
    }
    let cond = Some(bin);
    let w = spec.weights.continuous();
    let vel = |m: &crate::denoisers::GaussianVelocityModel, key| m.velocity(n, key, x, t);
    Ok(match spec.method {
        Method::Vanilla => vel(&models.velocity, cond)?,
        Method::Cfg if w == 1.0 => vel(&models.velocity, cond)?,
        Method::Cfg if w == 0.0 => vel(&models.velocity, None)?,
        Method::Cfg => blend_velocity(&vel(&models.velocity, None)?, &vel(&models.velocity, cond)?, w),
        Method::Ag if w == 1.0 => vel(&models.velocity, cond)?,
        Method::Ag if w == 0.0 => vel(&models.guide_velocity, cond)?,
        Method::Ag => blend_velocity(
            &vel(&models.guide_velocity, cond)?,
            &vel(&models.velocity, cond)?,
            w,
        ),
        Method::Mg => {
            let mg = models
                .mg
                .as_ref()
                .ok_or_else(|| SampleError::InvalidSpec("no model-guidance tables fitted".into()))?;
            let key = MgKey {
                n,
                bin: cond,
                class: WeightClass::of(spec.mg_weight),
            };
            let params = mg.sampling_params(&key, &models.velocity)?;
            let var = &models.velocity.resolve(n, cond)?.var;
            let mut out = vec![0.0; x.len()];
            gaussian_velocity(&params.mean, var, x, t, &mut out);
            out
        }
    })
}

/// `anchor + w · (target − anchor)`
fn blend_velocity(anchor: &[f64], target: &[f64], w: f64) -> Vec<f64> {
    anchor
        .iter()
        .zip(target)
        .map(|(a, c)| a + w * (c - a))
        .collect()
}

/// How the discrete posteriors are combined.
#[derive(Clone, Debug, PartialEq)]
pub enum DiscreteRule {
    Conditional,
    Unconditional,
    /// Unconditional anchor, conditional target.
    Cfg(DiscreteFormat),
    /// Guide anchor, main conditional target.
    Ag(DiscreteFormat),
    /// Conditional posterior tilted by per-cell logits.
    Tilted(Vec<f64>),
    /// Unconditional rates reweighted by the exact classifier ratios.
    Predictor,
}

/// Per-trajectory discrete state machine: match trackers plus the guidance rule.
pub struct DiscreteGuide<'a> {
    main: MatchTracker<'a>,
    guide: Option<MatchTracker<'a>>,
    rule: DiscreteRule,
    slot_weights: Vec<f64>,
    next: Vec<u8>,
}

impl<'a> DiscreteGuide<'a> {
    pub fn new(
        main: &'a EmpiricalPosterior,
        guide: Option<&'a EmpiricalPosterior>,
        key: usize,
        bin: Option<usize>,
        rule: DiscreteRule,
        slot_weights: Vec<f64>,
    ) -> Result<Self, ModelError> {
        let main = main.tracker(key, bin)?;
        let guide = match (&rule, guide) {
            (DiscreteRule::Ag(_), Some(g)) => Some(g.tracker(key, bin)?),
            (DiscreteRule::Ag(_), None) => {
                return Err(ModelError::InvalidSpec("autoguidance needs a guide".into()))
            }
            _ => None,
        };
        assert_eq!(slot_weights.len(), main.layout().len());
        Ok(DiscreteGuide {
            main,
            guide,
            rule,
            slot_weights,
            next: Vec::new(),
        })
    }

    pub fn layout(&self) -> &SlotLayout {
        self.main.layout()
    }

    fn observe(&mut self, tokens: &[u8]) {
        self.main.observe(tokens);
        if let Some(g) = self.guide.as_mut() {
            g.observe(tokens);
        }
    }

    /// (anchor, target) posteriors for a blended rule.
    fn pair(&self, slot: usize) -> (Categorical, Categorical) {
        match self.rule {
            DiscreteRule::Ag(_) => (
                self.guide.as_ref().expect("guide tracker").posterior(slot, true),
                self.main.posterior(slot, true),
            ),
            _ => (self.main.posterior(slot, false), self.main.posterior(slot, true)),
        }
    }

    /// Guided rate row of `slot` in state `tok` at time `t`.
    pub fn row(&self, slot: usize, tok: u8, t: f64, eta: Stochasticity) -> Result<RateRow, ModelError> {
        let rate = |p: &[f64]| {
            rate_from_posterior(p, tok, t, eta).map_err(|_| ModelError::TimeOutOfRange(t))
        };
        let w = self.slot_weights[slot];
        match &self.rule {
            DiscreteRule::Conditional => rate(&self.main.posterior(slot, true)),
            DiscreteRule::Unconditional => rate(&self.main.posterior(slot, false)),
            DiscreteRule::Tilted(theta) => {
                let (off, k) = (self.layout().offset(slot), self.layout().alphabet(slot));
                rate(&tilted_probs(&self.main.posterior(slot, true), &theta[off..off + k]))
            }
            DiscreteRule::Predictor => {
                let row = rate(&self.main.posterior(slot, false))?;
                if tok != MASK {
                    return Ok(row);
                }
                Ok(predictor_guide_rate(&row, &self.main.likelihood_ratios(slot), w))
            }
            DiscreteRule::Cfg(f) | DiscreteRule::Ag(f) => {
                let (anchor, target) = self.pair(slot);
                if f.on_rates() {
                    Ok(guide_rate(&rate(&anchor)?, &rate(&target)?, w, f.blend()))
                } else {
                    rate(&guide_prob(&anchor, &target, w, f.blend()))
                }
            }
        }
    }

    /// Guided distribution over clean tokens, used for the terminal fill.
    pub fn probs(&self, slot: usize, t: f64) -> Result<Categorical, ModelError> {
        let w = self.slot_weights[slot];
        Ok(match &self.rule {
            DiscreteRule::Conditional => self.main.posterior(slot, true),
            DiscreteRule::Unconditional => self.main.posterior(slot, false),
            DiscreteRule::Tilted(theta) => {
                let (off, k) = (self.layout().offset(slot), self.layout().alphabet(slot));
                tilted_probs(&self.main.posterior(slot, true), &theta[off..off + k])
            }
            DiscreteRule::Cfg(f) | DiscreteRule::Ag(f) if !f.on_rates() => {
                let (anchor, target) = self.pair(slot);
                guide_prob(&anchor, &target, w, f.blend())
            }
            _ => {
                let row = self.row(slot, MASK, t, Stochasticity::NONE)?;
                let k = self.layout().alphabet(slot);
                let off: Categorical = row.entries()[..k].iter().copied().collect();
                let z: f64 = off.iter().sum();
                if z > 0.0 {
                    off.iter().map(|v| v / z).collect()
                } else {
                    self.main.posterior(slot, true)
                }
            }
        })
    }

    /// One Jacobi step: every slot reads the state at step start.
    pub fn step<R: Rng + ?Sized>(
        &mut self,
        tokens: &mut [u8],
        t: f64,
        dt: f64,
        eta: Stochasticity,
        rng: &mut R,
    ) -> Result<(), ModelError> {
        self.observe(tokens);
        self.next.clear();
        self.next.extend_from_slice(tokens);
        for slot in 0..tokens.len() {
            let tok = tokens[slot];
            if tok != MASK && eta.value() == 0.0 {
                continue;
            }
            let row = self.row(slot, tok, t, eta)?;
            self.next[slot] = ctmc::step(&row, dt, rng);
        }
        tokens.copy_from_slice(&self.next);
        Ok(())
    }

    /// Replaces residual masks by the argmax of the final guided distribution.
    pub fn fill(&mut self, tokens: &mut [u8], t: f64) -> Result<(), ModelError> {
        self.observe(tokens);
        for slot in 0..tokens.len() {
            if tokens[slot] == MASK {
                let p = self.probs(slot, t)?;
                let best = (0..p.len())
                    .fold(0, |b, a| if p[a] > p[b] { a } else { b });
                tokens[slot] = best as u8;
            }
        }
        Ok(())
    }

    /// Runs the whole grid from the all-masked state, optionally stopping
    /// after `stop_after` steps (no terminal fill in that case).
    pub fn run<R: Rng + ?Sized>(
        &mut self,
        grid: &TimeGrid,
        eta: Stochasticity,
        stop_after: Option<usize>,
        rng: &mut R,
    ) -> Result<Vec<u8>, ModelError> {
        let mut tokens = vec![MASK; self.layout().len()];
        let steps = stop_after.unwrap_or(grid.steps()).min(grid.steps());
        for k in 0..steps {
            self.step(&mut tokens, grid.time(k), grid.dt(), eta, rng)?;
        }
        if stop_after.is_none() {
            self.fill(&mut tokens, grid.time(grid.steps() - 1))?;
        }
        Ok(tokens)
    }
}

/// Per-molecule random stream derived from `(seed, index)`.
pub fn molecule_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Property values of every dataset molecule grouped by `(n, bin)`.
struct TargetTable {
    cells: std::collections::HashMap<(usize, usize), Vec<f64>>,
}

impl TargetTable {
    fn new(ds: &Dataset) -> Self {
        let mut cells: std::collections::HashMap<(usize, usize), Vec<f64>> = Default::default();
        for ((m, &c), &b) in ds.molecules().iter().zip(ds.properties()).zip(ds.bin_index()) {
            cells.entry((m.n_atoms(), b)).or_default().push(c);
        }
        TargetTable { cells }
    }

    fn draw<R: Rng + ?Sized>(&self, ds: &Dataset, mode: ConditionMode, rng: &mut R) -> (usize, usize, f64) {
        match mode {
            ConditionMode::Joint => {
                let (n, b) = ds.joint().sample_cell(rng);
                let vals = &self.cells[&(n, b)];
                (n, b, vals[rng.random_range(0..vals.len())])
            }
            ConditionMode::Target { value } => {
                let b = ds.bins().bin_of(value);
                let n = ds.joint().sample_n_given_bin(b, rng);
                (n, b, value)
            }
        }
    }
}

fn discrete_rule(spec: &GuidanceSpec, models: &ModelSet, n: usize, bin: usize) -> Result<DiscreteRule, SampleError> {
    Ok(match spec.method {
        Method::Vanilla => DiscreteRule::Conditional,
        Method::Cfg => DiscreteRule::Cfg(spec.format),
        Method::Ag => DiscreteRule::Ag(spec.format),
        Method::Mg => {
            let mg = models
                .mg
                .as_ref()
                .ok_or_else(|| SampleError::InvalidSpec("no model-guidance tables fitted".into()))?;
            let key = MgKey {
                n,
                bin: Some(bin),
                class: WeightClass::of(spec.mg_weight),
            };
            DiscreteRule::Tilted(mg.sampling_params(&key, &models.velocity)?.logits)
        }
    })
}

/// Samples one molecule with its own random stream.
pub fn sample_one(
    spec: &GuidanceSpec,
    models: &ModelSet,
    ds: &Dataset,
    req: &SampleRequest,
    index: u64,
) -> Result<Sample, SampleError> {
    sample_one_with(spec, models, ds, &TargetTable::new(ds), req, index)
}

fn sample_one_with(
    spec: &GuidanceSpec,
    models: &ModelSet,
    ds: &Dataset,
    targets: &TargetTable,
    req: &SampleRequest,
    index: u64,
) -> Result<Sample, SampleError> {
    let mut rng = molecule_rng(req.seed, index);
    let (n, bin, target) = targets.draw(ds, req.condition, &mut rng);
    let dim = 3 * n;
    let mut x: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    project_centered(&mut x);
    let layout = SlotLayout::molecule(n);
    let slot_weights: Vec<f64> = (0..layout.len())
        .map(|s| spec.weights.discrete(layout.modality_of(s).expect("molecule layout")))
        .collect();
    let rule = discrete_rule(spec, models, n, bin)?;
    let mut disc = DiscreteGuide::new(
        &models.posterior,
        Some(&models.guide_posterior),
        n,
        Some(bin),
        rule,
        slot_weights,
    )?;
    let mut tokens = vec![MASK; layout.len()];
    let grid = req.grid;
    let dt = grid.dt();
    for k in 0..grid.steps() {
        let t = grid.time(k);
        let mut u = guided_velocity(spec, models, &x, t, n, bin)?;
        project_centered(&mut u);
        disc.step(&mut tokens, t, dt, req.eta, &mut rng)?;
        for (xi, ui) in x.iter_mut().zip(&u) {
            *xi += ui * dt;
        }
    }
    disc.fill(&mut tokens, grid.time(grid.steps() - 1))?;
    let (types, charges, bonds) = decode_molecule_tokens(n, &tokens);
    let positions: Vec<[f64; 3]> = x.chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
    let molecule = ToyMolecule::new(types, charges, bonds, positions)?;
    Ok(Sample {
        molecule,
        target,
        bin,
    })
}

/// Removes the per-axis mean of a flat `[x, y, z, x, y, z, …]` vector.
fn project_centered(v: &mut [f64]) {
    let n = v.len() / 3;
    for axis in 0..3 {
        let mean = (0..n).map(|i| v[3 * i + axis]).sum::<f64>() / n as f64;
        for i in 0..n {
            v[3 * i + axis] -= mean;
        }
    }
}

/// Samples `req.count` molecules; molecule `i` uses stream `i` of `req.seed`.
pub fn sample(
    spec: &GuidanceSpec,
    models: &ModelSet,
    ds: &Dataset,
    req: &SampleRequest,
) -> Result<Vec<Sample>, SampleError> {
    spec.validate()?;
    if let (Method::Ag, Some(g)) = (spec.method, spec.ag_guide) {
        if g != models.guide_spec {
            return Err(SampleError::InvalidSpec(
                "autoguidance guide differs from the fitted guide".into(),
            ));
        }
    }
    let targets = TargetTable::new(ds);
    (0..req.count as u64)
        .into_par_iter()
        .map(|i| sample_one_with(spec, models, ds, &targets, req, i))
        .collect()
}
