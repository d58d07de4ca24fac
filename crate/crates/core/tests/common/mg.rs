//! Fixture for the model-guidance gradient checks.

use guidelab::denoisers::gaussian_velocity;
use guidelab::denoisers::mg::{
    mg_loss_and_grad, modified_token_target, modified_velocity_target, tilted_probs, MgItem,
};
use guidelab::denoisers::{MgKey, MgParams, WeightClass};
use guidelab::flowcore::SlotLayout;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const D: usize = 12;
const T: f64 = 0.4;
const W: f64 = 1.6;

struct Fixture {
    layout: SlotLayout,
    x_t: Vec<f64>,
    var: Vec<f64>,
    raw_velocity: Vec<f64>,
    clean: Vec<usize>,
    masked: Vec<usize>,
    base_c: Vec<f64>,
    base_u: Vec<f64>,
}

fn normalized(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
    let z: f64 = v.iter().sum();
    v.iter().map(|x| x / z).collect()
}

fn fixture(seed: u64) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layout = SlotLayout::generic(vec![2, 3, 4, 3]);
    let mut base_c = Vec::new();
    let mut base_u = Vec::new();
    for s in 0..layout.len() {
        base_c.extend(normalized(&mut rng, layout.alphabet(s)));
        base_u.extend(normalized(&mut rng, layout.alphabet(s)));
    }
    Fixture {
        x_t: (0..D).map(|_| rng.random_range(-2.0..2.0)).collect(),
        var: (0..D).map(|_| rng.random_range(0.1..2.0)).collect(),
        raw_velocity: (0..D).map(|_| rng.random_range(-3.0..3.0)).collect(),
        clean: (0..layout.len()).map(|s| rng.random_range(0..layout.alphabet(s))).collect(),
        masked: vec![0, 2, 3],
        base_c,
        base_u,
        layout,
    }
}

fn random_params(rng: &mut ChaCha8Rng, cells: usize) -> MgParams {
    MgParams {
        mean: (0..D).map(|_| rng.random_range(-1.0..1.0)).collect(),
        logits: (0..cells).map(|_| rng.random_range(-0.5..0.5)).collect(),
    }
}

/// Training item whose guided targets come from the correction parameters
/// `(ec, eu)`.
fn item(f: &Fixture, ec: &MgParams, eu: &MgParams) -> MgItem {
    let mut uc = vec![0.0; D];
    let mut uu = vec![0.0; D];
    gaussian_velocity(&ec.mean, &f.var, &f.x_t, T, &mut uc);
    gaussian_velocity(&eu.mean, &f.var, &f.x_t, T, &mut uu);
    let target_velocity = (0..D)
        .map(|k| modified_velocity_target(f.raw_velocity[k], W, uc[k] - uu[k]))
        .collect();
    let cells = f.layout.cells();
    let mut base = vec![0.0; cells];
    let mut target_probs = vec![0.0; cells];
    for &s in &f.masked {
        let (off, k) = (f.layout.offset(s), f.layout.alphabet(s));
        base[off..off + k].copy_from_slice(&f.base_c[off..off + k]);
        let pc = tilted_probs(&f.base_c[off..off + k], &ec.logits[off..off + k]);
        let pu = tilted_probs(&f.base_u[off..off + k], &eu.logits[off..off + k]);
        target_probs[off..off + k].copy_from_slice(&modified_token_target(f.clean[s], W, &pc, &pu));
    }
    MgItem {
        key: MgKey { n: 2, bin: Some(0), class: WeightClass::of(W) },
        t: T,
        x_t: f.x_t.clone(),
        var: f.var.clone(),
        target_velocity,
        masked: f.masked.clone(),
        base,
        target_probs,
    }
}

fn get(p: &MgParams, i: usize) -> f64 {
    if i < p.mean.len() { p.mean[i] } else { p.logits[i - p.mean.len()] }
}

fn set(p: &mut MgParams, i: usize, v: f64) {
    let m = p.mean.len();
    if i < m { p.mean[i] = v } else { p.logits[i - m] = v }
}

fn central_difference(p: &MgParams, i: usize, loss: impl Fn(&MgParams) -> f64) -> f64 {
    let h = 1e-5;
    let x = get(p, i);
    let mut a = p.clone();
    set(&mut a, i, x + h);
    let mut b = p.clone();
    set(&mut b, i, x - h);
    (loss(&a) - loss(&b)) / (2.0 * h)
}

/// Analytic vs central-difference gradient on 20 coordinates; returns the
/// largest relative error.
pub fn gradient_check(seed: u64) -> Result<f64, String> {
    let f = fixture(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
    let cells = f.layout.cells();
    let (ec, eu, online) = (
        random_params(&mut rng, cells),
        random_params(&mut rng, cells),
        random_params(&mut rng, cells),
    );
    let it = item(&f, &ec, &eu);
    let (_, grad) = mg_loss_and_grad(&online, &it, &f.layout);
    let loss = |p: &MgParams| mg_loss_and_grad(p, &it, &f.layout).0;
    // every mean coordinate plus the logits of the masked slots
    let coords: Vec<usize> = (0..D)
        .chain(f.masked.iter().flat_map(|&s| {
            let off = D + f.layout.offset(s);
            off..off + f.layout.alphabet(s)
        }))
        .take(20)
        .collect();
    assert_eq!(coords.len(), 20);
    let mut worst = 0.0f64;
    for i in coords {
        let fd = central_difference(&online, i, loss);
        let an = get(&grad, i);
        let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-8);
        if rel >= 1e-5 {
            return Err(format!("seed {seed} coord {i}: analytic {an} fd {fd}"));
        }
        worst = worst.max(rel);
    }
    // revealed slots carry no logit gradient
    let off = f.layout.offset(1);
    if grad.logits[off..off + 3].iter().any(|&g| g != 0.0) {
        return Err("revealed slot has a logit gradient".into());
    }
    Ok(worst)
}

/// Trains against a correction computed from the online parameters
/// themselves. The analytic gradient must match the frozen-target
/// difference quotient and differ from the one taken through the target.
/// Returns the largest gap between the two difference quotients.
pub fn stop_gradient_check() -> Result<f64, String> {
    let f = fixture(7);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let cells = f.layout.cells();
    let online = random_params(&mut rng, cells);
    let eu = random_params(&mut rng, cells);
    let frozen = item(&f, &online, &eu);
    let (_, grad) = mg_loss_and_grad(&online, &frozen, &f.layout);
    let mut max_gap = 0.0f64;
    for i in 0..D + cells {
        let stopped = central_difference(&online, i, |p| mg_loss_and_grad(p, &frozen, &f.layout).0);
        let through = central_difference(&online, i, |p| mg_loss_and_grad(p, &item(&f, p, &eu), &f.layout).0);
        let an = get(&grad, i);
        if (an - stopped).abs() > 1e-5 * an.abs().max(stopped.abs()).max(1e-8) {
            return Err(format!("coord {i}: analytic {an} vs frozen-target {stopped}"));
        }
        max_gap = max_gap.max((through - stopped).abs());
    }
    if max_gap <= 1e-3 {
        return Err(format!("correction has no effect on the gradient (gap {max_gap})"));
    }
    Ok(max_gap)
}
