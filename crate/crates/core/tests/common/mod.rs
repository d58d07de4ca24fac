//! Shared fixtures for the integration tests.
#![allow(dead_code)]

pub mod mg;

use guidelab::denoisers::{EmpiricalPosterior, Stratum};
use guidelab::ctmc::Stochasticity;
use guidelab::flowcore::{SlotLayout, TimeGrid, MASK};
use guidelab::sampler::{molecule_rng, DiscreteGuide, DiscreteRule};

/// Data distribution over the eight sequences of three binary slots,
/// indexed by `4·x0 + 2·x1 + x2`.
pub const P_DATA: [f64; 8] = [0.30, 0.05, 0.10, 0.15, 0.02, 0.08, 0.20, 0.10];
/// `p(y = 0 | x)` for the same sequences.
pub const P_Y0: [f64; 8] = [0.9, 0.2, 0.5, 0.1, 0.7, 0.6, 0.3, 0.8];

pub const KEY: usize = 3;

pub fn seq(i: usize) -> Vec<u8> {
    vec![(i >> 2 & 1) as u8, (i >> 1 & 1) as u8, (i & 1) as u8]
}

pub fn index(toks: &[u8]) -> usize {
    toks.iter().fold(0, |acc, &t| 2 * acc + t as usize)
}

/// Exact posterior system: every sequence appears once per label, weighted
/// by its joint probability.
pub fn binary_system() -> EmpiricalPosterior {
    let mut rows = Vec::new();
    let mut weights = Vec::new();
    let mut bins = Vec::new();
    for i in 0..8 {
        for (b, py) in [(0, P_Y0[i]), (1, 1.0 - P_Y0[i])] {
            rows.push(seq(i));
            weights.push(P_DATA[i] * py);
            bins.push(b);
        }
    }
    let s = Stratum::new(KEY, SlotLayout::generic(vec![2, 2, 2]), &rows, &weights, &bins, 2);
    EmpiricalPosterior::new(vec![s], 0.0)
}

/// `p(x | y = 0)` by Bayes' rule.
pub fn conditional_y0() -> Vec<f64> {
    let joint: Vec<f64> = (0..8).map(|i| P_DATA[i] * P_Y0[i]).collect();
    let z: f64 = joint.iter().sum();
    joint.iter().map(|v| v / z).collect()
}

/// `count` trajectories of the binary system under `rule`, optionally stopped
/// after `stop` of `steps` Euler steps.
pub fn run_many(
    rule: DiscreteRule,
    bin: Option<usize>,
    steps: usize,
    stop: Option<usize>,
    count: usize,
    seed: u64,
) -> Vec<Vec<u8>> {
    let post = binary_system();
    let grid = TimeGrid::new(steps).unwrap();
    (0..count)
        .map(|i| {
            let mut g = DiscreteGuide::new(&post, None, KEY, bin, rule.clone(), vec![1.0; 3]).unwrap();
            g.run(&grid, Stochasticity::NONE, stop, &mut molecule_rng(seed, i as u64)).unwrap()
        })
        .collect()
}

pub fn tv(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

pub fn histogram(samples: &[Vec<u8>]) -> Vec<f64> {
    let mut h = vec![0.0; 8];
    for s in samples {
        h[index(s)] += 1.0;
    }
    h.iter().map(|c| c / samples.len() as f64).collect()
}

/// Per-slot distribution over `{0, 1, M}`.
pub fn slot_marginals(samples: &[Vec<u8>], slot: usize) -> [f64; 3] {
    let mut h = [0.0; 3];
    for s in samples {
        let k = if s[slot] == MASK { 2 } else { s[slot] as usize };
        h[k] += 1.0;
    }
    h.map(|c| c / samples.len() as f64)
}

/// Exact `t·p_data(slot) + (1 − t)·δ_M`.
pub fn masked_marginal(slot: usize, t: f64) -> [f64; 3] {
    let one: f64 = (0..8).filter(|&i| seq(i)[slot] == 1).map(|i| P_DATA[i]).sum();
    [t * (1.0 - one), t * one, 1.0 - t]
}

use std::path::Path;
use std::process::{Command, Output};

/// Small but complete configuration for end-to-end CLI runs.
pub const SMALL_CONFIG: &str = r#"{
  "dataset": {"seed": 3, "count": 1500},
  "sampling": {"steps": 20, "count": 60, "seed": 5},
  "tune": {"n_initial": 3, "n_iterations": 2, "eval_count": 40, "seed": 2},
  "benchmark": {"steps": [10, 20]}
}"#;

pub fn guidelab(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_guidelab"))
        .args(args)
        .arg("--out")
        .arg(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

/// Every subcommand once, in pipeline order.
pub const PIPELINE: &[&[&str]] = &[
    &["gen-data"],
    &["fit"],
    &["sample", "--method", "cfg", "--w1", "1.5", "--w2", "2"],
    &["sample", "--method", "mg", "--w1", "1.5"],
    &["sweep-formats"],
    &["hierarchy", "--method", "ag"],
    &["tune", "--method", "cfg"],
    &["tune", "--method", "ag", "--weights", "4"],
    &["benchmark", "--steps", "10,20"],
];

/// Runs the pipeline into `dir`; panics with stderr on any failure.
pub fn run_pipeline(dir: &Path) {
    let config = dir.join("config.json");
    std::fs::create_dir_all(dir).unwrap();
    std::fs::write(&config, SMALL_CONFIG).unwrap();
    for args in PIPELINE {
        let mut full: Vec<&str> = args.to_vec();
        full.extend(["--config", config.to_str().unwrap()]);
        let out = guidelab(dir, &full);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
}

/// Files a rerun must reproduce byte for byte.
pub fn deterministic_outputs(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| {
            matches!(p.extension().and_then(|e| e.to_str()), Some("csv" | "jsonl"))
                || p.file_name().is_some_and(|n| n == "models.json")
        })
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}
