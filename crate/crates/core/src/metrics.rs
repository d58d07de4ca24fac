//! Evaluation metrics over generated molecules and min-max radar scaling.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sampler::Sample;
use crate::toymol::{canonical_key, is_valid, molecule_stability, property_oracle, ToyMolecule};

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("empty input")]
    EmptyInput,
    #[error("all counts are zero")]
    AllZero,
    #[error("degenerate range: min {min} >= max {max}")]
    DegenerateRange { min: f64, max: f64 },
}

/// Mean absolute deviation between oracle property and target.
pub fn property_mae<'a>(
    samples: impl IntoIterator<Item = (&'a ToyMolecule, f64)>,
) -> Result<f64, MetricError> {
    let mut n = 0usize;
    let mut total = 0.0;
    for (m, target) in samples {
        total += (property_oracle(m) - target).abs();
        n += 1;
    }
    if n == 0 {
        return Err(MetricError::EmptyInput);
    }
    Ok(total / n as f64)
}

/// Base-2 entropy of the normalized counts.
pub fn shannon_entropy(counts: &[u64]) -> Result<f64, MetricError> {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(MetricError::AllZero);
    }
    let total = total as f64;
    // summing in sorted order makes the result independent of category order
    let mut sorted: Vec<u64> = counts.iter().copied().filter(|&c| c > 0).collect();
    sorted.sort_unstable();
    Ok(sorted
        .iter()
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.log2()
        })
        .sum::<f64>()
        .max(0.0))
}

/// Distinct canonical keys among valid molecules, over all samples.
pub fn uniqueness<'a>(
    molecules: impl IntoIterator<Item = &'a ToyMolecule>,
) -> Result<f64, MetricError> {
    let mut keys = HashSet::new();
    let mut n = 0usize;
    for m in molecules {
        n += 1;
        if is_valid(m) {
            keys.insert(canonical_key(m));
        }
    }
    if n == 0 {
        return Err(MetricError::EmptyInput);
    }
    Ok(keys.len() as f64 / n as f64)
}

/// Min-max scaling to `[0, 1]`, flipped for lower-is-better metrics and clamped.
pub fn radar_scale(value: f64, min: f64, max: f64, higher_better: bool) -> Result<f64, MetricError> {
    if !(max > min) {
        return Err(MetricError::DegenerateRange { min, max });
    }
    let s = if higher_better {
        (value - min) / (max - min)
    } else {
        (max - value) / (max - min)
    };
    Ok(s.clamp(0.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub count: usize,
    pub property_mae: f64,
    pub molecule_stability_ratio: f64,
    pub validity_ratio: f64,
    pub valid_and_unique_ratio: f64,
    pub bond_entropy: f64,
    pub element_entropy: f64,
    pub sampling_seconds: f64,
    pub forward_passes: u32,
    #[serde(default)]
    pub scaled: BTreeMap<String, f64>,
}

impl MetricReport {
    pub fn from_samples(
        samples: &[Sample],
        sampling_seconds: f64,
        forward_passes: u32,
    ) -> Result<Self, MetricError> {
        if samples.is_empty() {
            return Err(MetricError::EmptyInput);
        }
        let n = samples.len() as f64;
        let mols = || samples.iter().map(|s| &s.molecule);
        let mut bond_counts = [0u64; 3];
        let mut element_counts = [0u64; 4];
        let mut stable = 0usize;
        let mut valid = 0usize;
        for m in mols() {
            for &b in m.bonds() {
                if b > 0 {
                    bond_counts[b as usize - 1] += 1;
                }
            }
            for t in m.atom_types() {
                element_counts[t.index()] += 1;
            }
            stable += molecule_stability(m).molecule_stable as usize;
            valid += is_valid(m) as usize;
        }
        Ok(MetricReport {
            count: samples.len(),
            property_mae: property_mae(samples.iter().map(|s| (&s.molecule, s.target)))?,
            molecule_stability_ratio: stable as f64 / n,
            validity_ratio: valid as f64 / n,
            valid_and_unique_ratio: uniqueness(mols())?,
            bond_entropy: shannon_entropy(&bond_counts).unwrap_or(0.0),
            element_entropy: shannon_entropy(&element_counts)?,
            sampling_seconds,
            forward_passes,
            scaled: BTreeMap::new(),
        })
    }
}

/// Radar axes: name, higher-is-better, accessor.
pub const RADAR_AXES: [(&str, bool); 4] = [
    ("property_alignment", false),
    ("validity", true),
    ("uniqueness", true),
    ("efficiency", false),
];

fn axis_value(r: &MetricReport, axis: &str) -> f64 {
    match axis {
        "property_alignment" => r.property_mae,
        "validity" => r.validity_ratio,
        "uniqueness" => r.valid_and_unique_ratio,
        "efficiency" => r.forward_passes as f64,
        _ => unreachable!("unknown radar axis {axis}"),
    }
}

/// Fills `scaled` on every report. Ranges are the min and max across the
/// reports, except efficiency which spans one to two passes per step. A
/// degenerate range scales every report to 1.
pub fn apply_radar(reports: &mut [MetricReport]) {
    for (axis, higher) in RADAR_AXES {
        let (min, max) = if axis == "efficiency" {
            (1.0, 2.0)
        } else {
            reports.iter().map(|r| axis_value(r, axis)).fold(
                (f64::INFINITY, f64::NEG_INFINITY),
                |(lo, hi), v| (lo.min(v), hi.max(v)),
            )
        };
        for r in reports.iter_mut() {
            let v = radar_scale(axis_value(r, axis), min, max, higher).unwrap_or(1.0);
            r.scaled.insert(axis.to_string(), v);
        }
    }
}
