//! Synthetic dataset generation, equal-frequency property bins, the joint
//! `(n, bin)` table and JSON-lines persistence.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{
    canonical_form, center, pair_count, pair_index, property_oracle, AtomType, MoleculeError,
    ToyMolecule, ValenceTable, MAX_BOND_ORDER,
};

pub const N_MIN: usize = 2;
pub const N_MAX: usize = 9;
pub const NUM_BINS: usize = 16;

/// Relative frequency of each atom count `2..=9`; larger molecules dominate as in small-molecule corpora.
const ATOM_COUNT_WEIGHTS: [f64; 8] = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
/// Initial atom-type draw before valence repair (X, Y, Z, W).
const ATOM_TYPE_WEIGHTS: [f64; 4] = [0.35, 0.2, 0.15, 0.3];
const CHARGE_PAIR_PROB: f64 = 0.3;
const RING_CLOSURE_PROB: f64 = 0.3;
const MAX_DEGREE: usize = 4;
const MAX_REPAIR_ITERATIONS: usize = 1000;
const MAX_RESAMPLES: usize = 100;
const BOND_LENGTH: f64 = 1.5;
const BOND_NOISE: f64 = 0.1;
const MIN_NONBONDED_DISTANCE: f64 = 1.0;
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("dataset needs at least {min} molecules, got {got}")]
    TooSmall { min: usize, got: usize },
    #[error("valence repair failed for {0} consecutive molecules")]
    ConstructionFailure(usize),
    #[error("empty dataset")]
    Empty,
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed record at {path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("invalid molecule at {path}:{line}: {source}")]
    Molecule {
        path: PathBuf,
        line: usize,
        source: MoleculeError,
    },
}

/// Equal-frequency bin edges over the property values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropertyBins {
    edges: Vec<f64>,
}

impl PropertyBins {
    pub fn equal_frequency(values: &[f64], bins: usize) -> Self {
        assert!(!values.is_empty() && bins > 0);
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let len = sorted.len();
        let mut edges: Vec<f64> = (0..bins).map(|k| sorted[k * len / bins]).collect();
        edges.push(sorted[len - 1]);
        PropertyBins { edges }
    }

    pub fn from_edges(edges: Vec<f64>) -> Self {
        PropertyBins { edges }
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn len(&self) -> usize {
        self.edges.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Bin containing `c`; values outside the edge range go to the nearest end bin.
    pub fn bin_of(&self, c: f64) -> usize {
        let inner = &self.edges[1..self.len()];
        inner.partition_point(|&e| e <= c)
    }
}

/// Counts of molecules per `(n, bin)` cell; rows are `n = 2..=9`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointTable {
    pub n_min: usize,
    pub counts: Vec<Vec<u32>>,
}

impl JointTable {
    fn build(molecules: &[ToyMolecule], bins: &[usize], num_bins: usize) -> Self {
        let mut counts = vec![vec![0u32; num_bins]; N_MAX - N_MIN + 1];
        for (m, &b) in molecules.iter().zip(bins) {
            counts[m.n_atoms() - N_MIN][b] += 1;
        }
        JointTable {
            n_min: N_MIN,
            counts,
        }
    }

    pub fn count(&self, n: usize, bin: usize) -> u32 {
        self.counts[n - self.n_min][bin]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().map(|&c| c as u64).sum()
    }

    /// Empirical frequency of each bin among molecules with `n` atoms.
    pub fn bin_frequencies(&self, n: usize) -> Vec<f64> {
        let row = &self.counts[n - self.n_min];
        let total: u32 = row.iter().sum();
        row.iter().map(|&c| c as f64 / total.max(1) as f64).collect()
    }

    /// Draws an `(n, bin)` cell with probability proportional to its count.
    pub fn sample_cell<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, usize) {
        let width = self.counts[0].len();
        let flat: Vec<f64> = self.counts.iter().flatten().map(|&c| c as f64).collect();
        let idx = WeightedIndex::new(&flat)
            .expect("joint table has positive mass")
            .sample(rng);
        (idx / width + self.n_min, idx % width)
    }

    /// Draws `n` given a fixed bin.
    pub fn sample_n_given_bin<R: Rng + ?Sized>(&self, bin: usize, rng: &mut R) -> usize {
        let col: Vec<f64> = self.counts.iter().map(|row| row[bin] as f64).collect();
        match WeightedIndex::new(&col) {
            Ok(d) => d.sample(rng) + self.n_min,
            // Empty bin: fall back to the marginal over n.
            Err(_) => {
                let marg: Vec<f64> = self
                    .counts
                    .iter()
                    .map(|row| row.iter().sum::<u32>() as f64)
                    .collect();
                WeightedIndex::new(&marg)
                    .expect("joint table has positive mass")
                    .sample(rng)
                    + self.n_min
            }
        }
    }
}

/// Molecules (stored in canonical atom order), their exact properties and binning.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    molecules: Vec<ToyMolecule>,
    properties: Vec<f64>,
    bin_index: Vec<usize>,
    bins: PropertyBins,
    joint: JointTable,
}

/// Sidecar written next to the JSON-lines file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub version: u32,
    pub count: usize,
    pub bin_edges: Vec<f64>,
    pub joint_nc: JointTable,
}

/// One JSON line: a molecule plus optional sampling provenance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoleculeRecord {
    pub n: usize,
    pub atom_types: Vec<u8>,
    pub charges: Vec<i8>,
    /// `[i, j, order]` for every pair with order ≥ 1.
    pub bonds: Vec<[u8; 3]>,
    pub positions: Vec<[f64; 3]>,
    pub property: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl MoleculeRecord {
    pub fn from_molecule(mol: &ToyMolecule) -> Self {
        let n = mol.n_atoms();
        let mut bonds = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                let o = mol.bond(i, j);
                if o > 0 {
                    bonds.push([i as u8, j as u8, o]);
                }
            }
        }
        MoleculeRecord {
            n,
            atom_types: mol.atom_types().iter().map(|t| t.index() as u8).collect(),
            charges: mol.charges().to_vec(),
            bonds,
            positions: mol.positions().to_vec(),
            property: property_oracle(mol),
            target: None,
            spec_hash: None,
            seed: None,
        }
    }

    pub fn to_molecule(&self) -> Result<ToyMolecule, MoleculeError> {
        let n = self.n;
        if !(N_MIN..=N_MAX).contains(&n) {
            return Err(MoleculeError::AtomCount(n));
        }
        let types = self
            .atom_types
            .iter()
            .map(|&t| AtomType::from_index(t as usize).ok_or(MoleculeError::AtomCount(n)))
            .collect::<Result<Vec<_>, _>>()?;
        let mut bonds = vec![0u8; pair_count(n)];
        for &[i, j, o] in &self.bonds {
            let (i, j) = (i as usize, j as usize);
            if i >= n || j >= n || i == j {
                return Err(MoleculeError::Length {
                    field: "bonds",
                    got: i.max(j),
                    expected: n,
                });
            }
            bonds[pair_index(n, i, j)] = o;
        }
        ToyMolecule::from_centered(types, self.charges.clone(), bonds, self.positions.clone())
    }
}

impl Dataset {
    pub fn from_molecules(molecules: Vec<ToyMolecule>) -> Result<Self, DatasetError> {
        if molecules.is_empty() {
            return Err(DatasetError::Empty);
        }
        let properties: Vec<f64> = molecules.iter().map(property_oracle).collect();
        let bins = PropertyBins::equal_frequency(&properties, NUM_BINS);
        Ok(Self::assemble(molecules, properties, bins))
    }

    fn assemble(molecules: Vec<ToyMolecule>, properties: Vec<f64>, bins: PropertyBins) -> Self {
        let bin_index: Vec<usize> = properties.iter().map(|&c| bins.bin_of(c)).collect();
        let joint = JointTable::build(&molecules, &bin_index, bins.len());
        Dataset {
            molecules,
            properties,
            bin_index,
            bins,
            joint,
        }
    }

    pub fn len(&self) -> usize {
        self.molecules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.molecules.is_empty()
    }

    pub fn molecules(&self) -> &[ToyMolecule] {
        &self.molecules
    }

    pub fn properties(&self) -> &[f64] {
        &self.properties
    }

    pub fn bin_index(&self) -> &[usize] {
        &self.bin_index
    }

    pub fn bins(&self) -> &PropertyBins {
        &self.bins
    }

    pub fn joint(&self) -> &JointTable {
        &self.joint
    }

    pub fn num_bins(&self) -> usize {
        self.bins.len()
    }

    /// Disjoint split: the first part takes `floor(fraction * len)` molecules
    /// chosen by a seeded shuffle; both parts keep the original relative order.
    pub fn split(&self, fraction: f64, seed: u64) -> Result<(Dataset, Dataset), DatasetError> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let cut = ((self.len() as f64) * fraction.clamp(0.0, 1.0)).floor() as usize;
        let mut first: Vec<usize> = idx[..cut].to_vec();
        let mut second: Vec<usize> = idx[cut..].to_vec();
        first.sort_unstable();
        second.sort_unstable();
        let take = |ids: &[usize]| {
            Dataset::from_molecules(ids.iter().map(|&i| self.molecules[i].clone()).collect())
        };
        Ok((take(&first)?, take(&second)?))
    }

    pub fn meta(&self) -> DatasetMeta {
        DatasetMeta {
            version: FORMAT_VERSION,
            count: self.len(),
            bin_edges: self.bins.edges().to_vec(),
            joint_nc: self.joint.clone(),
        }
    }

    /// `data.jsonl` → `data.meta.json`
    pub fn sidecar_path(path: &Path) -> PathBuf {
        path.with_extension("meta.json")
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<(), DatasetError> {
        let io_err = |source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
        for m in &self.molecules {
            let line = serde_json::to_string(&MoleculeRecord::from_molecule(m))
                .expect("records serialize");
            writeln!(out, "{line}").map_err(io_err)?;
        }
        out.flush().map_err(io_err)?;
        let sidecar = Self::sidecar_path(path);
        let meta = serde_json::to_string_pretty(&self.meta()).expect("meta serializes");
        std::fs::write(&sidecar, meta + "\n").map_err(|source| DatasetError::Io {
            path: sidecar,
            source,
        })
    }

    pub fn read_jsonl(path: &Path) -> Result<Self, DatasetError> {
        let io_err = |source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        };
        let reader = BufReader::new(File::open(path).map_err(io_err)?);
        let mut molecules = Vec::new();
        let mut properties = Vec::new();
        for (k, line) in reader.lines().enumerate() {
            let line = line.map_err(io_err)?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: MoleculeRecord =
                serde_json::from_str(&line).map_err(|e| DatasetError::Parse {
                    path: path.to_path_buf(),
                    line: k + 1,
                    msg: e.to_string(),
                })?;
            let mol = rec.to_molecule().map_err(|source| DatasetError::Molecule {
                path: path.to_path_buf(),
                line: k + 1,
                source,
            })?;
            let c = property_oracle(&mol);
            if c != rec.property {
                return Err(DatasetError::Parse {
                    path: path.to_path_buf(),
                    line: k + 1,
                    msg: format!("stored property {} != oracle {}", rec.property, c),
                });
            }
            molecules.push(mol);
            properties.push(c);
        }
        if molecules.is_empty() {
            return Err(DatasetError::Empty);
        }
        let sidecar = Self::sidecar_path(path);
        let bins = match std::fs::read_to_string(&sidecar) {
            Ok(text) => {
                let meta: DatasetMeta =
                    serde_json::from_str(&text).map_err(|e| DatasetError::Parse {
                        path: sidecar.clone(),
                        line: 0,
                        msg: e.to_string(),
                    })?;
                PropertyBins::from_edges(meta.bin_edges)
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                PropertyBins::equal_frequency(&properties, NUM_BINS)
            }
            Err(source) => {
                return Err(DatasetError::Io {
                    path: sidecar,
                    source,
                })
            }
        };
        Ok(Self::assemble(molecules, properties, bins))
    }
}

/// Generates `count` valid molecules, deterministically in `seed`.
pub fn generate_dataset(seed: u64, count: usize) -> Result<Dataset, DatasetError> {
    if count < 100 {
        return Err(DatasetError::TooSmall {
            min: 100,
            got: count,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut molecules = Vec::with_capacity(count);
    while molecules.len() < count {
        let mut failures = 0;
        let mol = loop {
            match generate_molecule(&mut rng) {
                Some(m) => break m,
                None => {
                    failures += 1;
                    if failures >= MAX_RESAMPLES {
                        return Err(DatasetError::ConstructionFailure(failures));
                    }
                }
            }
        };
        molecules.push(mol);
    }
    Dataset::from_molecules(molecules)
}

struct Draft {
    n: usize,
    types: Vec<AtomType>,
    charges: Vec<i8>,
    bonds: Vec<u8>,
}

impl Draft {
    fn bond(&self, i: usize, j: usize) -> u8 {
        self.bonds[pair_index(self.n, i, j)]
    }

    fn bond_mut(&mut self, i: usize, j: usize) -> &mut u8 {
        &mut self.bonds[pair_index(self.n, i, j)]
    }

    fn bond_sum(&self, i: usize) -> i32 {
        (0..self.n)
            .filter(|&j| j != i)
            .map(|j| self.bond(i, j) as i32)
            .sum()
    }

    fn degree(&self, i: usize) -> usize {
        (0..self.n).filter(|&j| j != i && self.bond(i, j) > 0).count()
    }

    /// `valence + charge − bond sum`: positive means under-bonded.
    fn deficit(&self, i: usize) -> i32 {
        ValenceTable::STANDARD.base_valence(self.types[i]) as i32 + self.charges[i] as i32
            - self.bond_sum(i)
    }

    /// Retype atom `i` so that its valence matches its current bond sum.
    fn retype(&mut self, i: usize) {
        let mut target = self.bond_sum(i) - self.charges[i] as i32;
        if !(1..=4).contains(&target) {
            self.charges[i] = 0;
            target = self.bond_sum(i);
        }
        if let Some(t) = AtomType::with_valence(target) {
            self.types[i] = t;
        }
    }
}

fn generate_molecule<R: Rng + ?Sized>(rng: &mut R) -> Option<ToyMolecule> {
    let n_dist = WeightedIndex::new(ATOM_COUNT_WEIGHTS).expect("static weights");
    let t_dist = WeightedIndex::new(ATOM_TYPE_WEIGHTS).expect("static weights");
    let n = n_dist.sample(rng) + N_MIN;
    let mut d = Draft {
        n,
        types: (0..n).map(|_| AtomType::ALL[t_dist.sample(rng)]).collect(),
        charges: vec![0; n],
        bonds: vec![0; pair_count(n)],
    };
    // random spanning tree with bounded degree
    for i in 1..n {
        let parents: Vec<usize> = (0..i).filter(|&j| d.degree(j) < MAX_DEGREE).collect();
        let p = parents[rng.random_range(0..parents.len())];
        *d.bond_mut(i, p) = 1;
    }
    if n >= 3 && rng.random_bool(CHARGE_PAIR_PROB) {
        let i = rng.random_range(0..n);
        let j = (i + rng.random_range(1..n)) % n;
        d.charges[i] = 1;
        d.charges[j] = -1;
    }

    let mut settled = false;
    for _ in 0..MAX_REPAIR_ITERATIONS {
        let unsettled: Vec<usize> = (0..n).filter(|&i| d.deficit(i) != 0).collect();
        if unsettled.is_empty() {
            let net: i32 = d.charges.iter().map(|&c| c as i32).sum();
            if net == 0 {
                settled = true;
                break;
            }
            let charged: Vec<usize> = (0..n).filter(|&i| d.charges[i] != 0).collect();
            let i = charged[rng.random_range(0..charged.len())];
            d.charges[i] = 0;
            continue;
        }
        let i = unsettled[rng.random_range(0..unsettled.len())];
        if d.deficit(i) > 0 {
            let open = |j: usize, d: &Draft| {
                j != i && d.deficit(j) > 0 && d.bond(i, j) < MAX_BOND_ORDER
            };
            let bonded: Vec<usize> = (0..n).filter(|&j| open(j, &d) && d.bond(i, j) > 0).collect();
            let others: Vec<usize> = (0..n)
                .filter(|&j| open(j, &d) && d.bond(i, j) == 0 && d.degree(j) < MAX_DEGREE)
                .collect();
            if !bonded.is_empty() {
                let j = bonded[rng.random_range(0..bonded.len())];
                *d.bond_mut(i, j) += 1;
            } else if !others.is_empty() && d.degree(i) < MAX_DEGREE && rng.random_bool(RING_CLOSURE_PROB) {
                let j = others[rng.random_range(0..others.len())];
                *d.bond_mut(i, j) += 1;
            } else {
                d.retype(i);
            }
        } else {
            let multiple: Vec<usize> = (0..n).filter(|&j| j != i && d.bond(i, j) > 1).collect();
            if !multiple.is_empty() && rng.random_bool(0.5) {
                let j = multiple[rng.random_range(0..multiple.len())];
                *d.bond_mut(i, j) -= 1;
            } else {
                d.retype(i);
            }
        }
    }
    if !settled {
        return None;
    }

    let provisional = ToyMolecule::new(
        d.types.clone(),
        d.charges.clone(),
        d.bonds.clone(),
        vec![[0.0; 3]; n],
    )
    .ok()?;
    let form = canonical_form(&provisional);
    let ordered = provisional.permuted(&form.order);
    let positions = embed(&ordered, rng);
    ToyMolecule::new(
        ordered.atom_types().to_vec(),
        ordered.charges().to_vec(),
        ordered.bonds().to_vec(),
        positions,
    )
    .ok()
}

fn random_unit<R: Rng + ?Sized>(rng: &mut R) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        ];
        let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if norm > 1e-9 {
            return v.map(|x| x / norm);
        }
    }
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|k| (a[k] - b[k]).powi(2)).sum()
}

fn dot(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Breadth-first placement from canonical atom 0, then centering and a
/// canonical orientation (dipole along +x, first off-axis atom in the xy half-plane).
fn embed<R: Rng + ?Sized>(mol: &ToyMolecule, rng: &mut R) -> Vec<[f64; 3]> {
    let n = mol.n_atoms();
    let mut pos = vec![[0.0f64; 3]; n];
    let mut placed = vec![false; n];
    placed[0] = true;
    let mut queue = std::collections::VecDeque::from([0usize]);
    while let Some(p) = queue.pop_front() {
        for c in 0..n {
            if placed[c] || mol.bond(p, c) == 0 {
                continue;
            }
            let noise: f64 = rng.sample(StandardNormal);
            let length = (BOND_LENGTH + BOND_NOISE * noise).clamp(BOND_LENGTH - BOND_NOISE, BOND_LENGTH + BOND_NOISE);
            let mut candidate = pos[p];
            for _attempt in 0..32 {
                let u = random_unit(rng);
                candidate = [0, 1, 2].map(|k| pos[p][k] + length * u[k]);
                let clash = (0..n)
                    .filter(|&k| placed[k] && k != p)
                    .any(|k| dist2(&pos[k], &candidate) < MIN_NONBONDED_DISTANCE.powi(2));
                if !clash {
                    break;
                }
            }
            pos[c] = candidate;
            placed[c] = true;
            queue.push_back(c);
        }
    }
    center(&mut pos);
    orient(mol, &mut pos);
    pos
}

fn orient(mol: &ToyMolecule, pos: &mut [[f64; 3]]) {
    let table = &ValenceTable::STANDARD;
    let q: Vec<f64> = mol
        .atom_types()
        .iter()
        .zip(mol.charges())
        .map(|(&t, &c)| table.electronegativity(t) + c as f64)
        .collect();
    let q_bar = q.iter().sum::<f64>() / q.len() as f64;
    let mut axis = [0.0; 3];
    for (qi, x) in q.iter().zip(pos.iter()) {
        for k in 0..3 {
            axis[k] += (qi - q_bar) * x[k];
        }
    }
    let mut norm = dot(&axis, &axis).sqrt();
    if norm < 1e-9 {
        axis = pos[0];
        norm = dot(&axis, &axis).sqrt();
        if norm < 1e-9 {
            return;
        }
    }
    let e1 = axis.map(|v| v / norm);
    let reference = pos.iter().find_map(|p| {
        let along = dot(p, &e1);
        let perp = [0, 1, 2].map(|k| p[k] - along * e1[k]);
        let len = dot(&perp, &perp).sqrt();
        (len > 1e-6).then(|| perp.map(|v| v / len))
    });
    let e2 = reference.unwrap_or_else(|| {
        // collinear: any unit vector orthogonal to e1
        let helper = if e1[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
        let along = dot(&helper, &e1);
        let perp = [0, 1, 2].map(|k| helper[k] - along * e1[k]);
        let len = dot(&perp, &perp).sqrt();
        perp.map(|v| v / len)
    });
    let e3 = [
        e1[1] * e2[2] - e1[2] * e2[1],
        e1[2] * e2[0] - e1[0] * e2[2],
        e1[0] * e2[1] - e1[1] * e2[0],
    ];
    for p in pos.iter_mut() {
        *p = [dot(p, &e1), dot(p, &e2), dot(p, &e3)];
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toymol::{canonical_key, is_valid};

    #[test]
    fn rejects_tiny_counts() {
        assert!(matches!(
            generate_dataset(1, 99),
            Err(DatasetError::TooSmall { .. })
        ));
    }

    #[test]
    fn generated_molecules_are_valid_and_canonical() {
        let ds = generate_dataset(1, 1000).unwrap();
        assert_eq!(ds.len(), 1000);
        for m in ds.molecules() {
            assert!(is_valid(m));
            let form = canonical_form(m);
            assert_eq!(
                m.permuted(&form.order).atom_types(),
                m.atom_types(),
                "stored order is canonical"
            );
            assert_eq!(canonical_key(m), form.key);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_dataset(7, 300).unwrap();
        let b = generate_dataset(7, 300).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(8, 300).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn dataset_invariants_hold() {
        let ds = generate_dataset(3, 500).unwrap();
        for (m, &c) in ds.molecules().iter().zip(ds.properties()) {
            assert_eq!(property_oracle(m), c);
        }
        let edges = ds.bins().edges();
        assert_eq!(edges.len(), NUM_BINS + 1);
        assert!(edges.windows(2).all(|w| w[0] <= w[1]));
        for (&c, &b) in ds.properties().iter().zip(ds.bin_index()) {
            assert!(b < NUM_BINS);
            assert_eq!(ds.bins().bin_of(c), b);
        }
        assert_eq!(ds.joint().total(), 500);
    }

    #[test]
    fn every_atom_has_a_neighbor_at_bond_length() {
        // ring closures are not length-constrained; placement edges are
        let ds = generate_dataset(4, 200).unwrap();
        for m in ds.molecules() {
            let n = m.n_atoms();
            for i in 0..n {
                let ok = (0..n).any(|j| {
                    j != i && m.bond(i, j) > 0 && {
                        let d = dist2(&m.positions()[i], &m.positions()[j]).sqrt();
                        (1.4 - 1e-9..=1.6 + 1e-9).contains(&d)
                    }
                });
                assert!(ok, "atom {i} has no neighbor at bond length");
            }
        }
    }

    #[test]
    fn orientation_does_not_change_property() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let m = generate_molecule(&mut rng).unwrap();
            let mut pos = m.positions().to_vec();
            // rotate by a fixed proper rotation about z
            let (s, c) = 0.3f64.sin_cos();
            for p in pos.iter_mut() {
                *p = [c * p[0] - s * p[1], s * p[0] + c * p[1], p[2]];
            }
            let rotated = ToyMolecule::new(
                m.atom_types().to_vec(),
                m.charges().to_vec(),
                m.bonds().to_vec(),
                pos.clone(),
            )
            .unwrap();
            orient(&rotated, &mut pos);
            let reoriented = ToyMolecule::new(
                m.atom_types().to_vec(),
                m.charges().to_vec(),
                m.bonds().to_vec(),
                pos,
            )
            .unwrap();
            assert!((property_oracle(&m) - property_oracle(&reoriented)).abs() < 1e-12);
        }
    }

    #[test]
    fn property_histogram_is_unimodal_above_floor() {
        let ds = generate_dataset(1, 5000).unwrap();
        let min = ds.properties().iter().cloned().fold(f64::INFINITY, f64::min);
        let max = ds.properties().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(min > 0.1, "support floor {min}");
        let k = 12;
        let mut hist = vec![0usize; k];
        for &c in ds.properties() {
            let b = (((c - min) / (max - min)) * k as f64) as usize;
            hist[b.min(k - 1)] += 1;
        }
        let peak = (0..k).max_by_key(|&i| hist[i]).unwrap();
        // rises to the peak and falls after it, up to a 2% sampling wobble
        let slack = ds.len() / 50;
        assert!(hist[..=peak].windows(2).all(|w| w[1] + slack >= w[0]), "{hist:?}");
        assert!(hist[peak..].windows(2).all(|w| w[0] + slack >= w[1]), "{hist:?}");
    }

    #[test]
    fn jsonl_round_trip_is_exact() {
        let ds = generate_dataset(5, 150).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        ds.write_jsonl(&path).unwrap();
        assert!(Dataset::sidecar_path(&path).exists());
        let back = Dataset::read_jsonl(&path).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn split_is_disjoint_and_covers_everything() {
        let ds = generate_dataset(6, 400).unwrap();
        let (a, b) = ds.split(0.5, 1).unwrap();
        assert_eq!(a.len() + b.len(), ds.len());
        assert_eq!(a.len(), 200);
        let mut all: Vec<String> = a
            .molecules()
            .iter()
            .chain(b.molecules())
            .map(|m| serde_json::to_string(m).unwrap())
            .collect();
        let mut orig: Vec<String> = ds
            .molecules()
            .iter()
            .map(|m| serde_json::to_string(m).unwrap())
            .collect();
        all.sort();
        orig.sort();
        assert_eq!(all, orig);
    }

    #[test]
    fn bin_of_clamps_to_end_bins() {
        let bins = PropertyBins::equal_frequency(&(0..160).map(|i| i as f64).collect::<Vec<_>>(), 16);
        assert_eq!(bins.bin_of(-5.0), 0);
        assert_eq!(bins.bin_of(1e9), 15);
        assert_eq!(bins.bin_of(10.0), 1);
        assert_eq!(bins.bin_of(9.999), 0);
    }
}
