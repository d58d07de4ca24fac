//! Time grids, the linear interpolant, the masking marginal, and the flat
//! token layout shared by the discrete modalities.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::toymol::{pair_count, AtomType, ToyMolecule};

/// Token id of the absorbing mask state.
pub const MASK: u8 = u8::MAX;

#[derive(Debug, Error, PartialEq)]
pub enum FlowError {
    #[error("time grid needs at least 2 steps, got {0}")]
    TooFewSteps(usize),
    #[error("shape mismatch: {0} vs {1}")]
    ShapeMismatch(usize, usize),
    #[error("time {0} outside [0, 1]")]
    TimeOutOfRange(f64),
}

/// Evenly spaced times `0, dt, …, 1 − dt`; the last step lands on `t = 1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    steps: usize,
}

impl TimeGrid {
    pub fn new(steps: usize) -> Result<Self, FlowError> {
        if steps < 2 {
            return Err(FlowError::TooFewSteps(steps));
        }
        Ok(TimeGrid { steps })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.steps as f64
    }

    /// Start time of step `k`.
    pub fn time(&self, k: usize) -> f64 {
        k as f64 / self.steps as f64
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.steps).map(|k| self.time(k))
    }
}

impl Default for TimeGrid {
    fn default() -> Self {
        TimeGrid { steps: 100 }
    }
}

/// `(1 − t)·x0 + t·x1`
pub fn continuous_interpolate(x0: &[f64], x1: &[f64], t: f64) -> Result<Vec<f64>, FlowError> {
    if x0.len() != x1.len() {
        return Err(FlowError::ShapeMismatch(x0.len(), x1.len()));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(FlowError::TimeOutOfRange(t));
    }
    Ok(x0
        .iter()
        .zip(x1)
        .map(|(a, b)| (1.0 - t) * a + t * b)
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    AtomTypes,
    Charges,
    Bonds,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::AtomTypes, Modality::Charges, Modality::Bonds];

    pub fn alphabet_size(self) -> u8 {
        match self {
            Modality::AtomTypes => 4,
            Modality::Charges => 3,
            Modality::Bonds => 4,
        }
    }

    pub fn slot_count(self, n: usize) -> usize {
        match self {
            Modality::AtomTypes | Modality::Charges => n,
            Modality::Bonds => pair_count(n),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedSequence {
    pub modality: Modality,
    pub tokens: Vec<u8>,
}

impl MaskedSequence {
    pub fn is_clean(&self) -> bool {
        !self.tokens.contains(&MASK)
    }
}

/// Keeps each token with probability `t`, masks it otherwise.
pub fn mask_interpolate<R: Rng + ?Sized>(x1: &MaskedSequence, t: f64, rng: &mut R) -> MaskedSequence {
    debug_assert!(x1.is_clean(), "clean sequence expected");
    MaskedSequence {
        modality: x1.modality,
        tokens: x1
            .tokens
            .iter()
            .map(|&tok| if rng.random::<f64>() < t { tok } else { MASK })
            .collect(),
    }
}

/// Flat slot layout of a discrete state: per-slot alphabet sizes, and for
/// molecules the modality blocks `[atom types | charges | bonds]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SlotLayout {
    alphabets: Vec<u8>,
    offsets: Vec<usize>,
    modalities: Option<[std::ops::Range<usize>; 3]>,
}

impl SlotLayout {
    pub fn generic(alphabets: Vec<u8>) -> Self {
        assert!(alphabets.iter().all(|&k| (1..=4).contains(&k)), "alphabets of 1..=4 tokens");
        let mut offsets = Vec::with_capacity(alphabets.len() + 1);
        let mut acc = 0;
        for &k in &alphabets {
            offsets.push(acc);
            acc += k as usize;
        }
        offsets.push(acc);
        SlotLayout {
            alphabets,
            offsets,
            modalities: None,
        }
    }

    pub fn molecule(n: usize) -> Self {
        let mut alphabets = Vec::new();
        let mut ranges = Vec::new();
        for m in Modality::ALL {
            let start = alphabets.len();
            alphabets.extend(std::iter::repeat_n(m.alphabet_size(), m.slot_count(n)));
            ranges.push(start..alphabets.len());
        }
        let mut layout = Self::generic(alphabets);
        layout.modalities = Some([ranges[0].clone(), ranges[1].clone(), ranges[2].clone()]);
        layout
    }

    pub fn len(&self) -> usize {
        self.alphabets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alphabets.is_empty()
    }

    pub fn alphabet(&self, slot: usize) -> usize {
        self.alphabets[slot] as usize
    }

    /// Offset of `slot` in a flat per-token buffer.
    pub fn offset(&self, slot: usize) -> usize {
        self.offsets[slot]
    }

    /// Total number of (slot, token) cells.
    pub fn cells(&self) -> usize {
        self.offsets[self.alphabets.len()]
    }

    pub fn modality_range(&self, m: Modality) -> Option<std::ops::Range<usize>> {
        self.modalities
            .as_ref()
            .map(|r| r[Modality::ALL.iter().position(|x| *x == m).unwrap()].clone())
    }

    pub fn modality_of(&self, slot: usize) -> Option<Modality> {
        let ranges = self.modalities.as_ref()?;
        Modality::ALL
            .into_iter()
            .zip(ranges.iter())
            .find(|(_, r)| r.contains(&slot))
            .map(|(m, _)| m)
    }
}

/// Clean token vector of a molecule in the molecule layout.
pub fn molecule_tokens(mol: &ToyMolecule) -> Vec<u8> {
    let mut out = Vec::with_capacity(2 * mol.n_atoms() + mol.bonds().len());
    out.extend(mol.atom_types().iter().map(|t| t.index() as u8));
    out.extend(mol.charges().iter().map(|&c| (c + 1) as u8));
    out.extend_from_slice(mol.bonds());
    out
}

/// Splits a flat molecule token vector into its three modality sequences.
pub fn split_modalities(n: usize, tokens: &[u8]) -> [MaskedSequence; 3] {
    let layout = SlotLayout::molecule(n);
    Modality::ALL.map(|m| MaskedSequence {
        modality: m,
        tokens: tokens[layout.modality_range(m).unwrap()].to_vec(),
    })
}

/// Concatenates per-modality sequences back into the flat layout.
pub fn join_modalities(seqs: &[MaskedSequence]) -> Vec<u8> {
    let mut out = Vec::new();
    for m in Modality::ALL {
        if let Some(s) = seqs.iter().find(|s| s.modality == m) {
            out.extend_from_slice(&s.tokens);
        }
    }
    out
}

/// Decodes clean molecule tokens into `(types, charges, bonds)`.
pub fn decode_molecule_tokens(n: usize, tokens: &[u8]) -> (Vec<AtomType>, Vec<i8>, Vec<u8>) {
    let types = tokens[..n]
        .iter()
        .map(|&t| AtomType::from_index(t as usize).expect("clean atom token"))
        .collect();
    let charges = tokens[n..2 * n].iter().map(|&c| c as i8 - 1).collect();
    let bonds = tokens[2 * n..].to_vec();
    (types, charges, bonds)
}
