//! Toy molecular domain: four atom types, formal charges, bond orders and
//! centered 3D positions, plus the deterministic property oracle and the
//! valence/connectivity checks used as the validity signal.

mod canon;
mod dataset;

pub use canon::{canonical_form, canonical_key, CanonicalForm};
pub use dataset::{
    generate_dataset, Dataset, DatasetError, DatasetMeta, JointTable, MoleculeRecord, PropertyBins,
    NUM_BINS,
    N_MAX, N_MIN,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Highest bond order a pair can carry.
pub const MAX_BOND_ORDER: u8 = 3;

const CENTROID_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AtomType {
    X,
    Y,
    Z,
    W,
}

impl AtomType {
    pub const ALL: [AtomType; 4] = [AtomType::X, AtomType::Y, AtomType::Z, AtomType::W];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<AtomType> {
        Self::ALL.get(i).copied()
    }

    pub fn symbol(self) -> char {
        match self {
            AtomType::X => 'X',
            AtomType::Y => 'Y',
            AtomType::Z => 'Z',
            AtomType::W => 'W',
        }
    }

    /// The atom type whose base valence equals `valence`, if any.
    pub fn with_valence(valence: i32) -> Option<AtomType> {
        Self::ALL
            .into_iter()
            .find(|t| ValenceTable::STANDARD.base_valence(*t) as i32 == valence)
    }
}

/// Base valences and electronegativities of the toy alphabet.
#[derive(Clone, Debug, PartialEq)]
pub struct ValenceTable {
    base_valence: [u8; 4],
    electronegativity: [f64; 4],
}

impl ValenceTable {
    pub const STANDARD: ValenceTable = ValenceTable {
        base_valence: [1, 2, 3, 4],
        electronegativity: [2.2, 3.0, 3.5, 2.5],
    };

    pub fn base_valence(&self, t: AtomType) -> u8 {
        self.base_valence[t.index()]
    }

    pub fn electronegativity(&self, t: AtomType) -> f64 {
        self.electronegativity[t.index()]
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum MoleculeError {
    #[error("atom count {0} outside [2, 9]")]
    AtomCount(usize),
    #[error("{field} has {got} entries, expected {expected}")]
    Length {
        field: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("formal charge {0} outside [-1, 1]")]
    Charge(i8),
    #[error("bond order {0} outside [0, 3]")]
    BondOrder(u8),
    #[error("positions are not centered (centroid norm {0:e})")]
    NotCentered(f64),
    #[error("non-finite coordinate")]
    NonFinite,
}

/// Index of the unordered pair `(i, j)`, `i < j`, in row-major upper-triangular order.
pub fn pair_index(n: usize, i: usize, j: usize) -> usize {
    let (i, j) = if i < j { (i, j) } else { (j, i) };
    debug_assert!(j < n && i != j);
    i * n - i * (i + 1) / 2 + (j - i - 1)
}

pub fn pair_count(n: usize) -> usize {
    n * (n - 1) / 2
}

/// A joint multi-modal sample: atom types, charges, bond orders and positions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyMolecule {
    atom_types: Vec<AtomType>,
    charges: Vec<i8>,
    bonds: Vec<u8>,
    positions: Vec<[f64; 3]>,
}

impl ToyMolecule {
    /// Builds a molecule and recenters its positions at the origin.
    pub fn new(
        atom_types: Vec<AtomType>,
        charges: Vec<i8>,
        bonds: Vec<u8>,
        positions: Vec<[f64; 3]>,
    ) -> Result<Self, MoleculeError> {
        let mut mol = Self::unchecked(atom_types, charges, bonds, positions);
        mol.validate_structure()?;
        center(&mut mol.positions);
        Ok(mol)
    }

    /// Builds a molecule whose positions are already centered; they are kept bit-for-bit.
    pub fn from_centered(
        atom_types: Vec<AtomType>,
        charges: Vec<i8>,
        bonds: Vec<u8>,
        positions: Vec<[f64; 3]>,
    ) -> Result<Self, MoleculeError> {
        let mol = Self::unchecked(atom_types, charges, bonds, positions);
        mol.validate_structure()?;
        let c = centroid(&mol.positions);
        let norm = (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt();
        if norm > CENTROID_TOL {
            return Err(MoleculeError::NotCentered(norm));
        }
        Ok(mol)
    }

    fn unchecked(
        atom_types: Vec<AtomType>,
        charges: Vec<i8>,
        bonds: Vec<u8>,
        positions: Vec<[f64; 3]>,
    ) -> Self {
        ToyMolecule {
            atom_types,
            charges,
            bonds,
            positions,
        }
    }

    fn validate_structure(&self) -> Result<(), MoleculeError> {
        let n = self.atom_types.len();
        if !(N_MIN..=N_MAX).contains(&n) {
            return Err(MoleculeError::AtomCount(n));
        }
        let check = |field, got, expected| {
            if got != expected {
                Err(MoleculeError::Length {
                    field,
                    got,
                    expected,
                })
            } else {
                Ok(())
            }
        };
        check("charges", self.charges.len(), n)?;
        check("bonds", self.bonds.len(), pair_count(n))?;
        check("positions", self.positions.len(), n)?;
        if let Some(&c) = self.charges.iter().find(|c| !(-1..=1).contains(*c)) {
            return Err(MoleculeError::Charge(c));
        }
        if let Some(&b) = self.bonds.iter().find(|b| **b > MAX_BOND_ORDER) {
            return Err(MoleculeError::BondOrder(b));
        }
        if self.positions.iter().flatten().any(|v| !v.is_finite()) {
            return Err(MoleculeError::NonFinite);
        }
        Ok(())
    }

    pub fn n_atoms(&self) -> usize {
        self.atom_types.len()
    }

    pub fn atom_types(&self) -> &[AtomType] {
        &self.atom_types
    }

    pub fn charges(&self) -> &[i8] {
        &self.charges
    }

    /// Upper-triangular bond orders, see [`pair_index`].
    pub fn bonds(&self) -> &[u8] {
        &self.bonds
    }

    pub fn positions(&self) -> &[[f64; 3]] {
        &self.positions
    }

    pub fn bond(&self, i: usize, j: usize) -> u8 {
        self.bonds[pair_index(self.n_atoms(), i, j)]
    }

    pub fn bond_sum(&self, i: usize) -> u32 {
        (0..self.n_atoms())
            .filter(|&j| j != i)
            .map(|j| self.bond(i, j) as u32)
            .sum()
    }

    pub fn net_charge(&self) -> i32 {
        self.charges.iter().map(|&c| c as i32).sum()
    }

    /// The molecule relabeled so that new atom `k` is old atom `order[k]`.
    pub fn permuted(&self, order: &[usize]) -> ToyMolecule {
        let n = self.n_atoms();
        assert_eq!(order.len(), n, "permutation length");
        let mut bonds = vec![0u8; pair_count(n)];
        for a in 0..n {
            for b in (a + 1)..n {
                bonds[pair_index(n, a, b)] = self.bond(order[a], order[b]);
            }
        }
        ToyMolecule {
            atom_types: order.iter().map(|&k| self.atom_types[k]).collect(),
            charges: order.iter().map(|&k| self.charges[k]).collect(),
            bonds,
            positions: order.iter().map(|&k| self.positions[k]).collect(),
        }
    }

    /// Flattened `3n` coordinate vector.
    pub fn flat_positions(&self) -> Vec<f64> {
        self.positions.iter().flatten().copied().collect()
    }
}

pub fn centroid(positions: &[[f64; 3]]) -> [f64; 3] {
    let mut c = [0.0; 3];
    for p in positions {
        for k in 0..3 {
            c[k] += p[k];
        }
    }
    let n = positions.len().max(1) as f64;
    c.map(|v| v / n)
}

pub fn center(positions: &mut [[f64; 3]]) {
    let c = centroid(positions);
    for p in positions.iter_mut() {
        for k in 0..3 {
            p[k] -= c[k];
        }
    }
}

/// Effective partial charge `χ(A) + C` of every atom.
fn partial_charges(mol: &ToyMolecule) -> Vec<f64> {
    let table = &ValenceTable::STANDARD;
    mol.atom_types
        .iter()
        .zip(&mol.charges)
        .map(|(&t, &c)| table.electronegativity(t) + c as f64)
        .collect()
}

/// Dipole-like scalar property: `‖Σ (q_i − q̄) x_i‖ + 0.1 Σ E_ij + 0.05 n`.
pub fn property_oracle(mol: &ToyMolecule) -> f64 {
    let q = partial_charges(mol);
    let n = q.len() as f64;
    let q_bar = q.iter().sum::<f64>() / n;
    let mut dipole = [0.0f64; 3];
    for (qi, x) in q.iter().zip(&mol.positions) {
        let w = qi - q_bar;
        for k in 0..3 {
            dipole[k] += w * x[k];
        }
    }
    let dipole_norm = (dipole[0] * dipole[0] + dipole[1] * dipole[1] + dipole[2] * dipole[2]).sqrt();
    let bond_total: u32 = mol.bonds.iter().map(|&b| b as u32).sum();
    dipole_norm + 0.1 * bond_total as f64 + 0.05 * n
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Stability {
    pub per_atom: Vec<bool>,
    pub molecule_stable: bool,
}

/// Atom `i` is stable iff its bond-order sum equals base valence plus formal
/// charge; the molecule additionally needs zero net charge.
pub fn molecule_stability(mol: &ToyMolecule) -> Stability {
    let table = &ValenceTable::STANDARD;
    let per_atom: Vec<bool> = (0..mol.n_atoms())
        .map(|i| {
            let expected = table.base_valence(mol.atom_types[i]) as i32 + mol.charges[i] as i32;
            mol.bond_sum(i) as i32 == expected
        })
        .collect();
    let molecule_stable = per_atom.iter().all(|&s| s) && mol.net_charge() == 0;
    Stability {
        per_atom,
        molecule_stable,
    }
}

/// Connectivity of the graph whose edges are the pairs with bond order ≥ 1.
pub fn is_connected(mol: &ToyMolecule) -> bool {
    let n = mol.n_atoms();
    let mut seen = vec![false; n];
    let mut stack = vec![0usize];
    seen[0] = true;
    while let Some(i) = stack.pop() {
        for j in 0..n {
            if j != i && !seen[j] && mol.bond(i, j) > 0 {
                seen[j] = true;
                stack.push(j);
            }
        }
    }
    seen.into_iter().all(|s| s)
}

pub fn is_valid(mol: &ToyMolecule) -> bool {
    molecule_stability(mol).molecule_stable && is_connected(mol)
}
