//! Position-free canonical labeling by color refinement plus
//! individualization, keeping the lexicographically smallest encoding.

use super::{pair_count, pair_index, ToyMolecule};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CanonicalForm {
    pub key: String,
    /// `order[k]` is the original index of the atom placed at canonical slot `k`.
    pub order: Vec<usize>,
}

pub fn canonical_key(mol: &ToyMolecule) -> String {
    canonical_form(mol).key
}

pub fn canonical_form(mol: &ToyMolecule) -> CanonicalForm {
    let graph = LabeledGraph::from_molecule(mol);
    let initial: Vec<u32> = graph.labels.iter().map(|&l| l as u32).collect();
    let colors = refine(&graph, dense_ranks(&initial));
    let mut best: Option<CanonicalForm> = None;
    search(&graph, colors, &mut best);
    best.expect("search visits at least one leaf")
}

struct LabeledGraph {
    n: usize,
    /// `atom type * 3 + (charge + 1)`
    labels: Vec<u8>,
    bonds: Vec<u8>,
}

impl LabeledGraph {
    fn from_molecule(mol: &ToyMolecule) -> Self {
        let labels = mol
            .atom_types()
            .iter()
            .zip(mol.charges())
            .map(|(t, &c)| (t.index() * 3) as u8 + (c + 1) as u8)
            .collect();
        LabeledGraph {
            n: mol.n_atoms(),
            labels,
            bonds: mol.bonds().to_vec(),
        }
    }

    fn bond(&self, i: usize, j: usize) -> u8 {
        self.bonds[pair_index(self.n, i, j)]
    }

    fn encode(&self, order: &[usize]) -> String {
        const SYMBOLS: [char; 4] = ['X', 'Y', 'Z', 'W'];
        const SIGNS: [char; 3] = ['-', '0', '+'];
        let mut s = String::with_capacity(3 * self.n + pair_count(self.n) + 1);
        for &v in order {
            let l = self.labels[v] as usize;
            s.push(SYMBOLS[l / 3]);
            s.push(SIGNS[l % 3]);
        }
        s.push('|');
        for a in 0..self.n {
            for b in (a + 1)..self.n {
                s.push(char::from(b'0' + self.bond(order[a], order[b])));
            }
        }
        s
    }
}

/// Maps arbitrary comparable values to dense ranks `0..k` preserving order.
fn dense_ranks<T: Ord + Clone>(values: &[T]) -> Vec<u32> {
    let mut sorted: Vec<T> = values.to_vec();
    sorted.sort();
    sorted.dedup();
    values
        .iter()
        .map(|v| sorted.binary_search(v).expect("value present") as u32)
        .collect()
}

fn cell_count(colors: &[u32]) -> usize {
    let mut c = colors.to_vec();
    c.sort_unstable();
    c.dedup();
    c.len()
}

/// Iterated neighborhood refinement until the partition stops splitting.
fn refine(graph: &LabeledGraph, mut colors: Vec<u32>) -> Vec<u32> {
    let mut cells = cell_count(&colors);
    loop {
        let signatures: Vec<(u32, Vec<(u8, u32)>)> = (0..graph.n)
            .map(|v| {
                let mut nbrs: Vec<(u8, u32)> = (0..graph.n)
                    .filter(|&u| u != v && graph.bond(u, v) > 0)
                    .map(|u| (graph.bond(u, v), colors[u]))
                    .collect();
                nbrs.sort_unstable();
                (colors[v], nbrs)
            })
            .collect();
        let next = dense_ranks(&signatures);
        let next_cells = cell_count(&next);
        colors = next;
        if next_cells == cells {
            return colors;
        }
        cells = next_cells;
    }
}

fn search(graph: &LabeledGraph, colors: Vec<u32>, best: &mut Option<CanonicalForm>) {
    if cell_count(&colors) == graph.n {
        let mut order: Vec<usize> = (0..graph.n).collect();
        order.sort_by_key(|&v| colors[v]);
        let key = graph.encode(&order);
        if best.as_ref().is_none_or(|b| key < b.key) {
            *best = Some(CanonicalForm { key, order });
        }
        return;
    }
    // Branch on the lowest-colored non-singleton cell.
    let mut counts = vec![0usize; graph.n];
    for &c in &colors {
        counts[c as usize] += 1;
    }
    let target = (0..graph.n)
        .find(|&c| counts[c] > 1)
        .expect("non-discrete partition has a non-singleton cell") as u32;
    for v in (0..graph.n).filter(|&v| colors[v] == target) {
        let individualized: Vec<u32> = (0..graph.n)
            .map(|u| {
                let c = 2 * colors[u] + 1;
                if u == v {
                    c - 1
                } else {
                    c
                }
            })
            .collect();
        let refined = refine(graph, dense_ranks(&individualized));
        search(graph, refined, best);
    }
}
