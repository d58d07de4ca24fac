//! Exact empirical denoising posteriors over partially masked token states,
//! and the matching noisy-state property classifier.
//!
//! A [`Stratum`] holds the clean token rows of one key (the atom count for
//! molecules). A [`MatchTracker`] follows one sampling trajectory and keeps
//! the set of rows that agree with every revealed token, so per-slot counts
//! only need recomputing when that set changes.

use crate::ctmc::{Categorical, LOG_FLOOR};
use crate::flowcore::{molecule_tokens, SlotLayout, MASK};
use crate::toymol::Dataset;

use super::ModelError;

#[derive(Clone, Debug)]
pub struct Stratum {
    key: usize,
    layout: SlotLayout,
    tokens: Vec<u8>,
    weights: Vec<f64>,
    bins: Vec<u16>,
    num_bins: usize,
    /// Unconditional cell counts over every row.
    full_counts: Vec<f64>,
    /// Per-bin cell counts over every row.
    full_bin_counts: Vec<Vec<f64>>,
    full_bin_mass: Vec<f64>,
    mass: f64,
}

impl Stratum {
    pub fn new(
        key: usize,
        layout: SlotLayout,
        rows: &[Vec<u8>],
        weights: &[f64],
        bins: &[usize],
        num_bins: usize,
    ) -> Self {
        assert_eq!(rows.len(), weights.len());
        assert_eq!(rows.len(), bins.len());
        let width = layout.len();
        let mut tokens = Vec::with_capacity(rows.len() * width);
        for r in rows {
            assert_eq!(r.len(), width, "row width");
            debug_assert!(r.iter().enumerate().all(|(s, &t)| (t as usize) < layout.alphabet(s)));
            tokens.extend_from_slice(r);
        }
        let mut s = Stratum {
            key,
            tokens,
            weights: weights.to_vec(),
            bins: bins.iter().map(|&b| b as u16).collect(),
            num_bins,
            full_counts: vec![0.0; layout.cells()],
            full_bin_counts: vec![vec![0.0; layout.cells()]; num_bins],
            full_bin_mass: vec![0.0; num_bins],
            mass: 0.0,
            layout,
        };
        for r in 0..s.rows() {
            let (w, b) = (s.weights[r], s.bins[r] as usize);
            s.mass += w;
            s.full_bin_mass[b] += w;
            for slot in 0..width {
                let cell = s.layout.offset(slot) + s.tokens[r * width + slot] as usize;
                s.full_counts[cell] += w;
                s.full_bin_counts[b][cell] += w;
            }
        }
        s
    }

    pub fn key(&self) -> usize {
        self.key
    }

    pub fn layout(&self) -> &SlotLayout {
        &self.layout
    }

    pub fn rows(&self) -> usize {
        self.weights.len()
    }

    pub fn row(&self, r: usize) -> &[u8] {
        let w = self.layout.len();
        &self.tokens[r * w..(r + 1) * w]
    }

    pub fn weight(&self, r: usize) -> f64 {
        self.weights[r]
    }

    pub fn bin(&self, r: usize) -> usize {
        self.bins[r] as usize
    }

    pub fn mass(&self) -> f64 {
        self.mass
    }

    pub fn num_bins(&self) -> usize {
        self.num_bins
    }

    fn matches(&self, r: usize, tokens: &[u8], slots: &[usize]) -> bool {
        let row = self.row(r);
        slots.iter().all(|&s| row[s] == tokens[s])
    }
}

/// Empirical posterior over one or more strata with additive smoothing.
#[derive(Clone, Debug)]
pub struct EmpiricalPosterior {
    strata: Vec<Stratum>,
    smoothing: f64,
    num_bins: usize,
}

impl EmpiricalPosterior {
    pub fn new(strata: Vec<Stratum>, smoothing: f64) -> Self {
        let num_bins = strata.first().map_or(1, |s| s.num_bins);
        EmpiricalPosterior {
            strata,
            smoothing,
            num_bins,
        }
    }

    /// One stratum per atom count, rows in canonical atom order, unit weights.
    pub fn from_dataset(ds: &Dataset) -> Self {
        Self::from_dataset_indices(ds, &(0..ds.len()).collect::<Vec<_>>(), 0.0)
    }

    pub fn from_dataset_indices(ds: &Dataset, idx: &[usize], smoothing: f64) -> Self {
        let mut by_n: std::collections::BTreeMap<usize, (Vec<Vec<u8>>, Vec<usize>)> =
            Default::default();
        for &i in idx {
            let mol = &ds.molecules()[i];
            let e = by_n.entry(mol.n_atoms()).or_default();
            e.0.push(molecule_tokens(mol));
            e.1.push(ds.bin_index()[i]);
        }
        let strata = by_n
            .into_iter()
            .map(|(n, (rows, bins))| {
                let w = vec![1.0; rows.len()];
                Stratum::new(n, SlotLayout::molecule(n), &rows, &w, &bins, ds.num_bins())
            })
            .collect();
        let mut p = Self::new(strata, smoothing);
        p.num_bins = ds.num_bins();
        p
    }

    pub fn smoothing(&self) -> f64 {
        self.smoothing
    }

    pub fn num_bins(&self) -> usize {
        self.num_bins
    }

    pub fn strata(&self) -> &[Stratum] {
        &self.strata
    }

    pub fn stratum(&self, key: usize) -> Option<&Stratum> {
        self.strata.iter().find(|s| s.key == key)
    }

    /// Starts tracking an all-masked trajectory of stratum `key`.
    pub fn tracker(&self, key: usize, bin: Option<usize>) -> Result<MatchTracker<'_>, ModelError> {
        let stratum = self
            .stratum(key)
            .ok_or(ModelError::UnresolvedKey { n: key, bin })?;
        Ok(MatchTracker::new(stratum, bin, self.smoothing))
    }

    /// Posterior of one masked slot given the revealed tokens.
    pub fn posterior(
        &self,
        key: usize,
        bin: Option<usize>,
        tokens: &[u8],
        slot: usize,
    ) -> Result<Categorical, ModelError> {
        let mut tr = self.tracker(key, bin)?;
        tr.observe(tokens);
        Ok(tr.posterior(slot, bin.is_some()))
    }
}

/// Per-trajectory view of the rows consistent with the revealed tokens.
#[derive(Clone, Debug)]
pub struct MatchTracker<'a> {
    stratum: &'a Stratum,
    bin: Option<usize>,
    smoothing: f64,
    known: Vec<u8>,
    /// `None` while nothing is revealed (every row matches).
    members: Option<Vec<u32>>,
    counts_u: Vec<f64>,
    counts_c: Vec<f64>,
    mass_u: f64,
    mass_c: f64,
    bin_mass: Vec<f64>,
    scratch: Vec<usize>,
}

impl<'a> MatchTracker<'a> {
    fn new(stratum: &'a Stratum, bin: Option<usize>, smoothing: f64) -> Self {
        let mut tr = MatchTracker {
            stratum,
            bin,
            smoothing,
            known: vec![MASK; stratum.layout.len()],
            members: None,
            counts_u: Vec::new(),
            counts_c: Vec::new(),
            mass_u: 0.0,
            mass_c: 0.0,
            bin_mass: Vec::new(),
            scratch: Vec::new(),
        };
        tr.reset_full();
        tr
    }

    fn reset_full(&mut self) {
        let s = self.stratum;
        self.members = None;
        self.counts_u.clone_from(&s.full_counts);
        self.mass_u = s.mass;
        self.bin_mass.clone_from(&s.full_bin_mass);
        match self.bin {
            Some(b) => {
                self.counts_c.clone_from(&s.full_bin_counts[b]);
                self.mass_c = s.full_bin_mass[b];
            }
            None => {
                self.counts_c.clone_from(&s.full_counts);
                self.mass_c = s.mass;
            }
        }
    }

    pub fn layout(&self) -> &SlotLayout {
        &self.stratum.layout
    }

    pub fn bin(&self) -> Option<usize> {
        self.bin
    }

    /// Updates the match set to the current state of the trajectory.
    pub fn observe(&mut self, tokens: &[u8]) {
        debug_assert_eq!(tokens.len(), self.known.len());
        if tokens == self.known.as_slice() {
            return;
        }
        let remasked = self
            .known
            .iter()
            .zip(tokens)
            .any(|(&k, &t)| k != MASK && k != t);
        self.scratch.clear();
        if remasked {
            self.scratch
                .extend((0..tokens.len()).filter(|&s| tokens[s] != MASK));
            self.members = None;
        } else {
            self.scratch.extend(
                (0..tokens.len()).filter(|&s| tokens[s] != MASK && self.known[s] == MASK),
            );
        }
        self.known.copy_from_slice(tokens);
        if self.scratch.is_empty() {
            self.reset_full();
            return;
        }
        let s = self.stratum;
        let slots = &self.scratch;
        let next: Vec<u32> = match &self.members {
            None => (0..s.rows())
                .filter(|&r| s.matches(r, tokens, slots))
                .map(|r| r as u32)
                .collect(),
            Some(m) => m
                .iter()
                .copied()
                .filter(|&r| s.matches(r as usize, tokens, slots))
                .collect(),
        };
        self.members = Some(next);
        self.recount();
    }

    fn recount(&mut self) {
        let s = self.stratum;
        let width = s.layout.len();
        self.counts_u.iter_mut().for_each(|c| *c = 0.0);
        self.counts_c.iter_mut().for_each(|c| *c = 0.0);
        self.bin_mass.iter_mut().for_each(|c| *c = 0.0);
        self.mass_u = 0.0;
        self.mass_c = 0.0;
        let members = self.members.as_deref().unwrap_or(&[]);
        for &r in members {
            let r = r as usize;
            let (w, b) = (s.weights[r], s.bins[r] as usize);
            let in_cond = self.bin.is_none_or(|c| c == b);
            self.mass_u += w;
            self.bin_mass[b] += w;
            if in_cond {
                self.mass_c += w;
            }
            let row = &s.tokens[r * width..(r + 1) * width];
            for (slot, &tok) in row.iter().enumerate() {
                let cell = s.layout.offset(slot) + tok as usize;
                self.counts_u[cell] += w;
                if in_cond {
                    self.counts_c[cell] += w;
                }
            }
        }
    }

    /// Number of rows agreeing with the revealed tokens.
    pub fn match_count(&self) -> usize {
        self.members.as_ref().map_or(self.stratum.rows(), Vec::len)
    }

    pub fn unconditional_mass(&self) -> f64 {
        self.mass_u
    }

    pub fn conditional_mass(&self) -> f64 {
        self.mass_c
    }

    fn smoothed(&self, counts: &[f64], mass: f64, slot: usize) -> Categorical {
        let k = self.stratum.layout.alphabet(slot);
        let off = self.stratum.layout.offset(slot);
        let a = self.smoothing;
        let denom = mass + k as f64 * a;
        counts[off..off + k].iter().map(|c| (c + a) / denom).collect()
    }

    /// Posterior of `slot`. Falls back conditional → unconditional →
    /// all-masked stratum marginal when a match set is empty.
    pub fn posterior(&self, slot: usize, conditional: bool) -> Categorical {
        if conditional && self.mass_c > 0.0 {
            return self.smoothed(&self.counts_c, self.mass_c, slot);
        }
        if self.mass_u > 0.0 {
            return self.smoothed(&self.counts_u, self.mass_u, slot);
        }
        self.smoothed(&self.stratum.full_counts, self.stratum.mass, slot)
    }

    /// Exact `p(bin | revealed)`; uniform when nothing matches.
    pub fn bin_distribution(&self) -> Vec<f64> {
        if self.mass_u > 0.0 {
            self.bin_mass.iter().map(|m| m / self.mass_u).collect()
        } else {
            vec![1.0 / self.stratum.num_bins as f64; self.stratum.num_bins]
        }
    }

    /// Classifier likelihood ratios `p(y | x̃) / p(y | x_t)` for every
    /// destination of a masked `slot` (real tokens, then the mask with ratio 1),
    /// where `y` is the tracker's bin.
    pub fn likelihood_ratios(&self, slot: usize) -> arrayvec::ArrayVec<f64, 5> {
        let k = self.stratum.layout.alphabet(slot);
        let off = self.stratum.layout.offset(slot);
        let uniform = 1.0 / self.stratum.num_bins as f64;
        let current = if self.mass_u > 0.0 {
            self.mass_c / self.mass_u
        } else {
            uniform
        };
        let mut out: arrayvec::ArrayVec<f64, 5> = (0..k)
            .map(|a| {
                let u = self.counts_u[off + a];
                let p = if u > 0.0 { self.counts_c[off + a] / u } else { uniform };
                p / current.max(LOG_FLOOR)
            })
            .collect();
        out.push(1.0);
        out
    }
}

/// `p(bin | revealed tokens, n)` computed exactly from the dataset.
#[derive(Clone, Debug)]
pub struct NoisyStateClassifier {
    posterior: EmpiricalPosterior,
}

impl NoisyStateClassifier {
    pub fn new(posterior: EmpiricalPosterior) -> Self {
        NoisyStateClassifier { posterior }
    }

    pub fn classify(&self, key: usize, tokens: &[u8]) -> Result<Vec<f64>, ModelError> {
        let mut tr = self.posterior.tracker(key, None)?;
        tr.observe(tokens);
        Ok(tr.bin_distribution())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toymol::generate_dataset;
    use rand::{Rng, SeedableRng};

    fn two_slot_system() -> EmpiricalPosterior {
        // atom types only: (X, Y) twice, (X, X) once
        let layout = SlotLayout::generic(vec![4, 4]);
        let rows = vec![vec![0, 1], vec![0, 1], vec![0, 0]];
        let s = Stratum::new(2, layout, &rows, &[1.0; 3], &[0, 1, 1], 2);
        EmpiricalPosterior::new(vec![s], 0.0)
    }

    #[test]
    fn posterior_by_enumeration() {
        let p = two_slot_system();
        let post = p.posterior(2, None, &[0, MASK], 1).unwrap();
        assert!((post[1] - 2.0 / 3.0).abs() < 1e-15);
        assert!((post[0] - 1.0 / 3.0).abs() < 1e-15);
        let cond = p.posterior(2, Some(0), &[0, MASK], 1).unwrap();
        assert_eq!(cond.as_slice(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn single_match_gives_point_mass() {
        let ds = generate_dataset(2, 300).unwrap();
        let p = EmpiricalPosterior::from_dataset(&ds);
        let mol = &ds.molecules()[0];
        let mut toks = molecule_tokens(mol);
        let slot = toks.len() - 1;
        let truth = toks[slot];
        toks[slot] = MASK;
        let mut tr = p.tracker(mol.n_atoms(), None).unwrap();
        tr.observe(&toks);
        let post = tr.posterior(slot, false);
        // the molecule itself always matches; a unique match pins the token
        assert!(post[truth as usize] > 0.0);
        if tr.match_count() == 1 {
            assert_eq!(post[truth as usize], 1.0);
        }
    }

    #[test]
    fn all_masked_posterior_is_the_slot_marginal() {
        let ds = generate_dataset(3, 500).unwrap();
        let p = EmpiricalPosterior::from_dataset(&ds);
        for s in p.strata() {
            let layout = s.layout().clone();
            let masked = vec![MASK; layout.len()];
            for slot in 0..layout.len() {
                let post = p.posterior(s.key(), None, &masked, slot).unwrap();
                let mut counts = vec![0.0; layout.alphabet(slot)];
                for r in 0..s.rows() {
                    counts[s.row(r)[slot] as usize] += 1.0;
                }
                for (a, c) in post.iter().zip(&counts) {
                    assert!((a - c / s.rows() as f64).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn tracker_agrees_with_fresh_filtering_along_a_trajectory() {
        let ds = generate_dataset(5, 800).unwrap();
        let p = EmpiricalPosterior::from_dataset(&ds);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for trial in 0..20 {
            let mol = &ds.molecules()[trial * 13];
            let n = mol.n_atoms();
            let clean = molecule_tokens(mol);
            let mut toks = vec![MASK; clean.len()];
            let bin = Some(ds.bin_index()[trial * 13]);
            let mut tr = p.tracker(n, bin).unwrap();
            for step in 0..clean.len() * 2 {
                let s = rng.random_range(0..clean.len());
                // occasionally remask to exercise the reset path
                toks[s] = if step % 7 == 6 { MASK } else { clean[s] };
                tr.observe(&toks);
                let mut fresh = p.tracker(n, bin).unwrap();
                fresh.observe(&toks);
                assert_eq!(tr.match_count(), fresh.match_count());
                for slot in (0..toks.len()).filter(|&s| toks[s] == MASK) {
                    assert_eq!(tr.posterior(slot, true), fresh.posterior(slot, true));
                }
            }
        }
    }

    #[test]
    fn categorical_outputs_sum_to_one() {
        let ds = generate_dataset(6, 500).unwrap();
        let p = EmpiricalPosterior::from_dataset(&ds);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        for i in 0..50 {
            let mol = &ds.molecules()[i];
            let toks: Vec<u8> = molecule_tokens(mol)
                .into_iter()
                .map(|t| if rng.random_bool(0.5) { t } else { MASK })
                .collect();
            let mut tr = p.tracker(mol.n_atoms(), Some(rng.random_range(0..16))).unwrap();
            tr.observe(&toks);
            for slot in 0..toks.len() {
                for cond in [false, true] {
                    let s: f64 = tr.posterior(slot, cond).iter().sum();
                    assert!((s - 1.0).abs() < 1e-12);
                }
            }
            let s: f64 = tr.bin_distribution().iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn conditioning_equals_restricting_the_data() {
        let ds = generate_dataset(7, 600).unwrap();
        let full = EmpiricalPosterior::from_dataset(&ds);
        let b = 5;
        let idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.bin_index()[i] == b).collect();
        let restricted = EmpiricalPosterior::from_dataset_indices(&ds, &idx, 0.0);
        for s in restricted.strata() {
            let row = s.row(0).to_vec();
            let toks: Vec<u8> = row
                .iter()
                .enumerate()
                .map(|(i, &t)| if i % 3 == 0 { t } else { MASK })
                .collect();
            for slot in (0..toks.len()).filter(|&i| toks[i] == MASK) {
                assert_eq!(
                    full.posterior(s.key(), Some(b), &toks, slot).unwrap(),
                    restricted.posterior(s.key(), None, &toks, slot).unwrap()
                );
            }
        }
    }

    #[test]
    fn empty_matches_fall_back_in_order() {
        let p = two_slot_system();
        // bin 0 only holds (X, Y), so revealing X in slot 1 leaves only the unconditional (X, X)
        let post = p.posterior(2, Some(0), &[MASK, 0], 0).unwrap();
        assert_eq!(post.as_slice(), &[1.0, 0.0, 0.0, 0.0]);
        // reveal Z in slot 1: nothing matches, fall back to the slot marginal of slot 0
        let post = p.posterior(2, Some(0), &[MASK, 2], 0).unwrap();
        assert_eq!(post.as_slice(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn classifier_on_all_masked_input_gives_bin_frequencies() {
        let ds = generate_dataset(8, 500).unwrap();
        let clf = NoisyStateClassifier::new(EmpiricalPosterior::from_dataset(&ds));
        for n in 2..=9 {
            let width = SlotLayout::molecule(n).len();
            let Ok(dist) = clf.classify(n, &vec![MASK; width]) else {
                continue;
            };
            let freq = ds.joint().bin_frequencies(n);
            for (a, b) in dist.iter().zip(&freq) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn classifier_on_a_unique_molecule_is_a_point_mass() {
        let ds = generate_dataset(8, 500).unwrap();
        let clf = NoisyStateClassifier::new(EmpiricalPosterior::from_dataset(&ds));
        for (i, mol) in ds.molecules().iter().enumerate().take(100) {
            let toks = molecule_tokens(mol);
            let same: Vec<usize> = (0..ds.len())
                .filter(|&j| molecule_tokens(&ds.molecules()[j]) == toks)
                .map(|j| ds.bin_index()[j])
                .collect();
            if same.iter().all(|&b| b == ds.bin_index()[i]) {
                let dist = clf.classify(mol.n_atoms(), &toks).unwrap();
                assert_eq!(dist[ds.bin_index()[i]], 1.0);
            }
        }
    }

    /// Σ_x p(y | x) p(x) = p(y) over every masking pattern of a small stratum.
    #[test]
    fn classifier_obeys_total_probability() {
        let ds = generate_dataset(9, 2000).unwrap();
        let p = EmpiricalPosterior::from_dataset(&ds);
        let s = p.stratum(3).expect("3-atom stratum");
        let width = s.layout().len();
        let clf = NoisyStateClassifier::new(p.clone());
        // joint over (row, mask pattern) with pattern probability 2^-width
        let mut total = vec![0.0; s.num_bins()];
        for pattern in 0..(1u32 << width) {
            let mut seen: std::collections::HashMap<Vec<u8>, f64> = Default::default();
            for r in 0..s.rows() {
                let toks: Vec<u8> = (0..width)
                    .map(|i| if pattern >> i & 1 == 1 { s.row(r)[i] } else { MASK })
                    .collect();
                *seen.entry(toks).or_default() += s.weight(r) / s.mass();
            }
            for (toks, px) in seen {
                let y = clf.classify(3, &toks).unwrap();
                for (acc, py) in total.iter_mut().zip(y) {
                    *acc += py * px / (1u32 << width) as f64;
                }
            }
        }
        let prior = ds.joint().bin_frequencies(3);
        for (a, b) in total.iter().zip(&prior) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
