use std::collections::HashSet;

use guidelab::denoisers::{
    build_guide, held_out_nll, EmpiricalPosterior, GaussianVelocityModel, GuideModelSpec, ModelSet,
};
use guidelab::metrics::{uniqueness, MetricReport};
use guidelab::sampler::{sample, GuidanceSpec, SampleRequest};
use guidelab::toymol::{canonical_key, generate_dataset, is_valid, ToyMolecule};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

/// Position-free isomorphism by trying every relabeling.
fn isomorphic(a: &ToyMolecule, b: &ToyMolecule) -> bool {
    let n = a.n_atoms();
    if n != b.n_atoms() {
        return false;
    }
    permutations(n).iter().any(|p| {
        (0..n).all(|i| a.atom_types()[i] == b.atom_types()[p[i]] && a.charges()[i] == b.charges()[p[i]])
            && (0..n).all(|i| (i + 1..n).all(|j| a.bond(i, j) == b.bond(p[i], p[j])))
    })
}

#[test]
fn canonical_keys_agree_with_brute_force_isomorphism() {
    let ds = generate_dataset(5, 3000).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut pool: Vec<ToyMolecule> = Vec::new();
    for m in ds.molecules().iter().filter(|m| m.n_atoms() <= 4).take(150) {
        let mut order: Vec<usize> = (0..m.n_atoms()).collect();
        order.shuffle(&mut rng);
        pool.push(m.clone());
        pool.push(m.permuted(&order));
    }
    assert!(pool.len() >= 200);
    let keys: Vec<String> = pool.iter().map(canonical_key).collect();
    for i in 0..pool.len() {
        for j in i + 1..pool.len() {
            assert_eq!(keys[i] == keys[j], isomorphic(&pool[i], &pool[j]), "pair {i} {j}");
        }
    }
    // uniqueness counts the brute-force classes of valid molecules
    let mut classes: Vec<&ToyMolecule> = Vec::new();
    for m in pool.iter().filter(|m| is_valid(m)) {
        if !classes.iter().any(|c| isomorphic(c, m)) {
            classes.push(m);
        }
    }
    let u = uniqueness(&pool).unwrap();
    assert!((u - classes.len() as f64 / pool.len() as f64).abs() < 1e-15);
}

#[test]
fn subsampled_guide_has_larger_held_out_nll() {
    let mut worse = 0;
    for seed in 0..20u64 {
        let ds = generate_dataset(100 + seed, 20_000).unwrap();
        let (train, heldout) = ds.split(0.8, seed).unwrap();
        let post = EmpiricalPosterior::from_dataset(&train);
        let vel = GaussianVelocityModel::fit(&train, true).unwrap();
        let main = held_out_nll(&post, &vel, train.bins(), &heldout).unwrap();
        let spec = GuideModelSpec {
            subsample_fraction: 0.1,
            smoothing: 0.0,
            marginalize_positions: false,
            seed,
        };
        let (gp, gv) = build_guide(&train, &spec).unwrap();
        let guide = held_out_nll(&gp, &gv, train.bins(), &heldout).unwrap();
        worse += (guide > main) as usize;
    }
    assert!(worse >= 19, "guide worse on {worse} of 20 seeds");
}

#[test]
fn vanilla_sampling_is_mostly_valid_and_reproducible() {
    let ds = generate_dataset(1, 20_000).unwrap();
    let models = ModelSet::fit(&ds, GuideModelSpec::default(), None).unwrap();
    let req = SampleRequest::new(10_000, 21);
    let s = sample(&GuidanceSpec::vanilla(), &models, &ds, &req).unwrap();
    let r = MetricReport::from_samples(&s, 0.0, 1).unwrap();
    assert!(r.validity_ratio >= 0.90, "validity {}", r.validity_ratio);

    let again = sample(&GuidanceSpec::vanilla(), &models, &ds, &SampleRequest::new(200, 21)).unwrap();
    for (a, b) in again.iter().zip(&s) {
        assert_eq!(a.molecule, b.molecule);
        assert_eq!(a.target.to_bits(), b.target.to_bits());
    }
    let keys: HashSet<String> = s.iter().map(|x| canonical_key(&x.molecule)).collect();
    assert!(keys.len() > 100);
}
