mod common;

use common::*;
use guidelab::ctmc::Stochasticity;
use guidelab::flowcore::TimeGrid;
use guidelab::sampler::{molecule_rng, DiscreteFormat, DiscreteGuide, DiscreteRule};

const N: usize = 10_000;

#[test]
fn vanilla_terminal_distribution_matches_data() {
    let samples = run_many(DiscreteRule::Unconditional, None, 500, None, N, 11);
    let d = tv(&histogram(&samples), &P_DATA);
    assert!(d < 0.03, "tv {d}");
}

#[test]
fn masking_marginals_follow_the_interpolant() {
    for (t, stop) in [(0.25, 125), (0.5, 250), (0.75, 375)] {
        let samples = run_many(DiscreteRule::Unconditional, None, 500, Some(stop), N, 12);
        for slot in 0..3 {
            let d = tv(&slot_marginals(&samples, slot), &masked_marginal(slot, t));
            assert!(d < 0.02, "t {t} slot {slot} tv {d}");
        }
    }
}

#[test]
fn conditional_sampling_matches_bayes_posterior() {
    let samples = run_many(DiscreteRule::Conditional, Some(0), 500, None, N, 13);
    let d = tv(&histogram(&samples), &conditional_y0());
    assert!(d < 0.02, "tv {d}");
}

#[test]
fn predictor_guidance_at_unit_weight_is_exact_conditioning() {
    let samples = run_many(DiscreteRule::Predictor, Some(0), 500, None, N, 14);
    let d = tv(&histogram(&samples), &conditional_y0());
    assert!(d < 0.02, "tv {d}");
}

#[test]
fn cfg_at_zero_weight_replays_unconditional_trajectories() {
    let post = binary_system();
    let grid = TimeGrid::new(50).unwrap();
    for f in DiscreteFormat::ALL {
        for i in 0..200u64 {
            let mut a = DiscreteGuide::new(&post, None, KEY, Some(0), DiscreteRule::Cfg(f), vec![0.0; 3]).unwrap();
            let mut b = DiscreteGuide::new(&post, None, KEY, Some(0), DiscreteRule::Unconditional, vec![0.0; 3]).unwrap();
            let xa = a.run(&grid, Stochasticity::NONE, None, &mut molecule_rng(3, i)).unwrap();
            let xb = b.run(&grid, Stochasticity::NONE, None, &mut molecule_rng(3, i)).unwrap();
            assert_eq!(xa, xb, "{f:?} trajectory {i}");
        }
    }
}

#[test]
fn cfg_at_unit_weight_replays_conditional_trajectories() {
    let post = binary_system();
    let grid = TimeGrid::new(50).unwrap();
    for f in DiscreteFormat::ALL {
        for i in 0..200u64 {
            let mut a = DiscreteGuide::new(&post, None, KEY, Some(1), DiscreteRule::Cfg(f), vec![1.0; 3]).unwrap();
            let mut b = DiscreteGuide::new(&post, None, KEY, Some(1), DiscreteRule::Conditional, vec![1.0; 3]).unwrap();
            let xa = a.run(&grid, Stochasticity::NONE, None, &mut molecule_rng(4, i)).unwrap();
            let xb = b.run(&grid, Stochasticity::NONE, None, &mut molecule_rng(4, i)).unwrap();
            assert_eq!(xa, xb, "{f:?} trajectory {i}");
        }
    }
}
