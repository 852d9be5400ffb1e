//! Property tests for invariants that span modules.

use std::sync::{Arc, OnceLock};

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crowd_cate::metrics::{self, ate_error, multi_metrics, pehe, EvaluationSplit};
use crowd_cate::model::{
    empirical_mmd, encode_inputs, fit, modal_treatment, Architecture, BatchIpm, FitOptions, InputDims, MmdKernel,
    ModelKind, NeuralNet, Sample, SpatialArch,
};
use crowd_cate::nn::{conv2d_forward, ConvKernel, Tensor};
use crowd_cate::scenario::{
    assignment_distribution, door_neighborhoods, door_weights, generate_dataset, sample_occupancy, GenConfig,
    OutcomeComponent,
};
use crowd_cate::sim::{build_default_layout, SimConfig, Simulator};
use crowd_cate::{enumerate_treatments, Occupancy};

fn sim() -> &'static Simulator {
    static SIM: OnceLock<Simulator> = OnceLock::new();
    SIM.get_or_init(|| Simulator::new(Arc::new(build_default_layout()), SimConfig::default()).unwrap())
}

fn occupancy(rates: [f64; 4], seed: u64) -> Occupancy {
    sample_occupancy(sim().layout(), &rates, seed).unwrap()
}

fn rates() -> impl Strategy<Value = [f64; 4]> {
    [0.05f64..1.0, 0.05f64..1.0, 0.05f64..1.0, 0.05f64..1.0]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn simulation_conserves_agents_and_is_order_free(r in rates(), seed in any::<u64>(), t in 0usize..30, u in 0usize..30) {
        let occ = occupancy(r, seed);
        prop_assume!(occ.count() > 0);
        let other = occupancy([0.5; 4], seed ^ 1);
        let (zt, zu) = (&enumerate_treatments()[t], &enumerate_treatments()[u]);
        let first = sim().simulate(&occ, zt).unwrap();
        prop_assert_eq!(first.evac_times.len(), occ.count());
        // Running an unrelated scenario in between cannot change the outcome.
        let _ = sim().simulate(&other, zu).unwrap();
        let second = sim().simulate(&occ, zt).unwrap();
        prop_assert_eq!(first, second);
    }

    #[test]
    fn lower_door_capacity_never_speeds_anyone_up(
        r in rates(),
        seed in any::<u64>(),
        caps in proptest::collection::vec(1u32..4, 6),
        cuts in proptest::collection::vec(0u32..3, 6),
    ) {
        let occ = occupancy(r, seed);
        prop_assume!(occ.count() > 0);
        let plan = sim().nearest_plan(&occ);
        let reduced: Vec<u32> = caps.iter().zip(&cuts).map(|(&c, &d)| c.saturating_sub(d).max(1)).collect();
        let fast = sim().run(&occ, &plan, &caps).unwrap();
        let slow = sim().run(&occ, &plan, &reduced).unwrap();
        for (a, b) in fast.evac_times.iter().zip(&slow.evac_times) {
            prop_assert!(b >= a);
        }
    }

    #[test]
    fn every_treatment_has_positive_assignment_probability(r in rates(), seed in any::<u64>()) {
        let occ = occupancy(r, seed);
        let hoods = door_neighborhoods(sim().layout(), 8.0, 0.9);
        prop_assume!(door_weights(&occ, &hoods).iter().all(|&w| w > 0.0));
        let p = assignment_distribution(&occ, &hoods);
        prop_assert!(p.iter().all(|&v| v > 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn batch_penalty_is_nonnegative(
        reps in proptest::collection::vec(-2.0f64..2.0, 24),
        treatments in proptest::collection::vec(0usize..4, 8),
        rbf in any::<bool>(),
    ) {
        let kernel = if rbf { MmdKernel::Rbf { bandwidth: None } } else { MmdKernel::Linear };
        let ipm = BatchIpm { treatments: treatments.clone(), kernel, min_group_size: 2 };
        let (v, _) = ipm.penalty(&reps, 3).unwrap();
        prop_assert!(v >= -1e-12);
        let same = BatchIpm { treatments: vec![treatments[0]; 8], kernel, min_group_size: 2 };
        prop_assert_eq!(same.penalty(&reps, 3).unwrap().0, 0.0);
    }

    #[test]
    fn modal_treatment_ignores_order(mut treatments in proptest::collection::vec(0usize..5, 1..20), k in 0usize..20) {
        let before = modal_treatment(&treatments);
        let len = treatments.len();
        treatments.rotate_left(k % len);
        treatments.reverse();
        prop_assert_eq!(modal_treatment(&treatments), before);
    }

    #[test]
    fn linear_mmd_is_shift_invariant(
        p in proptest::collection::vec(-3.0f64..3.0, 6),
        q in proptest::collection::vec(-3.0f64..3.0, 9),
        shift in [-5.0f64..5.0, -5.0f64..5.0, -5.0f64..5.0],
    ) {
        let moved = |v: &[f64]| v.iter().enumerate().map(|(i, x)| x + shift[i % 3]).collect::<Vec<_>>();
        let base = empirical_mmd(Sample::new(&p, 3), Sample::new(&q, 3), MmdKernel::Linear).unwrap();
        let (mp, mq) = (moved(&p), moved(&q));
        let after = empirical_mmd(Sample::new(&mp, 3), Sample::new(&mq, 3), MmdKernel::Linear).unwrap();
        prop_assert!((base - after).abs() < 1e-9);
    }

    #[test]
    fn metrics_ignore_scenario_order_and_respect_jensen(
        truth in proptest::collection::vec(proptest::collection::vec(0.0f64..100.0, 30), 2..6),
        noise in proptest::collection::vec(proptest::collection::vec(-10.0f64..10.0, 30), 6),
        k in 0usize..6,
    ) {
        let pred: Vec<Vec<f64>> = truth.iter().zip(&noise).map(|(t, e)| t.iter().zip(e).map(|(a, b)| a + b).collect()).collect();
        let m = multi_metrics(&pred, &truth).unwrap();
        prop_assert_eq!(m.pairs, 435);
        let (mut p2, mut t2) = (pred.clone(), truth.clone());
        let n = p2.len();
        p2.rotate_left(k % n);
        t2.rotate_left(k % n);
        let m2 = multi_metrics(&p2, &t2).unwrap();
        prop_assert!((m.mpehe - m2.mpehe).abs() < 1e-9 && (m.mate - m2.mate).abs() < 1e-9);
        for (i, j) in metrics::treatment_pairs(30).step_by(29) {
            prop_assert!(ate_error(&pred, &truth, i, j).unwrap() <= pehe(&pred, &truth, i, j).unwrap() + 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn forward_passes_are_pure(seed in any::<u64>(), occ_seed in any::<u64>(), t in 0usize..30) {
        let layout = sim().layout();
        let dims = InputDims { rows: layout.rows(), cols: layout.cols(), seats: layout.seat_count() };
        let arch = Architecture::Spatial(SpatialArch { channels: [2, 3], head: vec![8], ..SpatialArch::default() });
        let net = NeuralNet::init(arch, dims, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let occ = occupancy([0.6; 4], occ_seed);
        let input = encode_inputs(layout, [(&occ, enumerate_treatments()[t])]);
        let a = net.predict(&input).unwrap();
        let b = net.predict(&input).unwrap();
        prop_assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());

        let x = Tensor::from_fn(&[2, 5, 6], |i| ((i as u64).wrapping_mul(seed | 1) % 97) as f64 / 97.0);
        let k = ConvKernel::new(Tensor::from_fn(&[3, 2, 3, 3], |i| (i as f64 * 0.37).sin()), Tensor::zeros(&[3])).unwrap();
        prop_assert_eq!(conv2d_forward(&x, &k, 1, 1).unwrap(), conv2d_forward(&x, &k, 1, 1).unwrap());
    }
}

#[test]
fn noisy_factual_outcomes_never_reach_the_metrics() {
    let gen = GenConfig { fixed_rates: Some(vec![0.9; 4]), seeds_per_rate_combo: 30, ..GenConfig::default() };
    let dataset = generate_dataset(sim(), &gen, 2).unwrap();
    let split = EvaluationSplit::of(&dataset, 1);
    let (model, _) =
        fit(ModelKind::Ridge, sim().layout(), split.train_records(&dataset), OutcomeComponent::Max, &FitOptions::default(), "")
            .unwrap();
    let before = metrics::evaluate(&model, sim().layout(), &dataset, &split).unwrap();
    let mut poisoned = dataset.clone();
    for r in &mut poisoned.records {
        r.y_f.max_time = f64::NAN;
        r.y_f.mean_time = 1e9;
        r.y_f.std_time = -1e9;
    }
    let after = metrics::evaluate(&model, sim().layout(), &poisoned, &split).unwrap();
    assert_eq!(before, after);
}
