//! Seed-averaged partition function identities, plus property tests for the
//! exact laws built on top of them.

use std::f64::consts::LN_2;

use crem::disorder::rng::derive_seed;
use crem::mcmc::transition_matrix;
use crem::oracle::{exact_gibbs, tv};
use crem::partition::{exact_log_z, free_energy, normalized_log_z, subtree_normalized_log_z};
use crem::sequential::{lookahead_weight, sampler_law, SequentialConfig};
use crem::stats::Summary;
use crem::{CovarianceSpec, CremInstance, LeafDistribution, VertexId};
use proptest::prelude::*;

fn brw(seed: u64, depth: usize) -> CremInstance {
    CremInstance::new(seed, depth, CovarianceSpec::brw()).unwrap()
}

fn beta_min() -> f64 {
    CovarianceSpec::<f64>::brw().thresholds().unwrap().beta_min
}

fn over_seeds(base: u64, count: u64, depth: usize, f: impl Fn(&CremInstance) -> f64) -> Summary {
    let xs: Vec<f64> = (0..count).map(|i| f(&brw(derive_seed(base, i), depth))).collect();
    Summary::of(&xs)
}

#[test]
fn mean_partition_function_is_annealed() {
    let beta = 0.5;
    let s = over_seeds(21, 10_000, 8, |inst| exact_log_z(inst, 8, beta).unwrap().exp());
    let target = 256.0 * (beta * beta * 8.0 / 2.0).exp();
    assert!(s.within(target, 4.0), "mean {} vs {target}, se {}", s.mean, s.se);
}

#[test]
fn normalized_partition_function_is_a_martingale() {
    let beta = 0.8 * beta_min();
    let depth = 10;
    let mut last = Vec::new();
    let mut increments = vec![Vec::new(); depth];
    for i in 0..10_000 {
        let inst = brw(derive_seed(22, i), depth);
        let z: Vec<f64> = (0..=depth).map(|n| normalized_log_z(&inst, n, beta).unwrap().exp()).collect();
        for n in 0..depth {
            increments[n].push(z[n + 1] - z[n]);
        }
        last.push(z[depth]);
    }
    let s = Summary::of(&last);
    assert!(s.within(1.0, 4.0), "mean {} se {}", s.mean, s.se);
    for (n, inc) in increments.iter().enumerate() {
        let s = Summary::of(inc);
        assert!(s.within(0.0, 4.0), "increment {n}: mean {} se {}", s.mean, s.se);
    }
}

#[test]
fn subtree_and_lookahead_weights_average_to_one() {
    let beta = 0.5 * beta_min();
    let v = VertexId::from_path(&[0, 1, 1]);
    let s = over_seeds(23, 10_000, 10, |inst| subtree_normalized_log_z(inst, v, 6, beta).unwrap().exp());
    assert!(s.within(1.0, 4.0), "mean {} se {}", s.mean, s.se);
    let s = over_seeds(24, 10_000, 10, |inst| lookahead_weight(inst, v, 4, beta).unwrap().exp());
    assert!(s.within(1.0, 4.0), "mean {} se {}", s.mean, s.se);
}

#[test]
fn free_energy_near_its_limit() {
    let beta = 0.5;
    let s = over_seeds(25, 100, 20, |inst| free_energy(inst, 20, beta).unwrap());
    assert!((s.mean - (LN_2 + 0.125)).abs() <= 0.02, "mean free energy {}", s.mean);
}

fn arb_law(depth: usize) -> impl Strategy<Value = LeafDistribution<f64>> {
    prop::collection::vec(0.0f64..1.0, 1usize << depth).prop_map(move |mut w| {
        w[0] += 1e-3;
        let total: f64 = w.iter().sum();
        LeafDistribution::new(depth, w.into_iter().map(|x| x / total).collect()).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tv_is_a_metric_on_laws(p in arb_law(3), q in arb_law(3), r in arb_law(3)) {
        let pq = tv(&p, &q).unwrap();
        prop_assert!((0.0..=1.0).contains(&pq));
        prop_assert_eq!(pq, tv(&q, &p).unwrap());
        prop_assert!(pq <= tv(&p, &r).unwrap() + tv(&r, &q).unwrap() + 1e-15);
        prop_assert_eq!(tv(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn gibbs_laws_are_normalized(seed in any::<u64>(), n in 0usize..=10, beta in 0.0f64..3.0) {
        let inst = brw(seed, 10);
        let total: f64 = exact_gibbs(&inst, n, beta).unwrap().probs().iter().sum();
        prop_assert!((total - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn full_lookahead_sampler_is_exact(seed in any::<u64>(), depth in 1usize..=10, frac in 0.0f64..1.0) {
        let inst = brw(seed, depth);
        let beta = frac * beta_min();
        let config = SequentialConfig { lookahead: depth, beta, path_seed: 0 };
        let law = sampler_law(&inst, &config).unwrap();
        prop_assert!(tv(&law, &exact_gibbs(&inst, depth, beta).unwrap()).unwrap() <= 1e-12);
    }

    #[test]
    fn sampler_laws_are_normalized(seed in any::<u64>(), m in 1usize..=8, frac in 0.0f64..1.0) {
        let inst = brw(seed, 8);
        let config = SequentialConfig { lookahead: m, beta: frac * beta_min(), path_seed: 0 };
        let total: f64 = sampler_law(&inst, &config).unwrap().probs().iter().sum();
        prop_assert!((total - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn chain_kernel_is_reversible(seed in any::<u64>(), depth in 1usize..=6, m0 in 0usize..=2, beta in 0.0f64..1.5) {
        let inst = brw(seed, depth);
        let view = transition_matrix(&inst, m0.min(depth - 1), beta, false).unwrap();
        prop_assert!(view.row_sum_error() <= 1e-12);
        prop_assert!(view.detailed_balance_error() <= 1e-12);
    }
}
