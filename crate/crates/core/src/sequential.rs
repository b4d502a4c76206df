//! Sequential sampler: walks down the tree choosing each child with
//! probability proportional to `e^{βY}` times the child's depth-`m`
//! normalized subtree partition function, then samples the last `m` bits
//! exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::disorder::{rng::derive_seed, CremInstance, VertexId};
use crate::error::{CremError, Result};
use crate::numerics::{log_sum_exp_scaled, logistic};
use crate::oracle::{sample_index, LeafDistribution};
use crate::partition::subtree_normalized_log_z;

/// Largest depth for which [`sampler_law`] is materialized.
pub const LAW_MAX_DEPTH: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequentialConfig {
    /// Lookahead depth `m`, `1 ≤ m ≤ N`.
    pub lookahead: usize,
    pub beta: f64,
    /// Seed of the path randomness, independent of the disorder seed.
    pub path_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequentialSample {
    pub leaf: VertexId,
    /// Log probability of each child choice, then of the final block of
    /// `m` bits.
    pub log_weight_trace: Vec<f64>,
}

impl SequentialSample {
    /// Log probability of the whole path under the sampler.
    pub fn log_probability(&self) -> f64 {
        self.log_weight_trace.iter().sum()
    }
}

fn check_config(inst: &CremInstance, config: &SequentialConfig) -> Result<()> {
    if config.lookahead == 0 || config.lookahead > inst.depth() {
        return Err(CremError::InvalidParameter(format!(
            "lookahead must lie in 1..={}, got {}",
            inst.depth(),
            config.lookahead
        )));
    }
    if !config.beta.is_finite() {
        return Err(CremError::InvalidParameter(format!("beta must be finite, got {}", config.beta)));
    }
    inst.check_enumeration(config.lookahead)
}

/// `ln Z̃^v = ln Ẑ^v_{|v|+m}`, the estimated weight of the subtree at `v`.
pub fn lookahead_weight(inst: &CremInstance, v: VertexId, m: usize, beta: f64) -> Result<f64> {
    subtree_normalized_log_z(inst, v, m, beta)
}

/// Probability of stepping from `v` to `v0`.
pub fn child_probability(inst: &CremInstance, v: VertexId, m: usize, beta: f64) -> Result<f64> {
    let score = |x: u8| -> Result<f64> {
        let u = v.child(x);
        Ok(beta * inst.y(u)? + lookahead_weight(inst, u, m, beta)?)
    };
    Ok(logistic(score(0)? - score(1)?))
}

/// One sampler run with the path randomness taken from `rng`.
pub fn sample_sequential_with<R: Rng + ?Sized>(
    inst: &CremInstance,
    config: &SequentialConfig,
    rng: &mut R,
) -> Result<SequentialSample> {
    check_config(inst, config)?;
    let (n, m, beta) = (inst.depth(), config.lookahead, config.beta);
    let mut v = VertexId::ROOT;
    let mut trace = Vec::with_capacity(n - m + 1);
    for _ in 1..=n - m {
        let p0 = child_probability(inst, v, m, beta)?;
        let x = u8::from(rng.gen::<f64>() >= p0);
        trace.push(if x == 0 { p0.ln() } else { (1.0 - p0).ln() });
        v = v.child(x);
    }
    let offsets = inst.subtree_offsets(v, m)?;
    let lse = log_sum_exp_scaled(&offsets, beta);
    let probs: Vec<f64> = offsets.iter().map(|&x| (beta * x - lse).exp()).collect();
    let w = sample_index(&probs, rng.gen::<f64>());
    trace.push(beta * offsets[w] - lse);
    Ok(SequentialSample { leaf: v.join(VertexId::new(m, w as u64)), log_weight_trace: trace })
}

/// One sampler run driven by `config.path_seed`.
pub fn sample_sequential(inst: &CremInstance, config: &SequentialConfig) -> Result<SequentialSample> {
    sample_sequential_with(inst, config, &mut ChaCha8Rng::seed_from_u64(config.path_seed))
}

/// Independent runs; replica `r` uses the path stream `(path_seed, r)`.
pub fn sample_sequential_replicas(
    inst: &CremInstance,
    config: &SequentialConfig,
    replicas: usize,
) -> Result<Vec<SequentialSample>> {
    (0..replicas)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.path_seed, r as u64));
            sample_sequential_with(inst, config, &mut rng)
        })
        .collect()
}

/// Exact output law of the sampler, from the level energies.
pub fn sampler_law(inst: &CremInstance, config: &SequentialConfig) -> Result<LeafDistribution<f64>> {
    check_config(inst, config)?;
    let (n, m, beta) = (inst.depth(), config.lookahead, config.beta);
    if n > LAW_MAX_DEPTH {
        return Err(CremError::EnumerationCap { depth: n, cap: LAW_MAX_DEPTH });
    }
    let levels = inst.all_level_energies(n)?;
    let block = 1usize << m;
    let mut prefix = vec![1.0];
    for t in 1..=n - m {
        // The βX_v and annealed terms are shared by both children and cancel.
        let lse: Vec<f64> = levels[t + m].chunks(block).map(|c| log_sum_exp_scaled(c, beta)).collect();
        prefix = prefix
            .iter()
            .enumerate()
            .flat_map(|(i, &p)| {
                let p0 = logistic(lse[2 * i] - lse[2 * i + 1]);
                [p * p0, p * (1.0 - p0)]
            })
            .collect();
    }
    let mut probs = Vec::with_capacity(1 << n);
    for (c, &p) in levels[n].chunks(block).zip(&prefix) {
        let lse = log_sum_exp_scaled(c, beta);
        probs.extend(c.iter().map(|&x| p * (beta * x - lse).exp()));
    }
    LeafDistribution::new(n, probs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariance::CovarianceSpec;
    use crate::oracle::exact_gibbs;
    use crate::partition::PartitionEstimate;
    use crate::stats::chi_square_gof;

    fn brw(seed: u64, depth: usize) -> CremInstance {
        CremInstance::new(seed, depth, CovarianceSpec::brw()).unwrap()
    }

    fn cfg(m: usize, beta: f64) -> SequentialConfig {
        SequentialConfig { lookahead: m, beta, path_seed: 7 }
    }

    #[test]
    fn lookahead_weight_delegates() {
        let inst = brw(4, 10);
        let v: VertexId = "0110".parse().unwrap();
        assert_eq!(lookahead_weight(&inst, v, 6, 0.0).unwrap(), 0.0);
        let w = lookahead_weight(&inst, v, 5, 0.7).unwrap();
        assert_eq!(w, subtree_normalized_log_z(&inst, v, 5, 0.7).unwrap());
        assert_eq!(w, PartitionEstimate::lookahead(&inst, v, 5, 0.7).unwrap().log_value);
        assert!(lookahead_weight(&inst, v, 7, 0.7).is_err());
    }

    #[test]
    fn config_validation() {
        let inst = brw(4, 6);
        assert!(sample_sequential(&inst, &cfg(0, 0.5)).is_err());
        assert!(sample_sequential(&inst, &cfg(7, 0.5)).is_err());
        assert!(sampler_law(&brw(4, 17), &cfg(3, 0.5)).is_err());
    }

    #[test]
    fn full_lookahead_is_exact_gibbs() {
        for seed in 0..5 {
            let inst = brw(seed, 10);
            let law = sampler_law(&inst, &cfg(10, 0.9)).unwrap();
            assert!(law.tv(&exact_gibbs(&inst, 10, 0.9).unwrap()).unwrap() < 1e-12);
            let s = sample_sequential(&inst, &cfg(10, 0.9)).unwrap();
            assert_eq!(s.log_weight_trace.len(), 1);
            assert!((s.log_probability() - law.prob(s.leaf).ln()).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_beta_is_uniform() {
        let inst = brw(3, 9);
        for m in [1, 4, 9] {
            let law = sampler_law(&inst, &cfg(m, 0.0)).unwrap();
            assert!(law.tv(&LeafDistribution::uniform(9)).unwrap() < 1e-14);
        }
    }

    #[test]
    fn law_matches_realized_path_probabilities() {
        let inst = brw(12, 9);
        let config = cfg(3, 0.6);
        let law = sampler_law(&inst, &config).unwrap();
        for r in 0..20 {
            let s = sample_sequential_with(&inst, &config, &mut ChaCha8Rng::seed_from_u64(r)).unwrap();
            assert_eq!(s.leaf.depth(), 9);
            assert_eq!(s.log_weight_trace.len(), 9 - 3 + 1);
            assert!((s.log_probability() - law.prob(s.leaf).ln()).abs() < 1e-12);
            // prefix marginals are products of the realized child probabilities
            let mut acc = 0.0;
            for t in 1..=6 {
                acc += s.log_weight_trace[t - 1];
                let marg = law.marginal(t).unwrap();
                assert!((marg.prob(s.leaf.prefix(t)).ln() - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn child_probabilities_are_normalized() {
        let inst = brw(2, 8);
        let v: VertexId = "010".parse().unwrap();
        let p0 = child_probability(&inst, v, 3, 0.8).unwrap();
        let score = |x: u8| {
            let u = v.child(x);
            0.8 * inst.y(u).unwrap() + lookahead_weight(&inst, u, 3, 0.8).unwrap()
        };
        let p1 = 1.0 / (1.0 + (score(0) - score(1)).exp());
        assert!((p0 + p1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empirical_frequencies_match_law() {
        let inst = brw(21, 8);
        let config = SequentialConfig { lookahead: 2, beta: 0.7, path_seed: 99 };
        let law = sampler_law(&inst, &config).unwrap();
        let mut counts = vec![0u64; 256];
        for s in sample_sequential_replicas(&inst, &config, 200_000).unwrap() {
            counts[s.leaf.bits() as usize] += 1;
        }
        let test = chi_square_gof(&counts, law.probs());
        assert!(test.p_value > 1e-3, "{test:?}");
    }

    #[test]
    fn replicas_are_reproducible() {
        let inst = brw(21, 8);
        let config = cfg(3, 0.5);
        let a = sample_sequential_replicas(&inst, &config, 16).unwrap();
        let b = sample_sequential_replicas(&inst.clone(), &config, 16).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().any(|s| s.leaf != a[0].leaf));
    }

    #[test]
    fn longer_lookahead_helps() {
        let beta = 0.5 * (2.0 * std::f64::consts::LN_2).sqrt();
        let mut wins = 0;
        for seed in 0..50 {
            let inst = brw(1000 + seed, 10);
            let gibbs = exact_gibbs(&inst, 10, beta).unwrap();
            let tv = |m| sampler_law(&inst, &cfg(m, beta)).unwrap().tv(&gibbs).unwrap();
            if tv(4) < tv(1) {
                wins += 1;
            }
        }
        assert!(wins >= 45, "{wins}");
    }
}
