//! Metropolis chain on the whole binary tree whose stationary law, restricted
//! to the leaves, is the Gibbs measure; exact analysis of its kernel at small
//! depth.

mod conductance;
mod matrix;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::disorder::{rng::derive_seed, CremInstance, VertexId};
use crate::error::{CremError, Result};
use crate::numerics::log_add;
use crate::oracle::exact_gibbs;

pub use conductance::{exhaustive_conductance, subtree_conductance_scan, Cut, SubtreeScan, EXHAUSTIVE_MAX_DEPTH};
pub use matrix::{transition_matrix, TransitionMatrixView, MATRIX_MAX_DEPTH};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainConfig {
    /// Depth below which weights sum the depth-`m0` descendants.
    pub m0: usize,
    /// Steps per run.
    pub steps: u64,
    /// Runs attempted before giving up on reaching a leaf.
    pub max_retries: usize,
    pub beta: f64,
    /// Multiply depth-`N` weights by `N`.
    #[serde(default)]
    pub level_boost: bool,
}

impl ChainConfig {
    fn validate(&self) -> Result<()> {
        if self.max_retries == 0 {
            return Err(CremError::InvalidParameter("max_retries must be at least 1".into()));
        }
        if !self.beta.is_finite() {
            return Err(CremError::InvalidParameter(format!("beta must be finite, got {}", self.beta)));
        }
        Ok(())
    }
}

/// Unnormalized log weights `ln π̃(v)` on the vertices of a depth-`N` tree.
pub trait TreeWeights: Sync {
    fn depth(&self) -> usize;
    fn log_weight(&self, v: VertexId) -> f64;
}

/// `π̃ ≡ 1`.
#[derive(Clone, Copy, Debug)]
pub struct UniformWeights(pub usize);

impl TreeWeights for UniformWeights {
    fn depth(&self) -> usize {
        self.0
    }

    fn log_weight(&self, _: VertexId) -> f64 {
        0.0
    }
}

/// Explicit log weights in breadth-first order.
#[derive(Clone, Debug)]
pub struct TableWeights {
    depth: usize,
    log_w: Vec<f64>,
}

impl TableWeights {
    pub fn new(depth: usize, log_w: Vec<f64>) -> Result<Self> {
        if log_w.len() != (2usize << depth) - 1 {
            return Err(CremError::InvalidParameter(format!(
                "depth {depth} tree has {} vertices, got {} weights",
                (2usize << depth) - 1,
                log_w.len()
            )));
        }
        Ok(Self { depth, log_w })
    }
}

impl TreeWeights for TableWeights {
    fn depth(&self) -> usize {
        self.depth
    }

    fn log_weight(&self, v: VertexId) -> f64 {
        self.log_w[v.bfs_index()]
    }
}

/// The sampler's target on the tree: for `|v| ≤ m0`,
/// `π̃(v) = Σ_{w ≥ v, |w| = m0} e^{βX_w}`; below `m0`,
/// `π̃(v) = Z_{β,m0} 2^{−|v|} exp(−β²(a(|v|) − a(m0))/2) e^{βX_v}`.
#[derive(Debug)]
pub struct StationaryWeights<'a> {
    inst: &'a CremInstance,
    beta: f64,
    m0: usize,
    level_boost: bool,
    /// `ln π̃` for `|v| ≤ m0`, breadth-first.
    shallow: Vec<f64>,
}

impl<'a> StationaryWeights<'a> {
    pub fn new(inst: &'a CremInstance, m0: usize, beta: f64, level_boost: bool) -> Result<Self> {
        if m0 > inst.depth() {
            return Err(CremError::DepthOutOfRange { depth: m0, max: inst.depth() });
        }
        let levels = inst.all_level_energies(m0)?;
        let mut shallow = vec![0.0; (2usize << m0) - 1];
        let base = (1usize << m0) - 1;
        for (i, &x) in levels[m0].iter().enumerate() {
            shallow[base + i] = beta * x;
        }
        for idx in (0..base).rev() {
            shallow[idx] = log_add(shallow[2 * idx + 1], shallow[2 * idx + 2]);
        }
        Ok(Self { inst, beta, m0, level_boost, shallow })
    }

    pub fn m0(&self) -> usize {
        self.m0
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// `ln Z_{β,m0}`.
    pub fn log_z_m0(&self) -> f64 {
        self.shallow[0]
    }

    /// The deep-branch formula, valid for any `|v| ≥ m0`.
    pub fn deep_log_weight(&self, v: VertexId) -> Result<f64> {
        let d = v.depth();
        if d < self.m0 {
            return Err(CremError::InvalidParameter(format!("depth {d} is above m0 = {}", self.m0)));
        }
        let x = self.inst.x(v)?;
        Ok(self.deep(v, x))
    }

    fn deep(&self, v: VertexId, x: f64) -> f64 {
        let d = v.depth();
        let b2 = self.beta * self.beta;
        self.log_z_m0() - d as f64 * std::f64::consts::LN_2 - 0.5 * b2 * (self.inst.a(d) - self.inst.a(self.m0))
            + self.beta * x
    }

    fn boost(&self, v: VertexId) -> f64 {
        if self.level_boost && v.depth() == self.inst.depth() {
            (self.inst.depth() as f64).ln()
        } else {
            0.0
        }
    }
}

impl TreeWeights for StationaryWeights<'_> {
    fn depth(&self) -> usize {
        self.inst.depth()
    }

    fn log_weight(&self, v: VertexId) -> f64 {
        assert!(v.depth() <= self.inst.depth(), "vertex below the tree");
        let base = if v.depth() <= self.m0 {
            self.shallow[v.bfs_index()]
        } else {
            self.deep(v, self.inst.x(v).expect("depth checked"))
        };
        base + self.boost(v)
    }
}

/// One Metropolis step: propose the parent or either child with probability
/// 1/3 each (moves off the tree are rejected) and accept with probability
/// `min(π̃(target)/π̃(v), 1)`.
pub fn mh_step<W: TreeWeights + ?Sized, R: Rng + ?Sized>(weights: &W, v: VertexId, rng: &mut R) -> VertexId {
    let target = match rng.gen_range(0..3u8) {
        0 if v.is_root() => return v,
        0 => v.parent(),
        _ if v.depth() == weights.depth() => return v,
        x => v.child(x - 1),
    };
    let log_ratio = weights.log_weight(target) - weights.log_weight(v);
    if log_ratio >= 0.0 || rng.gen::<f64>() < log_ratio.exp() {
        target
    } else {
        v
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainRun {
    pub end: VertexId,
    pub steps: u64,
    pub accepted: u64,
}

impl ChainRun {
    pub fn accepted_frac(&self) -> f64 {
        if self.steps == 0 {
            0.0
        } else {
            self.accepted as f64 / self.steps as f64
        }
    }
}

/// `steps` Metropolis steps started at the root.
pub fn run_chain<W: TreeWeights + ?Sized, R: Rng + ?Sized>(weights: &W, steps: u64, rng: &mut R) -> ChainRun {
    let mut v = VertexId::ROOT;
    let mut accepted = 0;
    for _ in 0..steps {
        let next = mh_step(weights, v, rng);
        accepted += u64::from(next != v);
        v = next;
    }
    ChainRun { end: v, steps, accepted }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McmcSample {
    pub leaf: VertexId,
    /// Steps over all attempts.
    pub steps_used: u64,
    pub attempts: usize,
    pub accepted_frac: f64,
}

/// Runs the chain until it ends on a leaf, at most `max_retries` times. When
/// `m0 ≥ N` the leaf is drawn from the Gibbs measure directly.
pub fn sample_mcmc<R: Rng + ?Sized>(inst: &CremInstance, config: &ChainConfig, rng: &mut R) -> Result<McmcSample> {
    config.validate()?;
    let n = inst.depth();
    if config.m0 >= n {
        let leaf = exact_gibbs(inst, n, config.beta)?.sample(rng);
        return Ok(McmcSample { leaf, steps_used: 0, attempts: 1, accepted_frac: 0.0 });
    }
    let weights = StationaryWeights::new(inst, config.m0, config.beta, config.level_boost)?;
    let (mut steps, mut accepted) = (0u64, 0u64);
    for attempt in 1..=config.max_retries {
        let run = run_chain(&weights, config.steps, rng);
        steps += run.steps;
        accepted += run.accepted;
        if run.end.depth() == n {
            let accepted_frac = if steps == 0 { 0.0 } else { accepted as f64 / steps as f64 };
            return Ok(McmcSample { leaf: run.end, steps_used: steps, attempts: attempt, accepted_frac });
        }
    }
    Err(CremError::RetriesExhausted { attempts: config.max_retries, steps: config.steps })
}

/// Independent samples; replica `r` uses the stream `(path_seed, r)`.
pub fn sample_mcmc_replicas(
    inst: &CremInstance,
    config: &ChainConfig,
    path_seed: u64,
    replicas: usize,
) -> Vec<Result<McmcSample>> {
    (0..replicas)
        .into_par_iter()
        .map(|r| sample_mcmc(inst, config, &mut ChaCha8Rng::seed_from_u64(derive_seed(path_seed, r as u64))))
        .collect()
}
