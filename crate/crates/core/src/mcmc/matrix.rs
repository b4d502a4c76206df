//! Exact Metropolis kernel on a small tree.
//!
//! Vertices are indexed breadth first (root 0, children of `i` at `2i+1`,
//! `2i+2`). Each row has at most four non-zero entries, so the kernel is
//! stored by move; [`TransitionMatrixView::dense`] expands it.

use crate::disorder::{CremInstance, VertexId};
use crate::error::{CremError, Result};
use crate::numerics::log_sum_exp;
use crate::oracle::LeafDistribution;

use super::{StationaryWeights, TreeWeights};

/// Largest tree depth for which the kernel is built (8191 states).
pub const MATRIX_MAX_DEPTH: usize = 12;
const DENSE_MAX_DEPTH: usize = 10;
/// Relative tolerance for the reversibility check in [`TransitionMatrixView::spectral_gap`].
const REVERSIBILITY_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct TransitionMatrixView {
    depth: usize,
    log_w: Vec<f64>,
    pi: Vec<f64>,
    /// Probability of moving to the parent.
    pub(super) up: Vec<f64>,
    /// Probability of moving to child 0 / child 1.
    down: Vec<[f64; 2]>,
    stay: Vec<f64>,
}

/// Kernel of the sampler on `inst` with conditioning depth `m0`.
pub fn transition_matrix(inst: &CremInstance, m0: usize, beta: f64, level_boost: bool) -> Result<TransitionMatrixView> {
    let w = StationaryWeights::new(inst, m0, beta, level_boost)?;
    TransitionMatrixView::from_weights(&w)
}

fn accept(from: f64, to: f64) -> f64 {
    (to - from).exp().min(1.0) / 3.0
}

impl TransitionMatrixView {
    pub fn from_weights<W: TreeWeights + ?Sized>(weights: &W) -> Result<Self> {
        let depth = weights.depth();
        if depth > MATRIX_MAX_DEPTH {
            return Err(CremError::EnumerationCap { depth, cap: MATRIX_MAX_DEPTH });
        }
        let size = (2usize << depth) - 1;
        let log_w: Vec<f64> = (0..size).map(|i| weights.log_weight(VertexId::from_bfs_index(i))).collect();
        Self::from_log_weights(depth, log_w)
    }

    /// Kernel for explicit breadth-first log weights.
    pub fn from_log_weights(depth: usize, log_w: Vec<f64>) -> Result<Self> {
        let size = (2usize << depth) - 1;
        if log_w.len() != size {
            return Err(CremError::InvalidParameter(format!("expected {size} weights, got {}", log_w.len())));
        }
        let lse = log_sum_exp(&log_w);
        if !lse.is_finite() {
            return Err(CremError::InvalidParameter("weights have no finite total".into()));
        }
        let pi = log_w.iter().map(|&l| (l - lse).exp()).collect();
        let leaves = (1usize << depth) - 1;
        let mut up = vec![0.0; size];
        let mut down = vec![[0.0; 2]; size];
        let mut stay = vec![0.0; size];
        for i in 0..size {
            if i > 0 {
                up[i] = accept(log_w[i], log_w[(i - 1) / 2]);
            }
            if i < leaves {
                down[i] = [accept(log_w[i], log_w[2 * i + 1]), accept(log_w[i], log_w[2 * i + 2])];
            }
            stay[i] = 1.0 - up[i] - down[i][0] - down[i][1];
        }
        Ok(Self { depth, log_w, pi, up, down, stay })
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn size(&self) -> usize {
        self.pi.len()
    }

    /// Normalized stationary law, breadth first.
    pub fn pi(&self) -> &[f64] {
        &self.pi
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_w
    }

    fn is_leaf(&self, i: usize) -> bool {
        i >= (1usize << self.depth) - 1
    }

    /// Non-zero entries of row `u`.
    pub fn row(&self, u: usize) -> Vec<(usize, f64)> {
        let mut row = vec![(u, self.stay[u])];
        if u > 0 {
            row.push(((u - 1) / 2, self.up[u]));
        }
        if !self.is_leaf(u) {
            row.push((2 * u + 1, self.down[u][0]));
            row.push((2 * u + 2, self.down[u][1]));
        }
        row
    }

    pub fn entry(&self, u: usize, w: usize) -> f64 {
        self.row(u).into_iter().find(|&(j, _)| j == w).map_or(0.0, |(_, p)| p)
    }

    /// Row-major dense copy (depth ≤ 10).
    pub fn dense(&self) -> Result<Vec<Vec<f64>>> {
        if self.depth > DENSE_MAX_DEPTH {
            return Err(CremError::EnumerationCap { depth: self.depth, cap: DENSE_MAX_DEPTH });
        }
        let n = self.size();
        Ok((0..n)
            .map(|u| {
                let mut r = vec![0.0; n];
                for (j, p) in self.row(u) {
                    r[j] = p;
                }
                r
            })
            .collect())
    }

    /// `max_u |Σ_w T(u, w) − 1|`.
    pub fn row_sum_error(&self) -> f64 {
        (0..self.size())
            .map(|u| (self.row(u).iter().map(|e| e.1).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Largest relative violation of `π(u)T(u,w) = π(w)T(w,u)` over edges.
    pub fn detailed_balance_error(&self) -> f64 {
        (1..self.size())
            .map(|i| {
                let p = (i - 1) / 2;
                let x = if i % 2 == 1 { 0 } else { 1 };
                let a = self.pi[i] * self.up[i];
                let b = self.pi[p] * self.down[p][x];
                if a == b {
                    0.0
                } else {
                    (a - b).abs() / a.max(b)
                }
            })
            .fold(0.0, f64::max)
    }

    /// `max_v |(πT)(v) − π(v)|`.
    pub fn stationarity_error(&self) -> f64 {
        self.step(&self.pi).iter().zip(&self.pi).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    /// `law · T`.
    pub fn step(&self, law: &[f64]) -> Vec<f64> {
        let mut next: Vec<f64> = law.iter().zip(&self.stay).map(|(p, s)| p * s).collect();
        for (i, &p) in law.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            if i > 0 {
                next[(i - 1) / 2] += p * self.up[i];
            }
            if !self.is_leaf(i) {
                next[2 * i + 1] += p * self.down[i][0];
                next[2 * i + 2] += p * self.down[i][1];
            }
        }
        next
    }

    /// Law of `V_T` started from the root.
    pub fn law_after(&self, steps: u64) -> Vec<f64> {
        let mut law = vec![0.0; self.size()];
        law[0] = 1.0;
        for _ in 0..steps {
            law = self.step(&law);
        }
        law
    }

    /// `law` conditioned on the deepest level.
    pub fn leaf_conditional(&self, law: &[f64]) -> Result<LeafDistribution<f64>> {
        let start = (1usize << self.depth) - 1;
        let leaves = &law[start..];
        let total: f64 = leaves.iter().sum();
        if !(total > 0.0) {
            return Err(CremError::InvalidDistribution("no mass on the leaves".into()));
        }
        LeafDistribution::new(self.depth, leaves.iter().map(|p| p / total).collect())
    }

    /// `½ Σ |law − π|`.
    pub fn tv_to_stationary(&self, law: &[f64]) -> f64 {
        0.5 * law.iter().zip(&self.pi).map(|(a, b)| (a - b).abs()).sum::<f64>()
    }

    /// Symmetrized off-diagonal entry between `i` and its parent:
    /// `√(T(i,p) T(p,i)) = e^{−|ln π̃_i − ln π̃_p|/2} / 3`.
    fn sym_up(&self, i: usize) -> f64 {
        (-(self.log_w[i] - self.log_w[(i - 1) / 2]).abs() * 0.5).exp() / 3.0
    }

    /// Number of eigenvalues of `I − D^{1/2} T D^{−1/2}` below `mu`, by
    /// counting negative pivots of the tree-ordered LDLᵀ factorization.
    fn count_below(&self, mu: f64) -> usize {
        let n = self.size();
        let mut pivot = vec![0.0; n];
        let mut negative = 0;
        for i in (0..n).rev() {
            let mut d = (self.up[i] + self.down[i][0] + self.down[i][1]) - mu;
            if !self.is_leaf(i) {
                for c in [2 * i + 1, 2 * i + 2] {
                    let s = self.sym_up(c);
                    d -= s * s / pivot[c];
                }
            }
            if d == 0.0 {
                d = -f64::MIN_POSITIVE;
            }
            if d < 0.0 {
                negative += 1;
            }
            pivot[i] = d;
        }
        negative
    }

    /// `1 − λ₂` for the second largest eigenvalue `λ₂` of `T`, via bisection
    /// on Sturm counts of the symmetrized kernel.
    pub fn spectral_gap(&self) -> Result<f64> {
        let err = self.detailed_balance_error();
        if err > REVERSIBILITY_TOL {
            return Err(CremError::NotReversible(err));
        }
        let mut hi = 2.0 + 1e-9;
        let mut lo = 1.0;
        while self.count_below(lo) >= 2 {
            hi = lo;
            lo *= 0.5;
            if lo < 1e-300 {
                return Ok(0.0);
            }
        }
        // count_below(lo) ≤ 1 < count_below(hi)
        for _ in 0..200 {
            let mid = (lo * hi).sqrt();
            if self.count_below(mid) >= 2 {
                hi = mid;
            } else {
                lo = mid;
            }
            if hi - lo <= 1e-14 * hi {
                break;
            }
        }
        Ok(0.5 * (lo + hi))
    }
}
