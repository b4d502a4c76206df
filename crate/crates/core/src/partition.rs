//! Partition functions in log space: exact level sums, the annealed closed
//! form, normalized and subtree-normalized versions, and the lookahead depth
//! that makes `Ẑ_m` a good proxy for `Ẑ_N`.

use serde::{Deserialize, Serialize};

use crate::covariance::CovarianceSpec;
use crate::disorder::{CremInstance, VertexId};
use crate::error::{CremError, Result};
use crate::numerics::log_sum_exp_scaled;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimateKind {
    ExactLevel,
    Normalized,
    SubtreeNormalized,
    Lookahead,
}

/// A log partition function together with the parameters that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionEstimate {
    pub log_value: f64,
    pub kind: EstimateKind,
    pub beta: f64,
    /// Absolute depth of the summed level.
    pub n: usize,
    /// Depth below `root` for the subtree kinds.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub root: Option<VertexId>,
}

impl PartitionEstimate {
    pub fn exact(inst: &CremInstance, n: usize, beta: f64) -> Result<Self> {
        let log_value = exact_log_z(inst, n, beta)?;
        Ok(Self { log_value, kind: EstimateKind::ExactLevel, beta, n, m: None, root: None })
    }

    pub fn normalized(inst: &CremInstance, n: usize, beta: f64) -> Result<Self> {
        let log_value = normalized_log_z(inst, n, beta)?;
        Ok(Self { log_value, kind: EstimateKind::Normalized, beta, n, m: None, root: None })
    }

    pub fn subtree(inst: &CremInstance, v: VertexId, m: usize, beta: f64) -> Result<Self> {
        let log_value = subtree_normalized_log_z(inst, v, m, beta)?;
        Ok(Self { log_value, kind: EstimateKind::SubtreeNormalized, beta, n: v.depth() + m, m: Some(m), root: Some(v) })
    }

    /// Same quantity as [`PartitionEstimate::subtree`], labelled as the
    /// sequential sampler's child weight.
    pub fn lookahead(inst: &CremInstance, v: VertexId, m: usize, beta: f64) -> Result<Self> {
        Ok(Self { kind: EstimateKind::Lookahead, ..Self::subtree(inst, v, m, beta)? })
    }

    pub fn value(&self) -> f64 {
        self.log_value.exp()
    }
}

/// `ln Z_{β,n} = ln Σ_{|v|=n} e^{βX_v}`.
pub fn exact_log_z(inst: &CremInstance, n: usize, beta: f64) -> Result<f64> {
    let xs = inst.level_energies(n)?;
    Ok(log_sum_exp_scaled(&xs, beta))
}

/// `ln E Z_{β,n} = n ln 2 + β² a(n) / 2` for the depth-`depth` scaling of `spec`.
pub fn annealed_log_z(spec: &CovarianceSpec<f64>, depth: usize, n: usize, beta: f64) -> Result<f64> {
    if n > depth {
        return Err(CremError::DepthOutOfRange { depth: n, max: depth });
    }
    Ok(n as f64 * std::f64::consts::LN_2 + 0.5 * beta * beta * spec.scaled(depth, n))
}

/// Annealed log partition function of the instance's own scaling.
pub fn annealed_log_z_of(inst: &CremInstance, n: usize, beta: f64) -> f64 {
    n as f64 * std::f64::consts::LN_2 + 0.5 * beta * beta * inst.a(n)
}

/// `ln Ẑ_{β,n} = ln Z_{β,n} − ln E Z_{β,n}`.
pub fn normalized_log_z(inst: &CremInstance, n: usize, beta: f64) -> Result<f64> {
    Ok(exact_log_z(inst, n, beta)? - annealed_log_z_of(inst, n, beta))
}

/// Normalized partition function of the depth-`m` subtree below `v`:
/// `ln Σ_{|u|=m} e^{β(X_{vu} − X_v)} − m ln 2 − β²(a(|v|+m) − a(|v|))/2`.
pub fn subtree_normalized_log_z(inst: &CremInstance, v: VertexId, m: usize, beta: f64) -> Result<f64> {
    let offsets = inst.subtree_offsets(v, m)?;
    let d = v.depth();
    Ok(log_sum_exp_scaled(&offsets, beta) - subtree_annealed(inst, d, m, beta))
}

pub(crate) fn subtree_annealed(inst: &CremInstance, depth: usize, m: usize, beta: f64) -> f64 {
    m as f64 * std::f64::consts::LN_2 + 0.5 * beta * beta * (inst.a(depth + m) - inst.a(depth))
}

/// Lookahead depth `min(⌈C (a_max g⁻⁴ ln(1/(δg)) + g⁻² ln(1/ε))⌉, N)`, at
/// least 1.
pub fn lookahead_depth(
    spec: &CovarianceSpec<f64>,
    beta: f64,
    depth: usize,
    epsilon: f64,
    delta: f64,
    constant: f64,
) -> Result<usize> {
    let th = spec.thresholds()?;
    if !(beta >= 0.0 && beta < th.beta_min) {
        return Err(CremError::OutsideHighTemperature { beta, beta_min: th.beta_min });
    }
    for (name, x) in [("epsilon", epsilon), ("delta", delta)] {
        if !(x > 0.0 && x <= 1.0) {
            return Err(CremError::InvalidParameter(format!("{name} must lie in (0, 1], got {x}")));
        }
    }
    if !(constant > 0.0 && constant.is_finite()) {
        return Err(CremError::InvalidParameter(format!("constant must be positive, got {constant}")));
    }
    let g = th.gap(beta);
    let raw = constant * (th.a_max * g.powi(-4) * (1.0 / (delta * g)).ln() + g.powi(-2) * (1.0 / epsilon).ln());
    let m = raw.ceil();
    Ok(if m >= depth as f64 { depth } else { (m as usize).max(1) })
}

/// `(1/n) ln Z_{β,n}`.
pub fn free_energy(inst: &CremInstance, n: usize, beta: f64) -> Result<f64> {
    if n == 0 {
        return Err(CremError::InvalidParameter("free energy needs n ≥ 1".into()));
    }
    Ok(exact_log_z(inst, n, beta)? / n as f64)
}

/// Per-level summaries of one instance for several inverse temperatures,
/// from a single pass over the tree.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelProfile {
    pub betas: Vec<f64>,
    /// `log_z[b][n] = ln Z_{betas[b], n}` for `n = 0..=depth`.
    pub log_z: Vec<Vec<f64>>,
    /// `max_{|v|=n} X_v`.
    pub max_x: Vec<f64>,
    annealed: Vec<Vec<f64>>,
}

impl LevelProfile {
    pub fn new(inst: &CremInstance, depth: usize, betas: &[f64]) -> Result<Self> {
        let mut log_z = vec![Vec::with_capacity(depth + 1); betas.len()];
        let mut max_x = Vec::with_capacity(depth + 1);
        inst.visit_levels(depth, |_, xs| {
            for (row, &beta) in log_z.iter_mut().zip(betas) {
                row.push(log_sum_exp_scaled(xs, beta));
            }
            max_x.push(xs.iter().copied().fold(f64::NEG_INFINITY, f64::max));
        })?;
        let annealed = betas.iter().map(|&b| (0..=depth).map(|n| annealed_log_z_of(inst, n, b)).collect()).collect();
        Ok(Self { betas: betas.to_vec(), log_z, max_x, annealed })
    }

    /// `ln Ẑ_{β,n}` for the `b`-th inverse temperature.
    pub fn log_z_hat(&self, b: usize, n: usize) -> f64 {
        self.log_z[b][n] - self.annealed[b][n]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::LN_2;

    fn brw(seed: u64, depth: usize) -> CremInstance {
        CremInstance::new(seed, depth, CovarianceSpec::brw()).unwrap()
    }

    #[test]
    fn small_depth_values() {
        let inst = brw(42, 10);
        assert_eq!(exact_log_z(&inst, 0, 0.7).unwrap(), 0.0);
        let x0 = inst.x("0".parse().unwrap()).unwrap();
        let x1 = inst.x("1".parse().unwrap()).unwrap();
        let direct = ((0.7 * x0).exp() + (0.7 * x1).exp()).ln();
        assert!((exact_log_z(&inst, 1, 0.7).unwrap() - direct).abs() < 1e-14);
        assert!((free_energy(&inst, 1, 0.7).unwrap() - direct).abs() < 1e-14);
        assert!(free_energy(&inst, 0, 0.7).is_err());
        assert!((free_energy(&inst, 9, 0.0).unwrap() - LN_2).abs() < 1e-14);
    }

    #[test]
    fn annealed_closed_forms() {
        let brw = CovarianceSpec::brw();
        assert_eq!(annealed_log_z(&brw, 10, 0, 0.5).unwrap(), 0.0);
        assert!((annealed_log_z(&brw, 8, 8, 0.5).unwrap() - (8.0 * LN_2 + 1.0)).abs() < 1e-14);
        let grem = CovarianceSpec::grem(0.0, &[5, 5], &[0.5, 1.5], 10).unwrap();
        assert!((annealed_log_z(&grem, 10, 10, 1.0).unwrap() - (10.0 * LN_2 + 5.0)).abs() < 1e-12);
        assert!(annealed_log_z(&brw, 4, 5, 1.0).is_err());
    }

    #[test]
    fn zero_beta_normalizes_to_one() {
        let inst = brw(5, 12);
        for n in 0..=12 {
            assert!(normalized_log_z(&inst, n, 0.0).unwrap().abs() < 1e-12);
        }
    }

    #[test]
    fn subtree_consistency() {
        let inst = brw(17, 11);
        let v: VertexId = "0110".parse().unwrap();
        assert!(subtree_normalized_log_z(&inst, v, 0, 0.9).unwrap().abs() < 1e-15);
        for m in 0..=11 {
            let a = subtree_normalized_log_z(&inst, VertexId::ROOT, m, 0.9).unwrap();
            let b = normalized_log_z(&inst, m, 0.9).unwrap();
            assert!((a - b).abs() < 1e-12, "m={m}");
        }
        // direct sum over the 2^3 descendants
        let xv = inst.x(v).unwrap();
        let direct: f64 = (0..8).map(|i| (0.9 * (inst.x(v.join(VertexId::new(3, i))).unwrap() - xv)).exp()).sum();
        let expected = direct.ln() - 3.0 * LN_2 - 0.5 * 0.81 * 3.0;
        assert!((subtree_normalized_log_z(&inst, v, 3, 0.9).unwrap() - expected).abs() < 1e-12);
        assert!(subtree_normalized_log_z(&inst, v, 8, 0.9).is_err());
    }

    #[test]
    fn stable_for_huge_exponents() {
        let steep = CovarianceSpec::piecewise_linear(vec![(0.0, 0.0), (1.0, 1.0)]).unwrap();
        let inst = CremInstance::new(3, 16, steep).unwrap();
        let max = inst.level_energies(16).unwrap().iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let beta = 1000.0 / max;
        assert!(exact_log_z(&inst, 16, beta).unwrap().is_finite());
        assert!(exact_log_z(&inst, 16, -beta).unwrap().is_finite());
    }

    #[test]
    fn lookahead_depth_formula() {
        let brw = CovarianceSpec::brw();
        let beta_min = (2.0 * LN_2).sqrt();
        let beta = 0.5 * beta_min;
        let g = LN_2.sqrt() - beta * 0.5f64.sqrt();
        assert!((g - 0.416277).abs() < 1e-6);
        let expected = (g.powi(-4) * (10.0 / g).ln() + g.powi(-2) * 10f64.ln()).ceil() as usize;
        assert_eq!(expected, 120);
        assert_eq!(lookahead_depth(&brw, beta, 500, 0.1, 0.1, 1.0).unwrap(), 120);
        assert_eq!(lookahead_depth(&brw, beta, 20, 0.1, 0.1, 1.0).unwrap(), 20);
        let small = lookahead_depth(&brw, 1e-9, 50, 0.5, 0.5, 1.0).unwrap();
        assert!((1..=10).contains(&small), "{small}");
        assert_eq!(lookahead_depth(&brw, 1e-9, 50, 0.5, 0.5, 1e-6).unwrap(), 1);
        assert!(matches!(
            lookahead_depth(&brw, beta_min, 50, 0.1, 0.1, 1.0),
            Err(CremError::OutsideHighTemperature { .. })
        ));
        assert!(lookahead_depth(&brw, beta, 50, 0.0, 0.1, 1.0).is_err());
    }

    #[test]
    fn level_profile_agrees_with_direct_sums() {
        let inst = brw(23, 10);
        let betas = [0.0, 0.4, 1.1];
        let prof = LevelProfile::new(&inst, 10, &betas).unwrap();
        for (b, &beta) in betas.iter().enumerate() {
            for n in 0..=10 {
                assert!((prof.log_z[b][n] - exact_log_z(&inst, n, beta).unwrap()).abs() < 1e-12);
                assert!((prof.log_z_hat(b, n) - normalized_log_z(&inst, n, beta).unwrap()).abs() < 1e-12);
            }
        }
        let leaves = inst.level_energies(10).unwrap();
        assert_eq!(prof.max_x[10], leaves.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    }

    #[test]
    fn estimate_serializes_with_params() {
        let inst = brw(2, 6);
        let est = PartitionEstimate::subtree(&inst, "01".parse().unwrap(), 3, 0.5).unwrap();
        let json = serde_json::to_value(&est).unwrap();
        assert_eq!(json["kind"], "subtree_normalized");
        assert_eq!(json["root"], "01");
        assert_eq!(json["n"], 5);
        let look = PartitionEstimate::lookahead(&inst, "01".parse().unwrap(), 3, 0.5).unwrap();
        assert_eq!(look.log_value, est.log_value);
        assert_eq!(look.kind, EstimateKind::Lookahead);
    }
}
