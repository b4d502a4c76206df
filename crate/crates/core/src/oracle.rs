//! Exact small-depth ground truth: Gibbs distributions on a level, marginals,
//! total variation, and a Monte Carlo check of the density of the tilted
//! subtree law against the untilted one.

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::covariance::CovarianceSpec;
use crate::disorder::{rng::derive_seed, CremInstance, VertexId};
use crate::error::{CremError, Result};
use crate::numerics::{log_sum_exp, log_sum_exp_scaled};
use crate::partition::subtree_annealed;
use crate::scalar::Real;
use crate::stats::Summary;

/// Largest depth for which [`exact_gibbs`] materializes the distribution.
pub const GIBBS_MAX_DEPTH: usize = 20;

/// A probability vector over the `2^depth` vertices of one level, in
/// lexicographic bit order.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LeafDistribution<T> {
    depth: usize,
    probs: Vec<T>,
}

impl<T: Real> LeafDistribution<T> {
    pub fn new(depth: usize, probs: Vec<T>) -> Result<Self> {
        if 1usize.checked_shl(depth as u32) != Some(probs.len()) {
            return Err(CremError::InvalidDistribution(format!(
                "depth {depth} needs 2^{depth} entries, got {}",
                probs.len()
            )));
        }
        if let Some(p) = probs.iter().find(|p| !(**p >= T::zero()) || !p.is_finite()) {
            return Err(CremError::InvalidDistribution(format!("entry {p} is not a finite non-negative number")));
        }
        let total = probs.iter().fold(T::zero(), |a, &p| a + p);
        let tol = T::lit(1e-12).max(T::epsilon() * T::from_usize_lossy(probs.len()).sqrt() * T::lit(16.0));
        if (total - T::one()).abs() > tol {
            return Err(CremError::InvalidDistribution(format!("probabilities sum to {total}")));
        }
        Ok(Self { depth, probs })
    }

    pub fn uniform(depth: usize) -> Self {
        let n = 1usize << depth;
        Self { depth, probs: vec![T::one() / T::from_usize_lossy(n); n] }
    }

    pub fn point_mass(v: VertexId) -> Self {
        let mut probs = vec![T::zero(); 1 << v.depth()];
        probs[v.bits() as usize] = T::one();
        Self { depth: v.depth(), probs }
    }

    /// Normalizes `exp(log_w)`.
    pub fn from_log_weights(depth: usize, log_w: &[T]) -> Result<Self> {
        let lse = log_sum_exp(log_w);
        if !lse.is_finite() {
            return Err(CremError::InvalidDistribution("log weights have no finite total".into()));
        }
        Self::new(depth, log_w.iter().map(|&w| (w - lse).exp()).collect())
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn probs(&self) -> &[T] {
        &self.probs
    }

    pub fn prob(&self, v: VertexId) -> T {
        assert_eq!(v.depth(), self.depth, "vertex depth does not match distribution depth");
        self.probs[v.bits() as usize]
    }

    /// Law of the first `t` bits.
    pub fn marginal(&self, t: usize) -> Result<Self> {
        if t > self.depth {
            return Err(CremError::DepthOutOfRange { depth: t, max: self.depth });
        }
        let block = 1usize << (self.depth - t);
        let probs = self.probs.chunks(block).map(|c| c.iter().fold(T::zero(), |a, &p| a + p)).collect();
        Ok(Self { depth: t, probs })
    }

    /// `½ Σ |p_i − q_i|`.
    pub fn tv(&self, other: &Self) -> Result<T> {
        if self.depth != other.depth {
            return Err(CremError::DepthMismatch(self.depth, other.depth));
        }
        let sum = self.probs.iter().zip(&other.probs).fold(T::zero(), |a, (&p, &q)| a + (p - q).abs());
        Ok(T::lit(0.5) * sum)
    }

    pub fn to_f64(&self) -> LeafDistribution<f64> {
        LeafDistribution { depth: self.depth, probs: self.probs.iter().map(|p| p.as_f64()).collect() }
    }

    /// `bits,prob` rows.
    pub fn write_csv<W: std::io::Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "bits,prob")?;
        for (i, p) in self.probs.iter().enumerate() {
            writeln!(out, "{},{:e}", VertexId::new(self.depth, i as u64), p.as_f64())?;
        }
        Ok(())
    }
}

impl LeafDistribution<f64> {
    /// Inverse-CDF draw.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> VertexId {
        VertexId::new(self.depth, sample_index(&self.probs, rng.gen::<f64>()) as u64)
    }
}

/// Index `i` with `Σ_{j<i} p_j ≤ u < Σ_{j≤i} p_j`, skipping zero-mass
/// entries at the end.
pub(crate) fn sample_index(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// `μ_{β,n}(v) = e^{βX_v} / Z_{β,n}` over depth `n`.
pub fn exact_gibbs(inst: &CremInstance, n: usize, beta: f64) -> Result<LeafDistribution<f64>> {
    if n > GIBBS_MAX_DEPTH {
        return Err(CremError::EnumerationCap { depth: n, cap: GIBBS_MAX_DEPTH });
    }
    let xs = inst.level_energies(n)?;
    let lse = log_sum_exp_scaled(&xs, beta);
    Ok(LeafDistribution { depth: n, probs: xs.iter().map(|&x| (beta * x - lse).exp()).collect() })
}

pub fn marginal_of<T: Real>(dist: &LeafDistribution<T>, t: usize) -> Result<LeafDistribution<T>> {
    dist.marginal(t)
}

pub fn tv<T: Real>(p: &LeafDistribution<T>, q: &LeafDistribution<T>) -> Result<T> {
    p.tv(q)
}

/// Number of grid points for the tilt density estimate.
pub const TILT_GRID: usize = 32;
const TILT_FINE_GRID: usize = 1024;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TiltBin {
    /// Grid point the bin is centred on (geometrically).
    pub z: f64,
    pub lo: f64,
    pub hi: f64,
    /// `f̂_n(z)` and its standard error.
    pub f_hat: f64,
    pub f_se: f64,
    /// `E_Q[1_bin(Ẑ)]` estimated from the Gibbs prefix law.
    pub direct: f64,
    /// `E_P[f̂_n(Ẑ) 1_bin(Ẑ)]`.
    pub tilted: f64,
    pub se: f64,
    /// `|direct − tilted| / se`.
    pub z_score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TiltReport {
    pub n: usize,
    pub extra_depth: usize,
    pub beta: f64,
    pub seeds: usize,
    pub bins: Vec<TiltBin>,
    /// `E_P[f̂_n(Ẑ)]`, which should be 1.
    pub density_total: f64,
    pub density_se: f64,
    pub max_z_score: f64,
    /// Whether `f̂_n` is non-decreasing on the grid.
    pub monotone: bool,
}

impl TiltReport {
    pub fn passed(&self, n_se: f64) -> bool {
        self.max_z_score <= n_se && (self.density_total - 1.0).abs() <= n_se * self.density_se.max(1e-300) && self.monotone
    }
}

struct TiltSample {
    /// Gibbs weight of `v₀` at depth `n`.
    p0: f64,
    /// `Σ_{w≠v₀} p_w Ẑ^w`.
    rest: f64,
    z0: f64,
    /// `(q_v, Ẑ^v)` with `q_v ∝ p_v Ẑ^v` the depth-`n` marginal of `μ_{β,N}`.
    marginal: Vec<(f64, f64)>,
}

fn tilt_sample(spec: &CovarianceSpec<f64>, beta: f64, n: usize, extra: usize, seed: u64) -> Result<TiltSample> {
    let depth = n + extra;
    let inst = CremInstance::new(seed, depth, spec.clone())?;
    let mut xn = Vec::new();
    let mut log_zhat = Vec::new();
    let shift = subtree_annealed(&inst, n, extra, beta);
    inst.visit_levels(depth, |d, xs| {
        if d == n {
            xn = xs.to_vec();
        }
        if d == depth {
            let block = 1 << extra;
            log_zhat = xs
                .chunks(block)
                .zip(&xn)
                .map(|(c, &x)| log_sum_exp_scaled(c, beta) - beta * x - shift)
                .collect();
        }
    })?;
    let lse = log_sum_exp_scaled(&xn, beta);
    let p: Vec<f64> = xn.iter().map(|&x| (beta * x - lse).exp()).collect();
    let zhat: Vec<f64> = log_zhat.iter().map(|l| l.exp()).collect();
    let total: f64 = p.iter().zip(&zhat).map(|(a, b)| a * b).sum();
    let marginal = p.iter().zip(&zhat).map(|(&a, &z)| (a * z / total, z)).collect();
    Ok(TiltSample { p0: p[0], rest: total - p[0] * zhat[0], z0: zhat[0], marginal })
}

/// Monte Carlo check that the density of the tilted subtree law is
/// `f_n(z) = E[2^n p_{v₀} z / (p_{v₀} z + Σ_{w≠v₀} p_w Ẑ^w)]`, with `v₀` the
/// all-zeros vertex: compares `E_Q[1_bin(Ẑ)]` estimated from the prefix law
/// with `E_P[f̂_n(Ẑ) 1_bin(Ẑ)]` on 32 bins.
pub fn tilt_density_check(
    spec: &CovarianceSpec<f64>,
    beta: f64,
    n: usize,
    extra_depth: usize,
    seeds: usize,
    base_seed: u64,
) -> Result<TiltReport> {
    if n + extra_depth > 16 {
        return Err(CremError::EnumerationCap { depth: n + extra_depth, cap: 16 });
    }
    let th = spec.thresholds()?;
    if !(beta >= 0.0 && beta < th.beta_min) {
        return Err(CremError::OutsideHighTemperature { beta, beta_min: th.beta_min });
    }
    if seeds < 2 {
        return Err(CremError::InvalidParameter("tilt check needs at least 2 seeds".into()));
    }
    let samples: Vec<TiltSample> = (0..seeds)
        .into_par_iter()
        .map(|i| tilt_sample(spec, beta, n, extra_depth, derive_seed(base_seed, i as u64)))
        .collect::<Result<_>>()?;

    let (zmin, zmax) = samples
        .iter()
        .flat_map(|s| s.marginal.iter().map(|m| m.1))
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), z| (lo.min(z), hi.max(z)));
    let grid = log_grid(zmin, zmax, TILT_GRID);
    let fine = log_grid(zmin, zmax, TILT_FINE_GRID);
    let scale = (1u64 << n) as f64;
    let g = |s: &TiltSample, z: f64| {
        let num = s.p0 * z;
        let den = num + s.rest;
        if den > 0.0 {
            scale * num / den
        } else {
            1.0
        }
    };
    let f_at = |z: f64| -> Summary {
        let vals: Vec<f64> = samples.iter().map(|s| g(s, z)).collect();
        Summary::of(&vals)
    };
    let f_grid: Vec<Summary> = grid.iter().map(|&z| f_at(z)).collect();
    let f_fine: Vec<f64> = fine.iter().map(|&z| f_at(z).mean).collect();
    let f_interp = |z: f64| interpolate_log(&fine, &f_fine, z);

    let edges: Vec<f64> = grid.windows(2).map(|w| (w[0] * w[1]).sqrt()).collect();
    let bin_of = |z: f64| edges.partition_point(|&e| e <= z);

    // The tilted estimator averages g_{s'}(Ẑ_s) over all seed pairs, so each
    // seed enters twice: through Ẑ^{v₀}_s and through (p_{v₀}, rest)_s. Its
    // standard error uses the influence of both roles; the second one is
    // evaluated against the empirical law of Ẑ^{v₀} binned on the fine grid.
    let fine_edges: Vec<f64> = fine.windows(2).map(|w| (w[0] * w[1]).sqrt()).collect();
    let mut fine_mass = vec![0.0; fine.len()];
    for sample in &samples {
        fine_mass[fine_edges.partition_point(|&e| e <= sample.z0)] += 1.0 / seeds as f64;
    }
    let occupied: Vec<(usize, f64, f64)> = fine
        .iter()
        .zip(&fine_mass)
        .filter(|(_, &w)| w > 0.0)
        .map(|(&z, &w)| (bin_of(z), z, w))
        .collect();

    let k = grid.len();
    let mut direct = vec![vec![0.0; seeds]; k];
    let mut tilted = vec![vec![0.0; seeds]; k];
    let mut influence = vec![vec![0.0; seeds]; k];
    let mut density = vec![0.0; seeds];
    let mut density_influence = vec![0.0; seeds];
    for (s, sample) in samples.iter().enumerate() {
        for &(q, z) in &sample.marginal {
            direct[bin_of(z)][s] += q;
        }
        let f0 = f_interp(sample.z0);
        tilted[bin_of(sample.z0)][s] = f0;
        density[s] = f0;
        density_influence[s] = f0;
        for &(b, z, w) in &occupied {
            let second = w * g(sample, z);
            influence[b][s] -= second;
            density_influence[s] += second;
        }
        for b in 0..k {
            influence[b][s] += direct[b][s] - tilted[b][s];
        }
    }
    let bins = (0..k)
        .map(|b| {
            let d = Summary::of(&direct[b]);
            let t = Summary::of(&tilted[b]);
            let se = Summary::of(&influence[b]).se;
            let gap = (d.mean - t.mean).abs();
            let z_score = if gap == 0.0 { 0.0 } else { gap / se };
            TiltBin {
                z: grid[b],
                lo: if b == 0 { 0.0 } else { edges[b - 1] },
                hi: if b + 1 == k { f64::INFINITY } else { edges[b] },
                f_hat: f_grid[b].mean,
                f_se: f_grid[b].se,
                direct: d.mean,
                tilted: t.mean,
                se,
                z_score,
            }
        })
        .collect::<Vec<_>>();
    let dens = Summary::of(&density);
    Ok(TiltReport {
        n,
        extra_depth,
        beta,
        seeds,
        max_z_score: bins.iter().map(|b| b.z_score).fold(0.0, f64::max),
        monotone: f_grid.windows(2).all(|w| w[1].mean >= w[0].mean),
        bins,
        density_total: dens.mean,
        density_se: Summary::of(&density_influence).se,
    })
}

fn log_grid(lo: f64, hi: f64, k: usize) -> Vec<f64> {
    if !(hi > lo) {
        return vec![lo; k];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..k).map(|i| (a + (b - a) * i as f64 / (k - 1) as f64).exp()).collect()
}

/// Piecewise-linear interpolation in `ln z`, constant beyond the ends.
fn interpolate_log(xs: &[f64], ys: &[f64], z: f64) -> f64 {
    let i = xs.partition_point(|&x| x <= z);
    if i == 0 {
        return ys[0];
    }
    if i == xs.len() {
        return ys[xs.len() - 1];
    }
    let (x0, x1) = (xs[i - 1].ln(), xs[i].ln());
    if x1 == x0 {
        return ys[i];
    }
    let t = (z.ln() - x0) / (x1 - x0);
    ys[i - 1] + t * (ys[i] - ys[i - 1])
}
