//! Reproducible CREM disorder on the depth-`N` binary tree.
//!
//! Each vertex `u` carries an edge increment `Y_u ~ N(0, a(|u|) − a(|u|−1))`
//! (with `Var Y_φ = a(0)`) and an energy `X_v = Σ_{m ≤ |v|} Y_{v_1…v_m}`.
//! `Y_u` is a pure function of `(seed, u)`, drawn from a counter-based keyed
//! generator, so any subset of the tree can be explored lazily and in any
//! order with bit-identical results.

pub mod rng;
mod vertex;

use std::io::Write;

use dashmap::DashMap;

use crate::covariance::CovarianceSpec;
use crate::error::{CremError, Result};

pub use vertex::{VertexId, MAX_DEPTH};

/// Default cap on full-level enumeration (2^25 leaves).
pub const DEFAULT_ENUMERATION_CAP: usize = 25;

#[derive(Debug)]
pub struct CremInstance {
    seed: u64,
    key: u64,
    depth: usize,
    spec: CovarianceSpec<f64>,
    /// `a(m)` for `m = 0..=N`.
    variance: Vec<f64>,
    /// Standard deviation of `Y_u` for `|u| = m`.
    increment_sd: Vec<f64>,
    enumeration_cap: usize,
    energies: DashMap<u64, f64>,
}

impl Clone for CremInstance {
    fn clone(&self) -> Self {
        // The memo is a cache of pure values; a fresh one is equivalent.
        let mut copy = CremInstance::new(self.seed, self.depth, self.spec.clone()).expect("validated on construction");
        copy.enumeration_cap = self.enumeration_cap;
        copy
    }
}

impl CremInstance {
    /// Creates an instance with no Gaussians drawn yet.
    pub fn new(seed: u64, depth: usize, spec: CovarianceSpec<f64>) -> Result<Self> {
        if depth == 0 {
            return Err(CremError::InvalidParameter("tree depth must be at least 1".into()));
        }
        if depth > MAX_DEPTH {
            return Err(CremError::DepthOutOfRange { depth, max: MAX_DEPTH });
        }
        let variance: Vec<f64> = (0..=depth).map(|m| spec.scaled(depth, m)).collect();
        let mut increment_sd = Vec::with_capacity(depth + 1);
        increment_sd.push(variance[0].max(0.0).sqrt());
        for m in 1..=depth {
            increment_sd.push((variance[m] - variance[m - 1]).max(0.0).sqrt());
        }
        Ok(Self {
            seed,
            key: rng::stream_key(seed),
            depth,
            spec,
            variance,
            increment_sd,
            enumeration_cap: DEFAULT_ENUMERATION_CAP,
            energies: DashMap::new(),
        })
    }

    pub fn with_enumeration_cap(mut self, cap: usize) -> Self {
        self.enumeration_cap = cap;
        self
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn spec(&self) -> &CovarianceSpec<f64> {
        &self.spec
    }

    pub fn enumeration_cap(&self) -> usize {
        self.enumeration_cap
    }

    /// Unnormalized covariance `a(m) = N·A(m/N)`.
    #[inline]
    pub fn a(&self, m: usize) -> f64 {
        self.variance[m]
    }

    /// `Var Y_u` for `|u| = m`.
    pub fn increment_variance(&self, m: usize) -> f64 {
        self.increment_sd[m] * self.increment_sd[m]
    }

    fn check_depth(&self, depth: usize) -> Result<()> {
        if depth > self.depth {
            return Err(CremError::DepthOutOfRange { depth, max: self.depth });
        }
        Ok(())
    }

    pub(crate) fn check_enumeration(&self, depth: usize) -> Result<()> {
        if depth > self.enumeration_cap {
            return Err(CremError::EnumerationCap { depth, cap: self.enumeration_cap });
        }
        Ok(())
    }

    #[inline]
    fn y_raw(&self, v: VertexId) -> f64 {
        let sd = self.increment_sd[v.depth()];
        if sd == 0.0 {
            return 0.0;
        }
        sd * rng::keyed_normal(self.key, v.key())
    }

    /// Edge increment `Y_v`.
    pub fn y(&self, v: VertexId) -> Result<f64> {
        self.check_depth(v.depth())?;
        Ok(self.y_raw(v))
    }

    /// Energy `X_v`, memoized per prefix (write-once).
    pub fn x(&self, v: VertexId) -> Result<f64> {
        self.check_depth(v.depth())?;
        Ok(self.x_cached(v))
    }

    fn x_cached(&self, v: VertexId) -> f64 {
        if let Some(x) = self.energies.get(&v.key()) {
            return *x;
        }
        let value = if v.is_root() { self.y_raw(v) } else { self.x_cached(v.parent()) + self.y_raw(v) };
        *self.energies.entry(v.key()).or_insert(value)
    }

    /// Number of memoized energies.
    pub fn cached_vertices(&self) -> usize {
        self.energies.len()
    }

    /// Energies of all `2^n` vertices at depth `n`, indexed by level index.
    /// Bit-identical to [`CremInstance::x`].
    pub fn level_energies(&self, n: usize) -> Result<Vec<f64>> {
        self.check_depth(n)?;
        self.check_enumeration(n)?;
        Ok(self.level_only(n))
    }

    /// Energies of every level `0..=n`.
    pub fn all_level_energies(&self, n: usize) -> Result<Vec<Vec<f64>>> {
        self.check_depth(n)?;
        self.check_enumeration(n)?;
        Ok(self.levels_from(VertexId::ROOT, n, self.y_raw(VertexId::ROOT)))
    }

    /// Offsets `X_{vw} − X_v` for all `|w| = m`, lexicographic in `w`.
    pub fn subtree_offsets(&self, v: VertexId, m: usize) -> Result<Vec<f64>> {
        self.check_depth(v.depth() + m)?;
        self.check_enumeration(m)?;
        let mut levels = self.levels_from(v, m, 0.0);
        Ok(levels.pop().unwrap_or_default())
    }

    /// Breadth-first generation below `v`: entry `d` holds `2^d` values
    /// `start + Σ Y` along each length-`d` extension of `v`.
    fn levels_from(&self, v: VertexId, m: usize, start: f64) -> Vec<Vec<f64>> {
        let mut levels = Vec::with_capacity(m + 1);
        levels.push(vec![start]);
        for d in 1..=m {
            let mut next = Vec::new();
            self.extend_level(v, d, &levels[d - 1], &mut next);
            levels.push(next);
        }
        levels
    }

    /// Values at relative depth `d` below `v` from those at `d − 1`.
    pub(crate) fn extend_level(&self, v: VertexId, d: usize, prev: &[f64], next: &mut Vec<f64>) {
        let sd = self.increment_sd[v.depth() + d];
        next.clear();
        next.reserve(prev.len() * 2);
        if sd == 0.0 {
            for &x in prev {
                next.push(x);
                next.push(x);
            }
            return;
        }
        // Keys of the depth-`d` descendants of `v` are contiguous.
        let base = v.key() << d;
        next.extend(prev.iter().enumerate().flat_map(|(i, &x)| {
            let k = base + 2 * i as u64;
            [x + sd * rng::keyed_normal(self.key, k), x + sd * rng::keyed_normal(self.key, k + 1)]
        }));
    }

    /// Energies at depth `n` without keeping the shallower levels.
    fn level_only(&self, n: usize) -> Vec<f64> {
        let mut cur = vec![self.y_raw(VertexId::ROOT)];
        let mut next = Vec::new();
        for d in 1..=n {
            self.extend_level(VertexId::ROOT, d, &cur, &mut next);
            std::mem::swap(&mut cur, &mut next);
        }
        cur
    }

    /// Calls `f(d, energies at depth d)` for `d = 0..=n`, holding at most two
    /// levels in memory.
    pub fn visit_levels<F: FnMut(usize, &[f64])>(&self, n: usize, mut f: F) -> Result<()> {
        self.check_depth(n)?;
        self.check_enumeration(n)?;
        let mut cur = vec![self.y_raw(VertexId::ROOT)];
        let mut next = Vec::new();
        f(0, &cur);
        for d in 1..=n {
            self.extend_level(VertexId::ROOT, d, &cur, &mut next);
            std::mem::swap(&mut cur, &mut next);
            f(d, &cur);
        }
        Ok(())
    }

    /// All `(vertex, X)` pairs at depth `n` in lexicographic order.
    pub fn enumerate_level(&self, n: usize) -> Result<impl Iterator<Item = (VertexId, f64)>> {
        let energies = self.level_energies(n)?;
        Ok(energies.into_iter().enumerate().map(move |(i, x)| (VertexId::new(n, i as u64), x)))
    }

    /// Writes `path_bits,depth,Y,X` rows for every vertex down to `max_depth`,
    /// breadth first.
    pub fn write_csv<W: Write>(&self, max_depth: usize, mut out: W) -> Result<()> {
        self.check_depth(max_depth)?;
        self.check_enumeration(max_depth)?;
        writeln!(out, "path_bits,depth,Y,X")?;
        let levels = self.all_level_energies(max_depth)?;
        for (d, level) in levels.iter().enumerate() {
            for (i, &x) in level.iter().enumerate() {
                let v = VertexId::new(d, i as u64);
                writeln!(out, "{},{},{:e},{:e}", v, d, self.y_raw(v), x)?;
            }
        }
        Ok(())
    }
}
