//! Piecewise-linear covariance functions `A: [0, 1] -> R≥0`, their concave
//! hulls, and the inverse-temperature thresholds derived from them.
//!
//! A depth-`N` instance uses the unnormalized function `a(m) = N·A(m/N)`:
//! `a(m)` is the variance of the energy of any vertex at depth `m`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CremError, Result};
use crate::scalar::Real;

/// Non-decreasing piecewise-linear function on `[0, 1]`, stored as its
/// breakpoints. Immutable after construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CovarianceDoc<T>", into = "CovarianceDoc<T>")]
#[serde(bound(serialize = "T: Real + Serialize", deserialize = "T: Real + Deserialize<'de>"))]
pub struct CovarianceSpec<T> {
    breakpoints: Vec<(T, T)>,
}

/// JSON shape `{"breakpoints": [[x, A], ...]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CovarianceDoc<T> {
    pub breakpoints: Vec<[T; 2]>,
}

impl<T: Real> TryFrom<CovarianceDoc<T>> for CovarianceSpec<T> {
    type Error = CremError;

    fn try_from(doc: CovarianceDoc<T>) -> Result<Self> {
        CovarianceSpec::piecewise_linear(doc.breakpoints.into_iter().map(|[x, y]| (x, y)).collect())
    }
}

impl<T: Real> From<CovarianceSpec<T>> for CovarianceDoc<T> {
    fn from(spec: CovarianceSpec<T>) -> Self {
        CovarianceDoc { breakpoints: spec.breakpoints.into_iter().map(|(x, y)| [x, y]).collect() }
    }
}

/// Thresholds for the high-temperature regime.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Thresholds<T> {
    /// `sup A'` over `[0, 1)`.
    pub a_max: T,
    /// `sup Â'`, the largest slope of the concave hull.
    pub a_hat_max: T,
    pub beta_c: T,
    /// `+inf` when `A` is concave.
    pub beta_g: T,
    pub beta_min: T,
}

impl<T: Real> Thresholds<T> {
    /// `g(β) = √(ln 2) − β·√(a_max / 2)`; positive exactly when `β < beta_min`.
    pub fn gap(&self, beta: T) -> T {
        T::LN_2().sqrt() - beta * (self.a_max / T::lit(2.0)).sqrt()
    }
}

fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(CremError::InvalidCovariance(msg.into()))
}

impl<T: Real> CovarianceSpec<T> {
    /// Validates breakpoints `(x, A(x))`: `x` strictly increasing from 0 to 1,
    /// values finite, non-negative and non-decreasing.
    pub fn piecewise_linear(breakpoints: Vec<(T, T)>) -> Result<Self> {
        if breakpoints.len() < 2 {
            return invalid("need breakpoints at both x = 0 and x = 1");
        }
        for &(x, y) in &breakpoints {
            if !x.is_finite() || !y.is_finite() {
                return invalid("breakpoints must be finite");
            }
            if x < T::zero() || x > T::one() {
                return invalid(format!("x = {x} lies outside [0, 1]"));
            }
            if y < T::zero() {
                return invalid(format!("A({x}) = {y} is negative"));
            }
        }
        if breakpoints[0].0 != T::zero() {
            return invalid("first breakpoint must be at x = 0");
        }
        if breakpoints[breakpoints.len() - 1].0 != T::one() {
            return invalid("last breakpoint must be at x = 1");
        }
        for w in breakpoints.windows(2) {
            if w[1].0 <= w[0].0 {
                return invalid(format!("x-coordinates not strictly increasing at x = {}", w[1].0));
            }
            if w[1].1 < w[0].1 {
                return invalid(format!("A decreases between x = {} and x = {}", w[0].0, w[1].0));
            }
        }
        Ok(Self { breakpoints })
    }

    /// `A(x) = x`: the branching random walk.
    pub fn brw() -> Self {
        Self { breakpoints: vec![(T::zero(), T::zero()), (T::one(), T::one())] }
    }

    /// GREM covariance with initial energy `a0`, block lengths `lengths` (summing
    /// to `depth`) and per-block energies: `A` has slope `energies[i]` across
    /// block `i` and starts at `A(0) = a0`.
    pub fn grem(a0: T, lengths: &[usize], energies: &[T], depth: usize) -> Result<Self> {
        if lengths.len() != energies.len() {
            return invalid(format!("{} block lengths but {} energies", lengths.len(), energies.len()));
        }
        if lengths.is_empty() {
            return invalid("GREM needs at least one block");
        }
        if lengths.iter().sum::<usize>() != depth {
            return invalid(format!("block lengths sum to {} but depth is {depth}", lengths.iter().sum::<usize>()));
        }
        if lengths.contains(&0) {
            return invalid("GREM block lengths must be positive");
        }
        if a0 < T::zero() || energies.iter().any(|&e| e < T::zero() || !e.is_finite()) {
            return invalid("GREM energies must be non-negative");
        }
        let n = T::from_usize_lossy(depth);
        let mut points = vec![(T::zero(), a0)];
        let (mut offset, mut value) = (0usize, a0);
        for (&len, &energy) in lengths.iter().zip(energies) {
            offset += len;
            value = value + energy * T::from_usize_lossy(len) / n;
            let x = if offset == depth { T::one() } else { T::from_usize_lossy(offset) / n };
            points.push((x, value));
        }
        Self::piecewise_linear(points)
    }

    pub fn breakpoints(&self) -> &[(T, T)] {
        &self.breakpoints
    }

    /// `(x_left, x_right, slope)` for every linear piece.
    pub fn segments(&self) -> impl Iterator<Item = (T, T, T)> + '_ {
        self.breakpoints.windows(2).map(|w| (w[0].0, w[1].0, (w[1].1 - w[0].1) / (w[1].0 - w[0].0)))
    }

    fn segment_index(&self, x: T) -> usize {
        // Last segment whose left endpoint is <= x.
        let idx = self.breakpoints.partition_point(|&(bx, _)| bx <= x);
        idx.saturating_sub(1).min(self.breakpoints.len() - 2)
    }

    /// `A(x)` by linear interpolation; `x` is clamped to `[0, 1]`.
    pub fn eval(&self, x: T) -> T {
        let x = x.max(T::zero()).min(T::one());
        let i = self.segment_index(x);
        let (x0, y0) = self.breakpoints[i];
        let (x1, y1) = self.breakpoints[i + 1];
        if x == x1 {
            return y1;
        }
        y0 + (y1 - y0) * (x - x0) / (x1 - x0)
    }

    /// Right derivative `A'(x)`; at `x = 1` this is the last segment's slope.
    pub fn right_derivative(&self, x: T) -> T {
        let i = self.segment_index(x.max(T::zero()).min(T::one()));
        let (x0, y0) = self.breakpoints[i];
        let (x1, y1) = self.breakpoints[i + 1];
        (y1 - y0) / (x1 - x0)
    }

    /// Unnormalized covariance `a(m) = N·A(m/N)` for a depth-`N` tree.
    pub fn scaled(&self, depth: usize, m: usize) -> T {
        let n = T::from_usize_lossy(depth);
        let x = if m >= depth { T::one() } else { T::from_usize_lossy(m) / n };
        n * self.eval(x)
    }

    /// Smallest concave function dominating `A`: the upper hull of the
    /// breakpoints. Collinear points are dropped, so the result is canonical.
    pub fn concave_hull(&self) -> Self {
        let mut hull: Vec<(T, T)> = Vec::with_capacity(self.breakpoints.len());
        for &p in &self.breakpoints {
            while hull.len() >= 2 {
                let o = hull[hull.len() - 2];
                let a = hull[hull.len() - 1];
                let cross = (a.0 - o.0) * (p.1 - o.1) - (a.1 - o.1) * (p.0 - o.0);
                if cross >= T::zero() {
                    hull.pop();
                } else {
                    break;
                }
            }
            hull.push(p);
        }
        Self { breakpoints: hull }
    }

    pub fn is_concave(&self) -> bool {
        self.differing_segments().next().is_none()
    }

    /// Slopes of the segments on whose interior `A` lies strictly below its hull.
    fn differing_segments(&self) -> impl Iterator<Item = T> + '_ {
        let hull = self.concave_hull();
        let on_hull = move |x: T, y: T| {
            let h = hull.eval(x);
            h - y <= T::tolerance() * T::one().max(h.abs())
        };
        self.breakpoints
            .windows(2)
            .filter(move |w| !(on_hull(w[0].0, w[0].1) && on_hull(w[1].0, w[1].1)))
            .map(|w| (w[1].1 - w[0].1) / (w[1].0 - w[0].0))
    }

    fn require_normalized(&self) -> Result<()> {
        let a1 = self.breakpoints[self.breakpoints.len() - 1].1;
        if (a1 - T::one()).abs() > T::tolerance() {
            return Err(CremError::NotNormalized(a1.as_f64()));
        }
        Ok(())
    }

    /// `β_c`, `β_G`, `β_min` and the slope suprema they are built from.
    /// Requires `A(1) = 1`.
    pub fn thresholds(&self) -> Result<Thresholds<T>> {
        self.require_normalized()?;
        let two_ln2 = T::lit(2.0) * T::LN_2();
        let critical = |slope: T| if slope > T::zero() { (two_ln2 / slope).sqrt() } else { T::infinity() };

        let a_max = self.segments().map(|(_, _, s)| s).fold(T::zero(), T::max);
        // Hull slopes are non-increasing, but A(0) > 0 makes no difference to
        // taking the max over every hull piece.
        let a_hat_max = self.concave_hull().segments().map(|(_, _, s)| s).fold(T::zero(), T::max);
        let beta_c = critical(a_hat_max);
        let beta_g = self.differing_segments().reduce(T::max).map_or(T::infinity(), critical);
        Ok(Thresholds { a_max, a_hat_max, beta_c, beta_g, beta_min: beta_c.min(beta_g) })
    }

    /// Limiting quenched free energy `∫₀¹ f(β√Â'(s)) ds`, with
    /// `f(x) = ln 2 + x²/2` below `√(2 ln 2)` and `√(2 ln 2)·x` above.
    pub fn limiting_free_energy(&self, beta: T) -> T {
        let root = (T::lit(2.0) * T::LN_2()).sqrt();
        let f = |x: T| if x < root { T::LN_2() + x * x / T::lit(2.0) } else { root * x };
        self.concave_hull().segments().fold(T::zero(), |acc, (x0, x1, slope)| acc + (x1 - x0) * f(beta * slope.sqrt()))
    }

    /// Limiting ground-state energy density `β√(2 ln 2)·∫₀¹ √Â'(s) ds`.
    pub fn ground_state_density(&self, beta: T) -> T {
        let integral = self.concave_hull().segments().fold(T::zero(), |acc, (x0, x1, slope)| acc + (x1 - x0) * slope.sqrt());
        beta * (T::lit(2.0) * T::LN_2()).sqrt() * integral
    }

    pub fn to_f64(&self) -> CovarianceSpec<f64> {
        CovarianceSpec { breakpoints: self.breakpoints.iter().map(|&(x, y)| (x.as_f64(), y.as_f64())).collect() }
    }
}

/// A covariance as named on the command line or in an experiment plan:
/// `brw`, `grem:a0,s1:e1,s2:e2,...`, a path to a JSON document, or the
/// document inlined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CovarianceChoice {
    Named(String),
    Inline(CovarianceSpec<f64>),
}

impl CovarianceChoice {
    pub fn brw() -> Self {
        CovarianceChoice::Named("brw".into())
    }

    /// Builds the spec for a tree of the given depth. GREM block lengths must
    /// add up to `depth`.
    pub fn resolve(&self, depth: usize) -> Result<CovarianceSpec<f64>> {
        match self {
            CovarianceChoice::Inline(spec) => Ok(spec.clone()),
            CovarianceChoice::Named(name) => parse_named(name, depth),
        }
    }

    pub fn label(&self) -> String {
        match self {
            CovarianceChoice::Named(name) => name.clone(),
            CovarianceChoice::Inline(spec) => {
                let pts: Vec<String> = spec.breakpoints().iter().map(|(x, y)| format!("{x}:{y}")).collect();
                format!("pl[{}]", pts.join(","))
            }
        }
    }
}

impl std::str::FromStr for CovarianceChoice {
    type Err = CremError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.starts_with('{') {
            return Ok(CovarianceChoice::Inline(serde_json::from_str(s)?));
        }
        Ok(CovarianceChoice::Named(s.to_string()))
    }
}

fn parse_named(name: &str, depth: usize) -> Result<CovarianceSpec<f64>> {
    if name.eq_ignore_ascii_case("brw") {
        return Ok(CovarianceSpec::brw());
    }
    if let Some(rest) = name.strip_prefix("grem:") {
        let mut parts = rest.split(',');
        let a0 = parts
            .next()
            .and_then(|p| p.trim().parse::<f64>().ok())
            .ok_or_else(|| CremError::InvalidCovariance(format!("bad GREM initial energy in {name:?}")))?;
        let mut lengths = Vec::new();
        let mut energies = Vec::new();
        for block in parts {
            let (len, energy) = block
                .split_once(':')
                .and_then(|(l, e)| Some((l.trim().parse::<usize>().ok()?, e.trim().parse::<f64>().ok()?)))
                .ok_or_else(|| CremError::InvalidCovariance(format!("bad GREM block {block:?}")))?;
            lengths.push(len);
            energies.push(energy);
        }
        return CovarianceSpec::grem(a0, &lengths, &energies, depth);
    }
    let path = Path::new(name);
    if path.exists() {
        let text = std::fs::read_to_string(path)?;
        return Ok(serde_json::from_str(&text)?);
    }
    Err(CremError::InvalidCovariance(format!("{name:?} is not brw, grem:..., or a readable JSON file")))
}
