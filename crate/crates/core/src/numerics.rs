//! Log-space reductions.

use crate::scalar::Real;

/// `ln Σ exp(x_i)`, shifted by the maximum so that it is finite whenever the
/// inputs are. Returns `-inf` for an empty slice.
pub fn log_sum_exp<T: Real>(xs: &[T]) -> T {
    let max = xs.iter().copied().fold(T::neg_infinity(), T::max);
    if !max.is_finite() {
        return max;
    }
    let sum = xs.iter().fold(T::zero(), |acc, &x| acc + (x - max).exp());
    max + sum.ln()
}

/// `ln Σ exp(scale · x_i)` without allocating the scaled vector.
pub fn log_sum_exp_scaled(xs: &[f64], scale: f64) -> f64 {
    if scale == 0.0 {
        return (xs.len() as f64).ln();
    }
    let max = xs.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(scale * x));
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = xs.iter().map(|&x| (scale * x - max).exp()).sum();
    max + sum.ln()
}

/// `ln(e^a + e^b)`.
pub fn log_add<T: Real>(a: T, b: T) -> T {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if hi == T::neg_infinity() {
        return hi;
    }
    hi + (lo - hi).exp().ln_1p()
}

/// Normalized `exp(x_i) / Σ exp(x_j)`.
pub fn softmax<T: Real>(xs: &[T]) -> Vec<T> {
    let lse = log_sum_exp(xs);
    xs.iter().map(|&x| (x - lse).exp()).collect()
}

/// `1 / (1 + e^{-t})`, evaluated on the branch that cannot overflow.
pub fn logistic<T: Real>(t: T) -> T {
    if t >= T::zero() {
        T::one() / (T::one() + (-t).exp())
    } else {
        let e = t.exp();
        e / (T::one() + e)
    }
}
