//! Standard normal functions that stay accurate in the tails.

use statrs::distribution::{ContinuousCDF, Normal};

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Below this argument the Mills ratio is evaluated by continued fraction.
const TAIL: f64 = -3.0;

#[inline]
pub fn pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

#[inline]
pub fn cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// `ln Φ(x)` without underflow for very negative `x`.
pub fn log_cdf(x: f64) -> f64 {
    if x < TAIL {
        -0.5 * x * x - LN_SQRT_2PI + mills(-x).ln()
    } else if x > 0.0 {
        (-cdf(-x)).ln_1p()
    } else {
        cdf(x).ln()
    }
}

/// Inverse Mills ratio `φ(x)/Φ(x)`.
pub fn inv_mills(x: f64) -> f64 {
    if x < TAIL {
        1.0 / mills(-x)
    } else {
        pdf(x) / cdf(x)
    }
}

/// Mills ratio `Φ(-z)/φ(z)` for large positive `z`, by backward evaluation
/// of the continued fraction `1/(z + 1/(z + 2/(z + 3/(z + ...))))`.
fn mills(z: f64) -> f64 {
    let mut f = z;
    for k in (1..=80).rev() {
        f = z + k as f64 / f;
    }
    1.0 / f
}

/// Standard normal quantile.
pub fn quantile(p: f64) -> f64 {
    let x = Normal::standard().inverse_cdf(p);
    if !x.is_finite() {
        return x;
    }
    // one Newton polish against the erfc-based cdf
    x - (cdf(x) - p) / pdf(x)
}
