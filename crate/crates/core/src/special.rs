//! Scalar special functions used throughout the crate.
//!
//! `libm` supplies erfc and lgamma; `statrs`' inverse erfc seeds the normal
//! quantile, which is then polished against `libm::erfc`.

use std::f64::consts::{PI, SQRT_2};

use statrs::function::erf::erfc_inv;

/// `ln(sqrt(2π))`
pub const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Standard normal density.
#[inline]
pub fn norm_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

#[inline]
pub fn norm_ln_pdf(z: f64) -> f64 {
    -0.5 * z * z - LN_SQRT_2PI
}

/// Standard normal CDF, accurate in both tails.
#[inline]
pub fn norm_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / SQRT_2)
}

/// Standard normal quantile function Φ⁻¹(p). Returns ±∞ at exactly 0 and 1.
#[inline]
pub fn norm_ppf(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    let z = -SQRT_2 * erfc_inv(2.0 * p);
    // one Halley step: statrs' erfc_inv alone is good to ~1e-11 relative
    let e = if z > 0.0 {
        (1.0 - p) - norm_cdf(-z)
    } else {
        norm_cdf(z) - p
    };
    let u = e / norm_pdf(z);
    if u.is_finite() {
        z - u / (1.0 + 0.5 * z * u)
    } else {
        z
    }
}

#[inline]
pub fn ln_gamma(x: f64) -> f64 {
    libm::lgamma(x)
}

/// `ln(k!)` for nonnegative integer-valued `k`.
#[inline]
pub fn ln_factorial(k: u64) -> f64 {
    if k < 2 {
        0.0
    } else {
        libm::lgamma(k as f64 + 1.0)
    }
}

/// Logistic sigmoid.
#[inline]
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(p / (1 - p))`
#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}
