//! Log-gamma, digamma and trigamma for positive real arguments.
//!
//! All three shift the argument upward with the recurrence until it reaches
//! [`ASYMPTOTIC_FROM`] and then evaluate the asymptotic (Stirling) series.

use std::f64::consts::PI;

/// Arguments at or above this value use the asymptotic series directly.
pub const ASYMPTOTIC_FROM: f64 = 10.0;

/// `ln Γ(x)` for `x > 0`. Returns NaN for non-positive or NaN input.
pub fn lgamma(x: f64) -> f64 {
    if !(x > 0.0) {
        return f64::NAN;
    }
    if x.is_infinite() {
        return f64::INFINITY;
    }
    let mut z = x;
    let mut shift = 0.0;
    while z < ASYMPTOTIC_FROM {
        shift += z.ln();
        z += 1.0;
    }
    let inv = 1.0 / z;
    let inv2 = inv * inv;
    // Bernoulli terms B_2k / (2k (2k-1) z^(2k-1)), k = 1..7
    let series = inv
        * (1.0 / 12.0
            + inv2
                * (-1.0 / 360.0
                    + inv2
                        * (1.0 / 1260.0
                            + inv2
                                * (-1.0 / 1680.0
                                    + inv2
                                        * (1.0 / 1188.0
                                            + inv2
                                                * (-691.0 / 360360.0 + inv2 * (1.0 / 156.0)))))));
    (z - 0.5) * z.ln() - z + 0.5 * (2.0 * PI).ln() + series - shift
}

/// `ψ(x) = d/dx ln Γ(x)` for `x > 0`.
pub fn digamma(x: f64) -> f64 {
    if !(x > 0.0) {
        return f64::NAN;
    }
    if x.is_infinite() {
        return f64::INFINITY;
    }
    let mut z = x;
    let mut shift = 0.0;
    while z < ASYMPTOTIC_FROM {
        shift += 1.0 / z;
        z += 1.0;
    }
    let inv = 1.0 / z;
    let inv2 = inv * inv;
    // B_2k / (2k z^(2k)), k = 1..7
    let series = inv2
        * (1.0 / 12.0
            - inv2
                * (1.0 / 120.0
                    - inv2
                        * (1.0 / 252.0
                            - inv2
                                * (1.0 / 240.0
                                    - inv2
                                        * (1.0 / 132.0
                                            - inv2 * (691.0 / 32760.0 - inv2 * (1.0 / 12.0)))))));
    z.ln() - 0.5 * inv - series - shift
}

/// `ψ'(x)` for `x > 0`; the derivative used when backpropagating through [`digamma`].
pub fn trigamma(x: f64) -> f64 {
    if !(x > 0.0) {
        return f64::NAN;
    }
    if x.is_infinite() {
        return 0.0;
    }
    let mut z = x;
    let mut shift = 0.0;
    while z < ASYMPTOTIC_FROM {
        shift += 1.0 / (z * z);
        z += 1.0;
    }
    let inv = 1.0 / z;
    let inv2 = inv * inv;
    // 1/z + 1/(2z^2) + sum B_2k / z^(2k+1)
    let series = inv
        * inv2
        * (1.0 / 6.0
            - inv2
                * (1.0 / 30.0
                    - inv2
                        * (1.0 / 42.0
                            - inv2
                                * (1.0 / 30.0
                                    - inv2
                                        * (5.0 / 66.0
                                            - inv2 * (691.0 / 2730.0 - inv2 * (7.0 / 6.0)))))));
    inv + 0.5 * inv2 + series + shift
}

/// The coarse approximation `ln x − 1/(2x)`; kept only to cross-check [`digamma`].
pub fn digamma_coarse(x: f64) -> f64 {
    x.ln() - 0.5 / x
}
