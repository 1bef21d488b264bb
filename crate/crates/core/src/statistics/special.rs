//! Digamma and polygamma functions.
//!
//! Both use upward recurrence until the argument clears a threshold, then an
//! asymptotic expansion in inverse powers with Bernoulli coefficients.

use crate::error::{Error, Result};

/// B_2, B_4, ..., B_20.
const BERNOULLI: [f64; 10] = [
    1.0 / 6.0,
    -1.0 / 30.0,
    1.0 / 42.0,
    -1.0 / 30.0,
    5.0 / 66.0,
    -691.0 / 2730.0,
    7.0 / 6.0,
    -3617.0 / 510.0,
    43867.0 / 798.0,
    -174611.0 / 330.0,
];

const ASYMPTOTIC_FROM: f64 = 10.0;

fn check_domain(x: f64) -> Result<()> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!(
            "argument must be positive and finite, got {x}"
        )))
    }
}

/// Digamma function `psi(x) = d/dx ln Gamma(x)` for `x > 0`.
pub fn digamma(x: f64) -> Result<f64> {
    check_domain(x)?;
    let mut x = x;
    let mut acc = 0.0;
    while x < ASYMPTOTIC_FROM {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let inv2 = 1.0 / (x * x);
    // sum_k B_2k / (2k x^2k), Horner in 1/x^2
    let mut series = 0.0;
    for (k, b) in BERNOULLI.iter().enumerate().take(7).rev() {
        let two_k = 2.0 * (k as f64 + 1.0);
        series = (series + b / two_k) * inv2;
    }
    Ok(acc + x.ln() - 0.5 / x - series)
}

/// Polygamma function `psi^(m)(x)` for `m >= 1`, `x > 0`.
///
/// `m = 0` is accepted and forwards to [`digamma`].
pub fn polygamma(m: u32, x: f64) -> Result<f64> {
    if m == 0 {
        return digamma(x);
    }
    check_domain(x)?;
    let mf = m as f64;
    let m_fact = ln_factorial(m).exp();
    let sign = if m % 2 == 1 { 1.0 } else { -1.0 };
    let threshold = ASYMPTOTIC_FROM + 2.0 * mf;

    let mut x = x;
    let mut acc = 0.0;
    while x < threshold {
        acc += 1.0 / x.powi(m as i32 + 1);
        x += 1.0;
    }
    acc *= m_fact;

    // (m-1)!/x^m + m!/(2 x^{m+1}) + sum_k B_2k (2k+m-1)! / ((2k)! x^{2k+m})
    let m1_fact = ln_factorial(m - 1).exp();
    let mut tail = m1_fact / x.powi(m as i32) + m_fact / (2.0 * x.powi(m as i32 + 1));
    let x2 = x * x;
    let mut xpow = x.powi(m as i32);
    for (k, b) in BERNOULLI.iter().enumerate() {
        let two_k = 2 * (k as u32 + 1);
        xpow *= x2;
        let coef = (ln_factorial(two_k + m - 1) - ln_factorial(two_k)).exp();
        let term = b * coef / xpow;
        tail += term;
        if term.abs() < 1e-18 * tail.abs() {
            break;
        }
    }
    Ok(sign * (acc + tail))
}

fn ln_factorial(n: u32) -> f64 {
    (2..=n).map(|k| (k as f64).ln()).sum()
}
