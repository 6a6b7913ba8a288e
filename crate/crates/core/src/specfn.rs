//! Gamma-family special functions on the positive real axis.
//!
//! The polygamma functions shift their argument upward with the standard
//! recurrences until it reaches [`ASYMPTOTIC_THRESHOLD`] and then evaluate the
//! Bernoulli-number asymptotic series. The recurrence terms are accumulated
//! from the largest shifted argument back down to `x`, so that `f(x)` is
//! obtained from the same partial sum as `f(x + 1)` plus one final term. This
//! keeps the recurrence residuals at the level of a single rounding.

use crate::error::{Error, Result};

/// Named constants used by the closed forms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpecialConstants {
    pub euler_mascheroni: f64,
    pub pi_sq_over_6: f64,
}

impl SpecialConstants {
    pub const VALUES: SpecialConstants = SpecialConstants {
        euler_mascheroni: EULER_MASCHERONI,
        pi_sq_over_6: PI_SQ_OVER_6,
    };
}

pub const EULER_MASCHERONI: f64 = 0.577_215_664_901_532_9;
pub const PI_SQ_OVER_6: f64 = 1.644_934_066_848_226_4;
/// ζ(3), used only by tests and the tetragamma reference values.
pub const APERY: f64 = 1.202_056_903_159_594_3;

const ASYMPTOTIC_THRESHOLD: f64 = 10.0;
const HALF_LN_TWO_PI: f64 = 0.918_938_533_204_672_8;

// B_2k for k = 1..7.
const BERNOULLI: [f64; 7] = [
    1.0 / 6.0,
    -1.0 / 30.0,
    1.0 / 42.0,
    -1.0 / 30.0,
    5.0 / 66.0,
    -691.0 / 2730.0,
    7.0 / 6.0,
];

fn check(func: &'static str, x: f64) -> Result<()> {
    if x.is_finite() && x > 0.0 {
        Ok(())
    } else {
        Err(Error::Domain { func, arg: x })
    }
}

/// Shifted arguments `x, x+1, ...` below the threshold, and the first one at
/// or above it.
fn shift(x: f64) -> (Shifted, f64) {
    let mut below = Shifted {
        args: [0.0; 11],
        len: 0,
    };
    let mut z = x;
    while z < ASYMPTOTIC_THRESHOLD {
        below.args[below.len] = z;
        below.len += 1;
        z += 1.0;
    }
    (below, z)
}

struct Shifted {
    args: [f64; 11],
    len: usize,
}

impl Shifted {
    fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.args[..self.len].iter()
    }
}

/// Natural log of the gamma function.
pub fn ln_gamma(x: f64) -> Result<f64> {
    check("ln_gamma", x)?;
    // Small integers: exact factorials.
    if x <= 23.0 && x.fract() == 0.0 {
        let mut fact = 1.0_f64;
        let mut k = 2.0;
        while k < x {
            fact *= k;
            k += 1.0;
        }
        return Ok(fact.ln());
    }
    let (below, z) = shift(x);
    let mut prod = 1.0_f64;
    for &b in below.iter() {
        prod *= b;
    }
    Ok(stirling(z) - prod.ln())
}

fn stirling(z: f64) -> f64 {
    let inv = 1.0 / z;
    let inv2 = inv * inv;
    let mut series = 0.0;
    let mut pow = inv;
    for (k, b) in BERNOULLI.iter().enumerate() {
        let n = 2.0 * (k as f64 + 1.0);
        series += b / (n * (n - 1.0)) * pow;
        pow *= inv2;
    }
    (z - 0.5) * z.ln() - z + HALF_LN_TWO_PI + series
}

/// Digamma ψ(x) = d/dx ln Γ(x).
pub fn digamma(x: f64) -> Result<f64> {
    check("digamma", x)?;
    let (below, z) = shift(x);
    let inv = 1.0 / z;
    let inv2 = inv * inv;
    let mut series = 0.0;
    let mut pow = inv2;
    for (k, b) in BERNOULLI.iter().enumerate() {
        let n = 2.0 * (k as f64 + 1.0);
        series += b / n * pow;
        pow *= inv2;
    }
    let mut acc = z.ln() - 0.5 * inv - series;
    for &b in below.iter().rev() {
        acc -= 1.0 / b;
    }
    Ok(acc)
}

/// Trigamma ψ1(x) = d/dx ψ(x).
pub fn trigamma(x: f64) -> Result<f64> {
    check("trigamma", x)?;
    let (below, z) = shift(x);
    let inv = 1.0 / z;
    let inv2 = inv * inv;
    let mut series = 0.0;
    let mut pow = inv2 * inv;
    for b in BERNOULLI.iter() {
        series += b * pow;
        pow *= inv2;
    }
    let mut acc = inv + 0.5 * inv2 + series;
    for &b in below.iter().rev() {
        acc += 1.0 / (b * b);
    }
    Ok(acc)
}

/// Tetragamma ψ2(x) = d/dx ψ1(x).
pub fn tetragamma(x: f64) -> Result<f64> {
    check("tetragamma", x)?;
    let (below, z) = shift(x);
    let inv = 1.0 / z;
    let inv2 = inv * inv;
    let mut series = 0.0;
    let mut pow = inv2 * inv2;
    for (k, b) in BERNOULLI.iter().enumerate() {
        let n = 2.0 * (k as f64 + 1.0);
        series += (n + 1.0) * b * pow;
        pow *= inv2;
    }
    let mut acc = -inv2 - inv2 * inv - series;
    for &b in below.iter().rev() {
        acc -= 2.0 / (b * b * b);
    }
    Ok(acc)
}

/// ln B(a, b).
pub fn ln_beta(a: f64, b: f64) -> Result<f64> {
    if !(a.is_finite() && a > 0.0) {
        return Err(Error::Domain {
            func: "ln_beta",
            arg: a,
        });
    }
    if !(b.is_finite() && b > 0.0) {
        return Err(Error::Domain {
            func: "ln_beta",
            arg: b,
        });
    }
    Ok(ln_gamma(a)? + ln_gamma(b)? - ln_gamma(a + b)?)
}
