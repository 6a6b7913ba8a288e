//! Dirichlet parameters and their closed-form moments.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::specfn::{digamma, ln_gamma};

/// Concentration vector of a Dirichlet distribution over `C ≥ 2` classes.
///
/// [`DirichletParams::new`] enforces the evidential domain `α_k ≥ 1`.
/// [`DirichletParams::from_positive`] only requires `α_k > 0`; the identities
/// in this module hold there too, and the finite-difference oracles need room
/// to step below one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirichletParams {
    alpha: Vec<f64>,
}

impl DirichletParams {
    pub fn new(alpha: Vec<f64>) -> Result<Self> {
        Self::validate(&alpha, 1.0, true)?;
        Ok(DirichletParams { alpha })
    }

    pub fn from_positive(alpha: Vec<f64>) -> Result<Self> {
        Self::validate(&alpha, 0.0, false)?;
        Ok(DirichletParams { alpha })
    }

    /// The flat Dirichlet Dir(1, ..., 1).
    pub fn flat(classes: usize) -> Result<Self> {
        Self::new(vec![1.0; classes])
    }

    fn validate(alpha: &[f64], floor: f64, inclusive: bool) -> Result<()> {
        if alpha.len() < 2 {
            return Err(Error::InvalidDirichlet(format!(
                "need at least 2 classes, got {}",
                alpha.len()
            )));
        }
        for (k, &a) in alpha.iter().enumerate() {
            let ok = a.is_finite() && if inclusive { a >= floor } else { a > floor };
            if !ok {
                return Err(Error::InvalidDirichlet(format!("alpha[{k}] = {a}")));
            }
        }
        if !alpha.iter().sum::<f64>().is_finite() {
            return Err(Error::InvalidDirichlet("alpha0 is not finite".into()));
        }
        Ok(())
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn classes(&self) -> usize {
        self.alpha.len()
    }

    pub fn alpha0(&self) -> f64 {
        self.alpha.iter().sum()
    }

    pub fn check_class(&self, c: usize) -> Result<()> {
        if c < self.classes() {
            Ok(())
        } else {
            Err(Error::ClassIndex {
                index: c,
                classes: self.classes(),
            })
        }
    }

    /// ln B(α) = Σ ln Γ(α_k) − ln Γ(α0).
    pub fn ln_beta(&self) -> Result<f64> {
        let mut s = 0.0;
        for &a in &self.alpha {
            s += ln_gamma(a)?;
        }
        Ok(s - ln_gamma(self.alpha0())?)
    }

    /// Log density of `p` under this distribution.
    pub fn ln_pdf(&self, p: &[f64]) -> Result<f64> {
        if p.len() != self.classes() {
            return Err(Error::DimensionMismatch {
                expected: self.classes(),
                got: p.len(),
            });
        }
        let mut s = -self.ln_beta()?;
        for (&a, &pk) in self.alpha.iter().zip(p) {
            s += (a - 1.0) * pk.ln();
        }
        Ok(s)
    }
}

/// A point on the probability simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct SimplexVector(Vec<f64>);

impl SimplexVector {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
            return Err(Error::InvalidInput("simplex entry outside [0, 1]".into()));
        }
        let total: f64 = p.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidInput(format!("simplex sums to {total}")));
        }
        Ok(SimplexVector(p))
    }

    /// Trusted constructor for vectors produced by normalization.
    pub(crate) fn from_normalized(p: Vec<f64>) -> Self {
        SimplexVector(p)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Expected class probabilities α_k / α0.
pub fn mean_probability(d: &DirichletParams) -> SimplexVector {
    let a0 = d.alpha0();
    SimplexVector::from_normalized(d.alpha.iter().map(|a| a / a0).collect())
}

/// C / α0.
pub fn epistemic_uncertainty(d: &DirichletParams) -> f64 {
    d.classes() as f64 / d.alpha0()
}

/// Negative largest expected class probability.
pub fn aleatoric_uncertainty(d: &DirichletParams) -> f64 {
    let a0 = d.alpha0();
    -d.alpha.iter().fold(f64::NEG_INFINITY, |m, &a| m.max(a)) / a0
}

/// Differential entropy of Dir(α).
pub fn dirichlet_entropy(d: &DirichletParams) -> Result<f64> {
    let a0 = d.alpha0();
    let c = d.classes() as f64;
    let mut s = d.ln_beta()? + (a0 - c) * digamma(a0)?;
    for &a in &d.alpha {
        s -= (a - 1.0) * digamma(a)?;
    }
    Ok(s)
}

/// KL(Dir(α) ‖ Dir(α̂)) with α taken from `d` and α̂ from `target`.
pub fn dirichlet_kl(d: &DirichletParams, target: &DirichletParams) -> Result<f64> {
    if d.classes() != target.classes() {
        return Err(Error::DimensionMismatch {
            expected: d.classes(),
            got: target.classes(),
        });
    }
    let psi0 = digamma(d.alpha0())?;
    let mut s = target.ln_beta()? - d.ln_beta()?;
    for (&a, &t) in d.alpha.iter().zip(&target.alpha) {
        s += (a - t) * (digamma(a)? - psi0);
    }
    Ok(s)
}

/// E[p_c ln p_c] under Dir(α), via the marginal Beta(α_c, α0 − α_c).
pub fn expected_p_log_p(d: &DirichletParams, c: usize) -> Result<f64> {
    d.check_class(c)?;
    let a0 = d.alpha0();
    let ac = d.alpha[c];
    Ok(ac / a0 * (digamma(ac + 1.0)? - digamma(a0 + 1.0)?))
}

/// E[H(p)] for p ~ Dir(α), the expected Shannon entropy of the categorical.
pub fn expected_categorical_entropy(d: &DirichletParams) -> Result<f64> {
    let mut s = 0.0;
    for c in 0..d.classes() {
        s -= expected_p_log_p(d, c)?;
    }
    Ok(s)
}

/// One draw p ~ Dir(α) from normalized Gamma(α_k, 1) variates.
pub fn sample(d: &DirichletParams, stream: &mut Stream) -> SimplexVector {
    let mut p = Vec::with_capacity(d.classes());
    sample_into(d.alpha(), stream, &mut p);
    SimplexVector::from_normalized(p)
}

/// Allocation-free variant of [`sample`] for the Monte-Carlo loops.
pub fn sample_into(alpha: &[f64], stream: &mut Stream, out: &mut Vec<f64>) {
    out.clear();
    let mut total = 0.0;
    for &a in alpha {
        let g = stream.gamma(a);
        total += g;
        out.push(g);
    }
    for g in out.iter_mut() {
        *g /= total;
    }
}
