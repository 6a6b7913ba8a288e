//! Analytic gradients of the evidential losses with respect to α, and the
//! gradient-gap analysis comparing UFCE against UCE on the true class.

use rayon::prelude::*;
use serde::Serialize;

use crate::dirichlet::DirichletParams;
use crate::error::{Error, Result};
use crate::losses::ln_focal_ratio;
use crate::specfn::{digamma, ln_beta, tetragamma, trigamma};

/// ∂UCE/∂α. The true-class entry is negative, every other entry positive.
pub fn uce_grad_alpha(alpha: &DirichletParams, c_star: usize) -> Result<Vec<f64>> {
    alpha.check_class(c_star)?;
    let t0 = trigamma(alpha.alpha0())?;
    let tc = trigamma(alpha.alpha()[c_star])?;
    Ok((0..alpha.classes())
        .map(|k| if k == c_star { t0 - tc } else { t0 })
        .collect())
}

/// ∂UFCE/∂α.
///
/// Moving α_c* moves α0 by the same amount and leaves α0 − α_c* fixed, while
/// moving any other α_j moves α0 alone.
pub fn ufce_grad_alpha(alpha: &DirichletParams, c_star: usize, gamma: f64) -> Result<Vec<f64>> {
    alpha.check_class(c_star)?;
    if !(gamma.is_finite() && gamma >= 0.0) {
        return Err(Error::Domain {
            func: "ufce_grad_alpha",
            arg: gamma,
        });
    }
    let a0 = alpha.alpha0();
    let ac = alpha.alpha()[c_star];
    let rest = a0 - ac;
    let ratio = ln_focal_ratio(a0, ac, gamma)?.exp();
    let psi_gap = digamma(a0 + gamma)? - digamma(ac)?;
    let d_ln_ratio_true = digamma(a0)? - digamma(a0 + gamma)?;
    let d_ln_ratio_other = d_ln_ratio_true + (digamma(rest + gamma)? - digamma(rest)?);
    let t_shift = trigamma(a0 + gamma)?;
    let on_true = ratio * (d_ln_ratio_true * psi_gap + (t_shift - trigamma(ac)?));
    let off_true = ratio * (d_ln_ratio_other * psi_gap + t_shift);
    let grad: Vec<f64> = (0..alpha.classes())
        .map(|k| if k == c_star { on_true } else { off_true })
        .collect();
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("ufce gradient".into()));
    }
    Ok(grad)
}

/// ∂/∂α of KL(Dir(α) ‖ Dir(1)): (α_j − 1)ψ1(α_j) − (α0 − C)ψ1(α0).
pub fn flat_kl_grad_alpha(alpha: &DirichletParams) -> Result<Vec<f64>> {
    let a0 = alpha.alpha0();
    let common = (a0 - alpha.classes() as f64) * trigamma(a0)?;
    alpha
        .alpha()
        .iter()
        .map(|&a| Ok((a - 1.0) * trigamma(a)? - common))
        .collect()
}

/// One evaluation of the gradient-gap function with its inputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradGapPoint {
    pub p_bar: f64,
    pub alpha0: f64,
    pub gamma: f64,
    pub value: f64,
}

impl GradGapPoint {
    pub fn evaluate(p_bar: f64, alpha0: f64, gamma: f64) -> Result<Self> {
        Ok(GradGapPoint {
            p_bar,
            alpha0,
            gamma,
            value: gradient_gap_f(p_bar, alpha0, gamma)?,
        })
    }

    /// Whether p̄ lies strictly inside (1/α0, 1 − 1/α0).
    pub fn is_feasible(&self) -> bool {
        self.p_bar > 1.0 / self.alpha0 && self.p_bar < 1.0 - 1.0 / self.alpha0
    }
}

struct GapTerms {
    alpha_c: f64,
    rest: f64,
    ratio: f64,
    bracket: f64,
    d_ln_ratio: f64,
}

fn gap_terms(p_bar: f64, alpha0: f64, gamma: f64) -> Result<GapTerms> {
    let alpha_c = p_bar * alpha0;
    let rest = alpha0 - alpha_c;
    if !(alpha_c > 0.0 && rest > 0.0 && alpha0.is_finite()) {
        return Err(Error::Domain {
            func: "gradient_gap_f",
            arg: p_bar,
        });
    }
    if !(gamma.is_finite() && gamma >= 0.0) {
        return Err(Error::Domain {
            func: "gradient_gap_f",
            arg: gamma,
        });
    }
    let ratio = ln_focal_ratio(alpha0, alpha_c, gamma)?.exp();
    let d_ln_ratio = digamma(alpha0)? - digamma(alpha0 + gamma)?;
    let bracket = d_ln_ratio * (digamma(alpha0 + gamma)? - digamma(alpha_c)?)
        + (trigamma(alpha0 + gamma)? - trigamma(alpha_c)?);
    Ok(GapTerms {
        alpha_c,
        rest,
        ratio,
        bracket,
        d_ln_ratio,
    })
}

/// |∂UFCE/∂α_c*| − |∂UCE/∂α_c*| written in terms of p̄ = α_c*/α0.
pub fn gradient_gap_f(p_bar: f64, alpha0: f64, gamma: f64) -> Result<f64> {
    let t = gap_terms(p_bar, alpha0, gamma)?;
    let uce_part = trigamma(alpha0)? - trigamma(t.alpha_c)?;
    Ok(-t.ratio * t.bracket + uce_part)
}

/// ∂f/∂p̄ at fixed α0 and γ.
pub fn gradient_gap_f_derivative(p_bar: f64, alpha0: f64, gamma: f64) -> Result<f64> {
    let t = gap_terms(p_bar, alpha0, gamma)?;
    let psi2 = tetragamma(t.alpha_c)?;
    let d_ratio_term = t.ratio * alpha0 * (digamma(t.rest + gamma)? - digamma(t.rest)?) * t.bracket;
    let d_bracket_term = t.ratio * alpha0 * (t.d_ln_ratio * trigamma(t.alpha_c)? + psi2);
    Ok(d_ratio_term + d_bracket_term - alpha0 * psi2)
}

/// B(α0, γ) / B(α0 − α_c, γ).
pub fn beta_ratio_g(alpha0: f64, alpha_c: f64, gamma: f64) -> Result<f64> {
    if !(alpha_c >= 0.0 && alpha0 > alpha_c && alpha0.is_finite()) {
        return Err(Error::Domain {
            func: "beta_ratio_g",
            arg: alpha0,
        });
    }
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::Domain {
            func: "beta_ratio_g",
            arg: gamma,
        });
    }
    Ok((ln_beta(alpha0, gamma)? - ln_beta(alpha0 - alpha_c, gamma)?).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdStatus {
    /// f changes sign inside the feasible window.
    Crossing,
    /// f keeps one sign over the window; the thresholds are window endpoints.
    NoSignChange,
    /// f vanishes identically (γ = 0).
    Degenerate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Thresholds {
    pub tau1: f64,
    pub tau2: f64,
    pub status: ThresholdStatus,
}

const SCAN_STEP: f64 = 1e-4;
const BISECT_TOL: f64 = 1e-8;

/// Feasible p̄ window when α_c* is held fixed and α0 = α_c*/p̄: the other
/// K − 1 concentrations are at least one each.
pub fn threshold_window(alpha_c_star: f64, classes: usize) -> (f64, f64) {
    (
        SCAN_STEP,
        alpha_c_star / (alpha_c_star + classes as f64 - 1.0),
    )
}

fn gap_at(p: f64, alpha_c_star: f64, gamma: f64) -> Result<f64> {
    gradient_gap_f(p, alpha_c_star / p, gamma)
}

fn bisect(
    mut lo: f64,
    mut hi: f64,
    alpha_c_star: f64,
    gamma: f64,
    lo_pred: impl Fn(f64) -> bool,
) -> Result<f64> {
    while hi - lo > BISECT_TOL {
        let mid = 0.5 * (lo + hi);
        if lo_pred(gap_at(mid, alpha_c_star, gamma)?) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Locates τ1 (f ≥ 0 on every scanned p̄ below it) and τ2 (f ≤ 0 on every
/// scanned p̄ above it) by a dense sign scan refined with bisection.
pub fn find_crossing_thresholds(
    alpha_c_star: f64,
    gamma: f64,
    classes: usize,
) -> Result<Thresholds> {
    if !(alpha_c_star > 1.0 && alpha_c_star.is_finite()) {
        return Err(Error::Domain {
            func: "find_crossing_thresholds",
            arg: alpha_c_star,
        });
    }
    if classes < 2 {
        return Err(Error::InvalidInput("need at least 2 classes".into()));
    }
    let (lo, hi) = threshold_window(alpha_c_star, classes);
    let n = ((hi - lo) / SCAN_STEP).ceil() as usize;
    let grid: Vec<f64> = (0..n)
        .map(|i| lo + i as f64 * SCAN_STEP)
        .filter(|&p| p < hi)
        .collect();
    let values = grid
        .par_iter()
        .map(|&p| gap_at(p, alpha_c_star, gamma))
        .collect::<Result<Vec<f64>>>()?;

    if values.iter().all(|&v| v == 0.0) {
        return Ok(Thresholds {
            tau1: lo,
            tau2: hi,
            status: ThresholdStatus::Degenerate,
        });
    }
    let first_neg = values.iter().position(|&v| v < 0.0);
    let last_pos = values.iter().rposition(|&v| v > 0.0);
    match (first_neg, last_pos) {
        (Some(i), Some(j)) if i > 0 || j + 1 < grid.len() => {
            let tau1 = if i == 0 {
                lo
            } else {
                bisect(grid[i - 1], grid[i], alpha_c_star, gamma, |v| v >= 0.0)?
            };
            let tau2 = if j + 1 == grid.len() {
                hi
            } else {
                bisect(grid[j], grid[j + 1], alpha_c_star, gamma, |v| v > 0.0)?
            };
            Ok(Thresholds {
                tau1: tau1.min(tau2),
                tau2: tau2.max(tau1),
                status: ThresholdStatus::Crossing,
            })
        }
        (None, _) => Ok(Thresholds {
            tau1: hi,
            tau2: hi,
            status: ThresholdStatus::NoSignChange,
        }),
        _ => Ok(Thresholds {
            tau1: lo,
            tau2: lo,
            status: ThresholdStatus::NoSignChange,
        }),
    }
}
