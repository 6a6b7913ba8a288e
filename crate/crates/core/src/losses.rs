//! Evidential losses over Dirichlet outputs and the deterministic baselines
//! they are compared against.
//!
//! Gamma-function ratios are always formed as a sum of `ln_gamma` terms and
//! exponentiated once, which keeps them finite for α0 up to 1e6.

use serde::{Deserialize, Serialize};

use crate::dirichlet::{dirichlet_kl, DirichletParams, SimplexVector};
use crate::error::{Error, Result};
use crate::specfn::{digamma, ln_gamma};

/// Weight of the energy-bounded penalty relative to the classification loss.
pub const ENERGY_BOUND_WEIGHT: f64 = 1e-4;

/// Loss hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    /// Focal exponent.
    pub gamma: f64,
    /// Weight of the smoothing KL term in the UCE objective.
    pub beta: f64,
    /// Weight of evidence regularization on pseudo-OOD samples.
    pub lambda: f64,
    /// Epistemic uncertainty scaling strength.
    pub xi: f64,
    pub temperature: f64,
    pub m_in: f64,
    pub m_out: f64,
    pub positive_class_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            gamma: 1.0,
            beta: 0.001,
            lambda: 0.01,
            xi: 64.0,
            temperature: 1.0,
            m_in: -5.0,
            m_out: -1.0,
            positive_class_weight: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, why: &str| Err(Error::InvalidConfig(format!("loss.{key}: {why}")));
        if !(0.0..=5.0).contains(&self.gamma) {
            return bad("gamma", "must lie in [0, 5]");
        }
        for (key, v) in [
            ("beta", self.beta),
            ("lambda", self.lambda),
            ("xi", self.xi),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(key, "must be finite and non-negative");
            }
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return bad("temperature", "must be positive");
        }
        if !(self.m_in.is_finite() && self.m_out.is_finite()) {
            return bad("m_in", "energy margins must be finite");
        }
        if !(self.positive_class_weight.is_finite() && self.positive_class_weight > 0.0) {
            return bad("positive_class_weight", "must be positive");
        }
        Ok(())
    }

    /// Per-sample weight for a supervised sample of class `c`; class 0 is the
    /// designated positive class.
    pub fn class_weight(&self, c: usize) -> f64 {
        if c == 0 {
            self.positive_class_weight
        } else {
            1.0
        }
    }
}

/// A network output paired with its training role.
#[derive(Debug, Clone)]
pub struct SupervisedSample {
    pub alpha: DirichletParams,
    /// Present exactly when the sample is in-distribution.
    pub true_class: Option<usize>,
}

impl SupervisedSample {
    pub fn id(alpha: DirichletParams, class: usize) -> Result<Self> {
        alpha.check_class(class)?;
        Ok(SupervisedSample {
            alpha,
            true_class: Some(class),
        })
    }

    pub fn pseudo_ood(alpha: DirichletParams) -> Self {
        SupervisedSample {
            alpha,
            true_class: None,
        }
    }
}

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// Expected cross-entropy under Dir(α): ψ(α0) − ψ(α_c*).
pub fn uce(alpha: &DirichletParams, c_star: usize) -> Result<f64> {
    alpha.check_class(c_star)?;
    Ok(digamma(alpha.alpha0())? - digamma(alpha.alpha()[c_star])?)
}

/// UCE for α = (α_c, 1, ..., 1) as the finite sum Σ_{k=0}^{K−2} 1/(α_c + k).
pub fn uce_digamma_sum(alpha_c: f64, classes: usize) -> Result<f64> {
    if !(alpha_c >= 1.0 && alpha_c.is_finite()) {
        return Err(Error::Domain {
            func: "uce_digamma_sum",
            arg: alpha_c,
        });
    }
    if classes < 2 {
        return Err(Error::InvalidInput("need at least 2 classes".into()));
    }
    Ok((0..classes - 1).map(|k| 1.0 / (alpha_c + k as f64)).sum())
}

/// ln of Γ(α0)Γ(α0 − α_c + γ) / (Γ(α0 + γ)Γ(α0 − α_c)), grouped so that
/// γ = 0 gives exactly zero.
pub(crate) fn ln_focal_ratio(alpha0: f64, alpha_c: f64, gamma: f64) -> Result<f64> {
    let rest = alpha0 - alpha_c;
    let v = (ln_gamma(alpha0)? - ln_gamma(alpha0 + gamma)?)
        + (ln_gamma(rest + gamma)? - ln_gamma(rest)?);
    finite(v, "focal gamma ratio")
}

/// Expected focal loss under Dir(α) in closed form.
pub fn ufce(alpha: &DirichletParams, c_star: usize, gamma: f64) -> Result<f64> {
    alpha.check_class(c_star)?;
    if !(gamma.is_finite() && gamma >= 0.0) {
        return Err(Error::Domain {
            func: "ufce",
            arg: gamma,
        });
    }
    let a0 = alpha.alpha0();
    let ac = alpha.alpha()[c_star];
    let ratio = ln_focal_ratio(a0, ac, gamma)?.exp();
    let v = ratio * (digamma(a0 + gamma)? - digamma(ac)?);
    finite(v, "ufce")
}

/// UFCE for α = (α_c, 1, ..., 1) and a positive integer γ, written with the
/// gamma-ratio prefactor and a finite digamma sum.
pub fn ufce_integer_gamma(alpha_c: f64, classes: usize, gamma: f64) -> Result<f64> {
    if !(gamma >= 1.0 && gamma.fract() == 0.0 && gamma.is_finite()) {
        return Err(Error::Domain {
            func: "ufce_integer_gamma",
            arg: gamma,
        });
    }
    if !(alpha_c >= 1.0 && alpha_c.is_finite()) {
        return Err(Error::Domain {
            func: "ufce_integer_gamma",
            arg: alpha_c,
        });
    }
    if classes < 2 {
        return Err(Error::InvalidInput("need at least 2 classes".into()));
    }
    let k = classes as f64;
    let a0 = alpha_c + k - 1.0;
    let ln_ratio =
        ln_gamma(a0)? + ln_gamma(k - 1.0 + gamma)? - ln_gamma(a0 + gamma)? - ln_gamma(k - 1.0)?;
    let terms = classes - 2 + gamma as usize;
    let sum: f64 = (0..=terms).map(|j| 1.0 / (alpha_c + j as f64)).sum();
    Ok(ln_ratio.exp() * sum)
}

/// KL(Dir(α) ‖ Dir(1)), the smoothing regularizer.
pub fn ent_regularizer(alpha: &DirichletParams) -> Result<f64> {
    dirichlet_kl(alpha, &DirichletParams::flat(alpha.classes())?)
}

/// UCE plus β times the smoothing regularizer.
pub fn uce_ent_objective(alpha: &DirichletParams, c_star: usize, beta: f64) -> Result<f64> {
    Ok(uce(alpha, c_star)? + beta * ent_regularizer(alpha)?)
}

/// 1 + C·ξ/α0.
pub fn eus_multiplier(alpha0: f64, classes: usize, xi: f64) -> f64 {
    1.0 + classes as f64 * xi / alpha0
}

/// UFCE scaled by the epistemic multiplier. The multiplier is a constant
/// for differentiation purposes.
pub fn ufce_eus(alpha: &DirichletParams, c_star: usize, gamma: f64, xi: f64) -> Result<f64> {
    Ok(eus_multiplier(alpha.alpha0(), alpha.classes(), xi) * ufce(alpha, c_star, gamma)?)
}

/// Evidence regularization toward the flat Dirichlet, applied to pseudo-OOD
/// samples.
pub fn er_loss(alpha: &DirichletParams) -> Result<f64> {
    ent_regularizer(alpha)
}

/// Mean EUS-scaled UFCE over the in-distribution samples plus λ times the
/// mean evidence regularization over the pseudo-OOD samples.
pub fn combined_objective(batch: &[SupervisedSample], cfg: &LossConfig) -> Result<f64> {
    let (mut id_sum, mut n_id) = (0.0, 0usize);
    let (mut ood_sum, mut n_ood) = (0.0, 0usize);
    for s in batch {
        match s.true_class {
            Some(c) => {
                id_sum += cfg.class_weight(c) * ufce_eus(&s.alpha, c, cfg.gamma, cfg.xi)?;
                n_id += 1;
            }
            None => {
                ood_sum += er_loss(&s.alpha)?;
                n_ood += 1;
            }
        }
    }
    if n_id == 0 {
        return Err(Error::InvalidInput(
            "batch has no in-distribution samples".into(),
        ));
    }
    let ood = if n_ood == 0 {
        0.0
    } else {
        ood_sum / n_ood as f64
    };
    Ok(id_sum / n_id as f64 + cfg.lambda * ood)
}

fn target_prob(p: &SimplexVector, c_star: usize) -> Result<f64> {
    let pc = *p.as_slice().get(c_star).ok_or(Error::ClassIndex {
        index: c_star,
        classes: p.as_slice().len(),
    })?;
    if pc <= 0.0 {
        return Err(Error::Saturation(format!("p[{c_star}] = 0")));
    }
    Ok(pc)
}

/// −ln p_c*.
pub fn cross_entropy(p: &SimplexVector, c_star: usize) -> Result<f64> {
    Ok(-target_prob(p, c_star)?.ln())
}

/// −(1 − p_c*)^γ ln p_c*.
pub fn focal(p: &SimplexVector, c_star: usize, gamma: f64) -> Result<f64> {
    let pc = target_prob(p, c_star)?;
    Ok(-(1.0 - pc).powf(gamma) * pc.ln())
}

fn check_logits(logits: &[f64]) -> Result<()> {
    if logits.is_empty() {
        return Err(Error::InvalidInput("empty logits".into()));
    }
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::NonFinite("logits".into()));
    }
    Ok(())
}

/// Numerically stable log-sum-exp.
pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Softmax with max subtraction.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter_mut().for_each(|x| *x /= s);
    e
}

/// Shannon entropy of softmax(logits).
pub fn softmax_entropy(logits: &[f64]) -> Result<f64> {
    check_logits(logits)?;
    let lse = log_sum_exp(logits);
    let h = logits
        .iter()
        .map(|&l| {
            let lp = l - lse;
            let p = lp.exp();
            if p > 0.0 {
                -p * lp
            } else {
                0.0
            }
        })
        .sum::<f64>();
    Ok(h.max(0.0))
}

/// Free energy −T ln Σ exp(l / T).
pub fn energy_score(logits: &[f64], temperature: f64) -> Result<f64> {
    check_logits(logits)?;
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::Domain {
            func: "energy_score",
            arg: temperature,
        });
    }
    let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
    Ok(-temperature * log_sum_exp(&scaled))
}

/// Squared-hinge energy margins: ID energies pushed below `m_in`, OOD
/// energies above `m_out`.
pub fn energy_bound_penalty(e_in: &[f64], e_out: &[f64], m_in: f64, m_out: f64) -> Result<f64> {
    if e_in.is_empty() && e_out.is_empty() {
        return Err(Error::InvalidInput("no energies to bound".into()));
    }
    let sq = |v: f64| v.max(0.0).powi(2);
    let mean = |xs: &[f64], f: &dyn Fn(f64) -> f64| {
        if xs.is_empty() {
            0.0
        } else {
            xs.iter().map(|&e| f(e)).sum::<f64>() / xs.len() as f64
        }
    };
    Ok(mean(e_in, &|e| sq(e - m_in)) + mean(e_out, &|e| sq(m_out - e)))
}
