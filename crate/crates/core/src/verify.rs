//! Oracles and batch verification suites.
//!
//! Every case draws from its own stream derived from the root seed, so a
//! report is identical whether cases run serially or in parallel.

use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::dirichlet::{
    dirichlet_entropy, dirichlet_kl, expected_categorical_entropy, expected_p_log_p, sample_into,
    DirichletParams,
};
use crate::error::{Error, Result};
use crate::gradients::{
    beta_ratio_g, find_crossing_thresholds, gradient_gap_f, gradient_gap_f_derivative,
    uce_grad_alpha, ufce_grad_alpha, ThresholdStatus,
};
use crate::losses::{uce, uce_digamma_sum, ufce, ufce_integer_gamma};
use crate::rng::Stream;
use crate::specfn::{digamma, ln_gamma, trigamma};

pub const SUITES: [&str; 7] = [
    "prop1",
    "lower_bounds",
    "gradient_thresholds",
    "g_ratio",
    "psi1_scan",
    "mc_closed_form",
    "finite_diff",
];

pub const MIN_MC_SAMPLES: usize = 10_000;
pub const SEM_BAND: f64 = 4.0;
pub const THREADS_ENV: &str = "EVIDLOSS_THREADS";

const ALPHA_MEAN_EXCESS: f64 = 5.0;
const ALPHA_CAP: f64 = 200.0;

/// Per-sample accumulator of mean and standard error.
#[derive(Default, Clone, Copy)]
struct Moments {
    n: usize,
    sum: f64,
    sum_sq: f64,
}

impl Moments {
    fn push(&mut self, v: f64) {
        self.n += 1;
        self.sum += v;
        self.sum_sq += v * v;
    }

    fn mean_sem(&self) -> (f64, f64) {
        let n = self.n as f64;
        let mean = self.sum / n;
        let var = ((self.sum_sq - n * mean * mean) / (n - 1.0)).max(0.0);
        (mean, (var / n).sqrt())
    }
}

fn check_mc_args(alpha: &DirichletParams, c_star: usize, gamma: f64, n: usize) -> Result<()> {
    alpha.check_class(c_star)?;
    if !(gamma.is_finite() && gamma >= 0.0) {
        return Err(Error::Domain {
            func: "mc_expected_focal",
            arg: gamma,
        });
    }
    if n < MIN_MC_SAMPLES {
        return Err(Error::InvalidInput(format!(
            "need at least {MIN_MC_SAMPLES} samples, got {n}"
        )));
    }
    Ok(())
}

/// Monte-Carlo mean and standard error of (1 − p_c*)^γ · (−ln p_c*) under
/// p ~ Dir(α).
pub fn mc_expected_focal(
    alpha: &DirichletParams,
    c_star: usize,
    gamma: f64,
    n_samples: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    check_mc_args(alpha, c_star, gamma, n_samples)?;
    let mut stream = Stream::new(seed, 0);
    let mut p = Vec::with_capacity(alpha.classes());
    let mut m = Moments::default();
    for _ in 0..n_samples {
        sample_into(alpha.alpha(), &mut stream, &mut p);
        let pc = p[c_star];
        m.push(-(1.0 - pc).powf(gamma) * pc.ln());
    }
    Ok(m.mean_sem())
}

/// Central differences of `loss` at `alpha`, one component at a time.
pub fn finite_diff_gradient<F>(loss: F, alpha: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    if !(1e-7..=1e-3).contains(&step) {
        return Err(Error::Domain {
            func: "finite_diff_gradient",
            arg: step,
        });
    }
    if let Some(&a) = alpha.iter().find(|&&a| !(a.is_finite() && a - step > 0.0)) {
        return Err(Error::Domain {
            func: "finite_diff_gradient",
            arg: a,
        });
    }
    let mut probe = alpha.to_vec();
    let mut grad = Vec::with_capacity(alpha.len());
    for k in 0..alpha.len() {
        probe[k] = alpha[k] + step;
        let up = loss(&probe)?;
        probe[k] = alpha[k] - step;
        let down = loss(&probe)?;
        probe[k] = alpha[k];
        grad.push((up - down) / (2.0 * step));
    }
    Ok(grad)
}

/// A deliberate corruption of a closed form, used to confirm that a suite
/// can detect a wrong target.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mutation {
    /// UFCE without its gamma-function ratio prefactor.
    DropBetaRatio,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuiteOptions {
    /// Random configurations for the deterministic batteries.
    pub cases: usize,
    /// Configurations for the Monte-Carlo battery.
    pub mc_configs: usize,
    pub mc_samples: usize,
    pub mutation: Option<Mutation>,
}

impl SuiteOptions {
    /// The Monte-Carlo battery runs one configuration per ten cases.
    pub fn with_cases(cases: usize) -> Self {
        SuiteOptions {
            cases,
            mc_configs: (cases / 10).max(1),
            mc_samples: 1_000_000,
            mutation: None,
        }
    }
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions::with_cases(1000)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub suite: String,
    pub check: String,
    pub case: usize,
    pub inputs: Value,
    pub expected: f64,
    pub actual: f64,
    pub tolerance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckSummary {
    pub suite: String,
    pub check: String,
    pub total: usize,
    pub passes: usize,
    pub skipped: usize,
}

impl CheckSummary {
    pub fn failures(&self) -> usize {
        self.total - self.passes
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub suite: String,
    pub root_seed: u64,
    pub total: usize,
    pub passes: usize,
    /// Cases whose premise did not hold; not counted in `total`.
    pub skipped: usize,
    pub checks: Vec<CheckSummary>,
    pub failures: Vec<Failure>,
    pub notes: Vec<String>,
    #[serde(skip)]
    pub wall_time: Duration,
    #[serde(skip)]
    pub suite_times: Vec<(String, Duration)>,
}

impl VerificationReport {
    pub fn is_success(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn check(&self, suite: &str, check: &str) -> Option<&CheckSummary> {
        self.checks
            .iter()
            .find(|c| c.suite == suite && c.check == check)
    }
}

enum Verdict {
    Pass,
    Fail {
        inputs: Value,
        expected: f64,
        actual: f64,
        tolerance: f64,
    },
    Skip,
}

struct Outcome {
    check: &'static str,
    case: usize,
    verdict: Verdict,
}

fn outcome(
    check: &'static str,
    case: usize,
    ok: bool,
    inputs: impl FnOnce() -> Value,
    expected: f64,
    actual: f64,
    tolerance: f64,
) -> Outcome {
    let verdict = if ok {
        Verdict::Pass
    } else {
        Verdict::Fail {
            inputs: inputs(),
            expected,
            actual,
            tolerance,
        }
    };
    Outcome {
        check,
        case,
        verdict,
    }
}

fn skip(check: &'static str, case: usize) -> Outcome {
    Outcome {
        check,
        case,
        verdict: Verdict::Skip,
    }
}

struct SuiteResult {
    outcomes: Vec<Outcome>,
    notes: Vec<String>,
}

fn stream_for(seed: u64, suite: usize, case: usize) -> Stream {
    Stream::new(seed, ((suite as u64) << 32) | case as u64)
}

fn random_alpha(stream: &mut Stream, classes: usize) -> Vec<f64> {
    (0..classes)
        .map(|_| (1.0 + stream.exponential(ALPHA_MEAN_EXCESS)).min(ALPHA_CAP))
        .collect()
}

fn uniform_in(stream: &mut Stream, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * stream.uniform()
}

fn int_in(stream: &mut Stream, lo: usize, hi: usize) -> usize {
    lo + stream.below(hi - lo + 1)
}

/// Runs `case` for every index in parallel, keeping the index order.
fn per_case<F>(n: usize, case: F) -> Result<Vec<Outcome>>
where
    F: Fn(usize) -> Result<Vec<Outcome>> + Sync + Send,
{
    let nested: Vec<Vec<Outcome>> = (0..n).into_par_iter().map(case).collect::<Result<_>>()?;
    Ok(nested.into_iter().flatten().collect())
}

fn within(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn prop1(seed: u64, opts: &SuiteOptions) -> Result<SuiteResult> {
    let outcomes = per_case(opts.cases, |i| {
        let mut st = stream_for(seed, 0, i);
        let classes = int_in(&mut st, 2, 10);
        let a = DirichletParams::new(random_alpha(&mut st, classes))?;
        let c = st.below(classes);
        let mut hat = vec![1.0; classes];
        hat[c] = 2.0;
        let hat = DirichletParams::new(hat)?;
        let lhs = uce(&a, c)?;
        let rhs = dirichlet_kl(&a, &hat)? + dirichlet_entropy(&a)? - hat.ln_beta()?;
        Ok(vec![outcome(
            "one_hot_kl_identity",
            i,
            within(lhs, rhs, 1e-8),
            || json!({"alpha": a.alpha(), "c_star": c}),
            rhs,
            lhs,
            1e-8,
        )])
    })?;
    Ok(SuiteResult {
        outcomes,
        notes: Vec::new(),
    })
}

fn lower_bounds(seed: u64, opts: &SuiteOptions) -> Result<SuiteResult> {
    const SLACK: f64 = 1e-9;
    let outcomes = per_case(opts.cases, |i| {
        let mut st = stream_for(seed, 1, i);
        let classes = int_in(&mut st, 2, 10);
        let a = DirichletParams::new(random_alpha(&mut st, classes))?;
        let c = st.below(classes);
        let gamma = uniform_in(&mut st, 1.0, 5.0);
        let u = uce(&a, c)?;
        let f = ufce(&a, c, gamma)?;
        let plogp = expected_p_log_p(&a, c)?;
        let ent = expected_categorical_entropy(&a)?;
        let inputs = || json!({"alpha": a.alpha(), "c_star": c, "gamma": gamma});
        let bernoulli = u + gamma * plogp;
        let entropy_bound = u - gamma * ent;
        let mut out = vec![
            outcome(
                "bernoulli_bound",
                i,
                f >= bernoulli - SLACK,
                inputs,
                bernoulli,
                f,
                SLACK,
            ),
            outcome(
                "entropy_bound",
                i,
                f >= entropy_bound - SLACK,
                inputs,
                entropy_bound,
                f,
                SLACK,
            ),
            outcome("attenuation", i, f <= u + SLACK, inputs, u, f, SLACK),
        ];
        // At γ = 1 Bernoulli's inequality is an equality.
        let a2 = DirichletParams::new(random_alpha(&mut st, 2))?;
        let c2 = st.below(2);
        let tight = uce(&a2, c2)? + expected_p_log_p(&a2, c2)?;
        let f1 = ufce(&a2, c2, 1.0)?;
        out.push(outcome(
            "tight_at_gamma_one",
            i,
            within(f1, tight, 1e-10),
            || json!({"alpha": a2.alpha(), "c_star": c2, "gamma": 1.0}),
            tight,
            f1,
            1e-10,
        ));
        Ok(out)
    })?;
    Ok(SuiteResult {
        outcomes,
        notes: Vec::new(),
    })
}

/// Premise of the magnitude bound between the UFCE and UCE gradients.
fn bound_premise(alpha0: f64, alpha_c: f64, gamma: f64) -> Result<f64> {
    Ok(-(digamma(alpha0)? - digamma(alpha0 + gamma)?)
        * (digamma(alpha0 + gamma)? - digamma(alpha_c)?)
        - trigamma(alpha0 + gamma)?
        + trigamma(alpha0)?)
}

pub const GAP_ALPHA0_GRID: [f64; 4] = [3.0, 5.0, 10.0, 50.0];
pub const GAP_GAMMA_GRID: [f64; 5] = [0.01, 0.5, 1.0, 2.0, 5.0];
pub const THRESHOLD_BAND: (f64, f64) = (0.35, 0.45);

fn gradient_thresholds(seed: u64, opts: &SuiteOptions) -> Result<SuiteResult> {
    let per: Vec<(Vec<Outcome>, bool)> = (0..opts.cases)
        .into_par_iter()
        .map(|i| -> Result<(Vec<Outcome>, bool)> {
            let mut st = stream_for(seed, 2, i);
            let classes = int_in(&mut st, 2, 10);
            let a = DirichletParams::new(random_alpha(&mut st, classes))?;
            let c = st.below(classes);
            let gamma = uniform_in(&mut st, 0.01, 5.0);
            let inputs = || json!({"alpha": a.alpha(), "c_star": c, "gamma": gamma});
            let gu = uce_grad_alpha(&a, c)?;
            let gf = ufce_grad_alpha(&a, c, gamma)?;
            let (a0, ac) = (a.alpha0(), a.alpha()[c]);
            let gap = gradient_gap_f(ac / a0, a0, gamma)?;
            let direct = gf[c].abs() - gu[c].abs();
            let nonzero = gu.iter().chain(&gf).all(|&g| g != 0.0);
            let smallest = gu
                .iter()
                .chain(&gf)
                .fold(f64::INFINITY, |m, g| m.min(g.abs()));
            let mut out = vec![
                outcome(
                    "gap_matches_gradients",
                    i,
                    within(direct, gap, 1e-8),
                    inputs,
                    gap,
                    direct,
                    1e-8,
                ),
                outcome(
                    "gradients_nonvanishing",
                    i,
                    nonzero,
                    inputs,
                    0.0,
                    smallest,
                    0.0,
                ),
            ];
            let g = beta_ratio_g(a0, ac, gamma)?;
            let signed = gf[c] <= g * gu[c];
            if bound_premise(a0, ac, gamma)? < 0.0 {
                let bound = g * gu[c].abs();
                out.push(outcome(
                    "magnitude_bound",
                    i,
                    gf[c].abs() <= bound,
                    inputs,
                    bound,
                    gf[c].abs(),
                    0.0,
                ));
            } else {
                out.push(skip("magnitude_bound", i));
            }
            Ok((out, signed))
        })
        .collect::<Result<_>>()?;
    let signed_holds = per.iter().filter(|(_, s)| *s).count();
    let mut outcomes: Vec<Outcome> = per.into_iter().flat_map(|(o, _)| o).collect();
    let mut notes = vec![format!(
        "signed form dUFCE/dalpha_c <= g * dUCE/dalpha_c held in {signed_holds} of {} cases",
        opts.cases
    )];

    let mut case = 0;
    for &a0 in &GAP_ALPHA0_GRID {
        for &gamma in &GAP_GAMMA_GRID {
            let inputs = || json!({"alpha0": a0, "gamma": gamma});
            let low = gradient_gap_f(1.0 / a0 + 1e-6, a0, gamma)?;
            let high = gradient_gap_f(1.0 - 1.0 / a0 - 1e-6, a0, gamma)?;
            outcomes.push(outcome(
                "gap_positive_at_low_pbar",
                case,
                low > 0.0,
                inputs,
                0.0,
                low,
                0.0,
            ));
            outcomes.push(outcome(
                "gap_negative_at_high_pbar",
                case,
                high < 0.0,
                inputs,
                0.0,
                high,
                0.0,
            ));
            case += 1;
        }
    }

    let t = find_crossing_thresholds(5.0, 1.0, 2)?;
    notes.push(format!(
        "thresholds at alpha_c*=5, gamma=1, K=2: tau1={:.6}, tau2={:.6} ({:?})",
        t.tau1, t.tau2, t.status
    ));
    let (lo, hi) = THRESHOLD_BAND;
    for (k, tau) in [t.tau1, t.tau2].into_iter().enumerate() {
        outcomes.push(outcome(
            "threshold_near_0_4",
            k,
            (lo..=hi).contains(&tau) && t.status == ThresholdStatus::Crossing,
            || json!({"alpha_c_star": 5.0, "gamma": 1.0, "classes": 2}),
            0.4,
            tau,
            0.05,
        ));
    }
    let t = find_crossing_thresholds(10.0, 2.0, 2)?;
    let below = gradient_gap_f(t.tau1 - 1e-3, 10.0 / (t.tau1 - 1e-3), 2.0)?;
    let above = gradient_gap_f(t.tau2 + 1e-3, 10.0 / (t.tau2 + 1e-3), 2.0)?;
    let inputs = || json!({"alpha_c_star": 10.0, "gamma": 2.0, "tau1": t.tau1, "tau2": t.tau2});
    outcomes.push(outcome(
        "threshold_sign_before",
        0,
        below > 0.0,
        inputs,
        0.0,
        below,
        0.0,
    ));
    outcomes.push(outcome(
        "threshold_sign_after",
        0,
        above < 0.0,
        inputs,
        0.0,
        above,
        0.0,
    ));
    Ok(SuiteResult { outcomes, notes })
}

pub const G_ALPHA_C_GRID: [f64; 3] = [1.0, 2.0, 3.0];
pub const G_GAMMA_GRID: [f64; 5] = [0.01, 0.1, 0.5, 1.0, 2.0];

fn g_ratio(_seed: u64, _opts: &SuiteOptions) -> Result<SuiteResult> {
    let mut outcomes = Vec::new();
    let mut case = 0;
    for &ac in &G_ALPHA_C_GRID {
        for &gamma in &G_GAMMA_GRID {
            let mut a0 = ac + 1.0;
            while a0 <= 100.0 {
                let g = beta_ratio_g(a0, ac, gamma)?;
                outcomes.push(outcome(
                    "g_at_most_one",
                    case,
                    g > 0.0 && g <= 1.0 + 1e-12,
                    || json!({"alpha0": a0, "alpha_c": ac, "gamma": gamma}),
                    1.0,
                    g,
                    1e-12,
                ));
                case += 1;
                a0 += 0.5;
            }
        }
    }
    Ok(SuiteResult {
        outcomes,
        notes: Vec::new(),
    })
}

pub const PSI1_GAMMA_GRID: [f64; 9] = [0.01, 0.05, 0.1, 0.5, 1.0, 2.0, 3.0, 4.0, 5.0];

/// α0 from 2.1 to 100 in steps of 0.1.
pub fn psi1_alpha0_grid() -> Vec<f64> {
    (21..=1000).map(|k| k as f64 / 10.0).collect()
}

/// ψ1(α0+γ) + 1 − ψ(α0+γ)/Γ(α0+γ) − ψ1(α0).
pub fn psi1_combination(alpha0: f64, gamma: f64) -> Result<f64> {
    let x = alpha0 + gamma;
    Ok(trigamma(x)? + 1.0 - digamma(x)? * (-ln_gamma(x)?).exp() - trigamma(alpha0)?)
}

fn psi1_scan(_seed: u64, _opts: &SuiteOptions) -> Result<SuiteResult> {
    let grid = psi1_alpha0_grid();
    let mut outcomes = Vec::new();
    let mut premise_negative = 0;
    let mut premise_total = 0;
    let mut case = 0;
    for &gamma in &PSI1_GAMMA_GRID {
        for &a0 in &grid {
            let v = psi1_combination(a0, gamma)?;
            outcomes.push(outcome(
                "psi1_combination_nonpositive",
                case,
                v <= 0.0,
                || json!({"alpha0": a0, "gamma": gamma}),
                0.0,
                v,
                0.0,
            ));
            case += 1;
            for &ac in &G_ALPHA_C_GRID {
                if ac < a0 {
                    premise_total += 1;
                    premise_negative += (bound_premise(a0, ac, gamma)? < 0.0) as usize;
                }
            }
        }
    }
    let notes = vec![format!(
        "target inequality -[psi(a0)-psi(a0+g)][psi(a0+g)-psi(ac)] - psi1(a0+g) < -psi1(a0) \
         held at {premise_negative} of {premise_total} grid points (alpha_c in {{1,2,3}})"
    )];
    Ok(SuiteResult { outcomes, notes })
}

/// Closed-form UFCE, optionally corrupted.
fn ufce_target(
    a: &DirichletParams,
    c: usize,
    gamma: f64,
    mutation: Option<Mutation>,
) -> Result<f64> {
    match mutation {
        None => ufce(a, c, gamma),
        Some(Mutation::DropBetaRatio) => Ok(digamma(a.alpha0() + gamma)? - digamma(a.alpha()[c])?),
    }
}

fn mc_closed_form(seed: u64, opts: &SuiteOptions) -> Result<SuiteResult> {
    let n = opts.mc_samples;
    if n < MIN_MC_SAMPLES {
        return Err(Error::InvalidInput(format!(
            "need at least {MIN_MC_SAMPLES} samples, got {n}"
        )));
    }
    let mut outcomes = per_case(opts.mc_configs, |i| {
        let mut st = stream_for(seed, 5, i);
        let classes = int_in(&mut st, 2, 6);
        let alpha: Vec<f64> = (0..classes)
            .map(|_| uniform_in(&mut st, 1.0, 50.0))
            .collect();
        let a = DirichletParams::new(alpha)?;
        let c = st.below(classes);
        let gamma = uniform_in(&mut st, 0.0, 5.0);
        let (mut focal, mut ce, mut neg_ln_pdf, mut plogp) = Default::default();
        let mut p = Vec::with_capacity(classes);
        for _ in 0..n {
            sample_into(a.alpha(), &mut st, &mut p);
            let pc = p[c];
            let ln_pc = pc.ln();
            Moments::push(&mut focal, -(1.0 - pc).powf(gamma) * ln_pc);
            Moments::push(&mut ce, -ln_pc);
            Moments::push(&mut neg_ln_pdf, -a.ln_pdf(&p)?);
            Moments::push(&mut plogp, pc * ln_pc);
        }
        let inputs = || json!({"alpha": a.alpha(), "c_star": c, "gamma": gamma, "samples": n});
        let compare = |check, m: &Moments, closed: f64| {
            let (mean, sem) = m.mean_sem();
            let tol = SEM_BAND * sem;
            outcome(
                check,
                i,
                within(mean, closed, tol),
                inputs,
                closed,
                mean,
                tol,
            )
        };
        Ok(vec![
            compare(
                "ufce_vs_mc",
                &focal,
                ufce_target(&a, c, gamma, opts.mutation)?,
            ),
            compare("uce_vs_mc", &ce, uce(&a, c)?),
            compare("entropy_vs_mc", &neg_ln_pdf, dirichlet_entropy(&a)?),
            compare("p_log_p_vs_mc", &plogp, expected_p_log_p(&a, c)?),
        ])
    })?;

    // Exact reductions and restricted-domain forms, checked over the
    // deterministic case count.
    let identities = per_case(opts.cases, |i| {
        let mut st = stream_for(seed, 7, i);
        let classes = int_in(&mut st, 2, 10);
        let a = DirichletParams::new(random_alpha(&mut st, classes))?;
        let c = st.below(classes);
        let u = uce(&a, c)?;
        let f0 = ufce_target(&a, c, 0.0, opts.mutation)?;
        let rel = (f0 - u).abs() / u.abs();
        let mut out = vec![outcome(
            "gamma_zero_reduction",
            i,
            rel <= 1e-10,
            || json!({"alpha": a.alpha(), "c_star": c}),
            u,
            f0,
            1e-10 * u.abs(),
        )];
        let ac = a.alpha()[c];
        let mut restricted = vec![1.0; classes];
        restricted[0] = ac;
        let r = DirichletParams::new(restricted)?;
        let general = uce(&r, 0)?;
        let sum = uce_digamma_sum(ac, classes)?;
        out.push(outcome(
            "digamma_sum_form",
            i,
            within(sum, general, 1e-10),
            || json!({"alpha_c": ac, "classes": classes}),
            general,
            sum,
            1e-10,
        ));
        let gamma = int_in(&mut st, 1, 5) as f64;
        let general = ufce_target(&r, 0, gamma, opts.mutation)?;
        let integer = ufce_integer_gamma(ac, classes, gamma)?;
        out.push(outcome(
            "integer_gamma_form",
            i,
            within(integer, general, 1e-10),
            || json!({"alpha_c": ac, "classes": classes, "gamma": gamma}),
            general,
            integer,
            1e-10,
        ));
        Ok(out)
    })?;
    outcomes.extend(identities);
    Ok(SuiteResult {
        outcomes,
        notes: Vec::new(),
    })
}

pub const FD_STEP: f64 = 1e-4;
pub const FD_REL_TOL: f64 = 1e-5;

fn fd_outcome(
    check: &'static str,
    case: usize,
    analytic: &[f64],
    numeric: &[f64],
    abs_floor: f64,
    inputs: impl Fn() -> Value,
) -> Outcome {
    let worst = analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| {
            let tol = FD_REL_TOL * a.abs().max(n.abs()) + abs_floor;
            ((a - n).abs() / tol, a, n, tol)
        })
        .fold((0.0, 0.0, 0.0, 0.0), |w, x| if x.0 > w.0 { x } else { w });
    let (ratio, a, n, tol) = worst;
    outcome(check, case, ratio <= 1.0, inputs, n, a, tol)
}

fn finite_diff(seed: u64, opts: &SuiteOptions) -> Result<SuiteResult> {
    let outcomes = per_case(opts.cases, |i| {
        let mut st = stream_for(seed, 6, i);
        let classes = int_in(&mut st, 2, 10);
        let alpha = random_alpha(&mut st, classes);
        let a = DirichletParams::new(alpha.clone())?;
        let c = st.below(classes);
        let gamma = uniform_in(&mut st, 0.0, 5.0);
        let inputs = || json!({"alpha": alpha, "c_star": c, "gamma": gamma});
        let num_uce = finite_diff_gradient(
            |x| uce(&DirichletParams::from_positive(x.to_vec())?, c),
            &alpha,
            FD_STEP,
        )?;
        let num_ufce = finite_diff_gradient(
            |x| ufce(&DirichletParams::from_positive(x.to_vec())?, c, gamma),
            &alpha,
            FD_STEP,
        )?;
        let mut out = vec![
            fd_outcome(
                "uce_gradient",
                i,
                &uce_grad_alpha(&a, c)?,
                &num_uce,
                1e-12,
                inputs,
            ),
            fd_outcome(
                "ufce_gradient",
                i,
                &ufce_grad_alpha(&a, c, gamma)?,
                &num_ufce,
                1e-12,
                inputs,
            ),
        ];
        // ∂f/∂p̄ at a feasible interior point, stepping α_c* by FD_STEP.
        let a0 = uniform_in(&mut st, 2.5, 50.0);
        let p_bar = uniform_in(&mut st, 1.5 / a0, 1.0 - 1.5 / a0);
        let g = uniform_in(&mut st, 0.01, 5.0);
        let h = FD_STEP / a0;
        let numeric =
            (gradient_gap_f(p_bar + h, a0, g)? - gradient_gap_f(p_bar - h, a0, g)?) / (2.0 * h);
        let analytic = gradient_gap_f_derivative(p_bar, a0, g)?;
        out.push(fd_outcome(
            "gap_derivative",
            i,
            &[analytic],
            &[numeric],
            1e-7 * a0,
            || json!({"p_bar": p_bar, "alpha0": a0, "gamma": g}),
        ));
        Ok(out)
    })?;
    Ok(SuiteResult {
        outcomes,
        notes: Vec::new(),
    })
}

type SuiteFn = fn(u64, &SuiteOptions) -> Result<SuiteResult>;

fn suite_fn(name: &str) -> Option<SuiteFn> {
    Some(match name {
        "prop1" => prop1,
        "lower_bounds" => lower_bounds,
        "gradient_thresholds" => gradient_thresholds,
        "g_ratio" => g_ratio,
        "psi1_scan" => psi1_scan,
        "mc_closed_form" => mc_closed_form,
        "finite_diff" => finite_diff,
        _ => return None,
    })
}

/// Suite names a selector expands to.
pub fn expand_selector(which: &str) -> Result<Vec<&'static str>> {
    if which == "all" {
        return Ok(SUITES.to_vec());
    }
    SUITES
        .iter()
        .find(|&&s| s == which)
        .map(|&s| vec![s])
        .ok_or_else(|| Error::UnknownSuite(which.to_string()))
}

fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
            Error::InvalidConfig(format!(
                "{THREADS_ENV}: expected a positive integer, got `{v}`"
            ))
        })?;
        builder = builder.num_threads(n);
    }
    builder
        .build()
        .map_err(|e| Error::InvalidConfig(format!("{THREADS_ENV}: {e}")))
}

pub fn run_proposition_suite(which: &str, seed: u64, cases: usize) -> Result<VerificationReport> {
    run_with_options(which, seed, &SuiteOptions::with_cases(cases))
}

pub fn run_with_options(which: &str, seed: u64, opts: &SuiteOptions) -> Result<VerificationReport> {
    let suites = expand_selector(which)?;
    if opts.cases == 0 || opts.mc_configs == 0 {
        return Err(Error::InvalidInput("case counts must be positive".into()));
    }
    let start = Instant::now();
    let pool = thread_pool()?;
    let mut report = VerificationReport {
        suite: which.to_string(),
        root_seed: seed,
        total: 0,
        passes: 0,
        skipped: 0,
        checks: Vec::new(),
        failures: Vec::new(),
        notes: Vec::new(),
        wall_time: Duration::ZERO,
        suite_times: Vec::new(),
    };
    for name in suites {
        let run = suite_fn(name).expect("selector names are valid");
        let suite_start = Instant::now();
        let result = pool.install(|| run(seed, opts))?;
        report
            .suite_times
            .push((name.to_string(), suite_start.elapsed()));
        for note in result.notes {
            report.notes.push(format!("{name}: {note}"));
        }
        for o in result.outcomes {
            let idx = match report
                .checks
                .iter()
                .position(|c| c.suite == name && c.check == o.check)
            {
                Some(k) => k,
                None => {
                    report.checks.push(CheckSummary {
                        suite: name.to_string(),
                        check: o.check.to_string(),
                        total: 0,
                        passes: 0,
                        skipped: 0,
                    });
                    report.checks.len() - 1
                }
            };
            let summary = &mut report.checks[idx];
            match o.verdict {
                Verdict::Skip => {
                    summary.skipped += 1;
                    report.skipped += 1;
                }
                Verdict::Pass => {
                    summary.total += 1;
                    summary.passes += 1;
                    report.total += 1;
                    report.passes += 1;
                }
                Verdict::Fail {
                    inputs,
                    expected,
                    actual,
                    tolerance,
                } => {
                    summary.total += 1;
                    report.total += 1;
                    report.failures.push(Failure {
                        suite: name.to_string(),
                        check: o.check.to_string(),
                        case: o.case,
                        inputs,
                        expected,
                        actual,
                        tolerance,
                    });
                }
            }
        }
    }
    report.wall_time = start.elapsed();
    Ok(report)
}
