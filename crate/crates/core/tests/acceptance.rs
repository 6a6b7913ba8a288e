//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! fails if any criterion is not met.

use std::fs;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use evidloss::losses::LossConfig;
use evidloss::metrics::{aupr, auroc, ece, evaluate, fpr_at_95_tpr, Scorer, DEFAULT_BINS};
use evidloss::net::{backward, batch_loss, Head, LossKind, MlpModel};
use evidloss::pipeline::{self, RunConfig};
use evidloss::specfn::{digamma, tetragamma, trigamma};
use evidloss::synth::{generate, LabeledPoint, Role};
use evidloss::verify::{run_with_options, SuiteOptions, VerificationReport};

struct Ledger {
    lines: Vec<(bool, String)>,
}

impl Ledger {
    fn record(&mut self, id: &str, pass: bool, detail: String) {
        let line = format!("{} [{id}] {detail}", if pass { "PASS" } else { "FAIL" });
        println!("{line}");
        self.lines.push((pass, line));
    }
}

fn check_counts(r: &VerificationReport, suite: &str, checks: &[&str]) -> (bool, String) {
    let mut ok = true;
    let mut parts = Vec::new();
    for &c in checks {
        let s = r
            .check(suite, c)
            .unwrap_or_else(|| panic!("no check {suite}/{c}"));
        ok &= s.failures() == 0 && s.total > 0;
        parts.push(format!("{c} {}/{}", s.passes, s.total));
    }
    (ok, parts.join(", "))
}

fn suite_time(r: &VerificationReport, suite: &str) -> Duration {
    r.suite_times.iter().find(|(s, _)| s == suite).unwrap().1
}

// Brute-force metric oracles.

fn brute_auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut twice, mut pairs) = (0u64, 0u64);
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            pairs += 1;
            twice += if si > sj {
                2
            } else if si == sj {
                1
            } else {
                0
            };
        }
    }
    twice as f64 / (2 * pairs) as f64
}

fn thresholds_desc(scores: &[f64]) -> Vec<f64> {
    let mut t = scores.to_vec();
    t.sort_by(|a, b| b.total_cmp(a));
    t.dedup();
    t
}

fn counts_at(scores: &[f64], labels: &[bool], t: f64) -> (usize, usize) {
    let tp = scores
        .iter()
        .zip(labels)
        .filter(|(&s, &l)| l && s >= t)
        .count();
    let fp = scores
        .iter()
        .zip(labels)
        .filter(|(&s, &l)| !l && s >= t)
        .count();
    (tp, fp)
}

fn brute_aupr(scores: &[f64], labels: &[bool]) -> f64 {
    let pos = labels.iter().filter(|&&l| l).count() as f64;
    let mut area = 0.0;
    let mut prev = 0.0;
    for t in thresholds_desc(scores) {
        let (tp, fp) = counts_at(scores, labels, t);
        let recall = tp as f64 / pos;
        area += (recall - prev) * (tp as f64 / (tp + fp) as f64);
        prev = recall;
    }
    area
}

fn brute_fpr95(scores: &[f64], labels: &[bool]) -> f64 {
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    for t in thresholds_desc(scores) {
        let (tp, fp) = counts_at(scores, labels, t);
        if tp as f64 >= 0.95 * pos as f64 {
            return fp as f64 / neg as f64;
        }
    }
    unreachable!()
}

fn metric_oracles() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut mismatches = 0;
    for _ in 0..100 {
        let n = rng.gen_range(2..=200);
        let levels = rng.gen_range(2..=50);
        let scores: Vec<f64> = (0..n)
            .map(|_| rng.gen_range(0..levels) as f64 / levels as f64)
            .collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.3)).collect();
        labels[0] = true;
        labels[1] = false;
        mismatches += (auroc(&scores, &labels).unwrap() != brute_auroc(&scores, &labels)) as usize;
        mismatches += (aupr(&scores, &labels).unwrap() != brute_aupr(&scores, &labels)) as usize;
        mismatches +=
            (fpr_at_95_tpr(&scores, &labels).unwrap() != brute_fpr95(&scores, &labels)) as usize;
    }
    let hand = [
        // 0.1 sits in the first bin, 0.15 in the second.
        (vec![0.1, 0.15], vec![true, false], 0.525),
        (vec![0.9, 0.9, 0.6, 0.6], vec![true, false, true, true], 0.4),
        (vec![0.5, 0.5], vec![true, false], 0.0),
        (vec![1.0, 1.0, 1.0], vec![true, true, true], 0.0),
    ];
    let mut ece_bad = 0;
    for (conf, correct, want) in &hand {
        let got = ece(conf, correct, DEFAULT_BINS).unwrap();
        ece_bad += ((got - want).abs() > 1e-15) as usize;
    }
    (
        mismatches == 0 && ece_bad == 0,
        format!("{mismatches} oracle mismatches over 300 metric evaluations, {ece_bad} of 4 ECE hand cases off"),
    )
}

// Full-network gradient check on a micro-net.

fn min_pre_activation_margin(model: &MlpModel, batch: &[LabeledPoint]) -> f64 {
    let mut margin = f64::INFINITY;
    for p in batch {
        let mut a = p.x.to_vec();
        for (k, layer) in model.layers.iter().enumerate() {
            let z: Vec<f64> = layer
                .weights
                .chunks_exact(layer.inputs)
                .zip(&layer.bias)
                .map(|(row, b)| b + row.iter().zip(&a).map(|(w, v)| w * v).sum::<f64>())
                .collect();
            margin = z.iter().fold(margin, |m, v| m.min(v.abs()));
            a = if k + 1 < model.layers.len() {
                z.iter().map(|v| v.max(0.0)).collect()
            } else {
                z
            };
        }
    }
    margin
}

fn network_gradient_check() -> (bool, String) {
    let batch = vec![
        LabeledPoint::id([0.7, -0.4], 0),
        LabeledPoint::id([-0.5, 0.9], 1),
        LabeledPoint::id([0.1, 0.8], 2),
        LabeledPoint::ood([0.2, 0.3], Role::PseudoOod),
        LabeledPoint::ood([-0.8, -0.6], Role::PseudoOod),
    ];
    let cfg = LossConfig {
        gamma: 1.5,
        beta: 0.1,
        lambda: 0.5,
        xi: 2.0,
        m_in: -3.0,
        m_out: 1.0,
        positive_class_weight: 2.0,
        ..LossConfig::default()
    };
    let h = 1e-4;
    let mut worst = 0.0f64;
    let mut failed = Vec::new();
    for kind in LossKind::ALL {
        let model = (0..1000)
            .map(|seed| {
                let mut m = MlpModel::init(5, 3, kind.head(), seed);
                if kind.head() == Head::Evidential {
                    m.layers[2].bias = vec![1.5, 1.0, 0.5];
                }
                m
            })
            .find(|m| min_pre_activation_margin(m, &batch) > 0.05)
            .expect("kink-free micro-net");
        let g = backward(&model, &batch, kind, &cfg).unwrap();
        let base = model.params();
        let mut probe = model.clone();
        for (i, &a) in g.flat().iter().enumerate() {
            let mut p = base.clone();
            p[i] = base[i] + h;
            probe.set_params(&p).unwrap();
            let up = batch_loss(&probe, &batch, kind, &cfg, Some(&g.eus_multipliers)).unwrap();
            p[i] = base[i] - h;
            probe.set_params(&p).unwrap();
            let down = batch_loss(&probe, &batch, kind, &cfg, Some(&g.eus_multipliers)).unwrap();
            let numeric = (up - down) / (2.0 * h);
            let rel = (a - numeric).abs() / (a.abs().max(numeric.abs()) + 1e-5);
            worst = worst.max(rel);
            if rel > 1e-4 && !failed.contains(&kind) {
                failed.push(kind);
            }
        }
    }
    (
        failed.is_empty(),
        format!(
            "micro-net worst relative error {worst:.2e} over {} loss kinds, failing {failed:?}",
            LossKind::ALL.len()
        ),
    )
}

// Trend reproduction on synthetic data.

struct TrendSeed {
    ufce_aupr: f64,
    uce_ent_aupr: f64,
    ufce_ece: f64,
    uce_eus_ece: f64,
    ce_entropy_aupr: f64,
    ce_energy_aupr: f64,
}

fn trend_seed(seed: u64) -> TrendSeed {
    let cfg = RunConfig {
        seed,
        ..RunConfig::default()
    };
    let split = generate(&cfg.dataset()).unwrap();
    let fit = |kind| {
        let mut t = cfg.training();
        t.loss_kind = kind;
        evidloss::net::train(&t, &split).unwrap().0
    };
    let report = |m: &MlpModel, s| evaluate(m, &split.test, s).unwrap();
    let ufce = report(&fit(LossKind::UfceEusEr), Scorer::Evidential);
    let uce_ent = report(&fit(LossKind::UceEnt), Scorer::Evidential);
    let uce_eus = report(&fit(LossKind::UceEusEr), Scorer::Evidential);
    let ce = fit(LossKind::Ce);
    TrendSeed {
        ufce_aupr: ufce.ood_aupr.unwrap(),
        uce_ent_aupr: uce_ent.ood_aupr.unwrap(),
        ufce_ece: ufce.ece,
        uce_eus_ece: uce_eus.ece,
        ce_entropy_aupr: report(&ce, Scorer::Entropy).ood_aupr.unwrap(),
        ce_energy_aupr: report(&ce, Scorer::Energy).ood_aupr.unwrap(),
    }
}

fn special_functions() -> (bool, String) {
    let euler = 0.577_215_664_901_532_9;
    let zeta2 = std::f64::consts::PI * std::f64::consts::PI / 6.0;
    let e_psi = (digamma(1.0).unwrap() + euler).abs();
    let e_psi1 = (trigamma(1.0).unwrap() - zeta2).abs();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let x: f64 = rng.gen_range(0.01..=1000.0);
        worst = worst
            .max((digamma(x + 1.0).unwrap() - digamma(x).unwrap() - 1.0 / x).abs())
            .max((trigamma(x + 1.0).unwrap() - trigamma(x).unwrap() + 1.0 / (x * x)).abs())
            .max((tetragamma(x + 1.0).unwrap() - tetragamma(x).unwrap() - 2.0 / (x * x * x)).abs());
    }
    (
        e_psi <= 1e-12 && e_psi1 <= 1e-12 && worst <= 1e-10,
        format!("|psi(1)+gamma_E| = {e_psi:.1e}, |psi1(1)-pi^2/6| = {e_psi1:.1e}, worst recurrence residual {worst:.1e}"),
    )
}

#[test]
fn acceptance() {
    let mut ledger = Ledger { lines: Vec::new() };
    let opts = SuiteOptions::with_cases(1000);

    let start = Instant::now();
    let report = run_with_options("all", 7, &opts).unwrap();
    let first_json = pipeline::report_json(&report).unwrap();
    println!(
        "verification suites ran in {:.1}s",
        start.elapsed().as_secs_f64()
    );

    let mc = suite_time(&report, "mc_closed_form");
    let (ok, d) = check_counts(
        &report,
        "mc_closed_form",
        &["ufce_vs_mc", "uce_vs_mc", "entropy_vs_mc", "p_log_p_vs_mc"],
    );
    let fast = mc <= Duration::from_secs(120);
    ledger.record(
        "1",
        ok && fast,
        format!(
            "closed form vs Monte Carlo at 4 SEM, {} configs x {} samples: {d}; {:.1}s",
            opts.mc_configs,
            opts.mc_samples,
            mc.as_secs_f64()
        ),
    );

    let (ok, d) = check_counts(&report, "mc_closed_form", &["gamma_zero_reduction"]);
    ledger.record(
        "2",
        ok,
        format!("gamma = 0 reduction within 1e-10 relative: {d}"),
    );

    let (ok, d) = check_counts(&report, "prop1", &["one_hot_kl_identity"]);
    ledger.record("3", ok, format!("one-hot KL identity within 1e-8: {d}"));

    let (ok, d) = check_counts(
        &report,
        "lower_bounds",
        &["bernoulli_bound", "entropy_bound", "tight_at_gamma_one"],
    );
    ledger.record(
        "4",
        ok,
        format!("lower bounds at 1e-9 slack and equality at K=2, gamma=1: {d}"),
    );

    let (ok_fd, d) = check_counts(&report, "finite_diff", &["uce_gradient", "ufce_gradient"]);
    let (ok_net, d_net) = network_gradient_check();
    ledger.record(
        "5",
        ok_fd && ok_net,
        format!("gradients vs central differences: {d}; {d_net}"),
    );

    let (ok, d) = check_counts(
        &report,
        "gradient_thresholds",
        &[
            "gap_positive_at_low_pbar",
            "gap_negative_at_high_pbar",
            "threshold_near_0_4",
        ],
    );
    let mut d = d;
    for f in report
        .failures
        .iter()
        .filter(|f| f.check == "gap_positive_at_low_pbar")
    {
        d += &format!("; f = {:.6} at {}", f.actual, f.inputs);
    }
    ledger.record(
        "6",
        ok,
        format!("gradient-gap sign structure and thresholds: {d}"),
    );

    let (ok_g, d_g) = check_counts(&report, "g_ratio", &["g_at_most_one"]);
    let (ok_p, d_p) = check_counts(&report, "psi1_scan", &["psi1_combination_nonpositive"]);
    ledger.record(
        "7",
        ok_g && ok_p,
        format!("Beta ratio and psi1 scan: {d_g}; {d_p}"),
    );

    let (ok, d) = special_functions();
    ledger.record("8", ok, d);

    let (ok, d) = metric_oracles();
    ledger.record("9", ok, d);

    let start = Instant::now();
    let seeds: Vec<(u64, TrendSeed)> = [7, 8, 9].into_iter().map(|s| (s, trend_seed(s))).collect();
    let elapsed = start.elapsed();
    let mut a_all = true;
    let (mut b_count, mut c_count) = (0, 0);
    for (seed, t) in &seeds {
        let a = t.ufce_aupr >= 2.0 * t.uce_ent_aupr;
        let b = t.ufce_ece <= t.uce_eus_ece;
        let c = t.ufce_aupr > t.ce_entropy_aupr.max(t.ce_energy_aupr);
        a_all &= a;
        b_count += b as usize;
        c_count += c as usize;
        println!(
            "  seed {seed}: ood aupr ufce-eus-er {:.3} vs uce-ent {:.3} ({a}); ece ufce-eus-er {:.4} vs uce-eus-er {:.4} ({b}); ce entropy {:.3}, energy {:.3} ({c})",
            t.ufce_aupr, t.uce_ent_aupr, t.ufce_ece, t.uce_eus_ece, t.ce_entropy_aupr, t.ce_energy_aupr
        );
    }
    let per_seed = elapsed / 3;
    let fast = per_seed <= Duration::from_secs(300);
    ledger.record(
        "10a",
        a_all && fast,
        format!(
            "ER doubles OOD AUPR on all seeds: {a_all}; {:.1}s per 4-training pipeline",
            per_seed.as_secs_f64()
        ),
    );
    ledger.record(
        "10b",
        b_count >= 2,
        format!("UFCE-EUS-ER ECE <= UCE-EUS-ER ECE on {b_count} of 3 seeds"),
    );
    ledger.record(
        "10c",
        c_count >= 2,
        format!("evidential OOD AUPR beats softmax entropy and energy on {c_count} of 3 seeds"),
    );

    let second = run_with_options("all", 7, &opts).unwrap();
    let same_verify = pipeline::report_json(&second).unwrap() == first_json;
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::default();
    let mut same_train = true;
    for run in ["a", "b"] {
        pipeline::run_to_dir(&cfg, &dir.path().join(run)).unwrap();
    }
    for f in [
        pipeline::MODEL_FILE,
        pipeline::HISTORY_FILE,
        pipeline::METRICS_FILE,
        pipeline::DATA_FILE,
    ] {
        same_train &= fs::read(dir.path().join("a").join(f)).unwrap()
            == fs::read(dir.path().join("b").join(f)).unwrap();
    }
    ledger.record(
        "11",
        same_verify && same_train,
        format!(
            "byte-identical reruns: verify report {same_verify}, training artifacts {same_train}"
        ),
    );

    let failed: Vec<&String> = ledger
        .lines
        .iter()
        .filter(|(p, _)| !p)
        .map(|(_, l)| l)
        .collect();
    println!(
        "{} of {} criteria pass",
        ledger.lines.len() - failed.len(),
        ledger.lines.len()
    );
    assert!(
        failed.is_empty(),
        "failing criteria:\n{}",
        failed
            .iter()
            .map(|l| l.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    );
}
