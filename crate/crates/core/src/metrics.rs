//! Calibration and detection metrics, and the evaluation protocol that
//! applies them to a trained model.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::MlpModel;
use crate::synth::{LabeledPoint, Role};

pub const DEFAULT_BINS: usize = 10;

fn same_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::DimensionMismatch {
            expected: a,
            got: b,
        });
    }
    Ok(())
}

/// Index of the right-closed bin ((m−1)/M, m/M] holding `c`; 0 falls in the
/// first bin.
fn bin_index(c: f64, n_bins: usize) -> usize {
    let m = n_bins as f64;
    let mut b = (c * m).ceil() as usize;
    if b > 0 && c <= (b - 1) as f64 / m {
        b -= 1;
    } else if c > b as f64 / m {
        b += 1;
    }
    b.clamp(1, n_bins) - 1
}

/// Expected calibration error with equal-width right-closed bins on (0, 1].
pub fn ece(confidences: &[f64], correct: &[bool], n_bins: usize) -> Result<f64> {
    same_len(confidences.len(), correct.len())?;
    if confidences.is_empty() {
        return Err(Error::InvalidInput("ece of an empty sample".into()));
    }
    if n_bins == 0 {
        return Err(Error::InvalidInput("ece needs at least one bin".into()));
    }
    let mut count = vec![0usize; n_bins];
    let mut hits = vec![0usize; n_bins];
    let mut conf = vec![0.0; n_bins];
    for (&c, &ok) in confidences.iter().zip(correct) {
        if !(0.0..=1.0).contains(&c) {
            return Err(Error::Domain {
                func: "ece",
                arg: c,
            });
        }
        let b = bin_index(c, n_bins);
        count[b] += 1;
        hits[b] += ok as usize;
        conf[b] += c;
    }
    let n = confidences.len() as f64;
    Ok((0..n_bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let k = count[b] as f64;
            (k / n) * (hits[b] as f64 / k - conf[b] / k).abs()
        })
        .sum())
}

fn class_counts(labels: &[bool]) -> (usize, usize) {
    let pos = labels.iter().filter(|&&l| l).count();
    (pos, labels.len() - pos)
}

fn check_scores(scores: &[f64], labels: &[bool], func: &'static str) -> Result<()> {
    same_len(scores.len(), labels.len())?;
    if let Some(&s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::Domain { func, arg: s });
    }
    Ok(())
}

fn need_both(labels: &[bool], func: &str) -> Result<(usize, usize)> {
    let (pos, neg) = class_counts(labels);
    if pos == 0 || neg == 0 {
        return Err(Error::InvalidInput(format!(
            "{func} needs both positives and negatives"
        )));
    }
    Ok((pos, neg))
}

/// Mann–Whitney AUROC with tied scores counted as half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_scores(scores, labels, "auroc")?;
    let (pos, neg) = need_both(labels, "auroc")?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum keeps average ranks integral.
    let mut twice_rank_sum: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let twice_avg = (i + 1 + j + 1) as u64;
        let tied_pos = order[i..=j].iter().filter(|&&k| labels[k]).count() as u64;
        twice_rank_sum += twice_avg * tied_pos;
        i = j + 1;
    }
    let p = pos as u64;
    let twice_u = twice_rank_sum - p * (p + 1);
    Ok(twice_u as f64 / (2 * pos * neg) as f64)
}

/// Operating points (tp, fp) at each distinct threshold, highest first.
fn operating_points(scores: &[f64], labels: &[bool]) -> Vec<(usize, usize)> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0, 0);
    for (i, &k) in order.iter().enumerate() {
        if labels[k] {
            tp += 1;
        } else {
            fp += 1;
        }
        let last_of_tie = order
            .get(i + 1)
            .is_none_or(|&n| scores[n].total_cmp(&scores[k]) != Ordering::Equal);
        if last_of_tie {
            points.push((tp, fp));
        }
    }
    points
}

/// Average precision: Σ (R_i − R_{i−1})·P_i over distinct thresholds.
pub fn aupr(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_scores(scores, labels, "aupr")?;
    let (pos, _) = class_counts(labels);
    if pos == 0 {
        return Err(Error::InvalidInput(
            "aupr needs at least one positive".into(),
        ));
    }
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    for (tp, fp) in operating_points(scores, labels) {
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(area)
}

/// False-positive rate at the first threshold, scanning downward, whose
/// true-positive rate reaches 0.95.
pub fn fpr_at_95_tpr(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_scores(scores, labels, "fpr_at_95_tpr")?;
    let (pos, neg) = need_both(labels, "fpr_at_95_tpr")?;
    let (_, fp) = operating_points(scores, labels)
        .into_iter()
        .find(|&(tp, _)| tp as f64 >= 0.95 * pos as f64)
        .expect("the lowest threshold admits every positive");
    Ok(fp as f64 / neg as f64)
}

/// TP / (TP + FP + FN); 1 when both masks are empty.
pub fn iou(predicted_positive: &[bool], true_positive: &[bool]) -> Result<f64> {
    same_len(predicted_positive.len(), true_positive.len())?;
    let (mut tp, mut union) = (0usize, 0usize);
    for (&p, &t) in predicted_positive.iter().zip(true_positive) {
        tp += (p && t) as usize;
        union += (p || t) as usize;
    }
    Ok(if union == 0 {
        1.0
    } else {
        tp as f64 / union as f64
    })
}

/// Which uncertainty drives the OOD-detection task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scorer {
    /// Epistemic uncertainty C/α0.
    Evidential,
    Energy,
    /// Entropy of the softmax over the logits.
    Entropy,
}

impl std::str::FromStr for Scorer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "evidential" => Ok(Scorer::Evidential),
            "energy" => Ok(Scorer::Energy),
            "entropy" => Ok(Scorer::Entropy),
            other => Err(Error::InvalidInput(format!("unknown scorer `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub iou: f64,
    pub ece: f64,
    pub accuracy: f64,
    pub mis_auroc: Option<f64>,
    pub mis_aupr: Option<f64>,
    pub mis_fpr95: Option<f64>,
    pub ood_auroc: Option<f64>,
    pub ood_aupr: Option<f64>,
    pub ood_fpr95: Option<f64>,
    pub n_id: usize,
    pub n_misclassified: usize,
    pub n_pseudo_ood: usize,
    pub n_true_ood: usize,
}

fn optional(labels: &[bool], f: impl Fn() -> Result<f64>) -> Result<Option<f64>> {
    let (pos, neg) = class_counts(labels);
    if pos == 0 || neg == 0 {
        Ok(None)
    } else {
        f().map(Some)
    }
}

/// Runs both detection tasks. ID points feed IoU (class 0 positive), ECE
/// and misclassification detection; every non-ID point is a positive for
/// OOD detection against the ID points.
pub fn evaluate(
    model: &MlpModel,
    points: &[LabeledPoint],
    scorer: Scorer,
) -> Result<MetricsReport> {
    if points.is_empty() {
        return Err(Error::InvalidInput("evaluation split is empty".into()));
    }
    let mut confidence = Vec::new();
    let mut correct = Vec::new();
    let mut pred_pos = Vec::new();
    let mut true_pos = Vec::new();
    let mut mis_score = Vec::new();
    let mut ood_score = Vec::new();
    let mut is_ood = Vec::new();
    for p in points {
        let u = model.predict_uncertainties(&p.x)?;
        let score = match scorer {
            Scorer::Evidential => u.u_epis,
            Scorer::Energy => u.energy,
            Scorer::Entropy => u.softmax_entropy,
        };
        ood_score.push(score);
        is_ood.push(p.role != Role::Id);
        if let Some(label) = p.label {
            let pred = u.predicted_class();
            confidence.push(-u.u_alea);
            correct.push(pred == label);
            pred_pos.push(pred == 0);
            true_pos.push(label == 0);
            mis_score.push(u.u_alea);
        }
    }
    if confidence.is_empty() {
        return Err(Error::InvalidInput(
            "evaluation split has no in-distribution points".into(),
        ));
    }
    let misclassified: Vec<bool> = correct.iter().map(|c| !c).collect();
    let n_mis = misclassified.iter().filter(|&&m| m).count();
    let n_id = confidence.len();
    Ok(MetricsReport {
        iou: iou(&pred_pos, &true_pos)?,
        ece: ece(&confidence, &correct, DEFAULT_BINS)?,
        accuracy: (n_id - n_mis) as f64 / n_id as f64,
        mis_auroc: optional(&misclassified, || auroc(&mis_score, &misclassified))?,
        mis_aupr: optional(&misclassified, || aupr(&mis_score, &misclassified))?,
        mis_fpr95: optional(&misclassified, || fpr_at_95_tpr(&mis_score, &misclassified))?,
        ood_auroc: optional(&is_ood, || auroc(&ood_score, &is_ood))?,
        ood_aupr: optional(&is_ood, || aupr(&ood_score, &is_ood))?,
        ood_fpr95: optional(&is_ood, || fpr_at_95_tpr(&ood_score, &is_ood))?,
        n_id,
        n_misclassified: n_mis,
        n_pseudo_ood: points.iter().filter(|p| p.role == Role::PseudoOod).count(),
        n_true_ood: points.iter().filter(|p| p.role == Role::TrueOod).count(),
    })
}
