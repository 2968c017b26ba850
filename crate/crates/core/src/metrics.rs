//! Binary classification quality metrics: confusion matrices, derived
//! rates and ROC/AUC. Attack is the positive class everywhere.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canlog::Label;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("scores and labels differ in length ({scores} vs {labels})")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("empty input")]
    Empty,
    #[error("both classes must be present")]
    SingleClass,
    #[error("confusion matrix is all zero")]
    EmptyMatrix,
    #[error("score {0} is not finite")]
    NonFiniteScore(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub true_neg: u64,
    pub false_pos: u64,
    pub false_neg: u64,
    pub true_pos: u64,
}

impl ConfusionMatrix {
    pub fn new(true_neg: u64, false_pos: u64, false_neg: u64, true_pos: u64) -> Self {
        Self { true_neg, false_pos, false_neg, true_pos }
    }

    pub fn total(&self) -> u64 {
        self.true_neg + self.false_pos + self.false_neg + self.true_pos
    }
}

/// Thresholds scores into a confusion matrix; prediction is Attack when
/// `score >= threshold` (boundary inclusive).
pub fn confusion(
    scores: &[f64],
    labels: &[Label],
    threshold: f64,
) -> Result<ConfusionMatrix, MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::LengthMismatch { scores: scores.len(), labels: labels.len() });
    }
    if scores.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut cm = ConfusionMatrix::new(0, 0, 0, 0);
    for (&score, &label) in scores.iter().zip(labels) {
        if !score.is_finite() {
            return Err(MetricsError::NonFiniteScore(score));
        }
        match (score >= threshold, label.is_attack()) {
            (true, true) => cm.true_pos += 1,
            (true, false) => cm.false_pos += 1,
            (false, true) => cm.false_neg += 1,
            (false, false) => cm.true_neg += 1,
        }
    }
    Ok(cm)
}

/// Quality rates as percentages at full precision. A `None` entry means the
/// metric's denominator was zero and it is reported as undefined rather
/// than silently zero. `auc` is a fraction in `[0,1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub fpr: Option<f64>,
    pub fnr: Option<f64>,
    pub auc: Option<f64>,
    pub confusion: ConfusionMatrix,
}

/// Derives precision/recall/F1/FPR/FNR from raw counts. Each rate is
/// computed from integer counts in one final division; F1 uses the exact
/// count form `2tp / (2tp + fp + fn)` so rounded rates never feed back.
pub fn derive_metrics(cm: &ConfusionMatrix) -> Result<MetricsReport, MetricsError> {
    if cm.total() == 0 {
        return Err(MetricsError::EmptyMatrix);
    }
    let pct = |num: u64, den: u64| -> Option<f64> {
        (den > 0).then(|| num as f64 / den as f64 * 100.0)
    };
    let precision = pct(cm.true_pos, cm.true_pos + cm.false_pos);
    let recall = pct(cm.true_pos, cm.true_pos + cm.false_neg);
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) if p + r > 0.0 => {
            pct(2 * cm.true_pos, 2 * cm.true_pos + cm.false_pos + cm.false_neg)
        }
        _ => None,
    };
    let fpr = pct(cm.false_pos, cm.false_pos + cm.true_neg);
    let fnr = pct(cm.false_neg, cm.false_neg + cm.true_pos);
    Ok(MetricsReport { precision, recall, f1, fpr, fnr, auc: None, confusion: *cm })
}

/// One ROC operating point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
}

/// ROC curve over all distinct score thresholds plus trapezoidal AUC.
/// Equal scores collapse into a single threshold step.
pub fn roc_auc(scores: &[f64], labels: &[Label]) -> Result<(Vec<RocPoint>, f64), MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::LengthMismatch { scores: scores.len(), labels: labels.len() });
    }
    if scores.is_empty() {
        return Err(MetricsError::Empty);
    }
    for &s in scores {
        if !s.is_finite() {
            return Err(MetricsError::NonFiniteScore(s));
        }
    }
    let pos = labels.iter().filter(|l| l.is_attack()).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(MetricsError::SingleClass);
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));

    let (pos, neg) = (pos as f64, neg as f64);
    let mut curve = vec![RocPoint { fpr: 0.0, tpr: 0.0 }];
    let mut tp = 0u64;
    let mut fp = 0u64;
    let mut prev_score = f64::INFINITY;
    for idx in order {
        if scores[idx] != prev_score {
            curve.push(RocPoint { fpr: fp as f64 / neg, tpr: tp as f64 / pos });
            prev_score = scores[idx];
        }
        if labels[idx].is_attack() {
            tp += 1;
        } else {
            fp += 1;
        }
    }
    curve.push(RocPoint { fpr: 1.0, tpr: 1.0 });
    curve.dedup();

    let auc = curve
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum();
    Ok((curve, auc))
}

/// Confusion, derived rates and AUC in one pass.
pub fn evaluate(
    scores: &[f64],
    labels: &[Label],
    threshold: f64,
) -> Result<MetricsReport, MetricsError> {
    let cm = confusion(scores, labels, threshold)?;
    let mut report = derive_metrics(&cm)?;
    report.auc = Some(roc_auc(scores, labels)?.1);
    Ok(report)
}

/// Display rounding: half away from zero, two decimals. Never used in
/// further computation.
pub fn round2(pct: f64) -> f64 {
    (pct * 100.0).round() / 100.0
}

fn cell(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{:.2}", round2(v)),
        None => "undef".to_string(),
    }
}

/// Aligned text table with the Precision/Recall/F1/FPR/FNR column layout,
/// plus AUC when available.
pub fn format_table(rows: &[(String, MetricsReport)]) -> String {
    let mut out = String::new();
    let name_w = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(5).max(5);
    out.push_str(&format!(
        "{:<name_w$}  {:>9}  {:>7}  {:>8}  {:>6}  {:>6}  {:>6}\n",
        "", "Precision", "Recall", "F1-Score", "FPR", "FNR", "AUC"
    ));
    for (name, r) in rows {
        let auc = match r.auc {
            Some(a) => format!("{a:.4}"),
            None => "-".to_string(),
        };
        out.push_str(&format!(
            "{:<name_w$}  {:>9}  {:>7}  {:>8}  {:>6}  {:>6}  {:>6}\n",
            name,
            cell(r.precision),
            cell(r.recall),
            cell(r.f1),
            cell(r.fpr),
            cell(r.fnr),
            auc
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn labels(bits: &[u8]) -> Vec<Label> {
        bits.iter().map(|&b| if b == 1 { Label::Attack } else { Label::Normal }).collect()
    }

    #[test]
    fn confusion_basic() {
        let cm = confusion(&[0.9, 0.1], &labels(&[1, 0]), 0.5).unwrap();
        assert_eq!(cm, ConfusionMatrix::new(1, 0, 0, 1));
    }

    #[test]
    fn threshold_boundary_is_inclusive() {
        let cm = confusion(&[0.5, 0.5], &labels(&[1, 0]), 0.5).unwrap();
        assert_eq!(cm.true_pos, 1);
        assert_eq!(cm.false_pos, 1);
        assert_eq!(cm.true_neg + cm.false_neg, 0);
    }

    #[test]
    fn confusion_rejects_mismatched_lengths() {
        assert_eq!(
            confusion(&[0.5], &labels(&[1, 0]), 0.5).unwrap_err(),
            MetricsError::LengthMismatch { scores: 1, labels: 2 }
        );
    }

    // Paper table rows: each matrix must reproduce the published cells.
    #[test]
    fn derive_matches_dos_row() {
        let r = derive_metrics(&ConfusionMatrix::new(33282, 13, 0, 16705)).unwrap();
        assert_eq!(round2(r.precision.unwrap()), 99.92);
        assert_eq!(round2(r.recall.unwrap()), 100.0);
        assert_eq!(round2(r.f1.unwrap()), 99.96);
        assert_eq!(round2(r.fpr.unwrap()), 0.04);
        assert_eq!(round2(r.fnr.unwrap()), 0.0);
    }

    #[test]
    fn derive_matches_fuzzy_row() {
        let r = derive_metrics(&ConfusionMatrix::new(38806, 16, 37, 11141)).unwrap();
        assert_eq!(round2(r.precision.unwrap()), 99.86);
        assert_eq!(round2(r.recall.unwrap()), 99.67);
        assert_eq!(round2(r.f1.unwrap()), 99.76);
        assert_eq!(round2(r.fpr.unwrap()), 0.04);
        assert_eq!(round2(r.fnr.unwrap()), 0.33);
    }

    #[test]
    fn derive_matches_gear_row() {
        let r = derive_metrics(&ConfusionMatrix::new(41352, 9, 0, 8639)).unwrap();
        assert_eq!(round2(r.precision.unwrap()), 99.90);
        assert_eq!(round2(r.recall.unwrap()), 100.0);
        assert_eq!(round2(r.f1.unwrap()), 99.95);
        assert_eq!(round2(r.fpr.unwrap()), 0.02);
        assert_eq!(round2(r.fnr.unwrap()), 0.0);
    }

    #[test]
    fn undefined_metrics_stay_undefined() {
        // No predicted positives: precision undefined, not zero.
        let r = derive_metrics(&ConfusionMatrix::new(10, 0, 5, 0)).unwrap();
        assert_eq!(r.precision, None);
        assert_eq!(r.recall, Some(0.0));
        assert_eq!(r.f1, None);
        assert!(derive_metrics(&ConfusionMatrix::new(0, 0, 0, 0)).is_err());
    }

    #[test]
    fn perfect_separation_gives_auc_one() {
        let scores = [0.9, 0.8, 0.2, 0.1];
        let (_, auc) = roc_auc(&scores, &labels(&[1, 1, 0, 0])).unwrap();
        assert_eq!(auc, 1.0);
    }

    #[test]
    fn constant_scores_give_auc_half() {
        let scores = [0.4; 6];
        let (curve, auc) = roc_auc(&scores, &labels(&[1, 0, 1, 0, 0, 1])).unwrap();
        assert!((auc - 0.5).abs() < 1e-12);
        // Single diagonal segment.
        assert_eq!(curve.len(), 2);
    }

    #[test]
    fn random_scores_give_auc_near_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let n = 10_000;
        let scores: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let lab: Vec<Label> = (0..n)
            .map(|i| if i % 2 == 0 { Label::Attack } else { Label::Normal })
            .collect();
        let (_, auc) = roc_auc(&scores, &lab).unwrap();
        assert!((auc - 0.5).abs() < 0.02, "auc {auc}");
    }

    #[test]
    fn roc_rejects_single_class() {
        assert_eq!(
            roc_auc(&[0.1, 0.2], &labels(&[0, 0])).unwrap_err(),
            MetricsError::SingleClass
        );
    }

    // Independent oracle: AUC must equal the Mann-Whitney U statistic
    // normalized by n_pos * n_neg, with midrank tie handling.
    fn mann_whitney_auc(scores: &[f64], labels: &[Label]) -> f64 {
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
        let mut ranks = vec![0.0f64; scores.len()];
        let mut i = 0;
        while i < order.len() {
            let mut j = i;
            while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
                j += 1;
            }
            let midrank = (i + j) as f64 / 2.0 + 1.0;
            for &idx in &order[i..=j] {
                ranks[idx] = midrank;
            }
            i = j + 1;
        }
        let n_pos = labels.iter().filter(|l| l.is_attack()).count() as f64;
        let n_neg = labels.len() as f64 - n_pos;
        let rank_sum: f64 =
            ranks.iter().zip(labels).filter(|(_, l)| l.is_attack()).map(|(r, _)| r).sum();
        (rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg)
    }

    #[test]
    fn auc_equals_mann_whitney_u() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let n = rng.gen_range(5..200);
            // Coarse grid forces score ties.
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..10) as f64 / 10.0).collect();
            let lab: Vec<Label> = (0..n)
                .map(|_| if rng.gen_bool(0.4) { Label::Attack } else { Label::Normal })
                .collect();
            if !lab.iter().any(|l| l.is_attack()) || lab.iter().all(|l| l.is_attack()) {
                continue;
            }
            let (_, auc) = roc_auc(&scores, &lab).unwrap();
            let mw = mann_whitney_auc(&scores, &lab);
            assert!((auc - mw).abs() < 1e-10, "auc {auc} vs U {mw}");
        }
    }

    #[test]
    fn permutation_leaves_metrics_unchanged() {
        use rand::seq::SliceRandom;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let scores: Vec<f64> = (0..500).map(|_| rng.gen()).collect();
        let lab: Vec<Label> = (0..500)
            .map(|_| if rng.gen_bool(0.3) { Label::Attack } else { Label::Normal })
            .collect();
        let base = evaluate(&scores, &lab, 0.5).unwrap();
        let mut perm: Vec<usize> = (0..500).collect();
        perm.shuffle(&mut rng);
        let ps: Vec<f64> = perm.iter().map(|&i| scores[i]).collect();
        let pl: Vec<Label> = perm.iter().map(|&i| lab[i]).collect();
        assert_eq!(evaluate(&ps, &pl, 0.5).unwrap(), base);
    }

    #[test]
    fn table_formatting_includes_rows() {
        let r = derive_metrics(&ConfusionMatrix::new(33282, 13, 0, 16705)).unwrap();
        let table = format_table(&[("DoS".to_string(), r)]);
        assert!(table.contains("99.92"));
        assert!(table.contains("Precision"));
    }
}
