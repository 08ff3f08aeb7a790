//! Binary classification metrics. The positive class for TP/FP accounting
//! is parasitized (index 1).

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::CLASS_NAMES;
use crate::error::{CoreError, Result};

/// Counts indexed `[true][predicted]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; 2]; 2],
    pub class_names: [String; 2],
}

impl ConfusionMatrix {
    pub fn from_counts(tn: u64, fp: u64, fn_: u64, tp: u64) -> Self {
        Self {
            counts: [[tn, fp], [fn_, tp]],
            class_names: CLASS_NAMES.map(String::from),
        }
    }

    pub fn with_class_names(mut self, names: [&str; 2]) -> Self {
        self.class_names = names.map(String::from);
        self
    }

    pub fn tn(&self) -> u64 {
        self.counts[0][0]
    }

    pub fn fp(&self) -> u64 {
        self.counts[0][1]
    }

    pub fn fn_(&self) -> u64 {
        self.counts[1][0]
    }

    pub fn tp(&self) -> u64 {
        self.counts[1][1]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn support(&self, class: usize) -> u64 {
        self.counts[class].iter().sum()
    }

    pub fn predicted(&self, class: usize) -> u64 {
        self.counts[0][class] + self.counts[1][class]
    }
}

/// Tallies `(truth, prediction)` pairs; labels must be 0 or 1.
pub fn confusion(truth: &[usize], predicted: &[usize]) -> Result<ConfusionMatrix> {
    if truth.len() != predicted.len() {
        return Err(CoreError::Data(format!(
            "{} true labels but {} predictions",
            truth.len(),
            predicted.len()
        )));
    }
    let mut cm = ConfusionMatrix::from_counts(0, 0, 0, 0);
    for (&t, &p) in truth.iter().zip(predicted) {
        if t > 1 || p > 1 {
            return Err(CoreError::Data(format!("label pair ({t}, {p}) is not binary")));
        }
        cm.counts[t][p] += 1;
    }
    Ok(cm)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    /// Also called sensitivity.
    pub recall: f64,
    pub specificity: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Average {
    pub precision: f64,
    pub recall: f64,
    pub specificity: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub confusion: ConfusionMatrix,
    pub per_class: [ClassMetrics; 2],
    pub accuracy: f64,
    pub macro_avg: Average,
    pub weighted_avg: Average,
    pub mcc: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auc_roc: Option<f64>,
    pub fpr: f64,
    pub fnr: f64,
    /// Quantities whose denominator was zero and that were set to 0.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub degenerate: Vec<String>,
}

fn ratio(num: u64, den: u64, what: impl FnOnce() -> String, flags: &mut Vec<String>) -> f64 {
    if den == 0 {
        flags.push(what());
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Derives every metric from a confusion matrix. `scores`, when given, is
/// `(truth, positive-class score)` for the same samples and adds ROC-AUC.
pub fn report(cm: &ConfusionMatrix, scores: Option<(&[usize], &[f64])>) -> Result<EvaluationReport> {
    let mut flags = Vec::new();
    let total = cm.total();
    let per_class: [ClassMetrics; 2] = [0, 1].map(|k| {
        let other = 1 - k;
        let tp = cm.counts[k][k];
        let name = &cm.class_names[k];
        let precision = ratio(tp, cm.predicted(k), || format!("precision[{name}]: nothing predicted"), &mut flags);
        let recall = ratio(tp, cm.support(k), || format!("recall[{name}]: no samples"), &mut flags);
        let tn = cm.counts[other][other];
        let specificity = ratio(
            tn,
            cm.support(other),
            || format!("specificity[{name}]: no negative samples"),
            &mut flags,
        );
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        ClassMetrics {
            precision,
            recall,
            specificity,
            f1,
            support: cm.support(k),
        }
    });
    let accuracy = ratio(cm.tn() + cm.tp(), total, || "accuracy: no samples".into(), &mut flags);
    let mean = |f: &dyn Fn(&ClassMetrics) -> f64| (f(&per_class[0]) + f(&per_class[1])) / 2.0;
    let macro_avg = Average {
        precision: mean(&|c| c.precision),
        recall: mean(&|c| c.recall),
        specificity: mean(&|c| c.specificity),
        f1: mean(&|c| c.f1),
        support: total,
    };
    let weighted = |f: &dyn Fn(&ClassMetrics) -> f64| {
        if total == 0 {
            0.0
        } else {
            per_class.iter().map(|c| f(c) * c.support as f64).sum::<f64>() / total as f64
        }
    };
    let weighted_avg = Average {
        precision: weighted(&|c| c.precision),
        recall: weighted(&|c| c.recall),
        specificity: weighted(&|c| c.specificity),
        f1: weighted(&|c| c.f1),
        support: total,
    };
    let (tp, tn, fp, fn_) = (cm.tp() as f64, cm.tn() as f64, cm.fp() as f64, cm.fn_() as f64);
    let den = ((tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_)).sqrt();
    let mcc = if den == 0.0 {
        flags.push("mcc: a confusion margin is zero".into());
        0.0
    } else {
        ((tp * tn - fp * fn_) / den).clamp(-1.0, 1.0)
    };
    let fpr = ratio(cm.fp(), cm.fp() + cm.tn(), || "fpr: no negative samples".into(), &mut flags);
    let fnr = ratio(cm.fn_(), cm.fn_() + cm.tp(), || "fnr: no positive samples".into(), &mut flags);
    let auc_roc = match scores {
        None => None,
        Some((truth, s)) => {
            if truth.len() as u64 != total {
                return Err(CoreError::Data(format!(
                    "{} scored samples for a confusion matrix of {total}",
                    truth.len()
                )));
            }
            let positives = truth.iter().filter(|&&t| t == 1).count() as u64;
            if positives != cm.support(1) {
                return Err(CoreError::Data(
                    "scored samples do not match the confusion matrix supports".into(),
                ));
            }
            Some(auc_roc(truth, s)?)
        }
    };
    flags.dedup();
    Ok(EvaluationReport {
        confusion: cm.clone(),
        per_class,
        accuracy,
        macro_avg,
        weighted_avg,
        mcc,
        auc_roc,
        fpr,
        fnr,
        degenerate: flags,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

fn check_scored(truth: &[usize], scores: &[f64]) -> Result<(usize, usize)> {
    if truth.len() != scores.len() {
        return Err(CoreError::Data(format!(
            "{} labels but {} scores",
            truth.len(),
            scores.len()
        )));
    }
    if let Some(t) = truth.iter().find(|&&t| t > 1) {
        return Err(CoreError::Data(format!("label {t} is not binary")));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(CoreError::Data("scores must be finite".into()));
    }
    let pos = truth.iter().filter(|&&t| t == 1).count();
    let neg = truth.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(CoreError::Data(
            "ROC-AUC is undefined unless both classes are present".into(),
        ));
    }
    Ok((pos, neg))
}

/// ROC points from a descending threshold sweep; tied scores form a single
/// step. The first point is `(inf, 0, 0)`.
pub fn roc_curve(truth: &[usize], scores: &[f64]) -> Result<Vec<RocPoint>> {
    let (pos, neg) = check_scored(truth, scores)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if truth[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold,
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
        });
    }
    Ok(points)
}

/// Trapezoidal area under [`roc_curve`].
pub fn auc_roc(truth: &[usize], scores: &[f64]) -> Result<f64> {
    let pts = roc_curve(truth, scores)?;
    Ok(pts
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum())
}

pub fn roc_csv(points: &[RocPoint]) -> String {
    let mut out = String::from("threshold,fpr,tpr\n");
    for p in points {
        let _ = writeln!(out, "{},{},{}", p.threshold, p.fpr, p.tpr);
    }
    out
}

/// Rounds half to even at two decimals.
pub fn round2(v: f64) -> f64 {
    (v * 100.0).round_ties_even() / 100.0
}

/// Classification-report table: one row per class, then accuracy, macro
/// and weighted averages. Rates at two decimals, supports as integers.
pub fn render_report(r: &EvaluationReport) -> String {
    let names = &r.confusion.class_names;
    let width = names
        .iter()
        .map(String::len)
        .chain(["Weighted avg".len()])
        .max()
        .unwrap_or(12);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:>width$}  {:>9}  {:>9}  {:>9}  {:>9}",
        "", "Precision", "Recall", "F1-score", "Support"
    );
    let _ = writeln!(out);
    for (name, c) in names.iter().zip(&r.per_class) {
        let _ = writeln!(
            out,
            "{name:>width$}  {:>9.2}  {:>9.2}  {:>9.2}  {:>9}",
            round2(c.precision),
            round2(c.recall),
            round2(c.f1),
            c.support
        );
    }
    let _ = writeln!(out);
    let _ = writeln!(
        out,
        "{:>width$}  {:>9}  {:>9}  {:>9.2}  {:>9}",
        "Accuracy",
        "",
        "",
        round2(r.accuracy),
        r.confusion.total()
    );
    for (label, a) in [("Macro avg", &r.macro_avg), ("Weighted avg", &r.weighted_avg)] {
        let _ = writeln!(
            out,
            "{label:>width$}  {:>9.2}  {:>9.2}  {:>9.2}  {:>9}",
            round2(a.precision),
            round2(a.recall),
            round2(a.f1),
            a.support
        );
    }
    out
}

/// Compact multi-line summary of the scalar metrics.
pub fn render_summary(r: &EvaluationReport) -> String {
    let mut out = String::new();
    let cm = &r.confusion;
    let _ = writeln!(out, "confusion (rows true, columns predicted):");
    for (i, name) in cm.class_names.iter().enumerate() {
        let _ = writeln!(out, "  {name:>12} {:>7} {:>7}", cm.counts[i][0], cm.counts[i][1]);
    }
    let _ = writeln!(out, "accuracy     {:.4}", r.accuracy);
    let _ = writeln!(out, "mcc          {:.4}", r.mcc);
    let _ = writeln!(out, "fpr          {:.4}", r.fpr);
    let _ = writeln!(out, "fnr          {:.4}", r.fnr);
    if let Some(auc) = r.auc_roc {
        let _ = writeln!(out, "auc_roc      {auc:.4}");
    }
    for flag in &r.degenerate {
        let _ = writeln!(out, "note: {flag}");
    }
    out
}
