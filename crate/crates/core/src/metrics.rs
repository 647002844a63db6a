//! Confusion matrix, derived classification metrics, ROC/AUC and report export.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{ANEMIC, CLASS_NAMES};
use crate::error::{Error, Result};
use crate::training::{history_csv, EpochRecord};

/// Rows are actual classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
    pub class_names: Vec<String>,
}

impl ConfusionMatrix {
    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let k = counts.len();
        if k == 0 || counts.iter().any(|r| r.len() != k) {
            return Err(Error::Shape(format!("confusion matrix must be square and non-empty, got {k} rows")));
        }
        let class_names = if k == CLASS_NAMES.len() {
            CLASS_NAMES.iter().map(|s| s.to_string()).collect()
        } else {
            (0..k).map(|i| format!("class_{i}")).collect()
        };
        Ok(ConfusionMatrix { counts, class_names })
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn support(&self, class: usize) -> u64 {
        self.counts[class].iter().sum()
    }

    pub fn predicted(&self, class: usize) -> u64 {
        self.counts.iter().map(|r| r[class]).sum()
    }

    /// Each row divided by its sum; all-zero rows stay zero.
    pub fn normalized(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|row| {
                let s: u64 = row.iter().sum();
                row.iter().map(|&c| if s == 0 { 0.0 } else { c as f64 / s as f64 }).collect()
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("actual\\predicted");
        for name in &self.class_names {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for (name, row) in self.class_names.iter().zip(&self.counts) {
            out.push_str(name);
            for c in row {
                out.push_str(&format!(",{c}"));
            }
            out.push('\n');
        }
        out
    }
}

pub fn confusion(predicted: &[usize], actual: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    if predicted.len() != actual.len() {
        return Err(Error::Shape(format!("{} predictions for {} labels", predicted.len(), actual.len())));
    }
    let mut counts = vec![vec![0u64; classes]; classes];
    for (&p, &a) in predicted.iter().zip(actual) {
        for label in [p, a] {
            if label >= classes {
                return Err(Error::LabelOutOfRange { label: label as i64, classes });
            }
        }
        counts[a][p] += 1;
    }
    ConfusionMatrix::from_counts(counts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub name: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
    /// Recall is undefined (reported as 0) because the class has no samples.
    pub zero_support: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub per_class: Vec<ClassMetrics>,
    pub weighted_precision: f64,
    pub weighted_recall: f64,
    pub weighted_f1: f64,
    pub auc_roc: Option<f64>,
    pub confusion: ConfusionMatrix,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Everything except AUC. Sensitivity and specificity treat `anemic` as positive.
pub fn derive_metrics(matrix: &ConfusionMatrix) -> Result<EvalMetrics> {
    let k = matrix.classes();
    let total = matrix.total();
    let per_class: Vec<ClassMetrics> = (0..k)
        .map(|c| {
            let tp = matrix.counts[c][c];
            let support = matrix.support(c);
            let precision = ratio(tp, matrix.predicted(c));
            let recall = ratio(tp, support);
            let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
            ClassMetrics {
                name: matrix.class_names[c].clone(),
                precision,
                recall,
                f1,
                support,
                zero_support: support == 0,
            }
        })
        .collect();
    let weighted = |f: fn(&ClassMetrics) -> f64| -> f64 {
        if total == 0 {
            return 0.0;
        }
        per_class.iter().map(|m| f(m) * m.support as f64).sum::<f64>() / total as f64
    };
    let (sensitivity, specificity) = if k == 2 {
        let pos = ANEMIC;
        let neg = 1 - ANEMIC;
        let (tp, fn_) = (matrix.counts[pos][pos], matrix.counts[pos][neg]);
        let (tn, fp) = (matrix.counts[neg][neg], matrix.counts[neg][pos]);
        (ratio(tp, tp + fn_), ratio(tn, tn + fp))
    } else {
        return Err(Error::Shape(format!("sensitivity and specificity need 2 classes, got {k}")));
    };
    Ok(EvalMetrics {
        accuracy: ratio((0..k).map(|c| matrix.counts[c][c]).sum(), total),
        sensitivity,
        specificity,
        weighted_precision: weighted(|m| m.precision),
        weighted_recall: weighted(|m| m.recall),
        weighted_f1: weighted(|m| m.f1),
        per_class,
        auc_roc: None,
        confusion: matrix.clone(),
    })
}

/// A point on the ROC curve, swept from the highest threshold down.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// ROC points; `positive[i]` marks samples of the positive class. Tied scores
/// move the curve diagonally, which is what gives ties half credit.
pub fn roc_points(scores: &[f64], positive: &[bool]) -> Result<Vec<RocPoint>> {
    if scores.len() != positive.len() {
        return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), positive.len())));
    }
    let p = positive.iter().filter(|&&b| b).count();
    let n = positive.len() - p;
    if p == 0 || n == 0 {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint { threshold: f64::INFINITY, fpr: 0.0, tpr: 0.0 }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if positive[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint { threshold, fpr: fp as f64 / n as f64, tpr: tp as f64 / p as f64 });
    }
    Ok(points)
}

/// Trapezoidal area under the ROC curve.
pub fn roc_auc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    let pts = roc_points(scores, positive)?;
    Ok(pts.windows(2).map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0).sum())
}

/// AUC for `class` given each sample's probability of that class.
pub fn roc_auc_for_class(scores: &[f64], labels: &[usize], class: usize) -> Result<f64> {
    let positive: Vec<bool> = labels.iter().map(|&l| l == class).collect();
    roc_auc(scores, &positive)
}

pub fn roc_csv(points: &[RocPoint]) -> String {
    let mut out = String::from("threshold,fpr,tpr\n");
    for p in points {
        let t = if p.threshold.is_finite() { format!("{:.6}", p.threshold) } else { "inf".into() };
        out.push_str(&format!("{t},{:.6},{:.6}\n", p.fpr, p.tpr));
    }
    out
}

fn round6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

fn rounded(m: &EvalMetrics) -> EvalMetrics {
    let mut m = m.clone();
    for v in [
        &mut m.accuracy,
        &mut m.sensitivity,
        &mut m.specificity,
        &mut m.weighted_precision,
        &mut m.weighted_recall,
        &mut m.weighted_f1,
    ] {
        *v = round6(*v);
    }
    m.auc_roc = m.auc_roc.map(round6);
    for c in &mut m.per_class {
        c.precision = round6(c.precision);
        c.recall = round6(c.recall);
        c.f1 = round6(c.f1);
    }
    m
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportFiles {
    pub metrics: PathBuf,
    pub confusion: PathBuf,
    pub roc: PathBuf,
    pub history: PathBuf,
}

impl ReportFiles {
    pub fn in_dir(dir: &Path) -> Self {
        ReportFiles {
            metrics: dir.join("metrics.json"),
            confusion: dir.join("confusion.csv"),
            roc: dir.join("roc.csv"),
            history: dir.join("history.csv"),
        }
    }
}

/// Writes metrics JSON, confusion CSV, ROC-points CSV and history CSV.
pub fn export_report(
    metrics: &EvalMetrics,
    roc: &[RocPoint],
    history: &[EpochRecord],
    out_dir: &Path,
) -> Result<ReportFiles> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let files = ReportFiles::in_dir(out_dir);
    let write = |path: &Path, text: String| std::fs::write(path, text).map_err(|e| Error::io(path, e));
    write(&files.metrics, serde_json::to_string_pretty(&rounded(metrics))?)?;
    write(&files.confusion, metrics.confusion.to_csv())?;
    write(&files.roc, roc_csv(roc))?;
    write(&files.history, history_csv(history))?;
    Ok(files)
}

pub fn read_metrics(path: &Path) -> Result<EvalMetrics> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_counted_confusion() {
        let m = confusion(&[0, 1, 1, 1], &[0, 0, 1, 1], 2).unwrap();
        assert_eq!(m.counts, vec![vec![1, 1], vec![0, 2]]);
        assert!(confusion(&[0, 2], &[0, 1], 2).is_err());
        assert!(confusion(&[0], &[0, 1], 2).is_err());
    }

    #[test]
    fn normalized_rows() {
        let m = ConfusionMatrix::from_counts(vec![vec![96, 4], vec![5, 95]]).unwrap();
        assert_eq!(m.normalized(), vec![vec![0.96, 0.04], vec![0.05, 0.95]]);
    }

    #[test]
    fn diagonal_is_perfect() {
        let m = ConfusionMatrix::from_counts(vec![vec![7, 0], vec![0, 3]]).unwrap();
        let d = derive_metrics(&m).unwrap();
        for v in [d.accuracy, d.sensitivity, d.specificity, d.weighted_f1, d.weighted_precision, d.weighted_recall] {
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn zero_support_flagged() {
        let m = ConfusionMatrix::from_counts(vec![vec![0, 0], vec![1, 4]]).unwrap();
        let d = derive_metrics(&m).unwrap();
        assert!(d.per_class[0].zero_support);
        assert_eq!(d.per_class[0].recall, 0.0);
        assert!(!d.per_class[1].zero_support);
    }

    #[test]
    fn small_auc_cases() {
        assert_eq!(roc_auc(&[0.9, 0.8, 0.3, 0.1], &[true, true, false, false]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.9, 0.4, 0.6, 0.1], &[true, true, false, false]).unwrap(), 0.75);
        assert_eq!(roc_auc(&[0.5, 0.5], &[true, false]).unwrap(), 0.5);
        assert!(matches!(roc_auc(&[0.1, 0.2], &[true, true]), Err(Error::SingleClass)));
    }

    #[test]
    fn roc_csv_header_and_rows() {
        let pts = roc_points(&[0.9, 0.1], &[true, false]).unwrap();
        let csv = roc_csv(&pts);
        assert_eq!(csv.lines().next(), Some("threshold,fpr,tpr"));
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.contains("0.900000,0.000000,1.000000"));
    }
}
