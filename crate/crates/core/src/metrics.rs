//! Classification metrics and predictive entropy.
//!
//! Aggregates are support-weighted: each per-class value is weighted by the
//! fraction of samples whose true label is that class, which makes weighted
//! recall identical to accuracy. Undefined ratios (0/0) are reported as 0.

use serde::{Deserialize, Serialize};

use crate::data::{make_batches, Dataset};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::ops;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Counts indexed `[true][predicted]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(truth: &[usize], predicted: &[usize], k: usize) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::InvalidArgument(format!(
                "{} true labels vs {} predictions",
                truth.len(),
                predicted.len()
            )));
        }
        if truth.is_empty() {
            return Err(Error::InvalidArgument("empty evaluation".into()));
        }
        let mut counts = vec![0u64; k * k];
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= k || p >= k {
                return Err(Error::InvalidArgument(format!("label pair ({t}, {p}) outside [0, {k})")));
            }
            counts[t * k + p] += 1;
        }
        Ok(ConfusionMatrix { k, counts })
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.k + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, class: usize) -> u64 {
        self.counts[class * self.k..(class + 1) * self.k].iter().sum()
    }

    pub fn col_sum(&self, class: usize) -> u64 {
        (0..self.k).map(|t| self.get(t, class)).sum()
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.k).map(<[u64]>::to_vec).collect()
    }

    pub fn accuracy(&self) -> f64 {
        let correct: u64 = (0..self.k).map(|c| self.get(c, c)).sum();
        correct as f64 / self.total() as f64
    }
}

/// Convenience wrapper over [`ConfusionMatrix::new`].
pub fn confusion(truth: &[usize], predicted: &[usize], k: usize) -> Result<ConfusionMatrix> {
    ConfusionMatrix::new(truth, predicted, k)
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassScores {
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    pub support: Vec<u64>,
    pub precision_weighted: f64,
    pub recall_weighted: f64,
    pub f1_weighted: f64,
}

pub fn precision_recall_f1(cm: &ConfusionMatrix) -> ClassScores {
    let k = cm.num_classes();
    let n = cm.total() as f64;
    let mut s = ClassScores {
        precision: Vec::with_capacity(k),
        recall: Vec::with_capacity(k),
        f1: Vec::with_capacity(k),
        support: Vec::with_capacity(k),
        precision_weighted: 0.0,
        recall_weighted: 0.0,
        f1_weighted: 0.0,
    };
    for c in 0..k {
        let tp = cm.get(c, c);
        let support = cm.row_sum(c);
        let p = ratio(tp, cm.col_sum(c));
        let r = ratio(tp, support);
        let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        let w = support as f64 / n;
        s.precision_weighted += w * p;
        s.recall_weighted += w * r;
        s.f1_weighted += w * f;
        s.precision.push(p);
        s.recall.push(r);
        s.f1.push(f);
        s.support.push(support);
    }
    s
}

fn row_entropy(row: &[f64]) -> f64 {
    -row.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
}

/// Mean Shannon entropy (nats) of the rows of an `[N, K]` probability
/// matrix, with `0 ln 0 = 0`.
pub fn predictive_entropy<T: Scalar>(probs: &Tensor<T>) -> Result<f64> {
    let (n, k) = probs.dims2("predictive_entropy")?;
    let mut total = 0.0;
    for (i, row) in probs.data().chunks_exact(k).enumerate() {
        let row: Vec<f64> = row.iter().map(|v| v.as_f64()).collect();
        total += checked_row_entropy(&row, i)?;
    }
    Ok(total / n as f64)
}

fn checked_row_entropy(row: &[f64], index: usize) -> Result<f64> {
    if row.iter().any(|&p| p.is_nan() || p < 0.0) {
        return Err(Error::InvalidArgument(format!("row {index} has a negative or NaN probability")));
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > 1e-5 {
        return Err(Error::InvalidArgument(format!("row {index} sums to {sum}")));
    }
    Ok(row_entropy(row))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerClass {
    pub name: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

/// Evaluation summary; serialises to the report JSON document. Rates are
/// fractions, not percentages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub accuracy: f64,
    pub precision_weighted: f64,
    pub recall_weighted: f64,
    pub f1_weighted: f64,
    pub per_class: Vec<PerClass>,
    pub predictive_entropy: f64,
    pub mean_loss: f64,
    pub confusion: Vec<Vec<u64>>,
    pub n_samples: u64,
}

impl ClassificationReport {
    /// Builds a report from labels and `[N, K]` probabilities; predictions
    /// are row argmaxes (lowest index on ties).
    pub fn from_probs(truth: &[usize], probs: &[Vec<f64>], class_names: &[String]) -> Result<Self> {
        let k = class_names.len();
        if probs.len() != truth.len() {
            return Err(Error::InvalidArgument("probability rows do not match labels".into()));
        }
        let mut entropy = 0.0;
        let mut loss = 0.0;
        let mut predicted = Vec::with_capacity(truth.len());
        for (i, (row, &t)) in probs.iter().zip(truth).enumerate() {
            if row.len() != k {
                return Err(Error::InvalidArgument(format!("row {i} has {} entries, expected {k}", row.len())));
            }
            entropy += checked_row_entropy(row, i)?;
            predicted.push(ops::argmax(row));
            if t < k {
                loss -= row[t].max(f64::MIN_POSITIVE).ln();
            }
        }
        let cm = ConfusionMatrix::new(truth, &predicted, k)?;
        let n = truth.len() as f64;
        Ok(Self::assemble(&cm, class_names, entropy / n, loss / n))
    }

    pub fn assemble(cm: &ConfusionMatrix, class_names: &[String], predictive_entropy: f64, mean_loss: f64) -> Self {
        let s = precision_recall_f1(cm);
        let per_class = (0..cm.num_classes())
            .map(|c| PerClass {
                name: class_names[c].clone(),
                precision: s.precision[c],
                recall: s.recall[c],
                f1: s.f1[c],
                support: s.support[c],
            })
            .collect();
        ClassificationReport {
            accuracy: cm.accuracy(),
            precision_weighted: s.precision_weighted,
            recall_weighted: s.recall_weighted,
            f1_weighted: s.f1_weighted,
            per_class,
            predictive_entropy,
            mean_loss,
            confusion: cm.rows(),
            n_samples: cm.total(),
        }
    }

    /// Human-readable summary: rates as percentages with two decimals,
    /// entropy with four.
    pub fn summary(&self) -> String {
        use std::fmt::Write;
        let mut s = String::new();
        writeln!(s, "samples            {}", self.n_samples).ok();
        writeln!(s, "accuracy (%)       {:.2}", self.accuracy * 100.0).ok();
        writeln!(s, "precision (%)      {:.2}", self.precision_weighted * 100.0).ok();
        writeln!(s, "recall (%)         {:.2}", self.recall_weighted * 100.0).ok();
        writeln!(s, "f1-score (%)       {:.2}", self.f1_weighted * 100.0).ok();
        writeln!(s, "predictive entropy {:.4}", self.predictive_entropy).ok();
        writeln!(s, "mean loss          {:.4}", self.mean_loss).ok();
        writeln!(s, "{:<10} {:>9} {:>9} {:>9} {:>8}", "class", "precision", "recall", "f1", "support").ok();
        for c in &self.per_class {
            writeln!(
                s,
                "{:<10} {:>9.2} {:>9.2} {:>9.2} {:>8}",
                c.name,
                c.precision * 100.0,
                c.recall * 100.0,
                c.f1 * 100.0,
                c.support
            )
            .ok();
        }
        s
    }
}

/// Evaluation-mode pass over `dataset` in batches of `batch_size`.
pub fn evaluate<T: Scalar>(model: &Model<T>, dataset: &Dataset, batch_size: usize) -> Result<ClassificationReport> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation".into()));
    }
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be at least 1".into()));
    }
    if dataset.num_classes() != model.spec.num_classes {
        return Err(Error::ClassCount {
            model: model.spec.num_classes,
            data: dataset.num_classes(),
        });
    }
    let k = model.spec.num_classes;
    let mut probs = Vec::with_capacity(dataset.len());
    let mut truth = Vec::with_capacity(dataset.len());
    let mut loss_sum = 0.0;
    for batch in make_batches(dataset, batch_size, None) {
        let logits = model.forward(&batch.images.cast::<T>())?;
        let (loss, p) = ops::softmax_cross_entropy(&logits, &batch.labels)?;
        loss_sum += loss.as_f64() * batch.labels.len() as f64;
        probs.extend(p.data().chunks_exact(k).map(|r| r.iter().map(|v| v.as_f64()).collect::<Vec<f64>>()));
        truth.extend_from_slice(&batch.labels);
    }
    let mut report = ClassificationReport::from_probs(&truth, &probs, &dataset.class_names)?;
    report.mean_loss = loss_sum / dataset.len() as f64;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn perfect_predictions_are_diagonal() {
        let labels = [0, 1, 2, 2, 1];
        let cm = confusion(&labels, &labels, 3).unwrap();
        for t in 0..3 {
            for p in 0..3 {
                assert_eq!(cm.get(t, p) > 0, t == p);
            }
        }
        let s = precision_recall_f1(&cm);
        assert!(s.precision.iter().chain(&s.recall).chain(&s.f1).all(|&v| v == 1.0));
        assert_eq!(s.f1_weighted, 1.0);
    }

    #[test]
    fn hand_counted_two_class_case() {
        let cm = confusion(&[0, 0, 1], &[0, 1, 1], 2).unwrap();
        assert_eq!(cm.rows(), vec![vec![1, 1], vec![0, 1]]);
        let s = precision_recall_f1(&cm);
        assert_eq!(s.precision, vec![1.0, 0.5]);
        assert_eq!(s.recall, vec![0.5, 1.0]);
        assert_abs_diff_eq!(s.f1[0], 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(s.f1[1], 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(s.recall_weighted, 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(s.recall_weighted, cm.accuracy(), epsilon = 1e-15);
    }

    #[test]
    fn absent_class_scores_zero() {
        let cm = confusion(&[0, 1], &[0, 1], 3).unwrap();
        let s = precision_recall_f1(&cm);
        assert_eq!((s.precision[2], s.recall[2], s.f1[2]), (0.0, 0.0, 0.0));
    }

    #[test]
    fn confusion_errors() {
        assert!(confusion(&[], &[], 2).unwrap_err().to_string().contains("empty evaluation"));
        assert!(confusion(&[0], &[0, 1], 2).is_err());
        assert!(confusion(&[2], &[0], 2).is_err());
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn entropy_reference_values() {
        let one_hot = Tensor::<f64>::new(&[2, 7], {
            let mut v = vec![0.0; 14];
            v[3] = 1.0;
            v[7] = 1.0;
            v
        })
        .unwrap();
        assert_eq!(predictive_entropy(&one_hot).unwrap(), 0.0);
        let uniform = Tensor::<f64>::full(&[3, 7], 1.0 / 7.0);
        assert_abs_diff_eq!(predictive_entropy(&uniform).unwrap(), 7f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(predictive_entropy(&uniform).unwrap(), 1.945910, epsilon = 1e-6);
        let mut half = vec![0.0; 7];
        half[0] = 0.5;
        half[1] = 0.5;
        let half = Tensor::<f64>::new(&[1, 7], half).unwrap();
        assert_abs_diff_eq!(predictive_entropy(&half).unwrap(), 0.693147, epsilon = 1e-6);
    }

    #[test]
    fn entropy_rejects_invalid_rows() {
        assert!(predictive_entropy(&Tensor::<f64>::new(&[1, 2], vec![0.7, 0.7]).unwrap()).is_err());
        assert!(predictive_entropy(&Tensor::<f64>::new(&[1, 2], vec![1.5, -0.5]).unwrap()).is_err());
    }

    #[test]
    fn report_json_keys() {
        let names: Vec<String> = ["a", "b"].iter().map(|s| s.to_string()).collect();
        let probs = vec![vec![0.9, 0.1], vec![0.2, 0.8], vec![0.6, 0.4]];
        let report = ClassificationReport::from_probs(&[0, 1, 1], &probs, &names).unwrap();
        let json: serde_json::Value = serde_json::to_value(&report).unwrap();
        for key in [
            "accuracy",
            "precision_weighted",
            "recall_weighted",
            "f1_weighted",
            "per_class",
            "predictive_entropy",
            "mean_loss",
            "confusion",
            "n_samples",
        ] {
            assert!(json.get(key).is_some(), "missing {key}");
        }
        assert_eq!(json["per_class"][0]["support"], 1);
        assert_abs_diff_eq!(report.accuracy, 2.0 / 3.0, epsilon = 1e-15);
        let expect_loss = -(0.9f64.ln() + 0.8f64.ln() + 0.4f64.ln()) / 3.0;
        assert_abs_diff_eq!(report.mean_loss, expect_loss, epsilon = 1e-15);
    }

    #[test]
    fn summary_formats_percentages() {
        let names: Vec<String> = ["a", "b"].iter().map(|s| s.to_string()).collect();
        let probs = vec![vec![1.0, 0.0], vec![0.5, 0.5]];
        let report = ClassificationReport::from_probs(&[0, 1], &probs, &names).unwrap();
        let text = report.summary();
        assert!(text.contains("accuracy (%)       50.00"), "{text}");
        assert!(text.contains("predictive entropy 0.3466"), "{text}");
    }
}
