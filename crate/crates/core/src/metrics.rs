//! Accuracy, support-weighted F1 and the confusion matrix.

use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MetricsReport {
    pub accuracy: f64,
    pub weighted_f1: f64,
    pub per_class_f1: Vec<f64>,
    pub per_class_precision: Vec<f64>,
    pub per_class_recall: Vec<f64>,
    pub support: Vec<u64>,
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<u64>>,
    pub total: u64,
}

impl MetricsReport {
    pub fn compute(labels: &[usize], predictions: &[usize], classes: usize) -> Result<Self> {
        if labels.len() != predictions.len() {
            return Err(Error::shape("metrics", &[labels.len()], &[predictions.len()]));
        }
        if labels.is_empty() {
            return Err(Error::Empty { op: "metrics" });
        }
        let mut confusion = vec![vec![0u64; classes]; classes];
        for (&t, &p) in labels.iter().zip(predictions) {
            for l in [t, p] {
                if l >= classes {
                    return Err(Error::LabelOutOfRange { label: l, classes });
                }
            }
            confusion[t][p] += 1;
        }
        let total = labels.len() as u64;
        let correct: u64 = (0..classes).map(|c| confusion[c][c]).sum();
        let support: Vec<u64> = confusion.iter().map(|row| row.iter().sum()).collect();
        let predicted: Vec<u64> = (0..classes)
            .map(|c| confusion.iter().map(|row| row[c]).sum())
            .collect();
        let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let mut per_class_precision = Vec::with_capacity(classes);
        let mut per_class_recall = Vec::with_capacity(classes);
        let mut per_class_f1 = Vec::with_capacity(classes);
        let mut weighted_f1 = 0.0;
        for c in 0..classes {
            let tp = confusion[c][c];
            let p = ratio(tp, predicted[c]);
            let r = ratio(tp, support[c]);
            let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
            weighted_f1 += support[c] as f64 / total as f64 * f1;
            per_class_precision.push(p);
            per_class_recall.push(r);
            per_class_f1.push(f1);
        }
        Ok(Self {
            accuracy: correct as f64 / total as f64,
            weighted_f1,
            per_class_f1,
            per_class_precision,
            per_class_recall,
            support,
            confusion,
            total,
        })
    }

    pub fn classes(&self) -> usize {
        self.confusion.len()
    }
}
