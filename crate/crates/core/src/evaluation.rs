//! Accuracy, confusion matrices and macro-F1 over the `K + 1` open-set
//! classes (index 0 is the unknown class).

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label::Label;
use crate::openmax::Prediction;

/// Rows are true classes, columns predicted classes; index 0 is unknown.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(num_known: usize) -> Self {
        Self {
            counts: vec![vec![0; num_known + 1]; num_known + 1],
        }
    }

    pub fn from_labels(predicted: &[Label], truth: &[Label], num_known: usize) -> Result<Self> {
        if predicted.len() != truth.len() {
            return Err(Error::invalid(format!(
                "{} predictions for {} ground-truth labels",
                predicted.len(),
                truth.len()
            )));
        }
        let mut cm = Self::new(num_known);
        for (&p, &t) in predicted.iter().zip(truth) {
            cm.record(t, p)?;
        }
        Ok(cm)
    }

    pub fn size(&self) -> usize {
        self.counts.len()
    }

    pub fn record(&mut self, truth: Label, predicted: Label) -> Result<()> {
        let n = self.size();
        let (t, p) = (truth.index(), predicted.index());
        if t >= n || p >= n {
            return Err(Error::invalid(format!(
                "label out of range for a {n}x{n} confusion matrix (truth {truth}, predicted {predicted})"
            )));
        }
        self.counts[t][p] += 1;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.size()).map(|i| self.counts[i][i]).sum()
    }

    fn row_sum(&self, i: usize) -> u64 {
        self.counts[i].iter().sum()
    }

    fn col_sum(&self, j: usize) -> u64 {
        self.counts.iter().map(|r| r[j]).sum()
    }

    /// A class takes part in the macro average if it occurs as truth or as prediction.
    pub fn is_active(&self, i: usize) -> bool {
        self.row_sum(i) > 0 || self.col_sum(i) > 0
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn per_class(cm: &ConfusionMatrix) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = cm.size();
    let mut precision = vec![0.0; n];
    let mut recall = vec![0.0; n];
    let mut f1 = vec![0.0; n];
    for i in 0..n {
        let tp = cm.counts[i][i];
        precision[i] = ratio(tp, cm.col_sum(i));
        recall[i] = ratio(tp, cm.row_sum(i));
        let s = precision[i] + recall[i];
        f1[i] = if s == 0.0 {
            0.0
        } else {
            2.0 * precision[i] * recall[i] / s
        };
    }
    (precision, recall, f1)
}

fn macro_mean(cm: &ConfusionMatrix, f1: &[f64]) -> f64 {
    let active: Vec<f64> = (0..cm.size())
        .filter(|&i| cm.is_active(i))
        .map(|i| f1[i])
        .collect();
    active.iter().sum::<f64>() / active.len() as f64
}

/// Unweighted mean of per-class F1 over the classes that occur in the matrix.
/// Precision or recall with a zero denominator counts as 0.
pub fn macro_f1(cm: &ConfusionMatrix) -> Result<f64> {
    if cm.total() == 0 {
        return Err(Error::invalid("macro-F1 of an empty confusion matrix"));
    }
    let (_, _, f1) = per_class(cm);
    Ok(macro_mean(cm, &f1))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    /// Which classes were included in the macro average.
    pub active: Vec<bool>,
    pub confusion: ConfusionMatrix,
}

impl MetricsReport {
    pub fn from_confusion(confusion: ConfusionMatrix) -> Result<Self> {
        let total = confusion.total();
        if total == 0 {
            return Err(Error::invalid("no samples evaluated"));
        }
        let (precision, recall, f1) = per_class(&confusion);
        let active = (0..confusion.size())
            .map(|i| confusion.is_active(i))
            .collect();
        Ok(Self {
            accuracy: ratio(confusion.trace(), total),
            macro_f1: macro_mean(&confusion, &f1),
            precision,
            recall,
            f1,
            active,
            confusion,
        })
    }

    pub fn samples(&self) -> u64 {
        self.confusion.total()
    }

    pub fn summary_header() -> &'static str {
        "phase,samples,accuracy,macro_f1"
    }

    /// One comma-delimited row: phase, sample count, accuracy, macro-F1.
    pub fn summary_row(&self, phase: &str) -> String {
        let mut row = String::new();
        let _ = write!(
            row,
            "{phase},{},{:?},{:?}",
            self.samples(),
            self.accuracy,
            self.macro_f1
        );
        row
    }
}

pub fn evaluate_labels(
    predicted: &[Label],
    truth: &[Label],
    num_known: usize,
) -> Result<MetricsReport> {
    if predicted.is_empty() {
        return Err(Error::invalid("no predictions to evaluate"));
    }
    MetricsReport::from_confusion(ConfusionMatrix::from_labels(predicted, truth, num_known)?)
}

pub fn evaluate_open_set(
    predictions: &[Prediction],
    truth: &[Label],
    num_known: usize,
) -> Result<MetricsReport> {
    let labels: Vec<Label> = predictions.iter().map(|p| p.label).collect();
    evaluate_labels(&labels, truth, num_known)
}
