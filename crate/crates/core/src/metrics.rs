//! Confusion matrix, per-class recall/precision and accuracy.
//!
//! Rows are actual classes, columns predicted classes:
//! `recall_i = C_ii / Σ_j C_ij`, `precision_i = C_ii / Σ_j C_ji`.

use std::fmt::Write as _;

use crate::error::{FerError, Result};
use crate::label::{EmotionLabel, NUM_CLASSES};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    /// From explicit rows (`rows[actual][predicted]`); rows must form a square.
    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let n = rows.len();
        if n == 0 || rows.iter().any(|r| r.len() != n) {
            return Err(FerError::input("confusion matrix rows must form a non-empty square"));
        }
        Ok(ConfusionMatrix {
            classes: n,
            counts: rows.iter().flatten().copied().collect(),
        })
    }

    /// Counts `(actual, predicted)` index pairs.
    pub fn from_pairs(
        classes: usize,
        pairs: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self> {
        let mut m = Self::new(classes);
        for (actual, predicted) in pairs {
            m.record(actual, predicted)?;
        }
        Ok(m)
    }

    pub fn record(&mut self, actual: usize, predicted: usize) -> Result<()> {
        if actual >= self.classes || predicted >= self.classes {
            return Err(FerError::input(format!(
                "class pair ({actual}, {predicted}) outside 0..{}",
                self.classes
            )));
        }
        self.counts[actual * self.classes + predicted] += 1;
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, actual: usize, predicted: usize) -> u64 {
        self.counts[actual * self.classes + predicted]
    }

    pub fn row_sum(&self, actual: usize) -> u64 {
        (0..self.classes).map(|j| self.get(actual, j)).sum()
    }

    pub fn column_sum(&self, predicted: usize) -> u64 {
        (0..self.classes).map(|i| self.get(i, predicted)).sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|i| self.get(i, i)).sum()
    }

    /// `None` when class `i` never occurs among the actual labels.
    pub fn recall(&self, i: usize) -> Option<f64> {
        match self.row_sum(i) {
            0 => None,
            s => Some(self.get(i, i) as f64 / s as f64),
        }
    }

    /// `None` when class `i` is never predicted.
    pub fn precision(&self, i: usize) -> Option<f64> {
        match self.column_sum(i) {
            0 => None,
            s => Some(self.get(i, i) as f64 / s as f64),
        }
    }

    pub fn accuracy(&self) -> Result<f64> {
        match self.total() {
            0 => Err(FerError::input("accuracy of an empty confusion matrix")),
            t => Ok(self.trace() as f64 / t as f64),
        }
    }
}

/// 7x7 matrix over emotion labels.
pub fn confusion_matrix(
    predictions: &[EmotionLabel],
    labels: &[EmotionLabel],
) -> Result<ConfusionMatrix> {
    if predictions.len() != labels.len() {
        return Err(FerError::input(format!(
            "{} predictions but {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.is_empty() {
        return Err(FerError::input("no predictions to score"));
    }
    ConfusionMatrix::from_pairs(
        NUM_CLASSES,
        labels.iter().zip(predictions).map(|(a, p)| (a.index(), p.index())),
    )
}

fn fmt_ratio(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.3}"))
}

fn class_name(i: usize) -> String {
    EmotionLabel::from_index(i).map_or_else(|| format!("class{i}"), |l| l.name().to_string())
}

/// Text table with one `label  precision  recall` row per class.
pub fn render_metrics_table(m: &ConfusionMatrix) -> String {
    let mut s = format!("{:<10} {:>9} {:>9}\n", "label", "Precision", "Recall");
    for i in 0..m.classes() {
        let _ = writeln!(
            s,
            "{:<10} {:>9} {:>9}",
            class_name(i),
            fmt_ratio(m.precision(i)),
            fmt_ratio(m.recall(i))
        );
    }
    s
}

/// CSV export: `label,precision,recall` with empty fields for undefined ratios.
pub fn metrics_csv(m: &ConfusionMatrix) -> String {
    let mut s = String::from("label,precision,recall\n");
    let f = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:.6}"));
    for i in 0..m.classes() {
        let _ = writeln!(s, "{},{},{}", class_name(i), f(m.precision(i)), f(m.recall(i)));
    }
    s
}

/// Raw counts followed by row-normalized percentages.
pub fn render_confusion(m: &ConfusionMatrix) -> String {
    let n = m.classes();
    let mut s = String::from("confusion matrix (rows = actual, columns = predicted)\n");
    let header = |s: &mut String| {
        let _ = write!(s, "{:<10}", "");
        for j in 0..n {
            let _ = write!(s, " {:>8}", class_name(j));
        }
        s.push('\n');
    };
    header(&mut s);
    for i in 0..n {
        let _ = write!(s, "{:<10}", class_name(i));
        for j in 0..n {
            let _ = write!(s, " {:>8}", m.get(i, j));
        }
        s.push('\n');
    }
    s.push_str("row-normalized (%)\n");
    header(&mut s);
    for i in 0..n {
        let _ = write!(s, "{:<10}", class_name(i));
        let row = m.row_sum(i);
        for j in 0..n {
            if row == 0 {
                let _ = write!(s, " {:>8}", "n/a");
            } else {
                let _ = write!(s, " {:>8.1}", 100.0 * m.get(i, j) as f64 / row as f64);
            }
        }
        s.push('\n');
    }
    s
}
