//! Confusion matrix, accuracy, Cohen's κ and macro-F1.

use crate::config::NUM_CLASSES;
use crate::error::{data_err, Result};

/// Rows are true labels, columns predictions.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

impl ConfusionMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_counts(counts: [[u64; NUM_CLASSES]; NUM_CLASSES]) -> Self {
        Self { counts }
    }

    pub fn from_pairs(truth: &[usize], pred: &[usize]) -> Result<Self> {
        if truth.len() != pred.len() {
            return Err(data_err("truth and prediction lengths differ"));
        }
        let mut cm = Self::new();
        for (&t, &p) in truth.iter().zip(pred) {
            cm.add(t, p)?;
        }
        Ok(cm)
    }

    pub fn add(&mut self, truth: usize, pred: usize) -> Result<()> {
        if truth >= NUM_CLASSES || pred >= NUM_CLASSES {
            return Err(data_err(format!("label pair ({truth}, {pred}) out of range")));
        }
        self.counts[truth][pred] += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) {
        for (a, b) in self.counts.iter_mut().flatten().zip(other.counts.iter().flatten()) {
            *a += b;
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    fn trace(&self) -> u64 {
        (0..NUM_CLASSES).map(|i| self.counts[i][i]).sum()
    }

    fn row_sum(&self, i: usize) -> u64 {
        self.counts[i].iter().sum()
    }

    fn col_sum(&self, j: usize) -> u64 {
        self.counts.iter().map(|r| r[j]).sum()
    }

    fn nonempty(&self) -> Result<f64> {
        match self.total() {
            0 => Err(data_err("metrics of an empty confusion matrix")),
            n => Ok(n as f64),
        }
    }

    /// Percentage of windows on the diagonal.
    pub fn accuracy(&self) -> Result<f64> {
        let n = self.nonempty()?;
        Ok(100.0 * self.trace() as f64 / n)
    }

    /// `(p_o − p_e)/(1 − p_e)`; when `p_e = 1` the value is 1 for perfect
    /// agreement and 0 otherwise.
    pub fn cohen_kappa(&self) -> Result<f64> {
        let n = self.nonempty()?;
        let po = self.trace() as f64 / n;
        let pe = (0..NUM_CLASSES)
            .map(|i| self.row_sum(i) as f64 * self.col_sum(i) as f64)
            .sum::<f64>()
            / (n * n);
        if pe >= 1.0 {
            return Ok(if po >= 1.0 { 1.0 } else { 0.0 });
        }
        Ok((po - pe) / (1.0 - pe))
    }

    /// F1 per label as a fraction; 0 when the label is absent from both
    /// truth and predictions.
    pub fn per_label_f1(&self) -> [f64; NUM_CLASSES] {
        std::array::from_fn(|i| {
            let tp = self.counts[i][i] as f64;
            let denom = (self.row_sum(i) + self.col_sum(i)) as f64;
            if denom == 0.0 {
                0.0
            } else {
                2.0 * tp / denom
            }
        })
    }

    /// Unweighted mean of the per-label F1, as a percentage.
    pub fn macro_f1(&self) -> Result<f64> {
        self.nonempty()?;
        Ok(100.0 * self.per_label_f1().iter().sum::<f64>() / NUM_CLASSES as f64)
    }
}
