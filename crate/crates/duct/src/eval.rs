//! Incremental-protocol evaluation: the lower-triangular accuracy matrix,
//! the per-stage / average / last accuracy summaries, and the max-drop
//! forgetting measure.

use serde::{Deserialize, Serialize};

use crate::error::{DuctError, Result};
use crate::model::{Backbone, CosineClassifier};
use crate::train::LabeledBatch;

/// Lower-triangular b x b table: `rows[k][j]` is accuracy on domain j's
/// test set after learning stage k (j <= k).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        Self { rows: Vec::new() }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        for (k, row) in rows.iter().enumerate() {
            if row.len() != k + 1 {
                return Err(DuctError::Shape(format!(
                    "row {k} has {} entries, expected {}",
                    row.len(),
                    k + 1
                )));
            }
            if row.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(DuctError::Domain("accuracy outside [0,1]".into()));
            }
        }
        Ok(Self { rows })
    }

    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        if row.len() != self.rows.len() + 1 {
            return Err(DuctError::Shape(format!(
                "stage {} row needs {} entries, got {}",
                self.rows.len(),
                self.rows.len() + 1,
                row.len()
            )));
        }
        if row.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(DuctError::Domain("accuracy outside [0,1]".into()));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn num_stages(&self) -> usize {
        self.rows.len()
    }

    pub fn get(&self, stage: usize, domain: usize) -> f64 {
        self.rows[stage][domain]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// CSV: one row per stage, one column per domain, empty cells above the
    /// diagonal.
    pub fn to_csv(&self) -> String {
        let b = self.num_stages();
        let mut out = String::from("stage");
        for j in 0..b {
            out.push_str(&format!(",domain{j}"));
        }
        out.push('\n');
        for (k, row) in self.rows.iter().enumerate() {
            out.push_str(&format!("{k}"));
            for j in 0..b {
                out.push(',');
                if j < row.len() {
                    out.push_str(&format!("{:.6}", row[j]));
                }
            }
            out.push('\n');
        }
        out
    }
}

impl Default for AccuracyMatrix {
    fn default() -> Self {
        Self::new()
    }
}

/// Accuracy of the mod-|Y| prediction rule on one test set.
pub fn accuracy(backbone: &Backbone, clf: &CosineClassifier, test: &LabeledBatch) -> Result<f64> {
    if test.is_empty() {
        return Err(DuctError::Precondition("empty test set".into()));
    }
    let mut correct = 0usize;
    for i in 0..test.len() {
        let emb = backbone.forward(test.inputs.row(i))?;
        if clf.predict(&emb)?.label == test.labels[i] {
            correct += 1;
        }
    }
    Ok(correct as f64 / test.len() as f64)
}

/// Evaluate one stage: accuracy on every seen domain's test set, in domain
/// order. The classifier must already cover all k domains.
pub fn evaluate_stage(
    backbone: &Backbone,
    clf: &CosineClassifier,
    test_sets: &[&LabeledBatch],
) -> Result<Vec<f64>> {
    if clf.num_domains() < test_sets.len() {
        return Err(DuctError::Precondition(format!(
            "classifier has {} blocks for {} domains",
            clf.num_domains(),
            test_sets.len()
        )));
    }
    test_sets
        .iter()
        .map(|t| accuracy(backbone, clf, t))
        .collect()
}

/// Max-drop forgetting: f_j = max_{l < B}(a[l][j] - a[B][j]), averaged over
/// domains j < B. Negative drops (backward transfer) are kept unclamped.
pub fn forgetting_measure(a: &AccuracyMatrix) -> Result<f64> {
    let b = a.num_stages();
    if b < 2 {
        return Err(DuctError::Precondition(
            "forgetting needs >= 2 stages".into(),
        ));
    }
    let mut total = 0.0;
    for j in 0..b - 1 {
        let final_acc = a.get(b - 1, j);
        let max_earlier = (j..b - 1)
            .map(|l| a.get(l, j))
            .fold(f64::NEG_INFINITY, f64::max);
        total += max_earlier - final_acc;
    }
    Ok(total / (b - 1) as f64)
}

/// Summary metrics over the incremental run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// A_k = mean over j <= k of a[k][j].
    pub per_stage_accuracy: Vec<f64>,
    /// Mean of the per-stage accuracies.
    pub average_accuracy: f64,
    /// Accuracy after the final stage.
    pub last_accuracy: f64,
    /// Absent for single-stage runs.
    pub forgetting: Option<f64>,
}

pub fn summarize(a: &AccuracyMatrix) -> Result<MetricsReport> {
    let b = a.num_stages();
    if b == 0 {
        return Err(DuctError::Precondition("empty accuracy matrix".into()));
    }
    let per_stage: Vec<f64> = a
        .rows()
        .iter()
        .map(|row| row.iter().sum::<f64>() / row.len() as f64)
        .collect();
    let average = per_stage.iter().sum::<f64>() / b as f64;
    let last = per_stage[b - 1];
    let forgetting = if b >= 2 {
        Some(forgetting_measure(a)?)
    } else {
        None
    };
    Ok(MetricsReport {
        per_stage_accuracy: per_stage,
        average_accuracy: average,
        last_accuracy: last,
        forgetting,
    })
}
