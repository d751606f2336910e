use serde::{Deserialize, Serialize};

use super::MlError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
    /// Precision was undefined (no predictions of this class) and set to 0.
    pub zero_predicted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub oa: f64,
    pub precision_w: f64,
    pub recall_w: f64,
    pub f1_w: f64,
    /// `confusion[true][predicted]`.
    pub confusion: [[usize; 2]; 2],
    pub per_class: [ClassMetrics; 2],
    pub n: usize,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Binary metrics with support-weighted averages over the two classes.
pub fn classification_metrics(y_true: &[u8], y_pred: &[u8]) -> Result<MetricsReport, MlError> {
    if y_true.len() != y_pred.len() {
        return Err(MlError::LengthMismatch(y_true.len(), y_pred.len()));
    }
    if y_true.is_empty() {
        return Err(MlError::Empty);
    }
    let mut c = [[0usize; 2]; 2];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        c[usize::from(t.min(1))][usize::from(p.min(1))] += 1;
    }
    let n = y_true.len();
    let class = |k: usize| {
        let tp = c[k][k];
        let predicted = c[0][k] + c[1][k];
        let support = c[k][0] + c[k][1];
        let precision = ratio(tp, predicted);
        let recall = ratio(tp, support);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        ClassMetrics {
            precision,
            recall,
            f1,
            support,
            zero_predicted: predicted == 0,
        }
    };
    let per_class = [class(0), class(1)];
    let weighted = |f: fn(&ClassMetrics) -> f64| {
        per_class
            .iter()
            .map(|m| f(m) * m.support as f64)
            .sum::<f64>()
            / n as f64
    };
    let oa = ratio(c[0][0] + c[1][1], n);
    Ok(MetricsReport {
        oa,
        precision_w: weighted(|m| m.precision),
        // Σ_c (TP_c / S_c)·S_c / N collapses to ΣTP / N; computing it that way
        // makes the identity with OA exact rather than approximate.
        recall_w: oa,
        f1_w: weighted(|m| m.f1),
        confusion: c,
        per_class,
        n,
    })
}
