//! Split-based feature importances.

use serde::{Deserialize, Serialize};

use super::model::{Model, ModelParams};
use super::MlError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Importance {
    pub feature_names: Vec<String>,
    /// Non-negative, sums to 1.
    pub values: Vec<f64>,
    /// No split contributed anything; `values` fell back to uniform.
    pub uniform_fallback: bool,
}

impl Importance {
    /// Descending by importance, ties by name.
    pub fn ranked(&self) -> Vec<(String, f64)> {
        let mut r: Vec<(String, f64)> = self
            .feature_names
            .iter()
            .cloned()
            .zip(self.values.iter().copied())
            .collect();
        r.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        r
    }
}

fn normalize(feature_names: &[String], raw: Vec<f64>) -> Importance {
    let total: f64 = raw.iter().sum();
    let p = raw.len();
    if total > 0.0 && total.is_finite() {
        Importance {
            feature_names: feature_names.to_vec(),
            values: raw.iter().map(|v| v / total).collect(),
            uniform_fallback: false,
        }
    } else {
        Importance {
            feature_names: feature_names.to_vec(),
            values: vec![1.0 / p as f64; p],
            uniform_fallback: true,
        }
    }
}

/// Mean decrease in impurity: per tree, each split adds its node's sample
/// fraction times its Gini decrease to the split feature; trees are
/// averaged and the result normalized.
pub fn feature_importance_mdi(model: &Model) -> Result<Importance, MlError> {
    if !matches!(model.params, ModelParams::Forest(_)) {
        return Err(MlError::WrongModelKind(model.kind.name().into()));
    }
    let p = model.feature_names.len();
    let mut raw = vec![0.0; p];
    for tree in &model.trees {
        let mut root_cover = None;
        tree.for_each_split(&mut |f, cover, gain| {
            let total = *root_cover.get_or_insert(cover);
            raw[f] += cover / total * gain;
        });
    }
    if !model.trees.is_empty() {
        raw.iter_mut().for_each(|v| *v /= model.trees.len() as f64);
    }
    Ok(normalize(&model.feature_names, raw))
}

/// Total split gain per feature for boosted models, MDI for forests.
pub fn feature_importance(model: &Model) -> Result<Importance, MlError> {
    match model.params {
        ModelParams::Forest(_) => feature_importance_mdi(model),
        ModelParams::Boost(_) => {
            let mut raw = vec![0.0; model.feature_names.len()];
            for tree in &model.trees {
                tree.for_each_split(&mut |f, _, gain| raw[f] += gain.max(0.0));
            }
            Ok(normalize(&model.feature_names, raw))
        }
    }
}
