use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::boost::{train_gbdt, BoostParams, Growth};
use super::forest::{train_forest, ForestKind, ForestParams};
use super::tree::TreeNode;
use super::MlError;
use crate::dataset::FeatureTable;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "rf")]
    Rf,
    #[serde(rename = "et")]
    Et,
    #[serde(rename = "gbdt_depthwise", alias = "xgboost")]
    GbdtDepthwise,
    #[serde(rename = "gbdt_leafwise", alias = "lightgbm")]
    GbdtLeafwise,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [
        ModelKind::Rf,
        ModelKind::Et,
        ModelKind::GbdtDepthwise,
        ModelKind::GbdtLeafwise,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Rf => "rf",
            ModelKind::Et => "et",
            ModelKind::GbdtDepthwise => "gbdt_depthwise",
            ModelKind::GbdtLeafwise => "gbdt_leafwise",
        }
    }

    pub fn parse(s: &str) -> Option<ModelKind> {
        match s.to_ascii_lowercase().as_str() {
            "rf" => Some(ModelKind::Rf),
            "et" => Some(ModelKind::Et),
            "gbdt_depthwise" | "xgboost" => Some(ModelKind::GbdtDepthwise),
            "gbdt_leafwise" | "lightgbm" => Some(ModelKind::GbdtLeafwise),
            _ => None,
        }
    }

    pub fn is_forest(self) -> bool {
        matches!(self, ModelKind::Rf | ModelKind::Et)
    }

    /// Defaults used when a configuration names a kind without parameters.
    pub fn default_params(self) -> ModelParams {
        match self {
            ModelKind::Rf => ModelParams::Forest(ForestParams::reference_rf()),
            ModelKind::Et => ModelParams::Forest(ForestParams::reference_et()),
            ModelKind::GbdtDepthwise => ModelParams::Boost(BoostParams::depthwise()),
            ModelKind::GbdtLeafwise => ModelParams::Boost(BoostParams::leafwise()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelParams {
    Forest(ForestParams),
    Boost(BoostParams),
}

impl ModelParams {
    pub fn kind(&self) -> ModelKind {
        match self {
            ModelParams::Forest(p) => match p.kind {
                ForestKind::Rf => ModelKind::Rf,
                ForestKind::Et => ModelKind::Et,
            },
            ModelParams::Boost(p) => match p.growth {
                Growth::Depthwise => ModelKind::GbdtDepthwise,
                Growth::Leafwise => ModelKind::GbdtLeafwise,
            },
        }
    }

    pub fn validate(&self) -> Result<(), MlError> {
        match self {
            ModelParams::Forest(p) => p.validate(),
            ModelParams::Boost(p) => p.validate(),
        }
    }

    /// Replaces named fields by value, e.g. from a tuning trial. Unknown
    /// names are rejected.
    pub fn with_overrides(
        &self,
        overrides: &std::collections::BTreeMap<String, serde_json::Value>,
    ) -> Result<ModelParams, MlError> {
        let (tag, value) = match self {
            ModelParams::Forest(p) => ("forest", serde_json::to_value(p)),
            ModelParams::Boost(p) => ("boost", serde_json::to_value(p)),
        };
        let mut inner = value.map_err(|e| MlError::Serialization(e.to_string()))?;
        let obj = inner
            .as_object_mut()
            .ok_or_else(|| MlError::Serialization("parameters are not an object".into()))?;
        for (k, v) in overrides {
            if !obj.contains_key(k) {
                return Err(MlError::InvalidParams(format!("unknown parameter '{k}'")));
            }
            obj.insert(k.clone(), v.clone());
        }
        let out = match tag {
            "forest" => serde_json::from_value(inner).map(ModelParams::Forest),
            _ => serde_json::from_value(inner).map(ModelParams::Boost),
        }
        .map_err(|e| MlError::InvalidParams(e.to_string()))?;
        out.validate()?;
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub format_version: u32,
    pub kind: ModelKind,
    pub feature_names: Vec<String>,
    pub params: ModelParams,
    /// Log-odds offset of boosted models.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_score: Option<f64>,
    pub trees: Vec<TreeNode>,
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl Model {
    pub fn new(
        feature_names: Vec<String>,
        params: ModelParams,
        base_score: Option<f64>,
        trees: Vec<TreeNode>,
    ) -> Self {
        Model {
            format_version: FORMAT_VERSION,
            kind: params.kind(),
            feature_names,
            params,
            base_score,
            trees,
        }
    }

    fn proba_one(&self, row: &[f64]) -> f64 {
        match self.params {
            ModelParams::Forest(_) => {
                if self.trees.is_empty() {
                    return 0.5;
                }
                let s: f64 = self.trees.iter().map(|t| t.predict(row)).sum();
                s / self.trees.len() as f64
            }
            ModelParams::Boost(p) => {
                let mut z = self.base_score.unwrap_or(0.0);
                for t in &self.trees {
                    z += p.eta * t.predict(row);
                }
                sigmoid(z)
            }
        }
    }

    fn check_rows(&self, rows: &[Vec<f64>]) -> Result<(), MlError> {
        let expected = self.feature_names.len();
        match rows.iter().find(|r| r.len() != expected) {
            Some(r) => Err(MlError::FeatureMismatch {
                expected,
                got: r.len(),
            }),
            None => Ok(()),
        }
    }

    /// Class-1 probability per row.
    pub fn predict_proba(&self, rows: &[Vec<f64>]) -> Result<Vec<f64>, MlError> {
        self.check_rows(rows)?;
        Ok(rows.par_iter().map(|r| self.proba_one(r).clamp(0.0, 1.0)).collect())
    }

    /// 1 iff the probability reaches `threshold`.
    pub fn predict_class(&self, rows: &[Vec<f64>], threshold: f64) -> Result<Vec<u8>, MlError> {
        Ok(self
            .predict_proba(rows)?
            .into_iter()
            .map(|p| u8::from(p >= threshold))
            .collect())
    }

    pub fn to_json(&self) -> Result<String, MlError> {
        serde_json::to_string_pretty(self).map_err(|e| MlError::Serialization(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Model, MlError> {
        let m: Model = serde_json::from_str(s).map_err(|e| MlError::Serialization(e.to_string()))?;
        if m.format_version != FORMAT_VERSION {
            return Err(MlError::Serialization(format!(
                "unsupported model format version {}",
                m.format_version
            )));
        }
        if m.kind != m.params.kind() {
            return Err(MlError::Serialization("model kind disagrees with its parameters".into()));
        }
        Ok(m)
    }
}

pub fn train_model(table: &FeatureTable, params: &ModelParams, seed: u64) -> Result<Model, MlError> {
    match params {
        ModelParams::Forest(p) => train_forest(table, p, seed),
        ModelParams::Boost(p) => train_gbdt(table, p, seed),
    }
}
