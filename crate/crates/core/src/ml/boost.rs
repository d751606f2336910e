//! Second-order gradient boosting for binary logistic loss, with depth-wise
//! (level by level) or leaf-wise (best-first) tree growth.

use serde::{Deserialize, Serialize};

use super::model::{sigmoid, Model, ModelParams};
use super::tree::{
    fraction_count, sample_features, Engine, GradCriterion, NodeRows, Presorted, ThresholdRule,
};
use super::{labels_of, stream_rng, MlError};
use crate::dataset::FeatureTable;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Growth {
    Depthwise,
    Leafwise,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoostParams {
    pub growth: Growth,
    pub n_trees: usize,
    pub eta: f64,
    pub max_depth: usize,
    /// Leaf budget for leaf-wise growth; ignored depth-wise.
    #[serde(default = "default_leaves")]
    pub n_leaves: usize,
    pub min_child_weight: f64,
    pub reg_lambda: f64,
    pub gamma: f64,
    pub subsample: f64,
    pub colsample_bytree: f64,
}

fn default_leaves() -> usize {
    31
}

impl BoostParams {
    /// Moderate depth-wise defaults.
    pub fn depthwise() -> Self {
        BoostParams {
            growth: Growth::Depthwise,
            n_trees: 200,
            eta: 0.1,
            max_depth: 6,
            n_leaves: default_leaves(),
            min_child_weight: 1.0,
            reg_lambda: 1.0,
            gamma: 0.0,
            subsample: 0.9,
            colsample_bytree: 0.8,
        }
    }

    pub fn leafwise() -> Self {
        BoostParams {
            growth: Growth::Leafwise,
            max_depth: 20,
            n_leaves: 31,
            ..Self::depthwise()
        }
    }

    /// Tuned depth-wise settings; the defaults for `gbdt_depthwise`.
    pub fn reference_depthwise() -> Self {
        BoostParams {
            growth: Growth::Depthwise,
            n_trees: 2000,
            eta: 0.0122,
            max_depth: 17,
            n_leaves: default_leaves(),
            min_child_weight: 5.0,
            reg_lambda: 0.3346,
            gamma: 7.4644,
            subsample: 0.8734,
            colsample_bytree: 0.7473,
        }
    }

    /// Tuned leaf-wise settings; the defaults for `gbdt_leafwise`. Dropout
    /// boosting is not implemented.
    pub fn reference_leafwise() -> Self {
        BoostParams {
            growth: Growth::Leafwise,
            n_trees: 800,
            eta: 0.0805,
            max_depth: 17,
            n_leaves: 2,
            min_child_weight: 1e-3,
            reg_lambda: 0.3659,
            gamma: 0.0,
            subsample: 0.8789,
            colsample_bytree: 0.7394,
        }
    }

    pub fn validate(&self) -> Result<(), MlError> {
        let bad = |m: &str| Err(MlError::InvalidParams(m.to_string()));
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return bad("eta must lie in (0, 1]");
        }
        if self.max_depth < 1 {
            return bad("max_depth must be >= 1");
        }
        if self.growth == Growth::Leafwise && self.n_leaves < 2 {
            return bad("n_leaves must be >= 2");
        }
        if !(self.min_child_weight >= 0.0) || !(self.reg_lambda >= 0.0) || !(self.gamma >= 0.0) {
            return bad("min_child_weight, reg_lambda and gamma must be >= 0");
        }
        if !(self.subsample > 0.0 && self.subsample <= 1.0) {
            return bad("subsample must lie in (0, 1]");
        }
        if !(self.colsample_bytree > 0.0 && self.colsample_bytree <= 1.0) {
            return bad("colsample_bytree must lie in (0, 1]");
        }
        Ok(())
    }
}

const ROW_STREAM: u64 = 0;
const COLUMN_STREAM: u64 = 1;
const GROW_STREAM: u64 = 2;

/// Log-odds of the class-1 frequency.
pub fn base_score(labels: &[u8]) -> f64 {
    let p = labels.iter().filter(|&&y| y == 1).count() as f64 / labels.len() as f64;
    (p / (1.0 - p)).ln()
}

pub fn train_gbdt(table: &FeatureTable, params: &BoostParams, seed: u64) -> Result<Model, MlError> {
    params.validate()?;
    let labels = labels_of(table)?;
    let ones = labels.iter().filter(|&&y| y == 1).count();
    if ones == 0 || ones == labels.len() {
        return Err(MlError::SingleClassTraining);
    }
    let n = table.n_rows();
    let n_features = table.n_features();
    let data = Presorted::new(table.rows(), n_features);
    let base = base_score(labels);
    let mut raw = vec![base; n];
    let mut grad = vec![0.0; n];
    let mut hess = vec![0.0; n];
    let n_rows_per_tree = fraction_count(params.subsample, n);
    let n_cols_per_tree = fraction_count(params.colsample_bytree, n_features);
    let mut trees = Vec::with_capacity(params.n_trees);
    for t in 0..params.n_trees {
        for i in 0..n {
            let p = sigmoid(raw[i]);
            grad[i] = p - f64::from(labels[i]);
            hess[i] = p * (1.0 - p);
        }
        let mut weights = vec![0.0; n];
        if n_rows_per_tree == n {
            weights.iter_mut().for_each(|w| *w = 1.0);
        } else {
            let mut rng = stream_rng(seed, t as u64, ROW_STREAM);
            for i in rand::seq::index::sample(&mut rng, n, n_rows_per_tree) {
                weights[i] = 1.0;
            }
        }
        let features = sample_features(
            &mut stream_rng(seed, t as u64, COLUMN_STREAM),
            n_features,
            n_cols_per_tree,
        );
        let engine = Engine {
            data: &data,
            criterion: GradCriterion {
                grad: &grad,
                hess: &hess,
                lambda: params.reg_lambda,
                gamma: params.gamma,
                min_child_weight: params.min_child_weight,
            },
            rule: ThresholdRule::Exhaustive,
        };
        let lists = data.root_lists(&weights);
        let stats = engine.node_stats(&lists[0]);
        let root = NodeRows {
            lists,
            stats,
            depth: 0,
        };
        let mut rng = stream_rng(seed, t as u64, GROW_STREAM);
        let tree = match params.growth {
            Growth::Depthwise => engine.grow_depthwise(root, params.max_depth, &mut rng, &mut |_| {
                features.clone()
            }),
            Growth::Leafwise => {
                engine.grow_leafwise(root, params.n_leaves, params.max_depth, &features, &mut rng)
            }
        };
        for (i, row) in table.rows().iter().enumerate() {
            raw[i] += params.eta * tree.predict(row);
        }
        trees.push(tree);
    }
    Ok(Model::new(
        table.feature_names().to_vec(),
        ModelParams::Boost(*params),
        Some(base),
        trees,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Provenance;
    use rand::Rng;

    fn blobs(seed: u64, n: usize, sep: f64) -> FeatureTable {
        let mut rng = stream_rng(seed, 0, 9);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let y = (i % 2) as u8;
            let c = if y == 1 { sep } else { -sep };
            rows.push(vec![c + rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]);
            labels.push(y);
        }
        FeatureTable::new(
            vec!["a".into(), "b".into()],
            rows,
            Some(labels),
            (0..n).map(Provenance::Sample).collect(),
        )
        .unwrap()
    }

    #[test]
    fn zero_trees_predicts_base_rate() {
        let t = blobs(1, 40, 1.5);
        let params = BoostParams { n_trees: 0, ..BoostParams::depthwise() };
        let m = train_gbdt(&t, &params, 0).unwrap();
        let p = m.predict_proba(&t.rows()[..3]).unwrap();
        for v in p {
            assert!((v - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn single_class_rejected() {
        let t = blobs(1, 10, 1.5);
        let ones = t.subset(&[1, 3, 5]);
        assert_eq!(
            train_gbdt(&ones, &BoostParams::depthwise(), 0).unwrap_err(),
            MlError::SingleClassTraining
        );
    }

    #[test]
    fn leafwise_respects_leaf_budget() {
        let t = blobs(2, 200, 0.5);
        let params = BoostParams { n_trees: 5, n_leaves: 3, ..BoostParams::leafwise() };
        let m = train_gbdt(&t, &params, 4).unwrap();
        assert!(m.trees.iter().all(|tree| tree.n_leaves() <= 3));
        assert!(m.trees.iter().any(|tree| tree.n_leaves() == 3));
    }

    #[test]
    fn depthwise_respects_depth() {
        let t = blobs(3, 200, 0.5);
        let params = BoostParams { n_trees: 5, max_depth: 2, ..BoostParams::depthwise() };
        let m = train_gbdt(&t, &params, 4).unwrap();
        assert!(m.trees.iter().all(|tree| tree.depth() <= 2));
    }

    #[test]
    fn learns_separable_blobs() {
        let t = blobs(4, 300, 1.5);
        for params in [BoostParams::depthwise(), BoostParams::leafwise()] {
            let m = train_gbdt(&t, &BoostParams { n_trees: 50, ..params }, 1).unwrap();
            let pred = m.predict_class(t.rows(), 0.5).unwrap();
            let acc = pred.iter().zip(t.labels().unwrap()).filter(|(a, b)| a == b).count();
            assert!(acc as f64 / 300.0 > 0.97);
        }
    }
}
