//! CART classification trees, random forests and extremely randomized trees.

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{Model, ModelParams};
use super::tree::{
    fraction_count, sample_features, Engine, GiniCriterion, NodeRows, Presorted, ThresholdRule,
    TreeNode,
};
use super::{labels_of, stream_rng, MlError};
use crate::dataset::FeatureTable;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ForestKind {
    Rf,
    Et,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForestParams {
    pub kind: ForestKind,
    pub n_trees: usize,
    pub max_depth: usize,
    /// Fraction of features considered at each node.
    pub max_features: f64,
    /// Fraction of rows drawn for each tree.
    pub max_samples: f64,
    #[serde(default = "one")]
    pub min_samples_leaf: usize,
    /// RF only: draw rows with replacement. ET always draws without.
    #[serde(default = "yes")]
    pub bootstrap: bool,
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

impl ForestParams {
    /// Tuned random-forest settings; the defaults for `rf`.
    pub fn reference_rf() -> Self {
        ForestParams {
            kind: ForestKind::Rf,
            n_trees: 400,
            max_depth: 5,
            max_features: 0.6283,
            max_samples: 0.9471,
            min_samples_leaf: 1,
            bootstrap: true,
        }
    }

    pub fn reference_et() -> Self {
        ForestParams {
            kind: ForestKind::Et,
            ..Self::reference_rf()
        }
    }

    pub fn validate(&self) -> Result<(), MlError> {
        let bad = |m: &str| Err(MlError::InvalidParams(m.to_string()));
        if self.n_trees < 1 {
            return bad("n_trees must be >= 1");
        }
        if self.max_depth < 1 {
            return bad("max_depth must be >= 1");
        }
        if !(self.max_features > 0.0 && self.max_features <= 1.0) {
            return bad("max_features must lie in (0, 1]");
        }
        if !(self.max_samples > 0.0 && self.max_samples <= 1.0) {
            return bad("max_samples must lie in (0, 1]");
        }
        if self.min_samples_leaf < 1 {
            return bad("min_samples_leaf must be >= 1");
        }
        Ok(())
    }

    fn rule(&self) -> ThresholdRule {
        match self.kind {
            ForestKind::Rf => ThresholdRule::Exhaustive,
            ForestKind::Et => ThresholdRule::Random,
        }
    }
}

fn grow_tree(
    data: &Presorted,
    labels: &[u8],
    weights: &[f64],
    params: &ForestParams,
    rng: &mut ChaCha8Rng,
) -> TreeNode {
    let engine = Engine {
        data,
        criterion: GiniCriterion {
            labels,
            weights,
            min_samples_leaf: params.min_samples_leaf as f64,
        },
        rule: params.rule(),
    };
    let lists = data.root_lists(weights);
    let stats = engine.node_stats(&lists[0]);
    let n_features = data.n_features();
    let per_node = fraction_count(params.max_features, n_features);
    engine.grow_depthwise(
        NodeRows {
            lists,
            stats,
            depth: 0,
        },
        params.max_depth,
        rng,
        &mut |rng: &mut ChaCha8Rng| sample_features(rng, n_features, per_node),
    )
}

/// One Gini tree on the full table with unit weights. `rng` drives feature
/// subsampling and, for ET, threshold draws.
pub fn train_cart(
    table: &FeatureTable,
    params: &ForestParams,
    rng: &mut ChaCha8Rng,
) -> Result<TreeNode, MlError> {
    params.validate()?;
    let labels = labels_of(table)?;
    let data = Presorted::new(table.rows(), table.n_features());
    let weights = vec![1.0; table.n_rows()];
    Ok(grow_tree(&data, labels, &weights, params, rng))
}

/// Per-row multiplicity of a tree's row sample.
fn row_weights<R: Rng>(params: &ForestParams, n: usize, rng: &mut R) -> Vec<f64> {
    let m = fraction_count(params.max_samples, n);
    let mut w = vec![0.0; n];
    if params.kind == ForestKind::Rf && params.bootstrap {
        for _ in 0..m {
            w[rng.random_range(0..n)] += 1.0;
        }
    } else if m == n {
        w.iter_mut().for_each(|x| *x = 1.0);
    } else {
        for i in sample(rng, n, m) {
            w[i] = 1.0;
        }
    }
    w
}

/// Streams per tree: 0 for the row sample, 1 for tree growth.
pub(crate) const SAMPLE_STREAM: u64 = 0;
pub(crate) const GROW_STREAM: u64 = 1;

pub fn train_forest(table: &FeatureTable, params: &ForestParams, seed: u64) -> Result<Model, MlError> {
    params.validate()?;
    let labels = labels_of(table)?;
    let data = Presorted::new(table.rows(), table.n_features());
    let n = table.n_rows();
    let trees: Vec<TreeNode> = (0..params.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut sampler = stream_rng(seed, t as u64, SAMPLE_STREAM);
            let weights = row_weights(params, n, &mut sampler);
            let mut grower = stream_rng(seed, t as u64, GROW_STREAM);
            grow_tree(&data, labels, &weights, params, &mut grower)
        })
        .collect();
    Ok(Model::new(
        table.feature_names().to_vec(),
        ModelParams::Forest(*params),
        None,
        trees,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Provenance;
    use crate::ml::tree::{gini_gain, ClassStats, LeafValue};

    fn table(rows: Vec<Vec<f64>>, labels: Vec<u8>) -> FeatureTable {
        let p = rows[0].len();
        let n = rows.len();
        FeatureTable::new(
            (0..p).map(|j| format!("f{j}")).collect(),
            rows,
            Some(labels),
            (0..n).map(Provenance::Sample).collect(),
        )
        .unwrap()
    }

    fn full_rf(depth: usize) -> ForestParams {
        ForestParams {
            kind: ForestKind::Rf,
            n_trees: 1,
            max_depth: depth,
            max_features: 1.0,
            max_samples: 1.0,
            min_samples_leaf: 1,
            bootstrap: false,
        }
    }

    #[test]
    fn separable_single_feature() {
        let xs = [-3.0, -2.0, -1.0, 0.0, 1.0, 2.0, 3.0];
        let t = table(
            xs.iter().map(|&x| vec![x]).collect(),
            xs.iter().map(|&x| u8::from(x > 0.0)).collect(),
        );
        let tree = train_cart(&t, &full_rf(5), &mut stream_rng(0, 0, 0)).unwrap();
        assert_eq!(tree.depth(), 1);
        match &tree {
            TreeNode::Split { threshold, .. } => assert_eq!(*threshold, 0.5),
            _ => panic!("expected a split"),
        }
        for (row, label) in t.rows().iter().zip(t.labels().unwrap()) {
            assert_eq!(tree.predict(row), f64::from(*label));
        }
    }

    #[test]
    fn pure_root_is_leaf() {
        let t = table(vec![vec![1.0], vec![2.0], vec![3.0]], vec![1, 1, 1]);
        let tree = train_cart(&t, &full_rf(5), &mut stream_rng(0, 0, 0)).unwrap();
        assert_eq!(tree, TreeNode::Leaf { value: LeafValue::Counts { n0: 0.0, n1: 3.0 } });
    }

    #[test]
    fn root_split_matches_exhaustive_scan() {
        let mut rng = stream_rng(99, 0, 0);
        let rows: Vec<Vec<f64>> = (0..20)
            .map(|_| (0..3).map(|_| (rng.random_range(0..10) as f64) / 2.0).collect())
            .collect();
        let labels: Vec<u8> = rows.iter().map(|r| u8::from(r[1] + 0.3 * r[2] > 3.0)).collect();
        let t = table(rows.clone(), labels.clone());
        let tree = train_cart(&t, &full_rf(2), &mut stream_rng(1, 0, 0)).unwrap();
        // Oracle: every feature, every midpoint, Gini gain computed from scratch.
        let mut best = (f64::NEG_INFINITY, 0usize, 0.0);
        for f in 0..3 {
            let mut vals: Vec<f64> = rows.iter().map(|r| r[f]).collect();
            vals.sort_by(f64::total_cmp);
            vals.dedup();
            for w in vals.windows(2) {
                let thr = (w[0] + w[1]) / 2.0;
                let count = |pred: &dyn Fn(&Vec<f64>) -> bool| {
                    let mut s = ClassStats::default();
                    for (r, &y) in rows.iter().zip(&labels) {
                        if pred(r) {
                            if y == 1 { s.w1 += 1.0 } else { s.w0 += 1.0 }
                        }
                    }
                    s
                };
                let parent = count(&|_| true);
                let left = count(&|r| r[f] <= thr);
                let right = count(&|r| r[f] > thr);
                let g = gini_gain(&parent, &left, &right);
                if g > best.0 {
                    best = (g, f, thr);
                }
            }
        }
        match tree {
            TreeNode::Split { feature, threshold, gain, .. } => {
                assert_eq!(feature, best.1);
                assert_eq!(threshold, best.2);
                assert!((gain - best.0).abs() < 1e-12);
            }
            _ => panic!("expected a split"),
        }
    }

    #[test]
    fn single_tree_forest_equals_cart() {
        let mut rng = stream_rng(5, 0, 0);
        let rows: Vec<Vec<f64>> = (0..60).map(|_| (0..4).map(|_| rng.random()).collect()).collect();
        let labels = rows.iter().map(|r| u8::from(r[0] > r[3])).collect();
        let t = table(rows, labels);
        let params = ForestParams { max_features: 0.5, ..full_rf(4) };
        let model = train_forest(&t, &params, 17).unwrap();
        let cart = train_cart(&t, &params, &mut stream_rng(17, 0, GROW_STREAM)).unwrap();
        assert_eq!(model.trees, vec![cart]);
    }

    #[test]
    fn extra_trees_thresholds_within_node_range() {
        let mut rng = stream_rng(8, 0, 0);
        let rows: Vec<Vec<f64>> = (0..80).map(|_| vec![rng.random_range(2.0..5.0)]).collect();
        let labels = rows.iter().map(|r| u8::from(r[0] > 3.3)).collect();
        let t = table(rows, labels);
        let params = ForestParams { kind: ForestKind::Et, max_depth: 1, ..full_rf(1) };
        let tree = train_cart(&t, &params, &mut stream_rng(3, 0, 1)).unwrap();
        if let TreeNode::Split { threshold, .. } = tree {
            assert!((2.0..5.0).contains(&threshold));
        }
    }

    #[test]
    fn params_validation() {
        assert!(ForestParams { max_features: 0.0, ..full_rf(2) }.validate().is_err());
        assert!(ForestParams { n_trees: 0, ..full_rf(2) }.validate().is_err());
        assert!(ForestParams::reference_rf().validate().is_ok());
    }
}
