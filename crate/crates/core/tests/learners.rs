use std::collections::BTreeMap;

use greenprior::dataset::{prune_correlated, FeatureTable, Provenance};
use greenprior::ml::smbo::{random_search, smbo_tune, Domain, HyperparameterSpace};
use greenprior::ml::{
    classification_metrics, feature_importance_mdi, stream_rng, train_cart, train_forest,
    ForestKind, ForestParams, TreeNode,
};
use rand::Rng;

fn table(rows: Vec<Vec<f64>>, labels: Vec<u8>) -> FeatureTable {
    let p = rows[0].len();
    let prov = (0..rows.len()).map(Provenance::Sample).collect();
    FeatureTable::new((0..p).map(|j| format!("f{j}")).collect(), rows, Some(labels), prov).unwrap()
}

fn stump() -> ForestParams {
    ForestParams {
        kind: ForestKind::Rf,
        n_trees: 1,
        max_depth: 1,
        max_features: 1.0,
        max_samples: 1.0,
        min_samples_leaf: 1,
        bootstrap: false,
    }
}

fn gini(n0: f64, n1: f64) -> f64 {
    let n = n0 + n1;
    if n == 0.0 {
        0.0
    } else {
        2.0 * (n0 / n) * (n1 / n)
    }
}

/// Every (feature, midpoint) split with its Gini decrease.
fn all_splits(rows: &[Vec<f64>], labels: &[u8]) -> Vec<(usize, f64, f64)> {
    let n = rows.len() as f64;
    let n1 = labels.iter().filter(|&&y| y == 1).count() as f64;
    let parent = gini(n - n1, n1);
    let mut out = Vec::new();
    for f in 0..rows[0].len() {
        let mut vals: Vec<f64> = rows.iter().map(|r| r[f]).collect();
        vals.sort_by(f64::total_cmp);
        vals.dedup();
        for w in vals.windows(2) {
            let thr = 0.5 * (w[0] + w[1]);
            let (mut l0, mut l1) = (0.0, 0.0);
            for (r, &y) in rows.iter().zip(labels) {
                if r[f] <= thr {
                    if y == 1 { l1 += 1.0 } else { l0 += 1.0 }
                }
            }
            let (r0, r1) = (n - n1 - l0, n1 - l1);
            let gain = parent - (l0 + l1) / n * gini(l0, l1) - (r0 + r1) / n * gini(r0, r1);
            out.push((f, thr, gain));
        }
    }
    out
}

#[test]
fn root_split_equals_exhaustive_gini_search() {
    let mut checked = 0;
    for case in 0..50u64 {
        let mut rng = stream_rng(500, case, 0);
        let n = rng.random_range(6..=50);
        let p = rng.random_range(1..=5);
        // Coarse values so that ties and duplicates actually occur.
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..p).map(|_| rng.random_range(0..12) as f64 * 0.25).collect())
            .collect();
        let mut labels: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.45))).collect();
        labels[0] = 0;
        labels[1] = 1;
        let splits = all_splits(&rows, &labels);
        let tree = train_cart(&table(rows.clone(), labels), &stump(), &mut stream_rng(case, 0, 1)).unwrap();
        let best = splits.iter().map(|s| s.2).fold(f64::NEG_INFINITY, f64::max);
        if splits.is_empty() || best <= 1e-12 {
            continue;
        }
        let TreeNode::Split { feature, threshold, gain, .. } = tree else {
            panic!("case {case}: expected a split with best gain {best}");
        };
        assert!((gain - best).abs() <= 1e-12, "case {case}: gain {gain} vs {best}");
        let optimal: Vec<(usize, f64)> = splits
            .iter()
            .filter(|s| s.2 >= best - 1e-12)
            .map(|s| (s.0, s.1))
            .collect();
        assert!(optimal.contains(&(feature, threshold)), "case {case}: ({feature}, {threshold}) not optimal");
        if optimal.len() == 1 {
            assert_eq!(optimal[0], (feature, threshold));
        }
        checked += 1;
    }
    assert!(checked >= 45);
}

#[test]
fn weighted_recall_equals_overall_accuracy() {
    for case in 0..1000u64 {
        let mut rng = stream_rng(77, case, 0);
        let n = rng.random_range(1..200);
        let p1 = rng.random_range(0.0..1.0);
        let truth: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(p1))).collect();
        let flip = rng.random_range(0.0..1.0);
        let pred: Vec<u8> = truth.iter().map(|&y| if rng.random_bool(flip) { 1 - y } else { y }).collect();
        let m = classification_metrics(&truth, &pred).unwrap();
        let correct = truth.iter().zip(&pred).filter(|(a, b)| a == b).count();
        assert_eq!(m.oa, correct as f64 / n as f64);
        assert_eq!(m.recall_w, m.oa, "case {case}");
    }
}

#[test]
fn metrics_hand_case() {
    let truth = [0, 0, 0, 1, 1];
    let pred = [0, 1, 0, 1, 0];
    let m = classification_metrics(&truth, &pred).unwrap();
    assert_eq!(m.confusion, [[2, 1], [1, 1]]);
    assert!((m.oa - 0.6).abs() < 1e-15);
    // Class 0: precision 2/3, recall 2/3; class 1: precision 1/2, recall 1/2.
    assert!((m.precision_w - (0.6 * 2.0 / 3.0 + 0.4 * 0.5)).abs() < 1e-12);
}

#[test]
fn mdi_sums_to_one_and_finds_the_signal() {
    let mut rng = stream_rng(4, 0, 0);
    let rows: Vec<Vec<f64>> = (0..300).map(|_| (0..4).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
    let labels: Vec<u8> = rows.iter().map(|r| u8::from(r[2] > 0.5)).collect();
    let params = ForestParams { n_trees: 50, max_depth: 4, bootstrap: true, max_features: 0.5, ..stump() };
    let model = train_forest(&table(rows, labels), &params, 9).unwrap();
    let imp = feature_importance_mdi(&model).unwrap();
    assert!((imp.values.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    assert_eq!(imp.ranked()[0].0, "f2");
}

fn quadratic_space() -> HyperparameterSpace {
    let mut m = BTreeMap::new();
    m.insert("x".to_string(), Domain::Float { low: -5.0, high: 5.0, log: false });
    HyperparameterSpace(m)
}

#[test]
fn smbo_is_no_worse_than_random_search_on_a_quadratic() {
    let space = quadratic_space();
    let f = |p: &greenprior::ml::smbo::ParamSet| {
        let x = p["x"].as_f64().unwrap();
        Ok((x - 1.3).powi(2))
    };
    let seeds = 50u64;
    let smbo: Vec<f64> = (0..seeds).map(|s| smbo_tune(&space, f, 25, 5, s).unwrap().best_score).collect();
    let mut random: Vec<f64> = (0..seeds).map(|s| random_search(&space, f, 25, s).unwrap().best_score).collect();
    random.sort_by(f64::total_cmp);
    let median = 0.5 * (random[24] + random[25]);
    let wins = smbo.iter().filter(|&&b| b <= median).count();
    assert!(wins * 10 >= 8 * seeds as usize, "{wins}/{seeds}");
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn pruning_leaves_no_strong_pair_and_only_drops_redundant_columns() {
    for case in 0..40u64 {
        let mut rng = stream_rng(31, case, 0);
        let n = 60;
        let p_base = rng.random_range(2..7);
        let mut cols: Vec<Vec<f64>> = (0..p_base)
            .map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        for _ in 0..rng.random_range(0..5) {
            let src = rng.random_range(0..cols.len());
            let noise = rng.random_range(0.0..0.4);
            let sign = if rng.random_bool(0.5) { -1.0 } else { 1.0 };
            let copy = cols[src].iter().map(|v| sign * 3.0 * v + noise * rng.random_range(-1.0..1.0)).collect();
            cols.push(copy);
        }
        let p = cols.len();
        let rows: Vec<Vec<f64>> = (0..n).map(|i| cols.iter().map(|c| c[i]).collect()).collect();
        let labels = (0..n).map(|i| (i % 2) as u8).collect();
        let t = table(rows, labels);
        let r = prune_correlated(&t, 0.9).unwrap();

        let name = |j: usize| format!("f{j}");
        assert_eq!(r.kept.len() + r.dropped.len(), p);
        let kept: Vec<usize> = (0..p).filter(|&j| r.kept.contains(&name(j))).collect();
        for (a, &i) in kept.iter().enumerate() {
            for &j in &kept[a + 1..] {
                assert!(pearson(&cols[i], &cols[j]).abs() <= 0.9, "case {case}: f{i}/f{j} both kept");
            }
        }
        for d in &r.dropped {
            let j: usize = d[1..].parse().unwrap();
            assert!(
                (0..p).any(|k| k != j && pearson(&cols[j], &cols[k]).abs() > 0.9),
                "case {case}: {d} dropped without a strong partner"
            );
        }
    }
}
