//! Stratified train/test splits and k-fold cross-validation.

use rand::seq::SliceRandom;

use super::metrics::classification_metrics;
use super::model::{train_model, ModelParams};
use super::{labels_of, stream_rng, MlError};
use crate::dataset::FeatureTable;

const SPLIT_STREAM: u64 = 0xa0;
const FOLD_STREAM: u64 = 0xa1;

fn shuffled_by_class(labels: &[u8], seed: u64, purpose: u64) -> [Vec<usize>; 2] {
    let mut classes = [Vec::new(), Vec::new()];
    for (i, &y) in labels.iter().enumerate() {
        classes[usize::from(y.min(1))].push(i);
    }
    for (c, idx) in classes.iter_mut().enumerate() {
        idx.shuffle(&mut stream_rng(seed, c as u64, purpose));
    }
    classes
}

/// Per-class shuffle, first `round(train_fraction · n_c)` rows of each class
/// to training. Both index lists come back sorted.
pub fn stratified_split(
    labels: &[u8],
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>), MlError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(MlError::InvalidParams("train fraction must lie in (0, 1)".into()));
    }
    if labels.is_empty() {
        return Err(MlError::Empty);
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for idx in shuffled_by_class(labels, seed, SPLIT_STREAM) {
        let k = (train_fraction * idx.len() as f64).round() as usize;
        train.extend_from_slice(&idx[..k]);
        test.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Test-fold index lists; each class is dealt round-robin over the folds.
pub fn stratified_folds(labels: &[u8], k: usize, seed: u64) -> Result<Vec<Vec<usize>>, MlError> {
    if k < 2 {
        return Err(MlError::InvalidParams("need at least 2 folds".into()));
    }
    if labels.len() < k {
        return Err(MlError::InvalidParams(format!("{} rows cannot fill {k} folds", labels.len())));
    }
    let mut folds = vec![Vec::new(); k];
    let mut next = 0;
    for idx in shuffled_by_class(labels, seed, FOLD_STREAM) {
        for i in idx {
            folds[next % k].push(i);
            next += 1;
        }
    }
    folds.iter_mut().for_each(|f| f.sort_unstable());
    Ok(folds)
}

/// Mean misclassification rate (1 − OA) over stratified folds.
pub fn cv_loss(table: &FeatureTable, params: &ModelParams, k: usize, seed: u64) -> Result<f64, MlError> {
    let labels = labels_of(table)?;
    let folds = stratified_folds(labels, k, seed)?;
    let mut total = 0.0;
    for (f, test) in folds.iter().enumerate() {
        let mut in_test = vec![false; labels.len()];
        test.iter().for_each(|&i| in_test[i] = true);
        let train: Vec<usize> = (0..labels.len()).filter(|&i| !in_test[i]).collect();
        let model = train_model(&table.subset(&train), params, seed.wrapping_add(f as u64))?;
        let held = table.subset(test);
        let pred = model.predict_class(held.rows(), 0.5)?;
        total += 1.0 - classification_metrics(held.labels().unwrap_or_default(), &pred)?.oa;
    }
    Ok(total / k as f64)
}
