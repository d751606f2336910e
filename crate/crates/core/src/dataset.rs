//! Tabular views of raster stacks: per-pixel feature rows, labelled samples,
//! the Pearson correlation matrix and redundancy pruning.

use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::Stack;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DatasetError {
    #[error("no complete row could be built")]
    EmptyTable,
    #[error("need at least 2 rows, got {0}")]
    TooFewRows(usize),
    #[error("unknown feature '{0}'")]
    UnknownFeature(String),
    #[error("invalid table: {0}")]
    Invalid(String),
}

/// Where a row came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    /// Cell index in the source stack.
    Pixel(usize),
    /// Position of the point in the sample list.
    Sample(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledPoint {
    pub x: f64,
    pub y: f64,
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    feature_names: Vec<String>,
    rows: Vec<Vec<f64>>,
    labels: Option<Vec<u8>>,
    provenance: Vec<Provenance>,
}

impl FeatureTable {
    pub fn new(
        feature_names: Vec<String>,
        rows: Vec<Vec<f64>>,
        labels: Option<Vec<u8>>,
        provenance: Vec<Provenance>,
    ) -> Result<Self, DatasetError> {
        let mut seen = HashSet::new();
        for n in &feature_names {
            if !seen.insert(n.as_str()) {
                return Err(DatasetError::Invalid(format!("duplicate feature '{n}'")));
            }
        }
        if let Some(bad) = rows.iter().position(|r| r.len() != feature_names.len()) {
            return Err(DatasetError::Invalid(format!(
                "row {bad} has {} values for {} features",
                rows[bad].len(),
                feature_names.len()
            )));
        }
        if provenance.len() != rows.len() {
            return Err(DatasetError::Invalid("provenance length differs from row count".into()));
        }
        if let Some(labels) = &labels {
            if labels.len() != rows.len() {
                return Err(DatasetError::Invalid("label count differs from row count".into()));
            }
            if labels.iter().any(|&l| l > 1) {
                return Err(DatasetError::Invalid("labels must be 0 or 1".into()));
            }
        }
        Ok(FeatureTable {
            feature_names,
            rows,
            labels,
            provenance,
        })
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn labels(&self) -> Option<&[u8]> {
        self.labels.as_deref()
    }

    pub fn provenance(&self) -> &[Provenance] {
        &self.provenance
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r[j]).collect()
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.feature_names.iter().position(|n| n == name)
    }

    pub fn class_counts(&self) -> Option<[usize; 2]> {
        self.labels.as_ref().map(|l| {
            let ones = l.iter().filter(|&&v| v == 1).count();
            [l.len() - ones, ones]
        })
    }

    /// Rows selected by index, keeping labels and provenance in step.
    pub fn subset(&self, indices: &[usize]) -> FeatureTable {
        FeatureTable {
            feature_names: self.feature_names.clone(),
            rows: indices.iter().map(|&i| self.rows[i].clone()).collect(),
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
            provenance: indices.iter().map(|&i| self.provenance[i]).collect(),
        }
    }
}

/// One row per cell with every layer valid, in cell order.
pub fn stack_to_table(stack: &Stack) -> Result<FeatureTable, DatasetError> {
    let (rows, provenance): (Vec<Vec<f64>>, Vec<Provenance>) = (0..stack.georef.len())
        .into_par_iter()
        .filter_map(|i| stack.cell_vector(i).map(|v| (v, Provenance::Pixel(i))))
        .unzip();
    if rows.is_empty() {
        return Err(DatasetError::EmptyTable);
    }
    FeatureTable::new(stack.names(), rows, None, provenance)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractionReport {
    pub kept: usize,
    pub outside_extent: usize,
    pub on_nodata: usize,
}

/// Labelled rows at the cells containing each point. Points outside the
/// stack or on a cell with any nodata layer are dropped and counted.
pub fn extract_samples(
    stack: &Stack,
    points: &[LabeledPoint],
) -> Result<(FeatureTable, ExtractionReport), DatasetError> {
    let mut report = ExtractionReport::default();
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut provenance = Vec::new();
    for (k, p) in points.iter().enumerate() {
        if p.label > 1 {
            return Err(DatasetError::Invalid(format!("point {k} has label {}", p.label)));
        }
        let Some((r, c)) = stack.georef.cell_at(p.x, p.y) else {
            report.outside_extent += 1;
            continue;
        };
        match stack.cell_vector(stack.georef.index(r, c)) {
            Some(v) => {
                rows.push(v);
                labels.push(p.label);
                provenance.push(Provenance::Sample(k));
            }
            None => report.on_nodata += 1,
        }
    }
    report.kept = rows.len();
    if rows.is_empty() {
        return Err(DatasetError::EmptyTable);
    }
    Ok((
        FeatureTable::new(stack.names(), rows, Some(labels), provenance)?,
        report,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationMatrix {
    pub names: Vec<String>,
    /// Row-major `n x n` Pearson coefficients.
    pub values: Vec<f64>,
    pub zero_variance: Vec<bool>,
}

impl CorrelationMatrix {
    pub fn n(&self) -> usize {
        self.names.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n() + j]
    }
}

/// Pearson correlation with population denominators. Zero-variance columns
/// get `r = 0` off the diagonal and are flagged.
pub fn correlation_matrix(table: &FeatureTable) -> Result<CorrelationMatrix, DatasetError> {
    let n_rows = table.n_rows();
    if n_rows < 2 {
        return Err(DatasetError::TooFewRows(n_rows));
    }
    let p = table.n_features();
    let columns: Vec<Vec<f64>> = (0..p).map(|j| table.column(j)).collect();
    let centered: Vec<Vec<f64>> = columns
        .iter()
        .map(|c| {
            let m = c.iter().sum::<f64>() / n_rows as f64;
            c.iter().map(|v| v - m).collect()
        })
        .collect();
    let ss: Vec<f64> = centered.iter().map(|c| c.iter().map(|v| v * v).sum()).collect();
    let zero_variance: Vec<bool> = ss.iter().map(|&s| s <= 0.0).collect();
    let pairs: Vec<(usize, usize)> = (0..p).flat_map(|i| (i + 1..p).map(move |j| (i, j))).collect();
    let off: Vec<f64> = pairs
        .par_iter()
        .map(|&(i, j)| {
            if zero_variance[i] || zero_variance[j] {
                return 0.0;
            }
            let cov: f64 = centered[i].iter().zip(&centered[j]).map(|(a, b)| a * b).sum();
            (cov / (ss[i].sqrt() * ss[j].sqrt())).clamp(-1.0, 1.0)
        })
        .collect();
    let mut values = vec![0.0; p * p];
    for i in 0..p {
        values[i * p + i] = 1.0;
    }
    for (&(i, j), &r) in pairs.iter().zip(&off) {
        values[i * p + j] = r;
        values[j * p + i] = r;
    }
    Ok(CorrelationMatrix {
        names: table.feature_names.clone(),
        values,
        zero_variance,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneResult {
    pub kept: Vec<String>,
    pub dropped: Vec<String>,
}

/// Greedy redundancy pruning on absolute correlation.
///
/// Zero-variance features go first. Pairs with `|r| > threshold` are then
/// visited from the strongest down (ties by name pair); for each pair whose
/// members are both still alive, the member with the larger mean `|r|`
/// against the other live features is dropped, the later column on a tie.
pub fn prune_correlated(table: &FeatureTable, threshold: f64) -> Result<PruneResult, DatasetError> {
    let corr = correlation_matrix(table)?;
    let p = corr.n();
    let names = &corr.names;
    let mut alive: Vec<bool> = corr.zero_variance.iter().map(|z| !z).collect();
    let mut dropped: Vec<String> = (0..p)
        .filter(|&i| corr.zero_variance[i])
        .map(|i| names[i].clone())
        .collect();

    let mut pairs: Vec<(usize, usize, f64)> = Vec::new();
    for i in 0..p {
        for j in i + 1..p {
            let r = corr.get(i, j).abs();
            if r > threshold {
                pairs.push((i, j, r));
            }
        }
    }
    let name_pair = |i: usize, j: usize| {
        let (a, b) = (&names[i], &names[j]);
        if a <= b {
            (a.clone(), b.clone())
        } else {
            (b.clone(), a.clone())
        }
    };
    pairs.sort_by(|x, y| {
        y.2.total_cmp(&x.2)
            .then_with(|| name_pair(x.0, x.1).cmp(&name_pair(y.0, y.1)))
    });

    let mean_abs_r = |k: usize, alive: &[bool]| -> f64 {
        let (s, n) = (0..p)
            .filter(|&m| m != k && alive[m])
            .fold((0.0, 0usize), |(s, n), m| (s + corr.get(k, m).abs(), n + 1));
        if n == 0 {
            0.0
        } else {
            s / n as f64
        }
    };
    for (i, j, _) in pairs {
        if !(alive[i] && alive[j]) {
            continue;
        }
        let (mi, mj) = (mean_abs_r(i, &alive), mean_abs_r(j, &alive));
        // j > i, so j is the later column and loses ties.
        let victim = if mi > mj { i } else { j };
        alive[victim] = false;
        dropped.push(names[victim].clone());
    }
    Ok(PruneResult {
        kept: (0..p).filter(|&i| alive[i]).map(|i| names[i].clone()).collect(),
        dropped,
    })
}

/// Removes the named columns, keeping rows, labels and provenance.
pub fn drop_features(table: &FeatureTable, names: &[String]) -> Result<FeatureTable, DatasetError> {
    for n in names {
        if table.feature_index(n).is_none() {
            return Err(DatasetError::UnknownFeature(n.clone()));
        }
    }
    select_features(
        table,
        &table
            .feature_names
            .iter()
            .filter(|f| !names.contains(f))
            .cloned()
            .collect::<Vec<_>>(),
    )
}

/// Keeps only the named columns, in the given order.
pub fn select_features(table: &FeatureTable, names: &[String]) -> Result<FeatureTable, DatasetError> {
    let idx: Vec<usize> = names
        .iter()
        .map(|n| {
            table
                .feature_index(n)
                .ok_or_else(|| DatasetError::UnknownFeature(n.clone()))
        })
        .collect::<Result<_, _>>()?;
    Ok(FeatureTable {
        feature_names: names.to_vec(),
        rows: table
            .rows
            .iter()
            .map(|r| idx.iter().map(|&j| r[j]).collect())
            .collect(),
        labels: table.labels.clone(),
        provenance: table.provenance.clone(),
    })
}
