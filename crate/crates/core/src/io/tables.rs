//! CSV tables: station observations, labelled sample points and feature
//! tables.

use std::path::Path;

use super::{write_atomic, IoError};
use crate::dataset::{FeatureTable, LabeledPoint, Provenance};
use crate::geostat::Observation;

fn csv_err(path: &Path, e: csv::Error) -> IoError {
    match e.position() {
        Some(pos) => IoError::Parse {
            path: path.to_path_buf(),
            line: pos.line() as usize,
            message: e.to_string(),
        },
        None => IoError::format(path, e),
    }
}

fn reader(path: &Path) -> Result<csv::Reader<std::fs::File>, IoError> {
    csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(source) => IoError::Io {
                path: path.to_path_buf(),
                source,
            },
            other => IoError::format(path, format!("{other:?}")),
        })
}

fn read_records<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, IoError> {
    let mut rdr = reader(path)?;
    rdr.deserialize().map(|r| r.map_err(|e| csv_err(path, e))).collect()
}

fn write_records<T: serde::Serialize>(path: &Path, rows: &[T]) -> Result<(), IoError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    let bytes = w.into_inner().map_err(|e| IoError::format(path, e))?;
    write_atomic(path, &bytes)
}

/// Columns `station_id,x,y,date,value`, dates as `YYYY-MM-DD`.
pub fn read_observations(path: &Path) -> Result<Vec<Observation>, IoError> {
    read_records(path)
}

pub fn write_observations(path: &Path, obs: &[Observation]) -> Result<(), IoError> {
    write_records(path, obs)
}

/// Columns `x,y,label` with labels 0 (vegetated) or 1 (non-vegetated).
pub fn read_samples(path: &Path) -> Result<Vec<LabeledPoint>, IoError> {
    let pts: Vec<LabeledPoint> = read_records(path)?;
    if let Some(i) = pts.iter().position(|p| p.label > 1) {
        return Err(IoError::Parse {
            path: path.to_path_buf(),
            line: i + 2,
            message: format!("label must be 0 or 1, got {}", pts[i].label),
        });
    }
    Ok(pts)
}

pub fn write_samples(path: &Path, pts: &[LabeledPoint]) -> Result<(), IoError> {
    write_records(path, pts)
}

/// Columns `source,index,<features...>[,label]` where `source` is `pixel`
/// or `sample`.
pub fn write_feature_table(path: &Path, table: &FeatureTable) -> Result<(), IoError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["source".to_string(), "index".to_string()];
    header.extend(table.feature_names().iter().cloned());
    if table.labels().is_some() {
        header.push("label".into());
    }
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for (i, row) in table.rows().iter().enumerate() {
        let (src, idx) = match table.provenance()[i] {
            Provenance::Pixel(k) => ("pixel", k),
            Provenance::Sample(k) => ("sample", k),
        };
        let mut rec = vec![src.to_string(), idx.to_string()];
        // Debug formatting is shortest round-trip and switches to exponent
        // notation for very large or small magnitudes.
        rec.extend(row.iter().map(|v| format!("{v:?}")));
        if let Some(l) = table.labels() {
            rec.push(l[i].to_string());
        }
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    let bytes = w.into_inner().map_err(|e| IoError::format(path, e))?;
    write_atomic(path, &bytes)
}

pub fn read_feature_table(path: &Path) -> Result<FeatureTable, IoError> {
    let mut rdr = reader(path)?;
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| csv_err(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.len() < 3 || header[0] != "source" || header[1] != "index" {
        return Err(IoError::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: "header must start with 'source,index' and name at least one feature".into(),
        });
    }
    let labelled = header.last().map(String::as_str) == Some("label");
    let feat_end = if labelled { header.len() - 1 } else { header.len() };
    let names = header[2..feat_end].to_vec();
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut prov = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = k + 2;
        let perr = |m: String| IoError::Parse {
            path: path.to_path_buf(),
            line,
            message: m,
        };
        let idx: usize = rec[1].parse().map_err(|_| perr(format!("bad index '{}'", &rec[1])))?;
        prov.push(match &rec[0] {
            "pixel" => Provenance::Pixel(idx),
            "sample" => Provenance::Sample(idx),
            other => return Err(perr(format!("unknown source '{other}'"))),
        });
        let row: Result<Vec<f64>, _> = (2..feat_end)
            .map(|j| rec[j].parse::<f64>().map_err(|_| perr(format!("bad value '{}'", &rec[j]))))
            .collect();
        rows.push(row?);
        if labelled {
            labels.push(
                rec[feat_end]
                    .parse::<u8>()
                    .map_err(|_| perr(format!("bad label '{}'", &rec[feat_end])))?,
            );
        }
    }
    FeatureTable::new(names, rows, labelled.then_some(labels), prov)
        .map_err(|e| IoError::format(path, e))
}
