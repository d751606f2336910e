//! Georeferenced single-band grids and the operations that bring layers of
//! different resolutions onto one common cell lattice.
//!
//! Grids use a lower-left origin: row 0 is the southernmost row and values
//! are stored row-major from south to north. The ESRI ASCII codec in
//! [`crate::io::asc`] flips rows on the way in and out.

use std::collections::{BTreeMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default nodata sentinel, following the ESRI ASCII convention.
pub const DEFAULT_NODATA: f64 = -9999.0;

const CELL_SIZE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RasterError {
    #[error("invalid georeference: {0}")]
    InvalidGeoref(String),
    #[error("grid '{name}' has {got} values, expected {expected}")]
    LengthMismatch {
        name: String,
        got: usize,
        expected: usize,
    },
    #[error("grid '{0}' contains NaN; use the nodata sentinel for missing cells")]
    NanValue(String),
    #[error("grids are not aligned: '{0}' vs '{1}'")]
    MisalignedGrids(String, String),
    #[error("duplicate layer name '{0}'")]
    DuplicateLayerName(String),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("unknown zone attribute '{0}'")]
    UnknownAttribute(String),
    #[error("invalid zone {index}: {reason}")]
    InvalidZone { index: usize, reason: String },
}

/// Lattice definition shared by every layer of a stack.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridGeoref {
    pub ncols: usize,
    pub nrows: usize,
    /// Easting of the lower-left corner.
    #[serde(rename = "xllcorner")]
    pub x_origin: f64,
    /// Northing of the lower-left corner.
    #[serde(rename = "yllcorner")]
    pub y_origin: f64,
    #[serde(rename = "cellsize")]
    pub cell_size: f64,
    #[serde(default = "default_nodata")]
    pub nodata: f64,
}

fn default_nodata() -> f64 {
    DEFAULT_NODATA
}

impl GridGeoref {
    pub fn new(
        ncols: usize,
        nrows: usize,
        x_origin: f64,
        y_origin: f64,
        cell_size: f64,
        nodata: f64,
    ) -> Result<Self, RasterError> {
        let georef = GridGeoref {
            ncols,
            nrows,
            x_origin,
            y_origin,
            cell_size,
            nodata,
        };
        georef.validate()?;
        Ok(georef)
    }

    pub fn validate(&self) -> Result<(), RasterError> {
        if self.ncols == 0 || self.nrows == 0 {
            return Err(RasterError::InvalidGeoref(format!(
                "dimensions must be positive, got {}x{}",
                self.ncols, self.nrows
            )));
        }
        if !(self.cell_size > 0.0) || !self.cell_size.is_finite() {
            return Err(RasterError::InvalidGeoref(format!(
                "cell size must be positive, got {}",
                self.cell_size
            )));
        }
        if !self.x_origin.is_finite() || !self.y_origin.is_finite() || self.nodata.is_nan() {
            return Err(RasterError::InvalidGeoref(
                "origin and nodata must be finite numbers".into(),
            ));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ncols * self.nrows
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> f64 {
        self.ncols as f64 * self.cell_size
    }

    pub fn height(&self) -> f64 {
        self.nrows as f64 * self.cell_size
    }

    /// Two georefs are aligned iff every field matches; cell sizes compare
    /// within 1e-9 m.
    pub fn is_aligned(&self, other: &GridGeoref) -> bool {
        self.ncols == other.ncols
            && self.nrows == other.nrows
            && self.x_origin == other.x_origin
            && self.y_origin == other.y_origin
            && (self.cell_size - other.cell_size).abs() <= CELL_SIZE_TOLERANCE
            && self.nodata == other.nodata
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.ncols + col
    }

    pub fn row_col(&self, index: usize) -> (usize, usize) {
        (index / self.ncols, index % self.ncols)
    }

    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.x_origin + (col as f64 + 0.5) * self.cell_size,
            self.y_origin + (row as f64 + 0.5) * self.cell_size,
        )
    }

    /// Cell containing a point, with the extent treated as half-open
    /// `[origin, origin + size)`.
    pub fn cell_at(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let fx = (x - self.x_origin) / self.cell_size;
        let fy = (y - self.y_origin) / self.cell_size;
        if !(fx >= 0.0 && fy >= 0.0) {
            return None;
        }
        let (col, row) = (fx.floor() as usize, fy.floor() as usize);
        (col < self.ncols && row < self.nrows).then_some((row, col))
    }

    /// Index of the cell whose center is nearest to `(x, y)` along one axis.
    /// Equidistant centers resolve to the lower index; positions outside the
    /// closed extent yield `None`.
    fn nearest_axis_index(origin: f64, cell: f64, n: usize, coord: f64) -> Option<usize> {
        let f = (coord - origin) / cell;
        if !(f >= 0.0 && f <= n as f64) {
            return None;
        }
        let idx = (f.ceil() as i64 - 1).max(0) as usize;
        Some(idx.min(n - 1))
    }

    pub fn nearest_cell(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let col = Self::nearest_axis_index(self.x_origin, self.cell_size, self.ncols, x)?;
        let row = Self::nearest_axis_index(self.y_origin, self.cell_size, self.nrows, y)?;
        Some((row, col))
    }
}

/// A named single-band raster.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub georef: GridGeoref,
    pub name: String,
    values: Vec<f64>,
}

impl Grid {
    pub fn new(
        name: impl Into<String>,
        georef: GridGeoref,
        values: Vec<f64>,
    ) -> Result<Self, RasterError> {
        let name = name.into();
        georef.validate()?;
        if values.len() != georef.len() {
            return Err(RasterError::LengthMismatch {
                name,
                got: values.len(),
                expected: georef.len(),
            });
        }
        if values.iter().any(|v| v.is_nan()) {
            return Err(RasterError::NanValue(name));
        }
        Ok(Grid {
            georef,
            name,
            values,
        })
    }

    pub fn filled(name: impl Into<String>, georef: GridGeoref, value: f64) -> Self {
        Grid {
            name: name.into(),
            values: vec![value; georef.len()],
            georef,
        }
    }

    /// Builds a grid from a per-cell function of `(row, col)`. NaN results
    /// are stored as nodata.
    pub fn from_fn(
        name: impl Into<String>,
        georef: GridGeoref,
        f: impl Fn(usize, usize) -> f64 + Sync,
    ) -> Self {
        let values = (0..georef.len())
            .into_par_iter()
            .map(|i| {
                let (r, c) = georef.row_col(i);
                let v = f(r, c);
                if v.is_nan() {
                    georef.nodata
                } else {
                    v
                }
            })
            .collect();
        Grid {
            name: name.into(),
            georef,
            values,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn nodata(&self) -> f64 {
        self.georef.nodata
    }

    pub fn is_nodata(&self, v: f64) -> bool {
        v == self.georef.nodata
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[self.georef.index(row, col)]
    }

    /// Cell value, or `None` for nodata.
    pub fn value(&self, index: usize) -> Option<f64> {
        let v = self.values[index];
        (!self.is_nodata(v)).then_some(v)
    }

    /// Value of the cell containing `(x, y)`, `None` outside the extent or on
    /// nodata.
    pub fn sample(&self, x: f64, y: f64) -> Option<f64> {
        let (r, c) = self.georef.cell_at(x, y)?;
        self.value(self.georef.index(r, c))
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn valid_count(&self) -> usize {
        self.values.iter().filter(|v| !self.is_nodata(**v)).count()
    }

    /// Applies `f` to every valid cell; nodata stays nodata.
    pub fn map_valid(&self, name: impl Into<String>, f: impl Fn(f64) -> f64 + Sync) -> Grid {
        let nodata = self.nodata();
        let values = self
            .values
            .par_iter()
            .map(|&v| {
                if v == nodata {
                    return nodata;
                }
                let out = f(v);
                if out.is_nan() {
                    nodata
                } else {
                    out
                }
            })
            .collect();
        Grid {
            name: name.into(),
            georef: self.georef,
            values,
        }
    }

    fn ensure_aligned(&self, other: &Grid) -> Result<(), RasterError> {
        if self.georef.is_aligned(&other.georef) {
            Ok(())
        } else {
            Err(RasterError::MisalignedGrids(
                self.name.clone(),
                other.name.clone(),
            ))
        }
    }
}

/// Polygon with an attribute table. Rings are closed vertex lists; with
/// several rings the even-odd rule makes inner rings holes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Zone {
    pub rings: Vec<Vec<(f64, f64)>>,
    pub attributes: BTreeMap<String, f64>,
}

impl Zone {
    fn bbox(&self) -> (f64, f64, f64, f64) {
        let mut b = (
            f64::INFINITY,
            f64::INFINITY,
            f64::NEG_INFINITY,
            f64::NEG_INFINITY,
        );
        for &(x, y) in self.rings.iter().flatten() {
            b.0 = b.0.min(x);
            b.1 = b.1.min(y);
            b.2 = b.2.max(x);
            b.3 = b.3.max(y);
        }
        b
    }

    /// Even-odd containment; points on an edge count as inside.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let mut inside = false;
        for ring in &self.rings {
            for w in ring.windows(2) {
                let ((x1, y1), (x2, y2)) = (w[0], w[1]);
                if on_segment(x, y, x1, y1, x2, y2) {
                    return true;
                }
                if (y1 > y) != (y2 > y) {
                    let xc = x1 + (y - y1) * (x2 - x1) / (y2 - y1);
                    if x < xc {
                        inside = !inside;
                    }
                }
            }
        }
        inside
    }
}

fn on_segment(px: f64, py: f64, x1: f64, y1: f64, x2: f64, y2: f64) -> bool {
    let cross = (x2 - x1) * (py - y1) - (y2 - y1) * (px - x1);
    let scale = (x2 - x1).abs().max((y2 - y1).abs()).max(1.0);
    if cross.abs() > 1e-9 * scale * scale {
        return false;
    }
    px >= x1.min(x2) && px <= x1.max(x2) && py >= y1.min(y2) && py <= y1.max(y2)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ZoneSet {
    zones: Vec<Zone>,
}

impl ZoneSet {
    pub fn new(zones: Vec<Zone>) -> Result<Self, RasterError> {
        let keys: Option<Vec<&String>> = zones.first().map(|z| z.attributes.keys().collect());
        for (index, zone) in zones.iter().enumerate() {
            if zone.rings.is_empty() {
                return Err(RasterError::InvalidZone {
                    index,
                    reason: "no rings".into(),
                });
            }
            for ring in &zone.rings {
                if ring.len() < 4 {
                    return Err(RasterError::InvalidZone {
                        index,
                        reason: format!("ring has {} points, need at least 3 plus closure", ring.len()),
                    });
                }
                if ring.first() != ring.last() {
                    return Err(RasterError::InvalidZone {
                        index,
                        reason: "ring is not closed".into(),
                    });
                }
            }
            if let Some(keys) = &keys {
                if !zone.attributes.keys().eq(keys.iter().copied()) {
                    return Err(RasterError::InvalidZone {
                        index,
                        reason: "attribute keys differ from the first zone".into(),
                    });
                }
            }
        }
        Ok(ZoneSet { zones })
    }

    pub fn zones(&self) -> &[Zone] {
        &self.zones
    }

    pub fn len(&self) -> usize {
        self.zones.len()
    }

    pub fn is_empty(&self) -> bool {
        self.zones.is_empty()
    }

    pub fn attribute_names(&self) -> Vec<String> {
        self.zones
            .first()
            .map(|z| z.attributes.keys().cloned().collect())
            .unwrap_or_default()
    }

    /// Index of the first zone containing the point.
    pub fn locate(&self, x: f64, y: f64) -> Option<usize> {
        self.zones.iter().position(|z| z.contains(x, y))
    }
}

/// Ordered set of uniquely named layers sharing one georef.
#[derive(Debug, Clone, PartialEq)]
pub struct Stack {
    pub georef: GridGeoref,
    layers: Vec<Grid>,
}

impl Stack {
    pub fn new(georef: GridGeoref, layers: Vec<Grid>) -> Result<Self, RasterError> {
        let mut seen = HashSet::new();
        for layer in &layers {
            if !layer.georef.is_aligned(&georef) {
                return Err(RasterError::MisalignedGrids(
                    layer.name.clone(),
                    "stack".into(),
                ));
            }
            if !seen.insert(layer.name.as_str()) {
                return Err(RasterError::DuplicateLayerName(layer.name.clone()));
            }
        }
        Ok(Stack { georef, layers })
    }

    pub fn layers(&self) -> &[Grid] {
        &self.layers
    }

    pub fn into_layers(self) -> Vec<Grid> {
        self.layers
    }

    pub fn layer(&self, name: &str) -> Option<&Grid> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn names(&self) -> Vec<String> {
        self.layers.iter().map(|l| l.name.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Feature vector of one cell, `None` if any layer is nodata there.
    pub fn cell_vector(&self, index: usize) -> Option<Vec<f64>> {
        self.layers.iter().map(|l| l.value(index)).collect()
    }
}

/// Nearest-neighbour resampling onto `target`.
///
/// Target cells whose center lies outside the closed source extent become
/// nodata; source nodata is carried over as target nodata.
pub fn resample_nearest(src: &Grid, target: &GridGeoref) -> Grid {
    if src.georef.is_aligned(target) {
        return src.clone();
    }
    let sg = src.georef;
    let values = (0..target.len())
        .into_par_iter()
        .map(|i| {
            let (r, c) = target.row_col(i);
            let (x, y) = target.cell_center(r, c);
            match sg.nearest_cell(x, y) {
                Some((sr, sc)) => {
                    let v = src.get(sr, sc);
                    if src.is_nodata(v) {
                        target.nodata
                    } else {
                        v
                    }
                }
                None => target.nodata,
            }
        })
        .collect();
    Grid {
        name: src.name.clone(),
        georef: *target,
        values,
    }
}

/// Assigns each cell the attribute of the zone covering the largest share of
/// it, estimated on a `subsamples_per_axis`² point lattice inside the cell.
/// Equal shares go to the zone listed first.
pub fn rasterize_zones(
    zones: &ZoneSet,
    attribute: &str,
    target: &GridGeoref,
    subsamples_per_axis: usize,
) -> Result<Grid, RasterError> {
    let values: Vec<f64> = zones
        .zones
        .iter()
        .map(|z| {
            z.attributes
                .get(attribute)
                .copied()
                .ok_or_else(|| RasterError::UnknownAttribute(attribute.to_string()))
        })
        .collect::<Result<_, _>>()?;
    let assignment = assign_zones(zones, target, subsamples_per_axis);
    let out = assignment
        .into_iter()
        .map(|z| z.map_or(target.nodata, |i| values[i]))
        .collect();
    Ok(Grid {
        name: attribute.to_string(),
        georef: *target,
        values: out,
    })
}

/// Per-cell index of the maximum-coverage zone.
pub fn assign_zones(
    zones: &ZoneSet,
    target: &GridGeoref,
    subsamples_per_axis: usize,
) -> Vec<Option<usize>> {
    let k = subsamples_per_axis.max(1);
    let boxes: Vec<_> = zones.zones.iter().map(Zone::bbox).collect();
    let cs = target.cell_size;
    (0..target.len())
        .into_par_iter()
        .map(|i| {
            let (r, c) = target.row_col(i);
            let x0 = target.x_origin + c as f64 * cs;
            let y0 = target.y_origin + r as f64 * cs;
            let candidates: Vec<usize> = boxes
                .iter()
                .enumerate()
                .filter(|(_, b)| b.0 <= x0 + cs && b.2 >= x0 && b.1 <= y0 + cs && b.3 >= y0)
                .map(|(i, _)| i)
                .collect();
            if candidates.is_empty() {
                return None;
            }
            let mut hits = vec![0usize; candidates.len()];
            for sy in 0..k {
                let y = y0 + (sy as f64 + 0.5) / k as f64 * cs;
                for sx in 0..k {
                    let x = x0 + (sx as f64 + 0.5) / k as f64 * cs;
                    if let Some(j) = candidates
                        .iter()
                        .position(|&z| zones.zones[z].contains(x, y))
                    {
                        hits[j] += 1;
                    }
                }
            }
            let mut best: Option<(usize, usize)> = None;
            for (j, &h) in hits.iter().enumerate() {
                if h > 0 && best.is_none_or(|(_, bh)| h > bh) {
                    best = Some((j, h));
                }
            }
            best.map(|(j, _)| candidates[j])
        })
        .collect()
}

/// Brings every grid onto `target`, resampling only those not already
/// aligned. Layer order is preserved.
pub fn align_stack(grids: Vec<Grid>, target: &GridGeoref) -> Result<Stack, RasterError> {
    if grids.is_empty() {
        return Err(RasterError::EmptyInput("align_stack needs at least one grid"));
    }
    let mut seen = HashSet::new();
    for g in &grids {
        if !seen.insert(g.name.clone()) {
            return Err(RasterError::DuplicateLayerName(g.name.clone()));
        }
    }
    let layers = grids
        .into_iter()
        .map(|g| {
            if g.georef.is_aligned(target) {
                g
            } else {
                resample_nearest(&g, target)
            }
        })
        .collect();
    Stack::new(*target, layers)
}

/// Per-cell mean over the grids where the cell is valid.
pub fn temporal_mean(grids: &[Grid], name: impl Into<String>) -> Result<Grid, RasterError> {
    let first = grids
        .first()
        .ok_or(RasterError::EmptyInput("temporal_mean needs at least one grid"))?;
    for g in &grids[1..] {
        first.ensure_aligned(g)?;
    }
    let nodata = first.nodata();
    let values = (0..first.georef.len())
        .into_par_iter()
        .map(|i| {
            // Running mean: exact when every valid value is identical.
            let mut mean = 0.0;
            let mut n = 0usize;
            for g in grids {
                let v = g.values[i];
                if v != nodata {
                    n += 1;
                    mean += (v - mean) / n as f64;
                }
            }
            if n == 0 {
                nodata
            } else {
                mean
            }
        })
        .collect();
    Ok(Grid {
        name: name.into(),
        georef: first.georef,
        values,
    })
}

/// Combines two aligned grids cell by cell. Nodata in either operand, or a
/// `None` from `f`, yields nodata.
pub fn zip_cells(
    a: &Grid,
    b: &Grid,
    name: impl Into<String>,
    f: impl Fn(f64, f64) -> Option<f64> + Sync,
) -> Result<Grid, RasterError> {
    a.ensure_aligned(b)?;
    let nodata = a.nodata();
    let values = a
        .values
        .par_iter()
        .zip(b.values.par_iter())
        .map(|(&x, &y)| {
            if x == nodata || y == nodata {
                return nodata;
            }
            f(x, y).filter(|v| !v.is_nan()).unwrap_or(nodata)
        })
        .collect();
    Ok(Grid {
        name: name.into(),
        georef: a.georef,
        values,
    })
}

/// Three-operand variant of [`zip_cells`].
pub fn zip3_cells(
    a: &Grid,
    b: &Grid,
    c: &Grid,
    name: impl Into<String>,
    f: impl Fn(f64, f64, f64) -> Option<f64> + Sync,
) -> Result<Grid, RasterError> {
    a.ensure_aligned(b)?;
    a.ensure_aligned(c)?;
    let nodata = a.nodata();
    let values = (0..a.values.len())
        .into_par_iter()
        .map(|i| {
            let (x, y, z) = (a.values[i], b.values[i], c.values[i]);
            if x == nodata || y == nodata || z == nodata {
                return nodata;
            }
            f(x, y, z).filter(|v| !v.is_nan()).unwrap_or(nodata)
        })
        .collect();
    Ok(Grid {
        name: name.into(),
        georef: a.georef,
        values,
    })
}
