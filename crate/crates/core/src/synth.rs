//! Deterministic synthetic city: district polygons with socio-economic
//! attributes, reflectance bands, day/night land-surface temperature, air
//! temperature and wind rasters, PM2.5 station series, labelled samples and
//! the ground truth that generated them.
//!
//! The bundle carries 36 feature layers. A configurable number of them are
//! planted near-duplicates of others: `copy = a·(z_base + κ·hub + σ·ε) + b`,
//! where `hub` sums the other features sign-aligned with the base. The hub
//! term lifts the copy's average correlation above the base's, so
//! correlation pruning removes exactly the copies.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::LabeledPoint;
use crate::geostat::{Observation, SphericalVariogram};
use crate::indices::{ndvi, BandRoles, SpectralIndex};
use crate::io::{self, IoError};
use crate::linalg::cholesky;
use crate::ml::stream_rng;
use crate::pipeline::{LayerSpec, PipelineConfig, ValidationSpec};
use crate::raster::{assign_zones, resample_nearest, Grid, GridGeoref, Zone, ZoneSet};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scenario spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Io(#[from] IoError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSpec {
    pub seed: u64,
    pub ncols: usize,
    pub nrows: usize,
    pub cell_size: f64,
    pub x_origin: f64,
    pub y_origin: f64,
    /// Band rasters are this many times finer than the target grid.
    pub fine_factor: usize,
    /// Temperature and wind rasters are this many times coarser.
    pub coarse_factor: usize,
    pub n_districts: usize,
    pub n_stations: usize,
    pub n_days: usize,
    pub n_validation_stations: usize,
    /// Samples per class: `[vegetated, non-vegetated]`.
    pub class_counts: [usize; 2],
    /// Upper bound on the fraction of flipped sample labels.
    pub label_noise: f64,
    pub vegetation_fraction: f64,
    /// Characteristic size of vegetation patches, metres.
    pub vegetation_scale: f64,
    /// Planted near-duplicate layers, at most 12.
    pub n_redundant: usize,
    pub n_lst_dates: usize,
    pub start_date: NaiveDate,
    pub variogram: SphericalVariogram,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        ScenarioSpec {
            seed: 42,
            ncols: 200,
            nrows: 200,
            cell_size: 100.0,
            x_origin: 530_000.0,
            y_origin: 3_940_000.0,
            fine_factor: 2,
            coarse_factor: 10,
            n_districts: 22,
            n_stations: 24,
            n_days: 30,
            n_validation_stations: 8,
            class_counts: [2788, 2044],
            label_noise: 0.015,
            vegetation_fraction: 0.4,
            vegetation_scale: 1500.0,
            n_redundant: 12,
            n_lst_dates: 3,
            start_date: NaiveDate::from_ymd_opt(2022, 6, 22).expect("valid date"),
            variogram: SphericalVariogram {
                nugget: 4.0,
                sill: 64.0,
                range: 6000.0,
            },
        }
    }
}

pub const FEATURE_COUNT: usize = 36;

impl ScenarioSpec {
    pub fn with_seed(seed: u64) -> Self {
        ScenarioSpec {
            seed,
            ..Default::default()
        }
    }

    pub fn n_samples(&self) -> usize {
        self.class_counts[0] + self.class_counts[1]
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidSpec(m.to_string()));
        if self.ncols < 10 || self.nrows < 10 {
            return bad("grid must be at least 10×10 cells");
        }
        if !(self.cell_size > 0.0 && self.cell_size.is_finite()) {
            return bad("cell_size must be positive");
        }
        if !(self.x_origin.is_finite() && self.y_origin.is_finite()) {
            return bad("origin must be finite");
        }
        if self.fine_factor == 0 || self.coarse_factor == 0 {
            return bad("resolution factors must be at least 1");
        }
        if self.n_districts == 0 || self.n_days == 0 || self.n_lst_dates == 0 {
            return bad("district, day and date counts must be at least 1");
        }
        if self.n_stations < 10 {
            return bad("need at least 10 stations so some days can be kriged");
        }
        if self.n_validation_stations == 0 {
            return bad("need at least one validation station");
        }
        if self.class_counts.contains(&0) {
            return bad("both classes need samples");
        }
        if !(0.0..=0.5).contains(&self.label_noise) {
            return bad("label_noise must lie in [0, 0.5]");
        }
        if !(self.vegetation_fraction > 0.05 && self.vegetation_fraction < 0.95) {
            return bad("vegetation_fraction must lie in (0.05, 0.95)");
        }
        if !(self.vegetation_scale > 0.0) {
            return bad("vegetation_scale must be positive");
        }
        if self.n_redundant > REDUNDANT.len() {
            return bad("at most 12 redundant layers can be planted");
        }
        if self.variogram.validate().is_err() || self.variogram.sill <= 0.0 {
            return bad("variogram needs 0 <= nugget <= sill, sill > 0, range > 0");
        }
        // The octagonal city covers about 68% of the square grid; leave room for
        // sampling without replacement.
        let city_cells = (self.ncols.min(self.nrows) as f64).powi(2) * 0.68;
        let veg = city_cells * self.vegetation_fraction;
        if self.class_counts[0] as f64 > 0.8 * veg
            || self.class_counts[1] as f64 > 0.8 * (city_cells - veg)
        {
            return bad("too many samples for the grid size");
        }
        Ok(())
    }
}

/// The 25 district attributes: name, mean, spread.
const DISTRICT_ATTRS: [(&str, f64, f64); 25] = [
    ("ECP", 38.0, 4.0),
    ("FEP", 155_000.0, 8_500.0),
    ("MP", 160_000.0, 9_000.0),
    ("GA", 120.0, 35.0),
    ("GBA", 40.0, 15.0),
    ("GC", 12.0, 4.0),
    ("ER", 88.0, 3.0),
    ("PN", 0.5, 0.15),
    ("SR", 103.0, 3.0),
    ("SP", 27.0, 4.0),
    ("TER", 38.0, 3.5),
    ("MER", 62.0, 5.0),
    ("FER", 14.0, 3.0),
    ("NDR", 40.0, 4.5),
    ("GDR", 42.0, 5.0),
    ("LKC", 20.0, 6.0),
    ("LKM", 2.5, 0.8),
    ("L5KC", 12.0, 2.0),
    ("L5KM", 6.0, 2.0),
    ("L10KC", 5.0, 0.9),
    ("L10KM", 5.0, 1.8),
    ("L100KC", 4.0, 1.5),
    ("L100KM", 18.0, 6.0),
    ("M100KC", 1.0, 0.4),
    ("M100KM", 60.0, 20.0),
];

/// Planting order: `(copy, base, scale, offset)`. Negative scale plants an
/// anti-correlated copy.
const REDUNDANT: [(&str, &str, f64, f64); 12] = [
    ("SAVI", "NDVI", 0.12, 0.45),
    ("EVI", "NDVI", 0.15, 0.35),
    ("NDMI", "NDVI", 0.08, 0.05),
    ("NDBI", "NDVI", -0.1, -0.05),
    ("MP", "SP", 9_000.0, 160_000.0),
    ("FEP", "SP", 8_500.0, 155_000.0),
    ("NDR", "GDR", 4.5, 40.0),
    ("TER", "MER", 3.5, 38.0),
    ("LKC", "LKM", 6.0, 20.0),
    ("M100KM", "GA", 20.0, 60.0),
    ("L10KC", "L10KM", 0.9, 5.0),
    ("L5KC", "L5KM", 2.0, 12.0),
];

const SPECTRAL_COPIES: [&str; 4] = ["SAVI", "EVI", "NDMI", "NDBI"];
const BANDS: [&str; 4] = ["BLUE", "RED", "NIR", "SWIR1"];

const HUB_WEIGHT: f64 = 0.35;
const COPY_NOISE: f64 = 0.1;
/// Attribute pairs more correlated than this are redrawn.
const ATTRIBUTE_MAX_CORR: f64 = 0.7;

// RNG purposes.
const P_GEOMETRY: u64 = 0xc0;
const P_VEGETATION: u64 = 0xc1;
const P_CLIMATE: u64 = 0xc2;
const P_BANDS: u64 = 0xc3;
const P_DISTRICTS: u64 = 0xc4;
const P_COPIES: u64 = 0xc5;
const P_STATIONS: u64 = 0xc6;
const P_SAMPLES: u64 = 0xc7;

#[derive(Debug, Clone)]
pub struct GroundTruth {
    /// 0 vegetated, 1 non-vegetated, nodata outside the city.
    pub vegetation_mask: Grid,
    /// Generative priority score in [0, 1]; 0 on vegetation.
    pub criticality: Grid,
    pub variogram: SphericalVariogram,
}

/// An in-memory scenario, ready to be written as a bundle.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub spec: ScenarioSpec,
    pub target: GridGeoref,
    pub zones: ZoneSet,
    /// BLUE, RED, NIR, SWIR1 at the fine resolution.
    pub bands: Vec<Grid>,
    /// Single-date rasters written as-is (fine spectral layers, T2, WS).
    pub rasters: Vec<Grid>,
    pub dlst: Vec<Grid>,
    pub nlst: Vec<Grid>,
    pub pm25: Vec<Observation>,
    pub t2_stations: Vec<Observation>,
    pub samples: Vec<LabeledPoint>,
    /// `(copy, base)` pairs actually planted.
    pub planted: Vec<(String, String)>,
    pub truth: GroundTruth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestLayer {
    pub name: String,
    /// `band`, `feature` or `ground_truth`.
    pub role: String,
    /// Native cell size in metres; 0 for vector and station layers.
    pub resolution: f64,
    /// How the pipeline brings the layer onto the target grid.
    pub rule: String,
    pub files: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedPair {
    pub copy: String,
    pub base: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub spec: ScenarioSpec,
    pub layers: Vec<ManifestLayer>,
    pub planted: Vec<PlantedPair>,
    pub expected_kept: usize,
    pub samples: PathBuf,
    pub stations: PathBuf,
    pub validation_stations: PathBuf,
    pub config: PathBuf,
}

// ---------------------------------------------------------------------------
// Small helpers

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Bilinear value noise with N(0, 1) lattice values and smoothstep easing.
struct ValueNoise {
    x0: f64,
    y0: f64,
    spacing: f64,
    nx: usize,
    lattice: Vec<f64>,
}

impl ValueNoise {
    fn new(rng: &mut ChaCha8Rng, g: &GridGeoref, spacing: f64) -> Self {
        let nx = (g.width() / spacing).ceil() as usize + 3;
        let ny = (g.height() / spacing).ceil() as usize + 3;
        let lattice = (0..nx * ny).map(|_| normal(rng)).collect();
        // Random phase so lattice nodes do not sit on cell edges.
        let (px, py): (f64, f64) = (rng.random(), rng.random());
        ValueNoise {
            x0: g.x_origin - spacing * (1.0 + px),
            y0: g.y_origin - spacing * (1.0 + py),
            spacing,
            nx,
            lattice,
        }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        let u = (x - self.x0) / self.spacing;
        let v = (y - self.y0) / self.spacing;
        let (i, j) = (u.floor() as usize, v.floor() as usize);
        let ease = |t: f64| t * t * (3.0 - 2.0 * t);
        let (s, t) = (ease(u - u.floor()), ease(v - v.floor()));
        let l = |a: usize, b: usize| self.lattice[b * self.nx + a];
        let bottom = l(i, j) * (1.0 - s) + l(i + 1, j) * s;
        let top = l(i, j + 1) * (1.0 - s) + l(i + 1, j + 1) * s;
        bottom * (1.0 - t) + top * t
    }
}

/// Weighted moments over a fixed set of cells.
struct Weights<'a> {
    w: &'a [f64],
    total: f64,
}

impl<'a> Weights<'a> {
    fn new(w: &'a [f64]) -> Self {
        Weights {
            w,
            total: w.iter().sum(),
        }
    }

    fn mean(&self, x: &[f64]) -> f64 {
        x.iter().zip(self.w).map(|(v, w)| v * w).sum::<f64>() / self.total
    }

    fn standardize(&self, x: &[f64]) -> Vec<f64> {
        let m = self.mean(x);
        let var = x.iter().zip(self.w).map(|(v, w)| w * (v - m).powi(2)).sum::<f64>() / self.total;
        let sd = var.sqrt().max(1e-12);
        x.iter().map(|v| (v - m) / sd).collect()
    }

    /// Correlation of two standardized vectors.
    fn corr(&self, a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).zip(self.w).map(|((x, y), w)| x * y * w).sum::<f64>() / self.total
    }
}

fn coarse_georef(target: &GridGeoref, factor: usize) -> GridGeoref {
    GridGeoref {
        ncols: target.ncols.div_ceil(factor),
        nrows: target.nrows.div_ceil(factor),
        x_origin: target.x_origin,
        y_origin: target.y_origin,
        cell_size: target.cell_size * factor as f64,
        nodata: target.nodata,
    }
}

fn fine_georef(target: &GridGeoref, factor: usize) -> GridGeoref {
    GridGeoref {
        ncols: target.ncols * factor,
        nrows: target.nrows * factor,
        x_origin: target.x_origin,
        y_origin: target.y_origin,
        cell_size: target.cell_size / factor as f64,
        nodata: target.nodata,
    }
}

// ---------------------------------------------------------------------------
// Geometry

type Pt = (f64, f64);

/// Regular octagon with flat edges facing the axes.
fn octagon(center: Pt, radius: f64) -> Vec<Pt> {
    (0..8)
        .map(|k| {
            let a = std::f64::consts::PI / 8.0 + k as f64 * std::f64::consts::PI / 4.0;
            (center.0 + radius * a.cos(), center.1 + radius * a.sin())
        })
        .collect()
}

fn inside_convex(poly: &[Pt], p: Pt) -> bool {
    let n = poly.len();
    (0..n).all(|i| {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0) >= 0.0
    })
}

/// Sutherland–Hodgman clip of a convex polygon to `n·p <= c`.
fn clip_half_plane(poly: &[Pt], n: Pt, c: f64) -> Vec<Pt> {
    let side = |p: Pt| n.0 * p.0 + n.1 * p.1 - c;
    let mut out = Vec::with_capacity(poly.len() + 1);
    for i in 0..poly.len() {
        let (a, b) = (poly[i], poly[(i + 1) % poly.len()]);
        let (sa, sb) = (side(a), side(b));
        if sa <= 0.0 {
            out.push(a);
        }
        if (sa < 0.0 && sb > 0.0) || (sa > 0.0 && sb < 0.0) {
            let t = sa / (sa - sb);
            out.push((a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1)));
        }
    }
    out
}

/// Voronoi cells of `seeds` clipped to the convex `boundary`.
fn voronoi(boundary: &[Pt], seeds: &[Pt]) -> Vec<Vec<Pt>> {
    seeds
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let mut cell = boundary.to_vec();
            for (j, &t) in seeds.iter().enumerate() {
                if i == j || cell.is_empty() {
                    continue;
                }
                let n = (t.0 - s.0, t.1 - s.1);
                let c = (t.0 * t.0 + t.1 * t.1 - s.0 * s.0 - s.1 * s.1) / 2.0;
                cell = clip_half_plane(&cell, n, c);
            }
            cell
        })
        .collect()
}

fn random_points(
    rng: &mut ChaCha8Rng,
    boundary: &[Pt],
    bbox: (f64, f64, f64, f64),
    n: usize,
    min_dist: f64,
) -> Vec<Pt> {
    let mut pts: Vec<Pt> = Vec::with_capacity(n);
    let mut spacing = min_dist;
    let mut attempts = 0;
    while pts.len() < n {
        let p = (
            rng.random_range(bbox.0..bbox.2),
            rng.random_range(bbox.1..bbox.3),
        );
        attempts += 1;
        if attempts % 2000 == 0 {
            spacing *= 0.8;
        }
        if !inside_convex(boundary, p) {
            continue;
        }
        if pts
            .iter()
            .any(|q| (q.0 - p.0).hypot(q.1 - p.1) < spacing)
        {
            continue;
        }
        pts.push(p);
    }
    pts
}

fn closed(ring: &[Pt]) -> Vec<Pt> {
    let mut r = ring.to_vec();
    if let Some(&first) = ring.first() {
        r.push(first);
    }
    r
}

// ---------------------------------------------------------------------------
// Generation

struct Features {
    names: Vec<String>,
    /// Standardized per target cell, restricted to city cells.
    z: Vec<Vec<f64>>,
}

impl Features {
    fn push(&mut self, name: &str, z: Vec<f64>) {
        self.names.push(name.to_string());
        self.z.push(z);
    }

    /// Sign-aligned sum of every other feature, standardized.
    fn hub(&self, base: &str, w: &Weights) -> Vec<f64> {
        let b = self.names.iter().position(|n| n == base).expect("base feature exists");
        let mut h = vec![0.0; self.z[b].len()];
        for (k, zk) in self.z.iter().enumerate() {
            if k == b {
                continue;
            }
            let s = w.corr(&self.z[b], zk).signum();
            for (hv, v) in h.iter_mut().zip(zk) {
                *hv += s * v;
            }
        }
        w.standardize(&h)
    }
}

/// Builds the scenario in memory.
pub fn build_scenario(spec: &ScenarioSpec) -> Result<Scenario, SynthError> {
    spec.validate()?;
    let seed = spec.seed;
    let target = GridGeoref::new(
        spec.ncols,
        spec.nrows,
        spec.x_origin,
        spec.y_origin,
        spec.cell_size,
        crate::raster::DEFAULT_NODATA,
    )
    .map_err(|e| SynthError::InvalidSpec(e.to_string()))?;
    let nodata = target.nodata;
    let fine = fine_georef(&target, spec.fine_factor);
    let coarse = coarse_georef(&target, spec.coarse_factor);
    let n = target.len();

    // City boundary and districts.
    let mut rng = stream_rng(seed, 0, P_GEOMETRY);
    let center = (
        target.x_origin + target.width() / 2.0,
        target.y_origin + target.height() / 2.0,
    );
    let radius = 0.49 * target.width().min(target.height());
    let boundary = octagon(center, radius);
    let bbox = (
        center.0 - radius,
        center.1 - radius,
        center.0 + radius,
        center.1 + radius,
    );
    let area = 2.0 * std::f64::consts::SQRT_2 * radius * radius;
    let seeds = random_points(
        &mut rng,
        &boundary,
        bbox,
        spec.n_districts,
        0.6 * (area / spec.n_districts as f64).sqrt(),
    );
    let cells = voronoi(&boundary, &seeds);
    let assignment = assign_zones(
        &ZoneSet::new(
            cells
                .iter()
                .map(|c| Zone {
                    rings: vec![closed(c)],
                    attributes: BTreeMap::new(),
                })
                .collect(),
        )
        .map_err(|e| SynthError::InvalidSpec(e.to_string()))?,
        &target,
        4,
    );
    let city: Vec<usize> = (0..n).filter(|&i| assignment[i].is_some()).collect();
    let district_of: Vec<usize> = city.iter().map(|&i| assignment[i].unwrap_or(0)).collect();

    // Vegetation mask: thresholded two-octave noise.
    let mut rng = stream_rng(seed, 0, P_VEGETATION);
    let big = ValueNoise::new(&mut rng, &target, spec.vegetation_scale);
    let small = ValueNoise::new(&mut rng, &target, spec.vegetation_scale / 2.5);
    let field: Vec<f64> = (0..n)
        .map(|i| {
            let (r, c) = target.row_col(i);
            let (x, y) = target.cell_center(r, c);
            big.at(x, y) + 0.5 * small.at(x, y)
        })
        .collect();
    let mut city_field: Vec<f64> = city.iter().map(|&i| field[i]).collect();
    city_field.sort_by(f64::total_cmp);
    let k = ((1.0 - spec.vegetation_fraction) * city_field.len() as f64) as usize;
    let threshold = city_field[k.min(city_field.len() - 1)];
    // 1 = non-vegetated everywhere; the ground-truth grid masks the outside.
    let nonveg: Vec<f64> = field
        .iter()
        .map(|&v| if v >= threshold { 0.0 } else { 1.0 })
        .collect();
    let mut in_city = vec![false; n];
    for &i in &city {
        in_city[i] = true;
    }

    // Sample weights per city cell mimic the stratified draw.
    let n_class = [
        city.iter().filter(|&&i| nonveg[i] == 0.0).count(),
        city.iter().filter(|&&i| nonveg[i] == 1.0).count(),
    ];
    if n_class[0] < spec.class_counts[0] || n_class[1] < spec.class_counts[1] {
        return Err(SynthError::InvalidSpec(format!(
            "city has {} vegetated and {} non-vegetated cells; cannot draw {:?} samples",
            n_class[0], n_class[1], spec.class_counts
        )));
    }
    let weights: Vec<f64> = city
        .iter()
        .map(|&i| {
            let c = nonveg[i] as usize;
            spec.class_counts[c] as f64 / n_class[c] as f64
        })
        .collect();
    let w = Weights::new(&weights);

    // Climate rasters on the coarse grid. Non-vegetated fraction drives the
    // night temperature hardest.
    let mut rng = stream_rng(seed, 0, P_CLIMATE);
    let per = spec.coarse_factor;
    let mut frac = vec![0.0; coarse.len()];
    let mut count = vec![0usize; coarse.len()];
    for i in 0..n {
        let (r, c) = target.row_col(i);
        let j = coarse.index(r / per, c / per);
        frac[j] += nonveg[i];
        count[j] += 1;
    }
    for (f, c) in frac.iter_mut().zip(&count) {
        *f /= (*c).max(1) as f64;
    }
    let smooth = |rng: &mut ChaCha8Rng| {
        let noise = ValueNoise::new(rng, &target, 5000.0);
        let raw: Vec<f64> = (0..coarse.len())
            .map(|j| {
                let (r, c) = coarse.row_col(j);
                let (x, y) = coarse.cell_center(r, c);
                noise.at(x, y)
            })
            .collect();
        let m = raw.iter().sum::<f64>() / raw.len() as f64;
        let sd = (raw.iter().map(|v| (v - m).powi(2)).sum::<f64>() / raw.len() as f64)
            .sqrt()
            .max(1e-12);
        raw.into_iter().map(|v| (v - m) / sd).collect::<Vec<f64>>()
    };
    let (s_t, s_w, s_d, s_n) = (smooth(&mut rng), smooth(&mut rng), smooth(&mut rng), smooth(&mut rng));
    let coarse_grid = |name: &str, f: &dyn Fn(usize) -> f64| {
        Grid::new(name, coarse, (0..coarse.len()).map(f).collect()).expect("sized")
    };
    let t2 = coarse_grid("T2", &|j| 31.0 + 1.2 * s_t[j] + 0.4 * frac[j]);
    let ws = coarse_grid("WS", &|j| 3.5 + 0.8 * s_w[j]);
    let mut dlst = Vec::with_capacity(spec.n_lst_dates);
    let mut nlst = Vec::with_capacity(spec.n_lst_dates);
    for d in 0..spec.n_lst_dates {
        let e: Vec<f64> = (0..coarse.len()).map(|_| normal(&mut rng)).collect();
        dlst.push(coarse_grid(&format!("DLST_{}", d + 1), &|j| {
            42.0 + 1.2 * s_d[j] + 0.5 * frac[j] + 0.4 * e[j]
        }));
        let e: Vec<f64> = (0..coarse.len()).map(|_| normal(&mut rng)).collect();
        nlst.push(coarse_grid(&format!("NLST_{}", d + 1), &|j| {
            24.0 + 3.0 * frac[j] + 0.4 * s_n[j] + 0.3 * e[j]
        }));
    }

    // Reflectance bands on the fine grid.
    let mut rng = stream_rng(seed, 0, P_BANDS);
    let vigor = ValueNoise::new(&mut rng, &target, 800.0);
    let ff = spec.fine_factor;
    let mut band_values = vec![Vec::with_capacity(fine.len()); 4];
    for i in 0..fine.len() {
        let (r, c) = fine.row_col(i);
        let parent = target.index(r / ff, c / ff);
        let (x, y) = fine.cell_center(r, c);
        let g = vigor.at(x, y);
        let mut e = [0.0; 4];
        for v in &mut e {
            *v = normal(&mut rng);
        }
        let vals = if nonveg[parent] == 0.0 {
            [
                0.04 + 0.005 * e[0],
                0.05 + 0.01 * g + 0.01 * e[1],
                0.32 + 0.04 * g + 0.02 * e[2],
                0.16 + 0.02 * e[3],
            ]
        } else {
            [
                0.11 + 0.01 * e[0],
                0.17 + 0.02 * e[1],
                0.24 + 0.02 * e[2],
                0.27 + 0.02 * e[3],
            ]
        };
        for (b, v) in band_values.iter_mut().zip(vals) {
            b.push(v.max(0.005));
        }
    }
    let bands: Vec<Grid> = BANDS
        .iter()
        .zip(band_values)
        .map(|(name, v)| Grid::new(*name, fine, v).expect("sized"))
        .collect();
    let ndvi_fine = ndvi(&bands[2], &bands[1]).expect("aligned bands");

    // District attributes. Copies are filled in after the hub is known.
    let planted: Vec<(&str, &str, f64, f64)> = REDUNDANT[..spec.n_redundant].to_vec();
    let is_copy = |name: &str| planted.iter().any(|p| p.0 == name);
    let mut rng = stream_rng(seed, 0, P_DISTRICTS);
    let nd = cells.len();
    let mut dweight = vec![0.0; nd];
    for (d, wt) in district_of.iter().zip(&weights) {
        dweight[*d] += wt;
    }
    let dw = Weights::new(&dweight);
    let centroids: Vec<Pt> = cells
        .iter()
        .map(|c| {
            let k = c.len() as f64;
            (
                c.iter().map(|p| p.0).sum::<f64>() / k,
                c.iter().map(|p| p.1).sum::<f64>() / k,
            )
        })
        .collect();
    let mut district_values: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut accepted: Vec<Vec<f64>> = Vec::new();
    for &(name, mean, sd) in &DISTRICT_ATTRS {
        if is_copy(name) {
            continue;
        }
        let mut best: Option<(f64, Vec<f64>)> = None;
        for _ in 0..200 {
            let noise = ValueNoise::new(&mut rng, &target, 6000.0);
            let raw: Vec<f64> = centroids
                .iter()
                .map(|&(x, y)| 0.6 * noise.at(x, y) + 0.8 * normal(&mut rng))
                .collect();
            let z = dw.standardize(&raw);
            let worst = accepted
                .iter()
                .map(|a| dw.corr(a, &z).abs())
                .fold(0.0, f64::max);
            if best.as_ref().is_none_or(|b| worst < b.0) {
                best = Some((worst, z));
            }
            if worst <= ATTRIBUTE_MAX_CORR {
                break;
            }
        }
        let (_, z) = best.expect("at least one draw");
        district_values.insert(name, z.iter().map(|v| mean + sd * v).collect());
        accepted.push(z);
    }

    // Standardized base features over the city cells, as the pipeline will
    // see them on the target grid.
    let to_target = |g: &Grid| resample_nearest(g, &target);
    let at_city = |g: &Grid| -> Vec<f64> { city.iter().map(|&i| g.values()[i]).collect() };
    let mean_of = |gs: &[Grid]| -> Grid {
        crate::raster::temporal_mean(gs, "m").expect("aligned composites")
    };
    let dlst_mean = mean_of(&dlst);
    let nlst_mean = mean_of(&nlst);
    let ndvi_t = at_city(&to_target(&ndvi_fine));
    let nlst_t = at_city(&to_target(&nlst_mean));
    let dlst_t = at_city(&to_target(&dlst_mean));
    let mut feats = Features {
        names: Vec::new(),
        z: Vec::new(),
    };
    feats.push("NDVI", w.standardize(&ndvi_t));
    feats.push("T2", w.standardize(&at_city(&to_target(&t2))));
    feats.push("WS", w.standardize(&at_city(&to_target(&ws))));
    feats.push("DLST", w.standardize(&dlst_t));
    feats.push("NLST", w.standardize(&nlst_t));
    let diff: Vec<f64> = dlst_t.iter().zip(&nlst_t).map(|(d, n)| (d - n).abs()).collect();
    feats.push("DIFFLST", w.standardize(&diff));
    for (name, vals) in &district_values {
        let per_cell: Vec<f64> = district_of.iter().map(|&d| vals[d]).collect();
        feats.push(name, w.standardize(&per_cell));
    }

    // Unplanted spectral layers are independent smooth fields.
    let mut rng = stream_rng(seed, 0, P_COPIES);
    let mut rasters: Vec<Grid> = Vec::new();
    let ndvi_stats = {
        let m = w.mean(&ndvi_t);
        let var = ndvi_t
            .iter()
            .zip(&weights)
            .map(|(v, wt)| wt * (v - m).powi(2))
            .sum::<f64>()
            / w.total;
        (m, var.sqrt().max(1e-12))
    };
    let mut hub_target = vec![0.0; n];
    if planted.iter().any(|p| p.1 == "NDVI") {
        for (&i, h) in city.iter().zip(feats.hub("NDVI", &w)) {
            hub_target[i] = h;
        }
    }
    for name in SPECTRAL_COPIES {
        let values: Vec<f64> = match planted.iter().find(|p| p.0 == name) {
            Some(&(_, _, a, b)) => (0..fine.len())
                .map(|i| {
                    let (r, c) = fine.row_col(i);
                    let z = (ndvi_fine.values()[i] - ndvi_stats.0) / ndvi_stats.1;
                    let h = hub_target[target.index(r / ff, c / ff)];
                    a * (z + HUB_WEIGHT * h + COPY_NOISE * normal(&mut rng)) + b
                })
                .collect(),
            None => {
                let noise = ValueNoise::new(&mut rng, &target, 2500.0);
                (0..fine.len())
                    .map(|i| {
                        let (r, c) = fine.row_col(i);
                        let (x, y) = fine.cell_center(r, c);
                        0.3 + 0.1 * noise.at(x, y) + 0.02 * normal(&mut rng)
                    })
                    .collect()
            }
        };
        rasters.push(Grid::new(name, fine, values).expect("sized"));
    }
    rasters.push(t2.clone());
    rasters.push(ws);

    for &(name, base, a, b) in planted.iter().filter(|p| p.1 != "NDVI") {
        let hub = feats.hub(base, &w);
        let mut hub_sum = vec![0.0; nd];
        for ((d, h), wt) in district_of.iter().zip(&hub).zip(&weights) {
            hub_sum[*d] += h * wt;
        }
        let base_z = dw.standardize(&district_values[base]);
        let vals: Vec<f64> = (0..nd)
            .map(|d| {
                let h = if dweight[d] > 0.0 { hub_sum[d] / dweight[d] } else { 0.0 };
                a * (base_z[d] + HUB_WEIGHT * h + COPY_NOISE * normal(&mut rng)) + b
            })
            .collect();
        district_values.insert(name, vals);
    }
    let zones = ZoneSet::new(
        cells
            .iter()
            .enumerate()
            .map(|(d, c)| Zone {
                rings: vec![closed(c)],
                attributes: DISTRICT_ATTRS
                    .iter()
                    .map(|(name, ..)| (name.to_string(), district_values[name][d]))
                    .collect(),
            })
            .collect(),
    )
    .map_err(|e| SynthError::InvalidSpec(e.to_string()))?;

    // Stations: independent daily Gaussian fields with the generative
    // variogram around a daily mean.
    let mut rng = stream_rng(seed, 0, P_STATIONS);
    let vg = spec.variogram;
    let spots = random_points(&mut rng, &boundary, bbox, spec.n_stations, 500.0);
    let ns = spots.len();
    let mut cov = vec![0.0; ns * ns];
    for i in 0..ns {
        for j in 0..ns {
            let h = (spots[i].0 - spots[j].0).hypot(spots[i].1 - spots[j].1);
            cov[i * ns + j] = vg.covariance(h);
        }
    }
    let chol = cholesky(ns, &cov).map_err(|e| SynthError::InvalidSpec(e.to_string()))?;
    let mut pm25 = Vec::new();
    for d in 0..spec.n_days {
        let date = spec.start_date + chrono::Duration::days(d as i64);
        let mu = 35.0 + 6.0 * normal(&mut rng);
        let e: Vec<f64> = (0..ns).map(|_| normal(&mut rng)).collect();
        let mut order: Vec<usize> = (0..ns).collect();
        order.shuffle(&mut rng);
        // Some days lose stations: every sixth day keeps too few to krige,
        // another keeps exactly ten.
        let keep = match d % 6 {
            5 => 8,
            2 => 10,
            _ => ns,
        };
        let mut kept = order[..keep].to_vec();
        kept.sort_unstable();
        for i in kept {
            let v: f64 = (0..=i).map(|k| chol[i * ns + k] * e[k]).sum();
            pm25.push(Observation {
                station_id: format!("PM{:02}", i + 1),
                x: spots[i].0,
                y: spots[i].1,
                date,
                value: mu + v,
            });
        }
    }
    let t2_spots = random_points(&mut rng, &boundary, bbox, spec.n_validation_stations, 500.0);
    let t2_stations = t2_spots
        .iter()
        .enumerate()
        .map(|(i, &(x, y))| Observation {
            station_id: format!("T2_{:02}", i + 1),
            x,
            y,
            date: spec.start_date,
            value: t2.sample(x, y).unwrap_or(31.0) + 0.25 * normal(&mut rng),
        })
        .collect();

    // Samples: stratified without replacement, then balanced label flips so
    // class counts stay as specified.
    let mut rng = stream_rng(seed, 0, P_SAMPLES);
    let mut samples = Vec::with_capacity(spec.n_samples());
    for class in 0..2usize {
        let pool: Vec<usize> = city
            .iter()
            .copied()
            .filter(|&i| nonveg[i] as usize == class)
            .collect();
        let picks = rand::seq::index::sample(&mut rng, pool.len(), spec.class_counts[class]);
        let mut picks: Vec<usize> = picks.into_iter().map(|k| pool[k]).collect();
        picks.sort_unstable();
        for i in picks {
            let (r, c) = target.row_col(i);
            let x = target.x_origin + (c as f64 + rng.random_range(0.05..0.95)) * target.cell_size;
            let y = target.y_origin + (r as f64 + rng.random_range(0.05..0.95)) * target.cell_size;
            samples.push(LabeledPoint { x, y, label: class as u8 });
        }
    }
    let flips = (spec.label_noise * spec.n_samples() as f64 / 2.0).floor() as usize;
    let [n0, n1] = spec.class_counts;
    for k in rand::seq::index::sample(&mut rng, n0, flips.min(n0)) {
        samples[k].label = 1;
    }
    for k in rand::seq::index::sample(&mut rng, n1, flips.min(n1)) {
        samples[n0 + k].label = 0;
    }
    samples.shuffle(&mut rng);

    // Ground truth.
    let veg_mask = Grid::new(
        "vegetation_mask",
        target,
        (0..n).map(|i| if in_city[i] { nonveg[i] } else { nodata }).collect(),
    )
    .expect("sized");
    let crit_z = |name: &str| -> Vec<f64> {
        let k = feats.names.iter().position(|n| n == name).expect("feature exists");
        feats.z[k].clone()
    };
    let (zn, zt, zp, zg) = (crit_z("NLST"), crit_z("T2"), crit_z("SP"), crit_z("GA"));
    let raw: Vec<f64> = (0..city.len())
        .map(|k| 0.55 * zn[k] + 0.2 * zt[k] + 0.15 * zp[k] - 0.1 * zg[k])
        .collect();
    let nonveg_raw = city.iter().zip(&raw).filter(|(&i, _)| nonveg[i] == 1.0);
    let (lo, hi) = nonveg_raw.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (_, &v)| {
        (lo.min(v), hi.max(v))
    });
    let mut crit = vec![nodata; n];
    for (&i, &v) in city.iter().zip(&raw) {
        crit[i] = if nonveg[i] == 0.0 {
            0.0
        } else if hi > lo {
            (v - lo) / (hi - lo)
        } else {
            0.5
        };
    }
    let criticality = Grid::new("criticality", target, crit).expect("sized");

    Ok(Scenario {
        spec: spec.clone(),
        target,
        zones,
        bands,
        rasters,
        dlst,
        nlst,
        pm25,
        t2_stations,
        samples,
        planted: planted
            .iter()
            .map(|p| (p.0.to_string(), p.1.to_string()))
            .collect(),
        truth: GroundTruth {
            vegetation_mask: veg_mask,
            criticality,
            variogram: vg,
        },
    })
}

// ---------------------------------------------------------------------------
// Bundle layout

const DISTRICTS_FILE: &str = "districts.geojson";
const STATIONS_FILE: &str = "stations_pm25.csv";
const T2_STATIONS_FILE: &str = "stations_t2.csv";
const SAMPLES_FILE: &str = "samples.csv";
pub const CONFIG_FILE: &str = "config.json";
pub const MANIFEST_FILE: &str = "manifest.json";

fn band_path(name: &str) -> PathBuf {
    PathBuf::from("bands").join(format!("{name}.asc"))
}

fn layer_path(name: &str) -> PathBuf {
    PathBuf::from("layers").join(format!("{name}.asc"))
}

fn lst_path(g: &Grid) -> PathBuf {
    PathBuf::from("lst").join(format!("{}.asc", g.name))
}

impl Scenario {
    /// The pipeline configuration for this bundle, with paths relative to
    /// the bundle directory.
    pub fn pipeline_config(&self) -> PipelineConfig {
        let grid = |name: &str, paths: Vec<PathBuf>, feature: bool| LayerSpec::Grid {
            name: name.to_string(),
            paths,
            feature,
        };
        let mut layers: Vec<LayerSpec> = BANDS
            .iter()
            .map(|b| grid(b, vec![band_path(b)], false))
            .collect();
        layers.push(LayerSpec::Index {
            name: "NDVI".into(),
            index: SpectralIndex::Ndvi,
            feature: true,
        });
        for r in &self.rasters {
            layers.push(grid(&r.name, vec![layer_path(&r.name)], true));
        }
        layers.push(grid("DLST", self.dlst.iter().map(lst_path).collect(), true));
        layers.push(grid("NLST", self.nlst.iter().map(lst_path).collect(), true));
        layers.push(LayerSpec::LstDifference {
            name: "DIFFLST".into(),
            day: "DLST".into(),
            night: "NLST".into(),
            feature: true,
        });
        layers.push(LayerSpec::Stations {
            name: "PM25".into(),
            path: STATIONS_FILE.into(),
            kriging: Default::default(),
            feature: true,
        });
        for (name, ..) in DISTRICT_ATTRS {
            layers.push(LayerSpec::Zones {
                name: name.into(),
                path: DISTRICTS_FILE.into(),
                attribute: None,
                subsamples: 4,
                feature: true,
            });
        }
        let mut cfg = PipelineConfig::new(self.target, layers, SAMPLES_FILE.into());
        cfg.band_roles = BandRoles {
            blue: Some("BLUE".into()),
            red: Some("RED".into()),
            nir: Some("NIR".into()),
            swir1: Some("SWIR1".into()),
        };
        cfg.seed = self.spec.seed;
        cfg.validation = vec![ValidationSpec {
            name: "T2".into(),
            grid: "T2".into(),
            stations: T2_STATIONS_FILE.into(),
        }];
        cfg
    }

    pub fn manifest(&self) -> Manifest {
        let target_res = self.target.cell_size;
        let res = |g: &Grid| g.georef.cell_size;
        let layer = |name: &str, role: &str, resolution: f64, rule: &str, files: Vec<PathBuf>| {
            ManifestLayer {
                name: name.into(),
                role: role.into(),
                resolution,
                rule: rule.into(),
                files,
            }
        };
        let mut layers: Vec<ManifestLayer> = self
            .bands
            .iter()
            .map(|b| layer(&b.name, "band", res(b), "nearest", vec![band_path(&b.name)]))
            .collect();
        layers.push(layer("NDVI", "feature", res(&self.bands[0]), "index", vec![]));
        for r in &self.rasters {
            layers.push(layer(&r.name, "feature", res(r), "nearest", vec![layer_path(&r.name)]));
        }
        let lst_res = res(&self.dlst[0]);
        layers.push(layer(
            "DLST",
            "feature",
            lst_res,
            "nearest, mean of dates",
            self.dlst.iter().map(lst_path).collect(),
        ));
        layers.push(layer(
            "NLST",
            "feature",
            lst_res,
            "nearest, mean of dates",
            self.nlst.iter().map(lst_path).collect(),
        ));
        layers.push(layer("DIFFLST", "feature", lst_res, "lst difference", vec![]));
        layers.push(layer("PM25", "feature", 0.0, "kriging", vec![STATIONS_FILE.into()]));
        for (name, ..) in DISTRICT_ATTRS {
            layers.push(layer(name, "feature", 0.0, "maximum area", vec![DISTRICTS_FILE.into()]));
        }
        for gt in ["vegetation_mask", "criticality"] {
            layers.push(layer(
                gt,
                "ground_truth",
                target_res,
                "none",
                vec![PathBuf::from("ground_truth").join(format!("{gt}.asc"))],
            ));
        }
        Manifest {
            name: format!("synthetic-city-{}", self.spec.seed),
            spec: self.spec.clone(),
            layers,
            planted: self
                .planted
                .iter()
                .map(|(c, b)| PlantedPair {
                    copy: c.clone(),
                    base: b.clone(),
                })
                .collect(),
            expected_kept: FEATURE_COUNT - self.planted.len(),
            samples: SAMPLES_FILE.into(),
            stations: STATIONS_FILE.into(),
            validation_stations: T2_STATIONS_FILE.into(),
            config: CONFIG_FILE.into(),
        }
    }

    pub fn write_bundle(&self, dir: &Path) -> Result<Manifest, SynthError> {
        for b in &self.bands {
            io::write_grid(b, &dir.join(band_path(&b.name)))?;
        }
        for r in &self.rasters {
            io::write_grid(r, &dir.join(layer_path(&r.name)))?;
        }
        for g in self.dlst.iter().chain(&self.nlst) {
            io::write_grid(g, &dir.join(lst_path(g)))?;
        }
        io::write_zones(&self.zones, &dir.join(DISTRICTS_FILE))?;
        io::write_observations(&dir.join(STATIONS_FILE), &self.pm25)?;
        io::write_observations(&dir.join(T2_STATIONS_FILE), &self.t2_stations)?;
        io::write_samples(&dir.join(SAMPLES_FILE), &self.samples)?;
        let gt = dir.join("ground_truth");
        io::write_grid(&self.truth.vegetation_mask, &gt.join("vegetation_mask.asc"))?;
        io::write_grid(&self.truth.criticality, &gt.join("criticality.asc"))?;
        io::write_json(&gt.join("variogram.json"), &self.truth.variogram)?;
        io::write_json(&dir.join(CONFIG_FILE), &self.pipeline_config())?;
        let manifest = self.manifest();
        io::write_json(&dir.join(MANIFEST_FILE), &manifest)?;
        Ok(manifest)
    }
}

/// Builds the scenario and writes its bundle under `dir`.
pub fn generate_scenario(spec: &ScenarioSpec, dir: &Path) -> Result<(Manifest, GroundTruth), SynthError> {
    let scenario = build_scenario(spec)?;
    let manifest = scenario.write_bundle(dir)?;
    Ok((manifest, scenario.truth))
}
