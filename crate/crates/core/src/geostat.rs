//! Station interpolation by simple kriging with a spherical semivariogram.
//!
//! The daily workflow is: drop days with too few reporting stations, estimate
//! an empirical semivariogram, fit a spherical model, pick the best of a small
//! candidate grid around the fit by leave-one-out cross-validation, krige the
//! day onto the target lattice, and finally average all daily grids.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{LinalgError, Lu};
use crate::raster::{temporal_mean, Grid, GridGeoref, RasterError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeostatError {
    #[error("need at least {need} stations, got {got}")]
    TooFewStations { need: usize, got: usize },
    #[error("invalid variogram: {0}")]
    InvalidVariogram(String),
    #[error("kriging system is singular (duplicate station coordinates?): {0}")]
    SingularSystem(#[from] LinalgError),
    #[error("empirical semivariogram has no non-empty bins")]
    NoBins,
    #[error("observations span several dates; expected one")]
    MixedDates,
    #[error("duplicate observation for station '{station}' on {date}")]
    DuplicateObservation { station: String, date: NaiveDate },
    #[error("non-finite value for station '{0}'")]
    NonFiniteValue(String),
    #[error("every variogram candidate was disqualified by cross-validation")]
    AllCandidatesDisqualified,
    #[error("no observation falls on a valid grid cell")]
    NoComparablePoints,
    #[error("no day retains enough stations")]
    NoRetainedDays,
    #[error(transparent)]
    Raster(#[from] RasterError),
}

/// One station reading.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub station_id: String,
    pub x: f64,
    pub y: f64,
    pub date: NaiveDate,
    pub value: f64,
}

/// Checks value finiteness and `(station_id, date)` uniqueness.
pub fn check_observations(obs: &[Observation]) -> Result<(), GeostatError> {
    let mut seen = HashSet::new();
    for o in obs {
        if !o.value.is_finite() || !o.x.is_finite() || !o.y.is_finite() {
            return Err(GeostatError::NonFiniteValue(o.station_id.clone()));
        }
        if !seen.insert((o.station_id.as_str(), o.date)) {
            return Err(GeostatError::DuplicateObservation {
                station: o.station_id.clone(),
                date: o.date,
            });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SphericalVariogram {
    pub nugget: f64,
    pub sill: f64,
    pub range: f64,
}

impl SphericalVariogram {
    pub fn new(nugget: f64, sill: f64, range: f64) -> Result<Self, GeostatError> {
        let v = SphericalVariogram { nugget, sill, range };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<(), GeostatError> {
        let ok = self.nugget.is_finite()
            && self.sill.is_finite()
            && self.range.is_finite()
            && self.nugget >= 0.0
            && self.sill >= self.nugget
            && self.range > 0.0;
        if ok {
            Ok(())
        } else {
            Err(GeostatError::InvalidVariogram(format!(
                "need 0 <= nugget <= sill and range > 0, got {self:?}"
            )))
        }
    }

    pub fn gamma(&self, h: f64) -> f64 {
        spherical_gamma(self, h)
    }

    /// Covariance `C(h) = sill - gamma(h)`.
    pub fn covariance(&self, h: f64) -> f64 {
        self.sill - spherical_gamma(self, h)
    }
}

pub fn spherical_gamma(v: &SphericalVariogram, h: f64) -> f64 {
    if h <= 0.0 {
        return 0.0;
    }
    if h > v.range {
        return v.sill;
    }
    let r = h / v.range;
    v.nugget + (v.sill - v.nugget) * (1.5 * r - 0.5 * r * r * r)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VariogramBin {
    pub lag_center: f64,
    pub gamma: f64,
    pub pair_count: usize,
}

fn distance(ax: f64, ay: f64, bx: f64, by: f64) -> f64 {
    (ax - bx).hypot(ay - by)
}

/// Matheron estimator over `n_bins` equal-width bins up to `max_lag`.
/// Pairs farther apart than `max_lag` are ignored; empty bins are omitted.
pub fn empirical_semivariogram(
    obs: &[Observation],
    n_bins: usize,
    max_lag: f64,
) -> Result<Vec<VariogramBin>, GeostatError> {
    if obs.len() < 2 {
        return Err(GeostatError::TooFewStations {
            need: 2,
            got: obs.len(),
        });
    }
    let n_bins = n_bins.max(1);
    let width = max_lag / n_bins as f64;
    let mut sums = vec![0.0; n_bins];
    let mut counts = vec![0usize; n_bins];
    // Accumulate in a canonical pair order so the result does not depend on
    // the input order of the observations.
    let mut sorted: Vec<&Observation> = obs.iter().collect();
    sorted.sort_by(|a, b| {
        (a.x, a.y, a.value)
            .partial_cmp(&(b.x, b.y, b.value))
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    for i in 0..sorted.len() {
        for j in i + 1..sorted.len() {
            let (a, b) = (sorted[i], sorted[j]);
            let d = distance(a.x, a.y, b.x, b.y);
            if d > max_lag {
                continue;
            }
            let k = ((d / width).floor() as usize).min(n_bins - 1);
            let diff = a.value - b.value;
            sums[k] += diff * diff;
            counts[k] += 1;
        }
    }
    Ok((0..n_bins)
        .filter(|&k| counts[k] > 0)
        .map(|k| VariogramBin {
            lag_center: (k as f64 + 0.5) * width,
            gamma: sums[k] / (2.0 * counts[k] as f64),
            pair_count: counts[k],
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VariogramFit {
    pub variogram: SphericalVariogram,
    /// All empirical gammas were zero; the returned model is a placeholder.
    pub degenerate: bool,
    pub weighted_sse: f64,
}

/// Sill placeholder used when the empirical semivariogram is identically zero.
pub const DEGENERATE_SILL: f64 = 1e-12;

fn weighted_sse(bins: &[VariogramBin], v: &SphericalVariogram) -> f64 {
    bins.iter()
        .map(|b| {
            let e = spherical_gamma(v, b.lag_center) - b.gamma;
            b.pair_count as f64 * e * e
        })
        .sum()
}

/// Best non-negative `(nugget, partial sill)` for a fixed range; the model is
/// linear in both.
fn fit_linear_part(bins: &[VariogramBin], range: f64) -> (f64, f64) {
    let shape = |h: f64| {
        let r = (h / range).min(1.0);
        1.5 * r - 0.5 * r * r * r
    };
    let (mut sw, mut ss, mut sss, mut sg, mut ssg) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for b in bins {
        let w = b.pair_count as f64;
        let s = shape(b.lag_center);
        sw += w;
        ss += w * s;
        sss += w * s * s;
        sg += w * b.gamma;
        ssg += w * s * b.gamma;
    }
    let sse = |a: f64, p: f64| -> f64 {
        bins.iter()
            .map(|b| {
                let e = a + p * shape(b.lag_center) - b.gamma;
                b.pair_count as f64 * e * e
            })
            .sum()
    };
    let mut candidates = vec![(sg / sw, 0.0)];
    if sss > 0.0 {
        candidates.push((0.0, (ssg / sss).max(0.0)));
    }
    let det = sw * sss - ss * ss;
    if det.abs() > 1e-14 * sw * sss.max(f64::MIN_POSITIVE) {
        let a = (sss * sg - ss * ssg) / det;
        let p = (sw * ssg - ss * sg) / det;
        if a >= 0.0 && p >= 0.0 {
            candidates.push((a, p));
        }
    }
    candidates
        .into_iter()
        .map(|(a, p)| (a.max(0.0), p.max(0.0)))
        .min_by(|x, y| sse(x.0, x.1).total_cmp(&sse(y.0, y.1)))
        .expect("at least one candidate")
}

/// Fits a spherical model by pair-count weighted least squares.
///
/// Block coordinate descent: the (nugget, sill) block is solved exactly for a
/// given range, and the range is refined by a log-spaced scan followed by
/// golden-section search. With fewer than three bins only a plateau sill is
/// fitted, with the range pulled inside the smallest lag.
pub fn fit_variogram(
    empirical: &[VariogramBin],
    initial: &SphericalVariogram,
) -> Result<VariogramFit, GeostatError> {
    if empirical.is_empty() {
        return Err(GeostatError::NoBins);
    }
    let max_lag = empirical
        .iter()
        .map(|b| b.lag_center)
        .fold(f64::NEG_INFINITY, f64::max);
    let min_lag = empirical
        .iter()
        .map(|b| b.lag_center)
        .fold(f64::INFINITY, f64::min);
    if empirical.iter().all(|b| b.gamma == 0.0) {
        let variogram = SphericalVariogram {
            nugget: 0.0,
            sill: DEGENERATE_SILL,
            range: max_lag.max(f64::MIN_POSITIVE),
        };
        return Ok(VariogramFit {
            variogram,
            degenerate: true,
            weighted_sse: 0.0,
        });
    }
    if empirical.len() < 3 {
        let total: f64 = empirical.iter().map(|b| b.pair_count as f64).sum();
        let sill = empirical
            .iter()
            .map(|b| b.pair_count as f64 * b.gamma)
            .sum::<f64>()
            / total;
        let variogram = SphericalVariogram {
            nugget: initial.nugget.clamp(0.0, sill),
            sill,
            range: initial.range.min(min_lag).max(f64::MIN_POSITIVE),
        };
        return Ok(VariogramFit {
            weighted_sse: weighted_sse(empirical, &variogram),
            variogram,
            degenerate: false,
        });
    }

    let model_at = |range: f64| {
        let (nugget, psill) = fit_linear_part(empirical, range);
        SphericalVariogram {
            nugget,
            sill: nugget + psill,
            range,
        }
    };
    let objective = |log_range: f64| weighted_sse(empirical, &model_at(log_range.exp()));

    let lo = (min_lag * 0.25).ln();
    let hi = (max_lag * 4.0).max(initial.range).ln();
    const SCAN: usize = 400;
    let step = (hi - lo) / SCAN as f64;
    let mut best_t = initial.range.ln().clamp(lo, hi);
    let mut best_f = objective(best_t);
    for i in 0..=SCAN {
        let t = lo + i as f64 * step;
        let f = objective(t);
        if f < best_f {
            best_f = f;
            best_t = t;
        }
    }
    // Golden-section refinement around the best scan point.
    let (mut a, mut b) = ((best_t - step).max(lo), (best_t + step).min(hi));
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (objective(c), objective(d));
    for _ in 0..100 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = objective(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = objective(d);
        }
    }
    let t = 0.5 * (a + b);
    let refined = objective(t);
    if refined < best_f {
        best_t = t;
    }
    let variogram = model_at(best_t.exp());
    Ok(VariogramFit {
        weighted_sse: weighted_sse(empirical, &variogram),
        variogram,
        degenerate: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KrigingPrediction {
    pub estimate: f64,
    pub variance: f64,
}

/// A factored simple-kriging system for one station set.
#[derive(Debug, Clone)]
pub struct SimpleKriging {
    sites: Vec<(f64, f64)>,
    values: Vec<f64>,
    variogram: SphericalVariogram,
    lu: Lu,
}

impl SimpleKriging {
    pub fn new(obs: &[Observation], variogram: SphericalVariogram) -> Result<Self, GeostatError> {
        if obs.is_empty() {
            return Err(GeostatError::TooFewStations { need: 1, got: 0 });
        }
        variogram.validate()?;
        let n = obs.len();
        let mut c = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let h = distance(obs[i].x, obs[i].y, obs[j].x, obs[j].y);
                c[i * n + j] = variogram.covariance(h);
            }
        }
        let lu = Lu::factor(n, c)?;
        Ok(SimpleKriging {
            sites: obs.iter().map(|o| (o.x, o.y)).collect(),
            values: obs.iter().map(|o| o.value).collect(),
            variogram,
            lu,
        })
    }

    pub fn weights(&self, x: f64, y: f64) -> (Vec<f64>, Vec<f64>) {
        let c: Vec<f64> = self
            .sites
            .iter()
            .map(|&(sx, sy)| self.variogram.covariance(distance(sx, sy, x, y)))
            .collect();
        (self.lu.solve(&c), c)
    }

    /// Prediction plus the raw (unclamped) kriging variance.
    pub fn predict_raw(&self, known_mean: f64, x: f64, y: f64) -> KrigingPrediction {
        let (lambda, c) = self.weights(x, y);
        let mut estimate = known_mean;
        let mut explained = 0.0;
        for i in 0..lambda.len() {
            estimate += lambda[i] * (self.values[i] - known_mean);
            explained += lambda[i] * c[i];
        }
        KrigingPrediction {
            estimate,
            variance: self.variogram.sill - explained,
        }
    }

    /// Estimate only, via the dual form `μ + c(x)ᵀ C⁻¹ (z − μ)`; `dual` comes
    /// from [`SimpleKriging::dual`]. One dot product per point instead of a
    /// solve.
    pub fn estimate_dual(&self, known_mean: f64, dual: &[f64], x: f64, y: f64) -> f64 {
        known_mean
            + self
                .sites
                .iter()
                .zip(dual)
                .map(|(&(sx, sy), a)| a * self.variogram.covariance(distance(sx, sy, x, y)))
                .sum::<f64>()
    }

    pub fn dual(&self, known_mean: f64) -> Vec<f64> {
        let r: Vec<f64> = self.values.iter().map(|v| v - known_mean).collect();
        self.lu.solve(&r)
    }

    /// Prediction with the variance clamped at zero.
    pub fn predict(&self, known_mean: f64, x: f64, y: f64) -> KrigingPrediction {
        let mut p = self.predict_raw(known_mean, x, y);
        p.variance = p.variance.max(0.0);
        p
    }
}

pub fn simple_kriging_predict(
    obs: &[Observation],
    v: &SphericalVariogram,
    known_mean: f64,
    target: (f64, f64),
) -> Result<KrigingPrediction, GeostatError> {
    Ok(SimpleKriging::new(obs, *v)?.predict(known_mean, target.0, target.1))
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    s / n as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossValidation {
    pub best: SphericalVariogram,
    pub best_index: usize,
    /// Leave-one-out RMSE per candidate; disqualified candidates score +inf.
    pub scores: Vec<f64>,
    pub skipped_folds: Vec<usize>,
}

/// Leave-one-out selection among variogram candidates. Each held-out station
/// is predicted from the rest with the mean of the rest as the known mean.
/// Singular folds are skipped; a candidate skipping more than half of its
/// folds is disqualified. Ties go to the earlier candidate.
pub fn cross_validate_variogram(
    obs: &[Observation],
    candidates: &[SphericalVariogram],
) -> Result<CrossValidation, GeostatError> {
    if obs.len() < 3 {
        return Err(GeostatError::TooFewStations {
            need: 3,
            got: obs.len(),
        });
    }
    if candidates.is_empty() {
        return Err(GeostatError::InvalidVariogram("no candidates".into()));
    }
    let n = obs.len();
    let mut scores = Vec::with_capacity(candidates.len());
    let mut skipped_folds = Vec::with_capacity(candidates.len());
    for v in candidates {
        v.validate()?;
        let mut sq = 0.0;
        let mut used = 0usize;
        let mut skipped = 0usize;
        for hold in 0..n {
            let rest: Vec<Observation> = obs
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != hold)
                .map(|(_, o)| o.clone())
                .collect();
            let known_mean = mean(rest.iter().map(|o| o.value));
            match SimpleKriging::new(&rest, *v) {
                Ok(k) => {
                    let p = k.predict(known_mean, obs[hold].x, obs[hold].y);
                    let e = p.estimate - obs[hold].value;
                    sq += e * e;
                    used += 1;
                }
                Err(GeostatError::SingularSystem(_)) => skipped += 1,
                Err(e) => return Err(e),
            }
        }
        let score = if skipped * 2 > n || used == 0 {
            f64::INFINITY
        } else {
            (sq / used as f64).sqrt()
        };
        scores.push(score);
        skipped_folds.push(skipped);
    }
    let mut best_index = None;
    for (i, &s) in scores.iter().enumerate() {
        if s.is_finite() && best_index.is_none_or(|b: usize| s < scores[b]) {
            best_index = Some(i);
        }
    }
    let best_index = best_index.ok_or(GeostatError::AllCandidatesDisqualified)?;
    Ok(CrossValidation {
        best: candidates[best_index],
        best_index,
        scores,
        skipped_folds,
    })
}

/// Candidate grid searched around a fitted model: nugget in {0, 10%, 25%} of
/// the sill crossed with range multipliers {0.5, 1, 1.5, 2}.
pub fn variogram_candidates(fitted: &SphericalVariogram) -> Vec<SphericalVariogram> {
    let s = fitted.sill;
    let mut out = Vec::with_capacity(12);
    for nugget_share in [0.0, 0.1, 0.25] {
        for range_mult in [0.5, 1.0, 1.5, 2.0] {
            out.push(SphericalVariogram {
                nugget: nugget_share * s,
                sill: s,
                range: range_mult * fitted.range,
            });
        }
    }
    out
}

/// Dates with at least `min_stations` distinct reporting stations, ascending.
pub fn filter_days(all_obs: &[Observation], min_stations: usize) -> Vec<NaiveDate> {
    let mut per_day: BTreeMap<NaiveDate, BTreeSet<&str>> = BTreeMap::new();
    for o in all_obs {
        per_day.entry(o.date).or_default().insert(o.station_id.as_str());
    }
    per_day
        .into_iter()
        .filter(|(_, stations)| stations.len() >= min_stations)
        .map(|(d, _)| d)
        .collect()
}

fn single_date(obs: &[Observation]) -> Result<NaiveDate, GeostatError> {
    let date = obs
        .first()
        .map(|o| o.date)
        .ok_or(GeostatError::TooFewStations { need: 1, got: 0 })?;
    if obs.iter().any(|o| o.date != date) {
        return Err(GeostatError::MixedDates);
    }
    Ok(date)
}

/// Kriged surface for one day, named `<prefix>_<date>`. The known mean is the
/// day's arithmetic mean.
pub fn krige_grid_named(
    obs: &[Observation],
    v: &SphericalVariogram,
    target: &GridGeoref,
    prefix: &str,
) -> Result<Grid, GeostatError> {
    if obs.len() < 2 {
        return Err(GeostatError::TooFewStations {
            need: 2,
            got: obs.len(),
        });
    }
    let date = single_date(obs)?;
    let system = SimpleKriging::new(obs, *v)?;
    let known_mean = mean(obs.iter().map(|o| o.value));
    let dual = system.dual(known_mean);
    Ok(Grid::from_fn(
        format!("{prefix}_{date}"),
        *target,
        |r, c| {
            let (x, y) = target.cell_center(r, c);
            system.estimate_dual(known_mean, &dual, x, y)
        },
    ))
}

pub fn krige_grid(
    obs: &[Observation],
    v: &SphericalVariogram,
    target: &GridGeoref,
) -> Result<Grid, GeostatError> {
    krige_grid_named(obs, v, target, "PM25")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub rmse: f64,
    pub mae: f64,
    pub bias: f64,
    pub n: usize,
}

/// Compares each observation with the grid cell containing it. Bias is
/// predicted minus observed.
pub fn validate_points(grid: &Grid, obs: &[Observation]) -> Result<ValidationReport, GeostatError> {
    let errors: Vec<f64> = obs
        .iter()
        .filter_map(|o| grid.sample(o.x, o.y).map(|p| p - o.value))
        .collect();
    if errors.is_empty() {
        return Err(GeostatError::NoComparablePoints);
    }
    let n = errors.len() as f64;
    let mse = errors.iter().map(|e| e * e).sum::<f64>() / n;
    let mae = errors.iter().map(|e| e.abs()).sum::<f64>() / n;
    let bias = errors.iter().sum::<f64>() / n;
    Ok(ValidationReport {
        // rmse >= mae >= |bias| holds exactly; rounding can break it by an ulp.
        rmse: mse.sqrt().max(mae).max(bias.abs()),
        mae: mae.max(bias.abs()),
        bias,
        n: errors.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KrigingSettings {
    pub min_stations: usize,
    pub n_bins: usize,
    /// Largest lag used for the empirical semivariogram; defaults to half the
    /// largest station separation of the day.
    pub max_lag: Option<f64>,
}

impl Default for KrigingSettings {
    fn default() -> Self {
        KrigingSettings {
            min_stations: 10,
            n_bins: 10,
            max_lag: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DaySummary {
    pub date: NaiveDate,
    pub stations: usize,
    pub fitted: SphericalVariogram,
    pub degenerate_fit: bool,
    pub selected: SphericalVariogram,
    pub cv_rmse: f64,
}

/// Fits, cross-validates and kriges a single day.
pub fn krige_day(
    day: &[Observation],
    settings: &KrigingSettings,
    target: &GridGeoref,
    prefix: &str,
) -> Result<(Grid, DaySummary), GeostatError> {
    let date = single_date(day)?;
    let max_pair = day
        .iter()
        .flat_map(|a| day.iter().map(move |b| distance(a.x, a.y, b.x, b.y)))
        .fold(0.0, f64::max);
    let max_lag = settings.max_lag.unwrap_or(0.5 * max_pair);
    let bins = empirical_semivariogram(day, settings.n_bins, max_lag)?;
    let m = mean(day.iter().map(|o| o.value));
    let variance = mean(day.iter().map(|o| (o.value - m).powi(2)));
    let initial = SphericalVariogram {
        nugget: 0.0,
        sill: variance.max(DEGENERATE_SILL),
        range: (0.5 * max_lag).max(f64::MIN_POSITIVE),
    };
    let fit = fit_variogram(&bins, &initial)?;
    let (selected, cv_rmse) = if fit.degenerate {
        (fit.variogram, 0.0)
    } else {
        let candidates = variogram_candidates(&fit.variogram);
        let cv = cross_validate_variogram(day, &candidates)?;
        (cv.best, cv.scores[cv.best_index])
    };
    let grid = krige_grid_named(day, &selected, target, prefix)?;
    Ok((
        grid,
        DaySummary {
            date,
            stations: day.len(),
            fitted: fit.variogram,
            degenerate_fit: fit.degenerate,
            selected,
            cv_rmse,
        },
    ))
}

/// Multi-day mean surface: every retained day is kriged with its own
/// cross-validated variogram and the daily grids are averaged.
pub fn mean_kriged_surface(
    all_obs: &[Observation],
    settings: &KrigingSettings,
    target: &GridGeoref,
    name: &str,
) -> Result<(Grid, Vec<DaySummary>), GeostatError> {
    check_observations(all_obs)?;
    let days = filter_days(all_obs, settings.min_stations);
    if days.is_empty() {
        return Err(GeostatError::NoRetainedDays);
    }
    let results: Vec<(Grid, DaySummary)> = days
        .iter()
        .map(|d| {
            let day: Vec<Observation> = all_obs.iter().filter(|o| o.date == *d).cloned().collect();
            krige_day(&day, settings, target, name)
        })
        .collect::<Result<_, _>>()?;
    let (grids, summaries): (Vec<Grid>, Vec<DaySummary>) = results.into_iter().unzip();
    Ok((temporal_mean(&grids, name)?, summaries))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn day() -> NaiveDate {
        NaiveDate::from_ymd_opt(2022, 7, 1).unwrap()
    }

    fn obs(id: &str, x: f64, y: f64, value: f64) -> Observation {
        Observation {
            station_id: id.into(),
            x,
            y,
            date: day(),
            value,
        }
    }

    fn random_obs(rng: &mut ChaCha8Rng, n: usize) -> Vec<Observation> {
        (0..n)
            .map(|i| {
                obs(
                    &format!("s{i}"),
                    rng.random_range(0.0..1000.0),
                    rng.random_range(0.0..1000.0),
                    rng.random_range(0.0..50.0),
                )
            })
            .collect()
    }

    #[test]
    fn gamma_values() {
        let v = SphericalVariogram::new(0.0, 1.0, 10.0).unwrap();
        assert_eq!(spherical_gamma(&v, 10.0), 1.0);
        assert_eq!(spherical_gamma(&v, 5.0), 0.6875);
        assert_eq!(spherical_gamma(&v, 25.0), 1.0);
        let n = SphericalVariogram::new(0.2, 1.0, 10.0).unwrap();
        assert_eq!(spherical_gamma(&n, 0.0), 0.0);
        assert!((spherical_gamma(&n, 1e-4) - 0.2).abs() < 1e-4);
    }

    #[test]
    fn variogram_invariants_enforced() {
        assert!(SphericalVariogram::new(-0.1, 1.0, 1.0).is_err());
        assert!(SphericalVariogram::new(2.0, 1.0, 1.0).is_err());
        assert!(SphericalVariogram::new(0.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn empirical_single_pair() {
        let o = vec![obs("a", 0.0, 0.0, 1.0), obs("b", 100.0, 0.0, 3.0)];
        let bins = empirical_semivariogram(&o, 1, 200.0).unwrap();
        assert_eq!(bins.len(), 1);
        assert_eq!(bins[0].gamma, 2.0);
        assert_eq!(bins[0].pair_count, 1);
    }

    #[test]
    fn empirical_constant_field_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut o = random_obs(&mut rng, 12);
        o.iter_mut().for_each(|x| x.value = 4.2);
        let bins = empirical_semivariogram(&o, 5, 1500.0).unwrap();
        assert!(!bins.is_empty());
        assert!(bins.iter().all(|b| b.gamma == 0.0));
    }

    #[test]
    fn empirical_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let o = random_obs(&mut rng, 5);
        let (n_bins, max_lag) = (4, 1500.0);
        let bins = empirical_semivariogram(&o, n_bins, max_lag).unwrap();
        let width = max_lag / n_bins as f64;
        for b in &bins {
            let lo = b.lag_center - width / 2.0;
            let hi = b.lag_center + width / 2.0;
            let mut sum = 0.0;
            let mut count = 0;
            for i in 0..o.len() {
                for j in 0..o.len() {
                    if i == j {
                        continue;
                    }
                    let d = ((o[i].x - o[j].x).powi(2) + (o[i].y - o[j].y).powi(2)).sqrt();
                    if d >= lo && (d < hi || (hi >= max_lag && d <= max_lag)) {
                        sum += (o[i].value - o[j].value).powi(2);
                        count += 1;
                    }
                }
            }
            // Ordered enumeration counts every pair twice.
            assert_eq!(b.pair_count * 2, count);
            assert!((b.gamma - sum / (2.0 * count as f64)).abs() < 1e-9);
        }
        assert_eq!(
            empirical_semivariogram(&o[..1], 4, 10.0),
            Err(GeostatError::TooFewStations { need: 2, got: 1 })
        );
    }

    #[test]
    fn fit_recovers_noise_free_model() {
        let truth = SphericalVariogram::new(0.3, 2.0, 450.0).unwrap();
        let bins: Vec<VariogramBin> = (0..12)
            .map(|k| {
                let h = 50.0 * (k as f64 + 0.5);
                VariogramBin {
                    lag_center: h,
                    gamma: spherical_gamma(&truth, h),
                    pair_count: 10 + k,
                }
            })
            .collect();
        let initial = SphericalVariogram::new(0.0, 1.0, 200.0).unwrap();
        let fit = fit_variogram(&bins, &initial).unwrap();
        assert!(!fit.degenerate);
        let v = fit.variogram;
        assert!((v.nugget - 0.3).abs() / 0.3 < 0.01, "{v:?}");
        assert!((v.sill - 2.0).abs() / 2.0 < 0.01, "{v:?}");
        assert!((v.range - 450.0).abs() / 450.0 < 0.01, "{v:?}");
    }

    #[test]
    fn fit_degenerate_and_single_bin() {
        let zero = vec![
            VariogramBin { lag_center: 10.0, gamma: 0.0, pair_count: 3 },
            VariogramBin { lag_center: 30.0, gamma: 0.0, pair_count: 3 },
            VariogramBin { lag_center: 50.0, gamma: 0.0, pair_count: 3 },
        ];
        let initial = SphericalVariogram::new(0.0, 1.0, 20.0).unwrap();
        let fit = fit_variogram(&zero, &initial).unwrap();
        assert!(fit.degenerate);
        assert_eq!(fit.variogram.nugget, 0.0);
        assert_eq!(fit.variogram.range, 50.0);

        let one = vec![VariogramBin { lag_center: 40.0, gamma: 2.5, pair_count: 4 }];
        let fit = fit_variogram(&one, &initial).unwrap();
        assert_eq!(fit.variogram.sill, 2.5);
        assert_eq!(spherical_gamma(&fit.variogram, 40.0), 2.5);
        assert_eq!(fit_variogram(&[], &initial), Err(GeostatError::NoBins));
    }

    #[test]
    fn kriging_one_station_by_hand() {
        let v = SphericalVariogram::new(0.0, 1.0, 10.0).unwrap();
        let o = vec![obs("a", 0.0, 0.0, 12.0)];
        let (lambda, _) = SimpleKriging::new(&o, v).unwrap().weights(5.0, 0.0);
        assert_eq!(lambda, vec![0.3125]);
        let p = simple_kriging_predict(&o, &v, 10.0, (5.0, 0.0)).unwrap();
        assert!((p.estimate - 10.625).abs() < 1e-12);
        assert!((p.variance - (1.0 - 0.3125 * 0.3125)).abs() < 1e-12);
    }

    #[test]
    fn kriging_is_exact_at_stations() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let o = random_obs(&mut rng, 8);
        let v = SphericalVariogram::new(0.0, 100.0, 600.0).unwrap();
        let k = SimpleKriging::new(&o, v).unwrap();
        for s in &o {
            let p = k.predict(20.0, s.x, s.y);
            assert!((p.estimate - s.value).abs() < 1e-9);
            assert!(p.variance.abs() < 1e-9);
        }
    }

    #[test]
    fn duplicate_sites_are_singular() {
        let v = SphericalVariogram::new(0.0, 1.0, 10.0).unwrap();
        let o = vec![obs("a", 1.0, 1.0, 1.0), obs("b", 1.0, 1.0, 2.0)];
        assert!(matches!(
            SimpleKriging::new(&o, v),
            Err(GeostatError::SingularSystem(_))
        ));
    }

    #[test]
    fn cross_validation_tie_breaks_and_singles() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let o = random_obs(&mut rng, 10);
        let v = SphericalVariogram::new(0.0, 100.0, 500.0).unwrap();
        let cv = cross_validate_variogram(&o, &[v]).unwrap();
        assert_eq!(cv.best, v);
        let w = SphericalVariogram::new(10.0, 100.0, 800.0).unwrap();
        let cv = cross_validate_variogram(&o, &[w, w]).unwrap();
        assert_eq!(cv.best_index, 0);
        assert!(cross_validate_variogram(&o[..2], &[v]).is_err());
    }

    #[test]
    fn candidate_grid_shape() {
        let c = variogram_candidates(&SphericalVariogram::new(0.0, 4.0, 100.0).unwrap());
        assert_eq!(c.len(), 12);
        assert_eq!(c[0], SphericalVariogram { nugget: 0.0, sill: 4.0, range: 50.0 });
        assert_eq!(c[11], SphericalVariogram { nugget: 1.0, sill: 4.0, range: 200.0 });
    }

    #[test]
    fn day_filtering_boundaries() {
        let mk = |d: u32, n: usize| -> Vec<Observation> {
            (0..n)
                .map(|i| Observation {
                    station_id: format!("s{i}"),
                    x: i as f64,
                    y: 0.0,
                    date: NaiveDate::from_ymd_opt(2020, 1, d).unwrap(),
                    value: 1.0,
                })
                .collect()
        };
        let all: Vec<Observation> = [mk(1, 9), mk(2, 10), mk(3, 24)].concat();
        let kept = filter_days(&all, 10);
        assert_eq!(
            kept,
            vec![
                NaiveDate::from_ymd_opt(2020, 1, 2).unwrap(),
                NaiveDate::from_ymd_opt(2020, 1, 3).unwrap()
            ]
        );
    }

    #[test]
    fn krige_grid_constant_and_exact() {
        let target = GridGeoref::new(5, 5, 0.0, 0.0, 100.0, -9999.0).unwrap();
        let v = SphericalVariogram::new(0.0, 4.0, 300.0).unwrap();
        let constant = vec![
            obs("a", 50.0, 50.0, 7.0),
            obs("b", 250.0, 150.0, 7.0),
            obs("c", 420.0, 380.0, 7.0),
        ];
        let g = krige_grid(&constant, &v, &target).unwrap();
        assert!(g.values().iter().all(|&x| (x - 7.0).abs() < 1e-12));
        assert_eq!(g.name, "PM25_2022-07-01");

        let field = vec![
            obs("a", 50.0, 50.0, 3.0),
            obs("b", 250.0, 150.0, 9.0),
            obs("c", 420.0, 380.0, 5.0),
            obs("d", 120.0, 460.0, 1.0),
        ];
        let g = krige_grid(&field, &v, &target).unwrap();
        assert!((g.get(0, 0) - 3.0).abs() < 1e-9);
        let m = (3.0 + 9.0 + 5.0 + 1.0) / 4.0;
        for r in 0..5 {
            for c in 0..5 {
                let (x, y) = target.cell_center(r, c);
                let p = simple_kriging_predict(&field, &v, m, (x, y)).unwrap();
                assert!((g.get(r, c) - p.estimate).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn validation_by_hand() {
        let g = GridGeoref::new(2, 1, 0.0, 0.0, 1.0, -9999.0).unwrap();
        let grid = Grid::new("p", g, vec![2.0, 4.0]).unwrap();
        let o = vec![
            obs("a", 0.5, 0.5, 1.0),
            obs("b", 1.5, 0.5, 2.0),
            obs("out", 5.0, 0.5, 100.0),
        ];
        let r = validate_points(&grid, &o).unwrap();
        assert_eq!(r.n, 2);
        assert!((r.bias - 1.5).abs() < 1e-12);
        assert!((r.mae - 1.5).abs() < 1e-12);
        assert!((r.rmse - 2.5f64.sqrt()).abs() < 1e-12);
        let perfect = validate_points(&grid, &[obs("a", 0.5, 0.5, 2.0)]).unwrap();
        assert_eq!((perfect.rmse, perfect.mae, perfect.bias), (0.0, 0.0, 0.0));
        assert_eq!(
            validate_points(&grid, &[obs("x", -3.0, 0.0, 1.0)]),
            Err(GeostatError::NoComparablePoints)
        );
    }

    #[test]
    fn duplicate_observation_rejected() {
        let o = vec![obs("a", 0.0, 0.0, 1.0), obs("a", 1.0, 0.0, 2.0)];
        assert!(matches!(
            check_observations(&o),
            Err(GeostatError::DuplicateObservation { .. })
        ));
    }

    proptest! {
        #[test]
        fn empirical_is_permutation_invariant(seed in 0u64..1000, rot in 0usize..7) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let o = random_obs(&mut rng, 7);
            let mut p = o.clone();
            p.rotate_left(rot);
            p.reverse();
            prop_assert_eq!(
                empirical_semivariogram(&o, 5, 1200.0).unwrap(),
                empirical_semivariogram(&p, 5, 1200.0).unwrap()
            );
        }

        #[test]
        fn validation_identities(preds in prop::collection::vec(-50.0f64..50.0, 1..20), shift in -5.0f64..5.0) {
            let n = preds.len();
            let g = GridGeoref::new(n, 1, 0.0, 0.0, 1.0, -9999.0).unwrap();
            let grid = Grid::new("p", g, preds.clone()).unwrap();
            let o: Vec<Observation> = (0..n)
                .map(|i| obs(&format!("s{i}"), i as f64 + 0.5, 0.5, preds[i] * 0.7 + shift))
                .collect();
            let r = validate_points(&grid, &o).unwrap();
            prop_assert!(r.rmse + 1e-12 >= r.mae);
            prop_assert!(r.rmse + 1e-12 >= r.bias.abs());
        }
    }
}
