//! The two-stage prioritization flow: layer alignment, sample extraction,
//! correlation pruning, a full-feature vegetation classifier, a second
//! classifier without the vegetation-detection features, and fusion of the
//! two maps into a [0, 1] priority raster.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{
    correlation_matrix, drop_features, extract_samples, prune_correlated, select_features,
    stack_to_table, CorrelationMatrix, DatasetError, ExtractionReport, FeatureTable, Provenance,
    PruneResult,
};
use crate::geostat::{
    mean_kriged_surface, validate_points, DaySummary, GeostatError, KrigingSettings,
    ValidationReport,
};
use crate::indices::{lst_difference, BandRoles, IndexError, Scene, SpectralIndex};
use crate::io::{self, IoError};
use crate::ml::metrics::{classification_metrics, MetricsReport};
use crate::ml::protocol::{cv_loss, stratified_split};
use crate::ml::smbo::{smbo_tune, HyperparameterSpace, SmboResult};
use crate::ml::{feature_importance, Importance, MlError, Model, ModelKind, ModelParams};
use crate::raster::{
    assign_zones, resample_nearest, temporal_mean, zip_cells, Grid, GridGeoref, RasterError,
    Stack, ZoneSet,
};

// ---------------------------------------------------------------------------
// Errors

/// Broad failure classes, mapped to process exit codes by the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorClass {
    Config,
    Data,
    Numeric,
}

#[derive(Debug, Error)]
pub enum Failure {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Geostat(#[from] GeostatError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Ml(#[from] MlError),
}

impl Failure {
    pub fn class(&self) -> ErrorClass {
        match self {
            Failure::Config(_) => ErrorClass::Config,
            Failure::Io(_) | Failure::Raster(_) | Failure::Dataset(_) => ErrorClass::Data,
            Failure::Index(IndexError::MissingBand { .. }) => ErrorClass::Config,
            Failure::Index(_) => ErrorClass::Data,
            Failure::Geostat(e) => match e {
                GeostatError::SingularSystem(_)
                | GeostatError::InvalidVariogram(_)
                | GeostatError::AllCandidatesDisqualified => ErrorClass::Numeric,
                _ => ErrorClass::Data,
            },
            Failure::Ml(e) => match e {
                MlError::InvalidParams(_) => ErrorClass::Config,
                MlError::SingleClassTraining
                | MlError::EmptyTable
                | MlError::Unlabeled
                | MlError::FeatureMismatch { .. }
                | MlError::Serialization(_) => ErrorClass::Data,
                _ => ErrorClass::Numeric,
            },
        }
    }
}

/// A failure tagged with the stage that produced it.
#[derive(Debug, Error)]
#[error("stage '{stage}': {source}")]
pub struct PipelineError {
    pub stage: &'static str,
    #[source]
    pub source: Failure,
}

impl PipelineError {
    pub fn class(&self) -> ErrorClass {
        self.source.class()
    }

    pub fn config(stage: &'static str, message: impl Into<String>) -> Self {
        PipelineError {
            stage,
            source: Failure::Config(message.into()),
        }
    }
}

trait Tag<T> {
    fn stage(self, stage: &'static str) -> Result<T, PipelineError>;
}

impl<T, E: Into<Failure>> Tag<T> for Result<T, E> {
    fn stage(self, stage: &'static str) -> Result<T, PipelineError> {
        self.map_err(|e| PipelineError {
            stage,
            source: e.into(),
        })
    }
}

// ---------------------------------------------------------------------------
// Configuration

fn yes() -> bool {
    true
}

fn four() -> usize {
    4
}

/// How one input layer is brought onto the target grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    /// Raster file(s), nearest-neighbour resampled; several files are
    /// averaged per cell.
    Grid {
        name: String,
        paths: Vec<PathBuf>,
        #[serde(default = "yes")]
        feature: bool,
    },
    /// A numeric attribute of GeoJSON polygons, maximum-area rasterized.
    Zones {
        name: String,
        path: PathBuf,
        /// Defaults to the layer name.
        #[serde(default)]
        attribute: Option<String>,
        #[serde(default = "four")]
        subsamples: usize,
        #[serde(default = "yes")]
        feature: bool,
    },
    /// Station CSV, kriged per day and averaged over the retained days.
    Stations {
        name: String,
        path: PathBuf,
        #[serde(default)]
        kriging: KrigingSettings,
        #[serde(default = "yes")]
        feature: bool,
    },
    /// `|day − night|` of two earlier layers.
    LstDifference {
        name: String,
        day: String,
        night: String,
        #[serde(default = "yes")]
        feature: bool,
    },
    /// Spectral index from the layers named in `band_roles`.
    Index {
        name: String,
        index: SpectralIndex,
        #[serde(default = "yes")]
        feature: bool,
    },
}

impl LayerSpec {
    pub fn name(&self) -> &str {
        match self {
            LayerSpec::Grid { name, .. }
            | LayerSpec::Zones { name, .. }
            | LayerSpec::Stations { name, .. }
            | LayerSpec::LstDifference { name, .. }
            | LayerSpec::Index { name, .. } => name,
        }
    }

    pub fn is_feature(&self) -> bool {
        match *self {
            LayerSpec::Grid { feature, .. }
            | LayerSpec::Zones { feature, .. }
            | LayerSpec::Stations { feature, .. }
            | LayerSpec::LstDifference { feature, .. }
            | LayerSpec::Index { feature, .. } => feature,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Grid { .. } => "grid",
            LayerSpec::Zones { .. } => "zones",
            LayerSpec::Stations { .. } => "stations",
            LayerSpec::LstDifference { .. } => "lst_difference",
            LayerSpec::Index { .. } => "index",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    #[serde(default = "default_kind")]
    pub kind: ModelKind,
    /// Overrides on top of the kind's default parameters.
    #[serde(default)]
    pub params: BTreeMap<String, serde_json::Value>,
}

fn default_kind() -> ModelKind {
    ModelKind::Rf
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            kind: default_kind(),
            params: BTreeMap::new(),
        }
    }
}

impl ModelSpec {
    pub fn resolve(&self) -> Result<ModelParams, MlError> {
        self.kind.default_params().with_overrides(&self.params)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuningSpec {
    /// Number of trials; 0 disables tuning.
    #[serde(default)]
    pub budget: usize,
    #[serde(default = "default_n_init")]
    pub n_init: usize,
    #[serde(default = "default_folds")]
    pub folds: usize,
    /// Defaults to the model kind's built-in space.
    #[serde(default)]
    pub space: Option<HyperparameterSpace>,
    /// Stage 2 reuses the stage-1 parameters instead of tuning again.
    #[serde(default)]
    pub reuse_stage1_params: bool,
}

fn default_n_init() -> usize {
    5
}

fn default_folds() -> usize {
    3
}

impl Default for TuningSpec {
    fn default() -> Self {
        TuningSpec {
            budget: 0,
            n_init: default_n_init(),
            folds: default_folds(),
            space: None,
            reuse_stage1_params: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidationSpec {
    pub name: String,
    /// A configured layer name, or a path to a grid file.
    pub grid: String,
    pub stations: PathBuf,
}

/// Output file names, relative to the output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSpec {
    pub binary: PathBuf,
    pub probability: PathBuf,
    pub priority: PathBuf,
    /// Rendered priority map (`.png` or `.pgm`); empty disables rendering.
    pub render: PathBuf,
    pub report: PathBuf,
    pub model_stage1: PathBuf,
    pub model_stage2: PathBuf,
}

impl Default for OutputSpec {
    fn default() -> Self {
        OutputSpec {
            binary: "binary.asc".into(),
            probability: "probability.asc".into(),
            priority: "priority.asc".into(),
            render: "priority.png".into(),
            report: "report.json".into(),
            model_stage1: "model_stage1.json".into(),
            model_stage2: "model_stage2.json".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub target: GridGeoref,
    pub layers: Vec<LayerSpec>,
    #[serde(default)]
    pub band_roles: BandRoles,
    /// Labelled points CSV (`x,y,label`).
    pub samples: PathBuf,
    #[serde(default = "default_threshold")]
    pub correlation_threshold: f64,
    #[serde(default = "default_drop")]
    pub drop_for_priority: Vec<String>,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub tuning: TuningSpec,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Class-1 probability at which a pixel counts as non-vegetated.
    #[serde(default = "default_class_threshold")]
    pub class_threshold: f64,
    #[serde(default)]
    pub validation: Vec<ValidationSpec>,
    #[serde(default)]
    pub outputs: OutputSpec,
}

fn default_threshold() -> f64 {
    0.9
}

fn default_drop() -> Vec<String> {
    vec!["NDVI".into()]
}

fn default_train_fraction() -> f64 {
    0.7
}

fn default_seed() -> u64 {
    42
}

fn default_class_threshold() -> f64 {
    0.5
}

impl PipelineConfig {
    /// Minimal configuration with defaults for everything optional.
    pub fn new(target: GridGeoref, layers: Vec<LayerSpec>, samples: PathBuf) -> Self {
        PipelineConfig {
            target,
            layers,
            band_roles: BandRoles::default(),
            samples,
            correlation_threshold: default_threshold(),
            drop_for_priority: default_drop(),
            model: ModelSpec::default(),
            tuning: TuningSpec::default(),
            train_fraction: default_train_fraction(),
            seed: default_seed(),
            class_threshold: default_class_threshold(),
            validation: Vec::new(),
            outputs: OutputSpec::default(),
        }
    }

    pub fn load(path: &Path) -> Result<PipelineConfig, PipelineError> {
        let cfg: PipelineConfig =
            io::read_json(path).map_err(|e| PipelineError::config("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Structural checks that need no input files.
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::config("config", m));
        self.target
            .validate()
            .map_err(|e| PipelineError::config("config", e.to_string()))?;
        if !(self.correlation_threshold > 0.0 && self.correlation_threshold <= 1.0) {
            return bad("correlation_threshold must lie in (0, 1]".into());
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad("train_fraction must lie in (0, 1)".into());
        }
        if !(0.0..=1.0).contains(&self.class_threshold) {
            return bad("class_threshold must lie in [0, 1]".into());
        }
        let mut seen: Vec<&str> = Vec::new();
        for l in &self.layers {
            if seen.contains(&l.name()) {
                return bad(format!("layer '{}' is defined twice", l.name()));
            }
            let earlier = |n: &str| seen.contains(&n);
            match l {
                LayerSpec::Grid { paths, .. } if paths.is_empty() => {
                    return bad(format!("layer '{}' lists no paths", l.name()))
                }
                LayerSpec::LstDifference { day, night, .. } => {
                    for r in [day, night] {
                        if !earlier(r) {
                            return bad(format!(
                                "layer '{}' refers to '{r}', which must be defined before it",
                                l.name()
                            ));
                        }
                    }
                }
                LayerSpec::Index { index, .. } => {
                    for band in index.required_bands() {
                        let role = self.band_role(band);
                        match role {
                            Some(r) if earlier(r) => {}
                            Some(r) => {
                                return bad(format!(
                                    "band layer '{r}' must be defined before index layer '{}'",
                                    l.name()
                                ))
                            }
                            None => {
                                return bad(format!(
                                    "index layer '{}' needs band role '{band}'",
                                    l.name()
                                ))
                            }
                        }
                    }
                }
                _ => {}
            }
            seen.push(l.name());
        }
        for role in [
            &self.band_roles.blue,
            &self.band_roles.red,
            &self.band_roles.nir,
            &self.band_roles.swir1,
        ]
        .into_iter()
        .flatten()
        {
            if !seen.contains(&role.as_str()) {
                return bad(format!("band role refers to unknown layer '{role}'"));
            }
        }
        let features: Vec<&str> = self
            .layers
            .iter()
            .filter(|l| l.is_feature())
            .map(LayerSpec::name)
            .collect();
        if features.is_empty() {
            return bad("no feature layers configured".into());
        }
        for d in &self.drop_for_priority {
            if !features.contains(&d.as_str()) {
                return bad(format!("drop_for_priority names unknown feature '{d}'"));
            }
        }
        self.model
            .resolve()
            .map_err(|e| PipelineError::config("config", e.to_string()))?;
        if self.tuning.budget > 0 && self.tuning.budget < self.tuning.n_init {
            return bad("tuning budget must be at least n_init".into());
        }
        Ok(())
    }

    fn band_role(&self, band: &str) -> Option<&str> {
        match band {
            "blue" => self.band_roles.blue.as_deref(),
            "red" => self.band_roles.red.as_deref(),
            "nir" => self.band_roles.nir.as_deref(),
            _ => self.band_roles.swir1.as_deref(),
        }
    }
}

/// Directory that relative paths in a config file resolve against.
pub fn base_dir(config_path: &Path) -> PathBuf {
    config_path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map_or_else(|| PathBuf::from("."), Path::to_path_buf)
}

pub fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

// ---------------------------------------------------------------------------
// Layers and samples

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSummary {
    pub name: String,
    pub kind: String,
    pub feature: bool,
    pub valid_cells: usize,
}

/// Every configured layer on the target grid, in configuration order.
#[derive(Debug, Clone)]
pub struct LoadedLayers {
    pub target: GridGeoref,
    pub layers: Vec<Grid>,
    pub features: Vec<String>,
    pub kriging: BTreeMap<String, Vec<DaySummary>>,
}

impl LoadedLayers {
    pub fn get(&self, name: &str) -> Option<&Grid> {
        self.layers.iter().find(|g| g.name == name)
    }

    pub fn feature_stack(&self) -> Result<Stack, RasterError> {
        let grids = self
            .features
            .iter()
            .filter_map(|n| self.get(n).cloned())
            .collect();
        Stack::new(self.target, grids)
    }

    pub fn summaries(&self, cfg: &PipelineConfig) -> Vec<LayerSummary> {
        cfg.layers
            .iter()
            .map(|l| LayerSummary {
                name: l.name().to_string(),
                kind: l.kind().to_string(),
                feature: l.is_feature(),
                valid_cells: self.get(l.name()).map_or(0, Grid::valid_count),
            })
            .collect()
    }
}

/// Brings every configured layer onto the target grid, in order. Derived
/// layers may only refer to layers listed before them.
pub fn load_layers(cfg: &PipelineConfig, base: &Path) -> Result<LoadedLayers, PipelineError> {
    const STAGE: &str = "layers";
    let target = cfg.target;
    let mut layers: Vec<Grid> = Vec::with_capacity(cfg.layers.len());
    let mut kriging = BTreeMap::new();
    // Zone assignment is shared by every attribute of the same file.
    let mut zone_cache: BTreeMap<(PathBuf, usize), (ZoneSet, Vec<Option<usize>>)> = BTreeMap::new();
    for spec in &cfg.layers {
        let find = |layers: &[Grid], n: &str| -> Result<Grid, PipelineError> {
            layers
                .iter()
                .find(|g| g.name == n)
                .cloned()
                .ok_or_else(|| PipelineError::config(STAGE, format!("unknown layer '{n}'")))
        };
        let grid = match spec {
            LayerSpec::Grid { name, paths, .. } => {
                let grids: Vec<Grid> = paths
                    .iter()
                    .map(|p| {
                        io::read_grid(&resolve(base, p))
                            .map(|g| resample_nearest(&g, &target))
                            .stage(STAGE)
                    })
                    .collect::<Result<_, _>>()?;
                temporal_mean(&grids, name.clone()).stage(STAGE)?
            }
            LayerSpec::Zones {
                name,
                path,
                attribute,
                subsamples,
                ..
            } => {
                let full = resolve(base, path);
                let key = (full.clone(), *subsamples);
                if !zone_cache.contains_key(&key) {
                    let z = io::read_zones(&full).stage(STAGE)?;
                    let cells = assign_zones(&z, &target, *subsamples);
                    zone_cache.insert(key.clone(), (z, cells));
                }
                let (zones, cells) = &zone_cache[&key];
                let attr = attribute.as_deref().unwrap_or(name);
                let values: Vec<f64> = zones
                    .zones()
                    .iter()
                    .map(|z| {
                        z.attributes
                            .get(attr)
                            .copied()
                            .ok_or_else(|| RasterError::UnknownAttribute(attr.to_string()))
                    })
                    .collect::<Result<_, _>>()
                    .stage(STAGE)?;
                let out = cells
                    .iter()
                    .map(|c| c.map_or(target.nodata, |i| values[i]))
                    .collect();
                Grid::new(name.clone(), target, out).stage(STAGE)?
            }
            LayerSpec::Stations {
                name,
                path,
                kriging: settings,
                ..
            } => {
                let obs = io::read_observations(&resolve(base, path)).stage(STAGE)?;
                let (grid, days) = mean_kriged_surface(&obs, settings, &target, name).stage(STAGE)?;
                kriging.insert(name.clone(), days);
                grid
            }
            LayerSpec::LstDifference {
                name, day, night, ..
            } => lst_difference(&find(&layers, day)?, &find(&layers, night)?)
                .stage(STAGE)?
                .with_name(name.clone()),
            LayerSpec::Index { name, index, .. } => {
                let band = |b: &str| -> Result<Option<Grid>, PipelineError> {
                    cfg.band_role(b).map(|n| find(&layers, n)).transpose()
                };
                let scene = Scene {
                    blue: band("blue")?,
                    red: band("red")?,
                    nir: band("nir")?,
                    swir1: band("swir1")?,
                };
                scene.compute(*index).stage(STAGE)?.with_name(name.clone())
            }
        };
        layers.push(grid);
    }
    Ok(LoadedLayers {
        target,
        layers,
        features: cfg
            .layers
            .iter()
            .filter(|l| l.is_feature())
            .map(|l| l.name().to_string())
            .collect(),
        kriging,
    })
}

/// Aligned layers plus the labelled sample table over every feature.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub loaded: LoadedLayers,
    pub stack: Stack,
    pub samples: FeatureTable,
    pub extraction: ExtractionReport,
}

pub fn prepare(cfg: &PipelineConfig, base: &Path) -> Result<Prepared, PipelineError> {
    let loaded = load_layers(cfg, base)?;
    let stack = loaded.feature_stack().stage("layers")?;
    let points = io::read_samples(&resolve(base, &cfg.samples)).stage("samples")?;
    let (samples, extraction) = extract_samples(&stack, &points).stage("samples")?;
    Ok(Prepared {
        loaded,
        stack,
        samples,
        extraction,
    })
}

/// Correlation pruning; the drop-for-priority features must survive it.
pub fn prune(cfg: &PipelineConfig, samples: &FeatureTable) -> Result<PruneResult, PipelineError> {
    let result = prune_correlated(samples, cfg.correlation_threshold).stage("prune")?;
    for d in &cfg.drop_for_priority {
        if !result.kept.contains(d) {
            return Err(PipelineError::config(
                "prune",
                format!("drop_for_priority feature '{d}' was removed by correlation pruning"),
            ));
        }
    }
    Ok(result)
}

pub fn correlations(samples: &FeatureTable) -> Result<CorrelationMatrix, PipelineError> {
    correlation_matrix(samples).stage("prune")
}

// ---------------------------------------------------------------------------
// Training stages

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub features: Vec<String>,
    pub model_kind: ModelKind,
    pub params: ModelParams,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tuning: Option<SmboResult>,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub model: Model,
    pub report: StageReport,
}

/// Per-stage tuning override: `None` tunes per configuration, `Some` fixes
/// the parameters.
pub fn tune(
    cfg: &PipelineConfig,
    train: &FeatureTable,
    stage: &'static str,
) -> Result<(ModelParams, Option<SmboResult>), PipelineError> {
    let base = cfg.model.resolve().stage(stage)?;
    if cfg.tuning.budget == 0 {
        return Ok((base, None));
    }
    let space = cfg
        .tuning
        .space
        .clone()
        .unwrap_or_else(|| HyperparameterSpace::default_for(cfg.model.kind));
    let result = smbo_tune(
        &space,
        |trial| {
            let overrides = trial.iter().map(|(k, v)| (k.clone(), v.to_json())).collect();
            let params = base.with_overrides(&overrides).map_err(|e| e.to_string())?;
            cv_loss(train, &params, cfg.tuning.folds, cfg.seed).map_err(|e| e.to_string())
        },
        cfg.tuning.budget,
        cfg.tuning.n_init,
        cfg.seed,
    )
    .stage(stage)?;
    let overrides = result
        .best_params
        .iter()
        .map(|(k, v)| (k.clone(), v.to_json()))
        .collect();
    let best = base.with_overrides(&overrides).stage(stage)?;
    Ok((best, Some(result)))
}

/// Trains on `train`, scores on `test`.
pub fn run_stage(
    cfg: &PipelineConfig,
    table: &FeatureTable,
    train_idx: &[usize],
    test_idx: &[usize],
    fixed_params: Option<ModelParams>,
    stage: &'static str,
) -> Result<StageOutcome, PipelineError> {
    let train = table.subset(train_idx);
    let test = table.subset(test_idx);
    let (params, tuning) = match fixed_params {
        Some(p) => (p, None),
        None => tune(cfg, &train, stage)?,
    };
    let model = crate::ml::train_model(&train, &params, cfg.seed).stage(stage)?;
    let pred = model
        .predict_class(test.rows(), cfg.class_threshold)
        .stage(stage)?;
    let truth = test.labels().unwrap_or_default();
    let metrics = classification_metrics(truth, &pred).stage(stage)?;
    Ok(StageOutcome {
        report: StageReport {
            features: table.feature_names().to_vec(),
            model_kind: model.kind,
            params,
            tuning,
            metrics,
        },
        model,
    })
}

pub fn split(cfg: &PipelineConfig, table: &FeatureTable) -> Result<(Vec<usize>, Vec<usize>), PipelineError> {
    let labels = table
        .labels()
        .ok_or_else(|| PipelineError::config("split", "sample table has no labels"))?;
    stratified_split(labels, cfg.train_fraction, cfg.seed).stage("split")
}

/// All complete pixels of the feature stack (every feature layer valid).
pub fn pixel_table(stack: &Stack) -> Result<FeatureTable, PipelineError> {
    stack_to_table(stack).stage("predict")
}

/// Class-1 probability over the complete pixels; everything else nodata.
pub fn predict_probability(
    model: &Model,
    pixels: &FeatureTable,
    target: &GridGeoref,
    name: &str,
) -> Result<Grid, PipelineError> {
    let view = select_features(pixels, &model.feature_names).stage("predict")?;
    let proba = model.predict_proba(view.rows()).stage("predict")?;
    let mut values = vec![target.nodata; target.len()];
    for (p, prov) in proba.iter().zip(pixels.provenance()) {
        if let Provenance::Pixel(i) = *prov {
            values[i] = *p;
        }
    }
    Grid::new(name, *target, values).stage("predict")
}

/// `1` where the probability reaches `threshold`, `0` below, nodata kept.
pub fn classify(proba: &Grid, threshold: f64, name: &str) -> Grid {
    proba.map_valid(name, |p| if p >= threshold { 1.0 } else { 0.0 })
}

/// Vegetated pixels (binary 0) stay exactly 0; non-vegetated pixels take
/// the second-stage probability; nodata in either input stays nodata.
pub fn fuse_priority(binary: &Grid, proba: &Grid) -> Result<Grid, PipelineError> {
    if let Some(&v) = binary
        .values()
        .iter()
        .find(|&&v| !binary.is_nodata(v) && v != 0.0 && v != 1.0)
    {
        return Err(PipelineError {
            stage: "fuse",
            source: Failure::Config(format!("binary map holds {v}; expected 0, 1 or nodata")),
        });
    }
    let pn = proba.nodata();
    let out = zip_cells(binary, proba, "PRIORITY", |b, p| {
        if p == pn {
            None
        } else if b == 0.0 {
            Some(0.0)
        } else {
            Some(p.clamp(0.0, 1.0))
        }
    })
    .stage("fuse")?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedImportance {
    pub feature: String,
    pub importance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    /// `mdi` for forests, `gain` for boosted models.
    pub method: String,
    pub ranking: Vec<RankedImportance>,
    pub uniform_fallback: bool,
}

/// Importances of the probability-stage model, descending, ties by name.
pub fn report_importance(model: &Model) -> Result<ImportanceReport, PipelineError> {
    let imp: Importance = feature_importance(model).stage("importance")?;
    Ok(ImportanceReport {
        method: if model.kind.is_forest() { "mdi" } else { "gain" }.into(),
        ranking: imp
            .ranked()
            .into_iter()
            .map(|(feature, importance)| RankedImportance { feature, importance })
            .collect(),
        uniform_fallback: imp.uniform_fallback,
    })
}

pub fn read_model(path: &Path, stage: &'static str) -> Result<Model, PipelineError> {
    let text = io::read_text(path).stage(stage)?;
    Model::from_json(&text).stage(stage)
}

pub fn validate_grid_vs_stations(grid: &Grid, stations: &Path) -> Result<ValidationReport, PipelineError> {
    let obs = io::read_observations(stations).stage("validate")?;
    validate_points(grid, &obs).stage("validate")
}

pub fn run_validations(
    cfg: &PipelineConfig,
    base: &Path,
    loaded: Option<&LoadedLayers>,
) -> Result<BTreeMap<String, ValidationReport>, PipelineError> {
    let mut out = BTreeMap::new();
    for v in &cfg.validation {
        let grid = match loaded.and_then(|l| l.get(&v.grid)) {
            Some(g) => g.clone(),
            None => io::read_grid(&resolve(base, Path::new(&v.grid))).stage("validate")?,
        };
        out.insert(
            v.name.clone(),
            validate_grid_vs_stations(&grid, &resolve(base, &v.stations))?,
        );
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// End-to-end run

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorityStats {
    pub valid_cells: usize,
    pub vegetated_cells: usize,
    pub mean_nonvegetated: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub layers: Vec<LayerSummary>,
    pub kriging: BTreeMap<String, Vec<DaySummary>>,
    pub extraction: ExtractionReport,
    pub class_counts: [usize; 2],
    pub correlation_threshold: f64,
    pub pruning: PruneResult,
    pub train_rows: usize,
    pub test_rows: usize,
    pub stage1: StageReport,
    pub stage2: StageReport,
    pub dropped_for_priority: Vec<String>,
    /// Second-stage accuracy fell below 0.55: the dropped features carried
    /// most of the signal.
    pub stage2_low_accuracy: bool,
    pub importance: ImportanceReport,
    pub validation: BTreeMap<String, ValidationReport>,
    pub priority: PriorityStats,
    pub outputs: BTreeMap<String, PathBuf>,
    /// Wall-clock seconds per stage; the only nondeterministic field.
    pub timings: BTreeMap<String, f64>,
}

pub const LOW_ACCURACY_GATE: f64 = 0.55;

/// Every in-memory product of a run.
pub struct RunProducts {
    pub report: RunReport,
    pub binary: Grid,
    pub probability: Grid,
    pub priority: Grid,
    pub model_stage1: Model,
    pub model_stage2: Model,
}

struct Clock {
    t: Instant,
    timings: BTreeMap<String, f64>,
}

impl Clock {
    fn lap(&mut self, stage: &str) {
        let now = Instant::now();
        self.timings
            .insert(stage.to_string(), (now - self.t).as_secs_f64());
        self.t = now;
    }
}

/// Runs both stages and fusion in memory.
pub fn run(cfg: &PipelineConfig, base: &Path) -> Result<RunProducts, PipelineError> {
    cfg.validate()?;
    let mut clock = Clock {
        t: Instant::now(),
        timings: BTreeMap::new(),
    };
    let prepared = prepare(cfg, base)?;
    clock.lap("prepare");
    let pruning = prune(cfg, &prepared.samples)?;
    let table1 = select_features(&prepared.samples, &pruning.kept).stage("prune")?;
    clock.lap("prune");
    let (train_idx, test_idx) = split(cfg, &table1)?;

    let stage1 = run_stage(cfg, &table1, &train_idx, &test_idx, None, "binary")?;
    let pixels = pixel_table(&prepared.stack)?;
    let target = prepared.loaded.target;
    let proba1 = predict_probability(&stage1.model, &pixels, &target, "PROBABILITY_STAGE1")?;
    let binary = classify(&proba1, cfg.class_threshold, "BINARY");
    clock.lap("binary_stage");

    let table2 = drop_features(&table1, &cfg.drop_for_priority).stage("probability")?;
    let reuse = (cfg.tuning.budget == 0 || cfg.tuning.reuse_stage1_params)
        .then(|| stage1.report.params.clone());
    let stage2 = run_stage(cfg, &table2, &train_idx, &test_idx, reuse, "probability")?;
    let probability = predict_probability(&stage2.model, &pixels, &target, "PROBABILITY")?;
    clock.lap("probability_stage");

    let priority = fuse_priority(&binary, &probability)?;
    let importance = report_importance(&stage2.model)?;
    let validation = run_validations(cfg, base, Some(&prepared.loaded))?;
    clock.lap("fuse_and_report");

    let vegetated = binary.values().iter().filter(|&&v| v == 0.0).count();
    let nonveg: Vec<f64> = binary
        .values()
        .iter()
        .zip(priority.values())
        .filter(|(&b, _)| b == 1.0)
        .map(|(_, &p)| p)
        .collect();
    let o = &cfg.outputs;
    let mut outputs = BTreeMap::new();
    outputs.insert("binary".to_string(), o.binary.clone());
    outputs.insert("probability".to_string(), o.probability.clone());
    outputs.insert("priority".to_string(), o.priority.clone());
    outputs.insert("model_stage1".to_string(), o.model_stage1.clone());
    outputs.insert("model_stage2".to_string(), o.model_stage2.clone());
    if !o.render.as_os_str().is_empty() {
        outputs.insert("render".to_string(), o.render.clone());
    }
    let stage2_low_accuracy = stage2.report.metrics.oa < LOW_ACCURACY_GATE;
    let report = RunReport {
        seed: cfg.seed,
        layers: prepared.loaded.summaries(cfg),
        kriging: prepared.loaded.kriging.clone(),
        extraction: prepared.extraction,
        class_counts: prepared.samples.class_counts().unwrap_or_default(),
        correlation_threshold: cfg.correlation_threshold,
        pruning,
        train_rows: train_idx.len(),
        test_rows: test_idx.len(),
        stage1: stage1.report,
        stage2: stage2.report,
        dropped_for_priority: cfg.drop_for_priority.clone(),
        stage2_low_accuracy,
        importance,
        validation,
        priority: PriorityStats {
            valid_cells: priority.valid_count(),
            vegetated_cells: vegetated,
            mean_nonvegetated: if nonveg.is_empty() {
                0.0
            } else {
                nonveg.iter().sum::<f64>() / nonveg.len() as f64
            },
        },
        outputs,
        timings: clock.timings,
    };
    Ok(RunProducts {
        report,
        binary,
        probability,
        priority,
        model_stage1: stage1.model,
        model_stage2: stage2.model,
    })
}

/// Runs everything and writes grids, models, the rendered map and the
/// report under `out_dir`.
pub fn run_all(cfg: &PipelineConfig, base: &Path, out_dir: &Path) -> Result<RunReport, PipelineError> {
    let mut products = run(cfg, base)?;
    let t = Instant::now();
    let o = &cfg.outputs;
    let w = |e: IoError| PipelineError {
        stage: "write",
        source: Failure::Io(e),
    };
    io::write_grid(&products.binary, &out_dir.join(&o.binary)).map_err(w)?;
    io::write_grid(&products.probability, &out_dir.join(&o.probability)).map_err(w)?;
    io::write_grid(&products.priority, &out_dir.join(&o.priority)).map_err(w)?;
    io::write_json(&out_dir.join(&o.model_stage1), &products.model_stage1).map_err(w)?;
    io::write_json(&out_dir.join(&o.model_stage2), &products.model_stage2).map_err(w)?;
    if !o.render.as_os_str().is_empty() {
        io::render_map(
            &products.priority,
            &io::ColorRamp::priority(),
            &out_dir.join(&o.render),
        )
        .map_err(w)?;
    }
    products
        .report
        .timings
        .insert("write".into(), t.elapsed().as_secs_f64());
    io::write_json(&out_dir.join(&o.report), &products.report).map_err(w)?;
    Ok(products.report)
}
