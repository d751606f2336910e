use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use greenprior::dataset::select_features;
use greenprior::io;
use greenprior::pipeline::{
    self, base_dir, ErrorClass, Failure, LayerSpec, PipelineConfig, PipelineError,
};
use greenprior::raster::Grid;
use greenprior::synth::{self, ScenarioSpec, SynthError};

#[derive(Parser)]
#[command(
    name = "greenprior",
    version,
    about = "Green-space development priority maps from raster, vector and station layers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Pipeline configuration (JSON). Relative paths inside it resolve
    /// against its directory.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Args, Clone)]
struct SynthArgs {
    /// Scenario spec (JSON); defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "bundle")]
    out_dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic city bundle with a ready-to-run config.
    Synth(SynthArgs),
    /// Krige every station layer to the target grid.
    Krige(Common),
    /// Compute the configured spectral index layers.
    Indices(Common),
    /// Align all layers and extract the labelled sample table.
    Table(Common),
    /// Correlation pruning of the sample table.
    Prune(Common),
    /// Hyperparameter search for the first-stage model.
    Tune(Common),
    /// Train both stages and report held-out metrics.
    Train(Common),
    /// Binary and probability maps from trained models.
    Predict(Common),
    /// Fuse the binary and probability maps into the priority map.
    Fuse(Common),
    /// Compare configured grids with station observations.
    Validate(Common),
    /// Render the priority map as an image.
    Render(Common),
    /// Everything, from layers to rendered priority map.
    RunAll(Common),
}

struct Ctx {
    cfg: PipelineConfig,
    base: PathBuf,
    out: PathBuf,
}

impl Ctx {
    fn load(c: &Common) -> Result<Ctx> {
        let mut cfg = PipelineConfig::load(&c.config)?;
        if let Some(s) = c.seed {
            cfg.seed = s;
        }
        Ok(Ctx {
            cfg,
            base: base_dir(&c.config),
            out: c.out_dir.clone(),
        })
    }

    fn out(&self, p: &Path) -> PathBuf {
        self.out.join(p)
    }

    /// A copy of the config restricted to some layers.
    fn only_layers(&self, keep: impl Fn(&LayerSpec) -> bool) -> PipelineConfig {
        let mut sub = self.cfg.clone();
        sub.layers.retain(keep);
        sub
    }
}

fn wrote(paths: &[PathBuf]) {
    for p in paths {
        println!("wrote {}", p.display());
    }
}

fn write_grid(g: &Grid, path: PathBuf) -> Result<PathBuf> {
    io::write_grid(g, &path)?;
    Ok(path)
}

fn write_json<T: serde::Serialize>(v: &T, path: PathBuf) -> Result<PathBuf> {
    io::write_json(&path, v)?;
    Ok(path)
}

fn at<E: Into<Failure>>(stage: &'static str) -> impl Fn(E) -> PipelineError {
    move |e| PipelineError {
        stage,
        source: e.into(),
    }
}

fn config_error(message: impl Into<String>) -> anyhow::Error {
    PipelineError::config("config", message).into()
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let mut spec: ScenarioSpec = match &a.config {
        Some(p) => io::read_json(p).map_err(|e| SynthError::InvalidSpec(e.to_string()))?,
        None => ScenarioSpec::default(),
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    let (manifest, _) = synth::generate_scenario(&spec, &a.out_dir)?;
    println!(
        "wrote scenario '{}' to {} ({} layers, {} planted duplicates)",
        manifest.name,
        a.out_dir.display(),
        synth::FEATURE_COUNT,
        manifest.planted.len()
    );
    wrote(&[a.out_dir.join(synth::CONFIG_FILE)]);
    Ok(())
}

fn cmd_krige(c: &Common) -> Result<()> {
    let ctx = Ctx::load(c)?;
    let sub = ctx.only_layers(|l| matches!(l, LayerSpec::Stations { .. }));
    if sub.layers.is_empty() {
        return Err(config_error("no station layers configured"));
    }
    let loaded = pipeline::load_layers(&sub, &ctx.base)?;
    let mut files = Vec::new();
    for g in &loaded.layers {
        files.push(write_grid(g, ctx.out(Path::new(&format!("{}.asc", g.name))))?);
    }
    files.push(write_json(&loaded.kriging, ctx.out(Path::new("kriging.json")))?);
    wrote(&files);
    Ok(())
}

fn cmd_indices(c: &Common) -> Result<()> {
    let ctx = Ctx::load(c)?;
    let roles = &ctx.cfg.band_roles;
    let bands: Vec<&str> = [&roles.blue, &roles.red, &roles.nir, &roles.swir1]
        .into_iter()
        .flatten()
        .map(String::as_str)
        .collect();
    let sub = ctx.only_layers(|l| matches!(l, LayerSpec::Index { .. }) || bands.contains(&l.name()));
    let names: Vec<String> = sub
        .layers
        .iter()
        .filter(|l| matches!(l, LayerSpec::Index { .. }))
        .map(|l| l.name().to_string())
        .collect();
    if names.is_empty() {
        return Err(config_error("no index layers configured"));
    }
    let loaded = pipeline::load_layers(&sub, &ctx.base)?;
    let mut files = Vec::new();
    for n in &names {
        let g = loaded.get(n).ok_or_else(|| anyhow!("index layer '{n}' missing"))?;
        files.push(write_grid(g, ctx.out(Path::new(&format!("{n}.asc"))))?);
    }
    wrote(&files);
    Ok(())
}

fn cmd_table(c: &Common) -> Result<()> {
    let ctx = Ctx::load(c)?;
    let prepared = pipeline::prepare(&ctx.cfg, &ctx.base)?;
    let table = ctx.out(Path::new("samples_table.csv"));
    io::write_feature_table(&table, &prepared.samples)?;
    let report = json!({
        "layers": prepared.loaded.summaries(&ctx.cfg),
        "extraction": prepared.extraction,
        "class_counts": prepared.samples.class_counts(),
        "kriging": prepared.loaded.kriging,
    });
    let report = write_json(&report, ctx.out(Path::new("table_report.json")))?;
    wrote(&[table, report]);
    Ok(())
}

fn cmd_prune(c: &Common) -> Result<()> {
    let ctx = Ctx::load(c)?;
    let prepared = pipeline::prepare(&ctx.cfg, &ctx.base)?;
    let result = pipeline::prune(&ctx.cfg, &prepared.samples)?;
    let corr = pipeline::correlations(&prepared.samples)?;
    let report = json!({
        "threshold": ctx.cfg.correlation_threshold,
        "kept": result.kept,
        "dropped": result.dropped,
        "correlation": corr,
    });
    wrote(&[write_json(&report, ctx.out(Path::new("prune.json")))?]);
    println!("kept {} of {} features", result.kept.len(), corr.n());
    Ok(())
}

/// Shared front half of tune/train: pruned table and split.
struct Prepped {
    prepared: pipeline::Prepared,
    table: greenprior::dataset::FeatureTable,
    pruning: greenprior::dataset::PruneResult,
    train: Vec<usize>,
    test: Vec<usize>,
}

fn prep(ctx: &Ctx) -> Result<Prepped> {
    let prepared = pipeline::prepare(&ctx.cfg, &ctx.base)?;
    let pruning = pipeline::prune(&ctx.cfg, &prepared.samples)?;
    let table = select_features(&prepared.samples, &pruning.kept)
        .map_err(at("prune"))?;
    let (train, test) = pipeline::split(&ctx.cfg, &table)?;
    Ok(Prepped {
        prepared,
        table,
        pruning,
        train,
        test,
    })
}

fn cmd_tune(c: &Common) -> Result<()> {
    let mut ctx = Ctx::load(c)?;
    if ctx.cfg.tuning.budget == 0 {
        ctx.cfg.tuning.budget = 20.max(ctx.cfg.tuning.n_init);
    }
    let p = prep(&ctx)?;
    let train = p.table.subset(&p.train);
    let (params, result) = pipeline::tune(&ctx.cfg, &train, "tune")?;
    let report = json!({
        "model_kind": ctx.cfg.model.kind,
        "features": p.table.feature_names(),
        "best_params": params,
        "search": result,
    });
    wrote(&[write_json(&report, ctx.out(Path::new("tuning.json")))?]);
    Ok(())
}

fn cmd_train(c: &Common) -> Result<()> {
    let ctx = Ctx::load(c)?;
    let p = prep(&ctx)?;
    let s1 = pipeline::run_stage(&ctx.cfg, &p.table, &p.train, &p.test, None, "binary")?;
    let table2 = greenprior::dataset::drop_features(&p.table, &ctx.cfg.drop_for_priority)
        .map_err(at("probability"))?;
    let reuse = (ctx.cfg.tuning.budget == 0 || ctx.cfg.tuning.reuse_stage1_params)
        .then(|| s1.report.params.clone());
    let s2 = pipeline::run_stage(&ctx.cfg, &table2, &p.train, &p.test, reuse, "probability")?;
    let o = &ctx.cfg.outputs;
    let files = vec![
        write_json(&s1.model, ctx.out(&o.model_stage1))?,
        write_json(&s2.model, ctx.out(&o.model_stage2))?,
        write_json(
            &json!({
                "pruning": p.pruning,
                "extraction": p.prepared.extraction,
                "train_rows": p.train.len(),
                "test_rows": p.test.len(),
                "stage1": s1.report,
                "stage2": s2.report,
                "importance": pipeline::report_importance(&s2.model)?,
            }),
            ctx.out(Path::new("metrics.json")),
        )?,
    ];
    wrote(&files);
    println!(
        "stage 1 OA {:.4}, stage 2 OA {:.4}",
        s1.report.metrics.oa, s2.report.metrics.oa
    );
    Ok(())
}

fn cmd_predict(c: &Common) -> Result<()> {
    let ctx = Ctx::load(c)?;
    let o = &ctx.cfg.outputs;
    let m1 = pipeline::read_model(&ctx.out(&o.model_stage1), "predict")?;
    let m2 = pipeline::read_model(&ctx.out(&o.model_stage2), "predict")?;
    let loaded = pipeline::load_layers(&ctx.cfg, &ctx.base)?;
    let stack = loaded.feature_stack().map_err(at("layers"))?;
    let pixels = pipeline::pixel_table(&stack)?;
    let p1 = pipeline::predict_probability(&m1, &pixels, &loaded.target, "PROBABILITY_STAGE1")?;
    let binary = pipeline::classify(&p1, ctx.cfg.class_threshold, "BINARY");
    let p2 = pipeline::predict_probability(&m2, &pixels, &loaded.target, "PROBABILITY")?;
    wrote(&[
        write_grid(&binary, ctx.out(&o.binary))?,
        write_grid(&p2, ctx.out(&o.probability))?,
    ]);
    Ok(())
}

fn cmd_fuse(c: &Common) -> Result<()> {
    let ctx = Ctx::load(c)?;
    let o = &ctx.cfg.outputs;
    let binary = io::read_grid(&ctx.out(&o.binary)).map_err(at("fuse"))?;
    let proba = io::read_grid(&ctx.out(&o.probability)).map_err(at("fuse"))?;
    let priority = pipeline::fuse_priority(&binary, &proba)?;
    wrote(&[write_grid(&priority, ctx.out(&o.priority))?]);
    Ok(())
}

fn cmd_validate(c: &Common) -> Result<()> {
    let ctx = Ctx::load(c)?;
    if ctx.cfg.validation.is_empty() {
        return Err(config_error("no validation entries configured"));
    }
    let names: Vec<&str> = ctx.cfg.validation.iter().map(|v| v.grid.as_str()).collect();
    let needs_layers = ctx.cfg.layers.iter().any(|l| names.contains(&l.name()));
    let loaded = if needs_layers {
        Some(pipeline::load_layers(&ctx.cfg, &ctx.base)?)
    } else {
        None
    };
    let reports = pipeline::run_validations(&ctx.cfg, &ctx.base, loaded.as_ref())?;
    for (name, r) in &reports {
        println!("{name}: rmse {:.4} mae {:.4} bias {:.4} (n = {})", r.rmse, r.mae, r.bias, r.n);
    }
    wrote(&[write_json(&reports, ctx.out(Path::new("validation.json")))?]);
    Ok(())
}

fn cmd_render(c: &Common) -> Result<()> {
    let ctx = Ctx::load(c)?;
    let o = &ctx.cfg.outputs;
    if o.render.as_os_str().is_empty() {
        return Err(config_error("outputs.render is empty"));
    }
    let priority = io::read_grid(&ctx.out(&o.priority)).map_err(at("render"))?;
    let files = io::render_map(&priority, &io::ColorRamp::priority(), &ctx.out(&o.render))
        .map_err(at("render"))?;
    wrote(&files);
    Ok(())
}

fn cmd_run_all(c: &Common) -> Result<()> {
    let ctx = Ctx::load(c)?;
    let report = pipeline::run_all(&ctx.cfg, &ctx.base, &ctx.out)?;
    println!(
        "stage 1 OA {:.4}, stage 2 OA {:.4}{}; kept {} features; top feature {}",
        report.stage1.metrics.oa,
        report.stage2.metrics.oa,
        if report.stage2_low_accuracy { " (low)" } else { "" },
        report.pruning.kept.len(),
        report
            .importance
            .ranking
            .first()
            .map_or("-", |r| r.feature.as_str()),
    );
    let mut files: Vec<PathBuf> = report.outputs.values().map(|p| ctx.out(p)).collect();
    files.push(ctx.out(&ctx.cfg.outputs.report));
    wrote(&files);
    Ok(())
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("GREENPRIOR_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| config_error(format!("GREENPRIOR_THREADS must be a positive integer, got '{v}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("configuring the thread pool")?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Krige(c) => cmd_krige(c),
        Command::Indices(c) => cmd_indices(c),
        Command::Table(c) => cmd_table(c),
        Command::Prune(c) => cmd_prune(c),
        Command::Tune(c) => cmd_tune(c),
        Command::Train(c) => cmd_train(c),
        Command::Predict(c) => cmd_predict(c),
        Command::Fuse(c) => cmd_fuse(c),
        Command::Validate(c) => cmd_validate(c),
        Command::Render(c) => cmd_render(c),
        Command::RunAll(c) => cmd_run_all(c),
    }
}

/// `(class, stage)` of a failure; unknown errors count as data errors.
fn classify(e: &anyhow::Error) -> (ErrorClass, String) {
    if let Some(p) = e.downcast_ref::<PipelineError>() {
        return (p.class(), p.stage.to_string());
    }
    if let Some(s) = e.downcast_ref::<SynthError>() {
        let class = match s {
            SynthError::InvalidSpec(_) => ErrorClass::Config,
            SynthError::Io(_) => ErrorClass::Data,
        };
        return (class, "synth".into());
    }
    if e.downcast_ref::<greenprior::io::IoError>().is_some() {
        return (ErrorClass::Data, "io".into());
    }
    (ErrorClass::Data, "cli".into())
}

fn exit_code(class: ErrorClass) -> u8 {
    match class {
        ErrorClass::Config => 2,
        ErrorClass::Data => 3,
        ErrorClass::Numeric => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (class, stage) = classify(&e);
            let line = json!({
                "error": {
                    "class": class,
                    "stage": stage,
                    "message": e.to_string(),
                }
            });
            eprintln!("{line}");
            ExitCode::from(exit_code(class))
        }
    }
}
