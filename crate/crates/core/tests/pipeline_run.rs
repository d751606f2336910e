use std::path::Path;

use greenprior::io::{read_grid, read_samples, write_grid, write_samples};
use greenprior::ml::ModelKind;
use greenprior::pipeline::{
    fuse_priority, prepare, run, run_all, ErrorClass, PipelineConfig, RunProducts,
};
use greenprior::raster::{Grid, GridGeoref};
use greenprior::synth::{generate_scenario, ScenarioSpec, CONFIG_FILE};
use tempfile::TempDir;

fn small_bundle(seed: u64) -> (TempDir, PipelineConfig) {
    let spec = ScenarioSpec {
        ncols: 80,
        nrows: 80,
        class_counts: [500, 400],
        ..ScenarioSpec::with_seed(seed)
    };
    let dir = tempfile::tempdir().unwrap();
    generate_scenario(&spec, dir.path()).unwrap();
    let mut cfg = PipelineConfig::load(&dir.path().join(CONFIG_FILE)).unwrap();
    cfg.model.params.insert("n_trees".into(), 60.into());
    (dir, cfg)
}

fn check_priority(p: &RunProducts) {
    for ((b, q), pr) in p.binary.values().iter().zip(p.probability.values()).zip(p.priority.values()) {
        let nodata = p.binary.is_nodata(*b) || p.probability.is_nodata(*q);
        assert_eq!(p.priority.is_nodata(*pr), nodata);
        if nodata {
            continue;
        }
        if *b == 0.0 {
            assert_eq!(pr.to_bits(), 0.0f64.to_bits());
        } else {
            assert_eq!(*b, 1.0);
            assert!((0.0..=1.0).contains(pr));
            assert_eq!(pr, q);
        }
    }
}

#[test]
fn priority_nodata_is_the_union_of_input_nodata() {
    let (dir, cfg) = small_bundle(3);
    // Knock a hole into one coarse input.
    let ws_path = dir.path().join("layers/WS.asc");
    let ws = read_grid(&ws_path).unwrap();
    let g = ws.georef;
    let holed = Grid::from_fn("WS", g, |r, c| if r == 4 && c < 5 { g.nodata } else { ws.get(r, c) });
    write_grid(&holed, &ws_path).unwrap();

    let products = run(&cfg, dir.path()).unwrap();
    check_priority(&products);

    let stack = prepare(&cfg, dir.path()).unwrap().stack;
    let n = stack.georef.len();
    let union: Vec<bool> = (0..n)
        .map(|i| stack.layers().iter().any(|l| l.is_nodata(l.values()[i])))
        .collect();
    let got: Vec<bool> = products.priority.values().iter().map(|v| products.priority.is_nodata(*v)).collect();
    assert_eq!(got, union);
    let hole = products.priority.georef.cell_at(g.x_origin + 1.5 * g.cell_size, g.y_origin + 4.5 * g.cell_size);
    let (r, c) = hole.unwrap();
    assert!(products.priority.is_nodata(products.priority.get(r, c)));
}

#[test]
fn empty_drop_list_reproduces_the_first_stage() {
    let (dir, mut cfg) = small_bundle(4);
    cfg.drop_for_priority.clear();
    let p = run(&cfg, dir.path()).unwrap();
    assert_eq!(p.model_stage1, p.model_stage2);
    assert_eq!(p.report.stage1.metrics, p.report.stage2.metrics);
    check_priority(&p);
    // Binary is the thresholded probability.
    for (b, q) in p.binary.values().iter().zip(p.probability.values()) {
        if !p.binary.is_nodata(*b) {
            assert_eq!(*b, if *q >= cfg.class_threshold { 1.0 } else { 0.0 });
        }
    }
}

fn relabel_all(dir: &Path, label: u8) {
    let path = dir.join("samples.csv");
    let mut pts = read_samples(&path).unwrap();
    pts.iter_mut().for_each(|p| p.label = label);
    write_samples(&path, &pts).unwrap();
}

#[test]
fn single_class_samples() {
    let (dir, mut cfg) = small_bundle(5);
    relabel_all(dir.path(), 0);
    let p = run(&cfg, dir.path()).unwrap();
    assert!(p.binary.values().iter().all(|&b| p.binary.is_nodata(b) || b == 0.0));
    assert!(p.priority.values().iter().all(|&v| p.priority.is_nodata(v) || v == 0.0));

    cfg.model.kind = ModelKind::GbdtDepthwise;
    cfg.model.params.clear();
    let err = run(&cfg, dir.path()).err().expect("boosting needs two classes");
    assert_eq!(err.class(), ErrorClass::Data);
    assert_eq!(err.stage, "binary");
}

#[test]
fn run_all_writes_every_output() {
    let (dir, cfg) = small_bundle(6);
    let out = dir.path().join("out");
    let report = run_all(&cfg, dir.path(), &out).unwrap();
    for f in ["binary.asc", "probability.asc", "priority.asc", "priority.png", "report.json", "model_stage1.json", "model_stage2.json"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let prio = read_grid(&out.join("priority.asc")).unwrap();
    assert_eq!(prio.valid_count(), report.priority.valid_cells);
    let sum: f64 = report.importance.ranking.iter().map(|r| r.importance).sum();
    assert!((sum - 1.0).abs() <= 1e-9);
    assert!(!report.stage2.features.contains(&"NDVI".to_string()));
    assert!(report.stage1.features.contains(&"NDVI".to_string()));
    assert!(report.validation["T2"].rmse >= report.validation["T2"].mae);
}

#[test]
fn fusion_hand_case_and_invalid_binary() {
    let g = GridGeoref::new(4, 1, 0.0, 0.0, 1.0, -9999.0).unwrap();
    let binary = Grid::new("b", g, vec![0.0, 1.0, 1.0, -9999.0]).unwrap();
    let proba = Grid::new("p", g, vec![0.9, 0.3, -9999.0, 0.5]).unwrap();
    let f = fuse_priority(&binary, &proba).unwrap();
    assert_eq!(f.values(), &[0.0, 0.3, -9999.0, -9999.0]);
    let bad = Grid::new("b", g, vec![0.0, 0.5, 1.0, 1.0]).unwrap();
    assert_eq!(fuse_priority(&bad, &proba).unwrap_err().class(), ErrorClass::Config);
}

#[test]
fn configuration_errors_are_classified() {
    let (dir, cfg) = small_bundle(7);
    let mut bad = cfg.clone();
    bad.drop_for_priority = vec!["NOPE".into()];
    assert_eq!(bad.validate().unwrap_err().class(), ErrorClass::Config);

    let mut bad = cfg.clone();
    bad.correlation_threshold = 1.5;
    assert_eq!(run(&bad, dir.path()).err().unwrap().class(), ErrorClass::Config);

    let text = std::fs::read_to_string(dir.path().join(CONFIG_FILE)).unwrap();
    let mut json: serde_json::Value = serde_json::from_str(&text).unwrap();
    json["surprise"] = 1.into();
    let p = dir.path().join("bad.json");
    std::fs::write(&p, json.to_string()).unwrap();
    assert_eq!(PipelineConfig::load(&p).unwrap_err().class(), ErrorClass::Config);

    std::fs::remove_file(dir.path().join("layers/T2.asc")).unwrap();
    let err = run(&cfg, dir.path()).err().unwrap();
    assert_eq!(err.class(), ErrorClass::Data);
}
