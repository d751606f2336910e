use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn greenprior(args: &[&str], paths: &[(&str, &Path)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_greenprior"));
    cmd.args(args);
    for (flag, p) in paths {
        cmd.arg(flag).arg(p);
    }
    cmd.output().unwrap()
}

fn error_json(o: &Output) -> serde_json::Value {
    let line = String::from_utf8_lossy(&o.stderr);
    let last = line.lines().last().unwrap_or_default();
    serde_json::from_str(last).unwrap_or_else(|_| panic!("not JSON: {line}"))
}

/// A small bundle whose config trains quickly.
fn small_bundle(dir: &Path) -> PathBuf {
    let spec = dir.join("spec.json");
    std::fs::write(&spec, r#"{"ncols": 80, "nrows": 80, "class_counts": [500, 400], "seed": 9}"#).unwrap();
    let bundle = dir.join("bundle");
    let o = greenprior(&["synth"], &[("--config", &spec), ("--out-dir", &bundle)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let cfg_path = bundle.join("config.json");
    let mut cfg: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&cfg_path).unwrap()).unwrap();
    cfg["model"]["params"] = serde_json::json!({"n_trees": 40});
    cfg["tuning"]["budget"] = 6.into();
    cfg["tuning"]["n_init"] = 3.into();
    cfg["tuning"]["space"] = serde_json::json!({"max_depth": {"type": "int", "low": 2, "high": 6}});
    std::fs::write(&cfg_path, cfg.to_string()).unwrap();
    cfg_path
}

#[test]
fn subcommands_chain_through_an_output_directory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_bundle(dir.path());
    let out = dir.path().join("out");
    let steps: [(&str, &[&str]); 10] = [
        ("krige", &["PM25.asc", "kriging.json"]),
        ("indices", &["NDVI.asc"]),
        ("table", &["samples_table.csv", "table_report.json"]),
        ("prune", &["prune.json"]),
        ("tune", &["tuning.json"]),
        ("train", &["model_stage1.json", "model_stage2.json", "metrics.json"]),
        ("predict", &["binary.asc", "probability.asc"]),
        ("fuse", &["priority.asc"]),
        ("render", &["priority.png"]),
        ("validate", &["validation.json"]),
    ];
    for (cmd, files) in steps {
        let o = greenprior(&[cmd], &[("--config", &cfg), ("--out-dir", &out)]);
        assert!(o.status.success(), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
        for f in files {
            assert!(out.join(f).is_file(), "{cmd} did not write {f}");
        }
    }
    let prune: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("prune.json")).unwrap()).unwrap();
    assert!(prune.to_string().contains("kept"));
}

#[test]
fn run_all_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_bundle(dir.path());
    let out = dir.path().join("out");
    let o = greenprior(&["run-all", "--seed", "3"], &[("--config", &cfg), ("--out-dir", &out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["seed"], 3);
    assert!(report["stage1"]["metrics"]["oa"].as_f64().unwrap() > 0.5);
}

#[test]
fn errors_are_json_with_class_exit_codes() {
    let dir = tempfile::tempdir().unwrap();

    // Configuration: unreadable config.
    let missing = dir.path().join("nope.json");
    let o = greenprior(&["run-all"], &[("--config", &missing)]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_json(&o)["error"]["class"], "config");

    // Configuration: unknown field.
    let cfg = small_bundle(dir.path());
    let text = std::fs::read_to_string(&cfg).unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, text.replacen('{', r#"{"bogus": 1,"#, 1)).unwrap();
    let o = greenprior(&["table"], &[("--config", &bad)]);
    assert_eq!(o.status.code(), Some(2));

    // Data: a layer file vanished.
    std::fs::remove_file(cfg.parent().unwrap().join("layers/WS.asc")).unwrap();
    let o = greenprior(&["table"], &[("--config", &cfg), ("--out-dir", &dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(3));
    let e = error_json(&o);
    assert_eq!(e["error"]["class"], "data");
    assert!(e["error"]["message"].as_str().unwrap().contains("WS"));

    // Data: predict without trained models.
    let o = greenprior(&["predict"], &[("--config", &cfg), ("--out-dir", &dir.path().join("empty"))]);
    assert_eq!(o.status.code(), Some(3));
}
