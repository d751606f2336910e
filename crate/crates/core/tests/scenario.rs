use std::collections::BTreeMap;
use std::path::Path;

use greenprior::pipeline::{prepare, prune, PipelineConfig};
use greenprior::synth::{build_scenario, generate_scenario, ScenarioSpec, CONFIG_FILE, FEATURE_COUNT};

fn read_tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn same_seed_gives_byte_identical_bundles() {
    let spec = ScenarioSpec {
        ncols: 60,
        nrows: 60,
        class_counts: [300, 250],
        ..ScenarioSpec::with_seed(5)
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    generate_scenario(&spec, a.path()).unwrap();
    generate_scenario(&spec, b.path()).unwrap();
    let (ta, tb) = (read_tree(a.path()), read_tree(b.path()));
    assert!(ta.len() > 20);
    assert_eq!(ta.keys().collect::<Vec<_>>(), tb.keys().collect::<Vec<_>>());
    for (k, v) in &ta {
        assert!(v == &tb[k], "{k} differs");
    }
    let c = tempfile::tempdir().unwrap();
    generate_scenario(&ScenarioSpec { seed: 6, ..spec }, c.path()).unwrap();
    assert_ne!(read_tree(c.path())["samples.csv"], ta["samples.csv"]);
}

#[test]
fn samples_ground_truth_and_districts_are_consistent() {
    let spec = ScenarioSpec::default();
    let sc = build_scenario(&spec).unwrap();
    let mask = &sc.truth.vegetation_mask;

    // Class counts are exact; flipped labels stay within the noise budget.
    let ones = sc.samples.iter().filter(|p| p.label == 1).count();
    assert_eq!([sc.samples.len() - ones, ones], spec.class_counts);
    let wrong = sc
        .samples
        .iter()
        .filter(|p| mask.sample(p.x, p.y).map(|m| m as u8) != Some(p.label))
        .count();
    assert!(wrong as f64 <= spec.label_noise * sc.samples.len() as f64 + 1.0, "{wrong} flipped");

    // Districts tile the city: each city cell centre is in exactly one zone.
    let g = &sc.target;
    let mut city = 0;
    for row in (0..g.nrows).step_by(3) {
        for col in (0..g.ncols).step_by(3) {
            if mask.is_nodata(mask.get(row, col)) {
                continue;
            }
            city += 1;
            let (x, y) = g.cell_center(row, col);
            let hits = sc.zones.zones().iter().filter(|z| z.contains(x, y)).count();
            assert_eq!(hits, 1, "cell ({row}, {col}) in {hits} districts");
        }
    }
    assert!(city > 1000);
    assert_eq!(sc.zones.len(), spec.n_districts);

    // Criticality: 0 on vegetation, within [0, 1] elsewhere, spanning both ends.
    let crit = &sc.truth.criticality;
    let mut nonveg = Vec::new();
    for (m, c) in mask.values().iter().zip(crit.values()) {
        match *m {
            0.0 => assert_eq!(*c, 0.0),
            1.0 => nonveg.push(*c),
            _ => assert!(crit.is_nodata(*c)),
        }
    }
    assert!(nonveg.iter().all(|c| (0.0..=1.0).contains(c)));
    assert_eq!(nonveg.iter().cloned().fold(f64::INFINITY, f64::min), 0.0);
    assert_eq!(nonveg.iter().cloned().fold(0.0, f64::max), 1.0);
}

#[test]
fn bundle_prunes_to_exactly_the_unplanted_layers() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, _) = generate_scenario(&ScenarioSpec::default(), dir.path()).unwrap();
    assert_eq!(manifest.planted.len(), 12);
    let cfg = PipelineConfig::load(&dir.path().join(CONFIG_FILE)).unwrap();
    let prepared = prepare(&cfg, dir.path()).unwrap();
    assert_eq!(prepared.samples.n_features(), FEATURE_COUNT);
    let result = prune(&cfg, &prepared.samples).unwrap();
    assert_eq!(result.kept.len(), 24);
    let mut dropped = result.dropped.clone();
    let mut copies: Vec<String> = manifest.planted.iter().map(|p| p.copy.clone()).collect();
    dropped.sort();
    copies.sort();
    assert_eq!(dropped, copies);
}

#[test]
fn invalid_specs_are_rejected() {
    let too_many = ScenarioSpec {
        ncols: 20,
        nrows: 20,
        ..ScenarioSpec::default()
    };
    assert!(build_scenario(&too_many).is_err());
    assert!(build_scenario(&ScenarioSpec { label_noise: 0.7, ..ScenarioSpec::default() }).is_err());
    assert!(build_scenario(&ScenarioSpec { n_redundant: 13, ..ScenarioSpec::default() }).is_err());
}
