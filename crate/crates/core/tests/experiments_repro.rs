use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use chstep_core::diagnostics::RECORD_HEADER;
use chstep_core::experiments::{
    read_snapshot_bin, run_adaptive, run_certify, run_compare, ExperimentConfig, ExperimentKind,
};

/// All output files with the wall-time column of run records removed.
fn outputs(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        let bytes = fs::read(&path).unwrap();
        let text = String::from_utf8_lossy(&bytes);
        let bytes = if text.starts_with(RECORD_HEADER) {
            text.lines()
                .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head).to_string() + "\n")
                .collect::<String>()
                .into_bytes()
        } else {
            bytes
        };
        files.insert(name, bytes);
    }
    files
}

fn small(kind: ExperimentKind, dir: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::defaults(kind);
    cfg.output_dir = dir.to_path_buf();
    cfg.model.grid_size = 16;
    cfg
}

fn assert_reproducible(run: impl Fn(&Path)) {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run(a.path());
    run(b.path());
    let (fa, fb) = (outputs(a.path()), outputs(b.path()));
    assert!(fa.contains_key("manifest.json"), "no manifest in {:?}", fa.keys());
    assert_eq!(fa.keys().collect::<Vec<_>>(), fb.keys().collect::<Vec<_>>());
    for (name, bytes) in &fa {
        // The manifest and summaries carry timings.
        if name.ends_with(".json") {
            continue;
        }
        assert!(bytes == &fb[name], "{name} differs between identical runs");
    }
}

#[test]
fn compare_is_reproducible() {
    assert_reproducible(|dir| {
        let mut cfg = small(ExperimentKind::Compare, dir);
        cfg.compare.taus = vec![0.05, 0.01];
        cfg.compare.final_time = 0.05;
        run_compare(&cfg).unwrap();
    });
}

#[test]
fn adaptive_is_reproducible() {
    assert_reproducible(|dir| {
        let mut cfg = small(ExperimentKind::Adaptive, dir);
        cfg.adaptive.final_time = 0.5;
        cfg.adaptive.betas = vec![10.0, 1000.0];
        cfg.adaptive.reference = false;
        run_adaptive(&cfg).unwrap();
    });
}

#[test]
fn certify_is_reproducible_and_passes() {
    assert_reproducible(|dir| {
        let mut cfg = small(ExperimentKind::Certify, dir);
        cfg.certify.meshes = 4;
        cfg.certify.steps = 100;
        let report = run_certify(&cfg).unwrap();
        assert!(report.all_pass);
    });
}

#[test]
fn manifest_echoes_config() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(ExperimentKind::Compare, dir.path());
    cfg.compare.taus = vec![0.05];
    cfg.compare.final_time = 0.05;
    cfg.seed = 77;
    run_compare(&cfg).unwrap();
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 77);
    assert_eq!(manifest["experiment"], "compare");
    assert_eq!(manifest["grid"]["size"], 16);
    assert!(manifest.to_string().contains("bdf2"));
}

#[test]
fn config_round_trips_through_toml() {
    for kind in [
        ExperimentKind::Accuracy,
        ExperimentKind::Compare,
        ExperimentKind::Adaptive,
        ExperimentKind::Coarsen,
        ExperimentKind::Certify,
    ] {
        let cfg = ExperimentConfig::defaults(kind);
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&text, Some(kind)).unwrap(), cfg);
    }
    let partial = "seed = 5\n[model]\ngrid_size = 64\n[coarsen]\nbeta = 100.0\n";
    let cfg = ExperimentConfig::from_toml_str(partial, Some(ExperimentKind::Coarsen)).unwrap();
    assert_eq!(cfg.seed, 5);
    assert_eq!(cfg.model.grid_size, 64);
    assert_eq!(cfg.coarsen.beta, 100.0);
    assert_eq!(cfg.coarsen.final_time, 500.0);
    assert!(ExperimentConfig::from_toml_str("[model]\ngrid_size = 7\n", Some(ExperimentKind::Coarsen)).is_err());
}

#[test]
fn snapshot_binary_round_trip() {
    use chstep_core::experiments::{random_initial_field, write_snapshot_bin};
    use chstep_core::Grid;
    let grid = Grid::new(3.0, 8).unwrap();
    let field = random_initial_field(8, 0.5, 3);
    let mut buf = Vec::new();
    write_snapshot_bin(&mut buf, &grid, 1.25, &field).unwrap();
    let (length, t, back) = read_snapshot_bin(&buf).unwrap();
    assert_eq!((t, length), (1.25, 3.0));
    assert_eq!(back, field);
}

#[test]
fn shipped_configs_match_defaults() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for (name, kind) in [
        ("accuracy", ExperimentKind::Accuracy),
        ("compare", ExperimentKind::Compare),
        ("adaptive", ExperimentKind::Adaptive),
        ("coarsen", ExperimentKind::Coarsen),
        ("certify", ExperimentKind::Certify),
    ] {
        let text = fs::read_to_string(dir.join(format!("{name}.toml"))).unwrap();
        let cfg = ExperimentConfig::from_toml_str(&text, Some(kind)).unwrap();
        assert_eq!(cfg, ExperimentConfig::defaults(kind), "{name}.toml");
    }
}
