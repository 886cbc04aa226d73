use std::path::Path;
use std::process::{Command, Output};

use sthawkes::hotspot::GridSummary;
use sthawkes::io::{matrix_from_csv, read_json, read_streams, RunManifest};

const SMALL: &str = r#"
version = 1
seed = 3

[model]
mu = 0.5
alpha = 1.0
beta = 1.0
sigma_sq = 0.05

[simulate]
streams = 5
limit = { count = 20 }

[grid]
n_mc = 3
t_eval = 2.0
"#;

fn sthawkes(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sthawkes")).args(args).current_dir(dir).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn with_config(extra: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), format!("{SMALL}{extra}")).unwrap();
    dir
}

#[test]
fn simulate_writes_streams_sidecar_and_manifest() {
    let dir = with_config("");
    let o = sthawkes(dir.path(), &["simulate", "--config", "run.toml", "--out", "sim"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let (streams, meta) = read_streams(&dir.path().join("sim/streams.csv")).unwrap();
    assert_eq!(streams.len(), 5);
    assert!(streams.iter().all(|s| s.len() <= 20));
    let meta = meta.expect("sidecar");
    assert_eq!(meta.seed, Some(3));
    let manifest: RunManifest = read_json(&dir.path().join("sim/manifest.json")).unwrap();
    assert_eq!(manifest.command, "simulate");
    assert!(manifest.outputs.iter().any(|p| p.ends_with("streams.csv")));
}

#[test]
fn seed_flag_overrides_config() {
    let dir = with_config("");
    for (out, seed) in [("a", "3"), ("b", "4")] {
        let o = sthawkes(dir.path(), &["simulate", "--config", "run.toml", "--seed", seed, "--out", out]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let a = std::fs::read(dir.path().join("a/streams.csv")).unwrap();
    let b = std::fs::read(dir.path().join("b/streams.csv")).unwrap();
    assert_ne!(a, b);
}

#[test]
fn missing_region_map_is_a_config_error_naming_the_file() {
    let dir = with_config("\n[thinning]\nregion_map = \"maps/nowhere.toml\"\n");
    let o = sthawkes(dir.path(), &["hotspots", "--config", "run.toml", "--out", "t"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nowhere.toml"), "{}", stderr(&o));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = with_config("\n[em]\nmax_iterations = 3\n");
    let o = sthawkes(dir.path(), &["fit-em", "--config", "run.toml", "--out", "e"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("max_iterations"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(sthawkes(dir.path(), &["simulate", "--bogus", "--out", "x"]).status.code(), Some(2));
    assert_eq!(sthawkes(dir.path(), &["simulate"]).status.code(), Some(2));
    assert_eq!(sthawkes(dir.path(), &["simulate", "--jobs", "0", "--out", "x"]).status.code(), Some(2));
}

#[test]
fn report_without_runs_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir(dir.path().join("empty")).unwrap();
    let o = sthawkes(dir.path(), &["report", "--input", "empty", "--out", "r"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn thin_requires_existing_input() {
    let dir = with_config("");
    let o = sthawkes(dir.path(), &["thin", "--config", "run.toml", "--input", "absent.csv", "--out", "t"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("absent.csv"), "{}", stderr(&o));
}

#[test]
fn heatmap_twins_match_the_grids() {
    let dir = with_config("");
    let o = sthawkes(dir.path(), &["hotspots", "--config", "run.toml", "--out", "h"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for (csv, json) in [("heatmap_true.csv", "truth_grid.json"), ("heatmap_estimated.csv", "estimated_grid.json")] {
        let grid: GridSummary = read_json(&dir.path().join("h").join(json)).unwrap();
        let text = std::fs::read_to_string(dir.path().join("h").join(csv)).unwrap();
        assert_eq!(matrix_from_csv(&text, Path::new(csv)).unwrap(), grid.matrix());
    }
    assert!(dir.path().join("h/heatmap_true.png").exists());
}

#[test]
fn thin_then_fit_em_on_the_flagged_file() {
    let dir = with_config("\n[thinning]\nrate = 0.7\n\n[em]\nmax_iters = 10\n");
    for args in [
        &["simulate", "--config", "run.toml", "--out", "s"][..],
        &["thin", "--config", "run.toml", "--input", "s/streams.csv", "--out", "t"],
        &["fit-em", "--config", "run.toml", "--input", "t/flagged.csv", "--out", "e"],
    ] {
        let o = sthawkes(dir.path(), args);
        assert!(o.status.success(), "{:?}: {}", args, stderr(&o));
    }
    let (full, _) = read_streams(&dir.path().join("s/streams.csv")).unwrap();
    let (flagged, _) = read_streams(&dir.path().join("t/flagged.csv")).unwrap();
    let (reported, _) = read_streams(&dir.path().join("t/reported.csv")).unwrap();
    for ((f, g), r) in full.iter().zip(&flagged).zip(&reported) {
        assert_eq!(f.len(), g.len());
        assert!(r.len() <= f.len());
    }
    let summary: serde_json::Value = read_json(&dir.path().join("e/summary.json")).unwrap();
    assert!(summary["estimate"]["mu"].as_f64().unwrap() > 0.0);
}

#[test]
fn outputs_do_not_depend_on_thread_count() {
    let dir = with_config("\n[thinning]\nrate = 0.5\n\n[em]\nmax_iters = 5\n");
    for jobs in ["1", "3"] {
        for cmd in ["simulate", "fit-em", "hotspots"] {
            let out = format!("{cmd}_{jobs}");
            let o = sthawkes(dir.path(), &[cmd, "--config", "run.toml", "--jobs", jobs, "--out", &out]);
            assert!(o.status.success(), "{}", stderr(&o));
        }
    }
    for file in ["simulate_X/streams.csv", "fit-em_X/em_fit.json", "fit-em_X/training.csv", "hotspots_X/truth_grid.json"] {
        let a = std::fs::read(dir.path().join(file.replace('X', "1"))).unwrap();
        let b = std::fs::read(dir.path().join(file.replace('X', "3"))).unwrap();
        assert_eq!(a, b, "{file}");
    }
}
