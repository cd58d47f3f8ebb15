//! End-to-end exercises of the binary: subcommands, flags, and exit codes
//! (0 success, 2 config error, 3 numerical failure, 4 partial failure).

use std::path::Path;
use std::process::{Command, Output};

fn plumeloc(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_plumeloc"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

/// 9x9 grid over a short horizon: every solve involved finishes in
/// milliseconds.
fn write_tiny_config(dir: &Path) -> String {
    let path = dir.join("tiny.cfg");
    std::fs::write(
        &path,
        "domain_size = 1e-5, 1e-5\n\
         grid = 9, 9\n\
         diffusion = 1e-10\n\
         flow = 5e-7, 0\n\
         degradation = 0.01\n\
         emission = 1.0\n\
         source_pos = 5e-6, 5e-6\n\
         injection_duration = 0.1\n\
         dt = auto\n\
         total_time = 0.05\n\
         boundary = dirichlet\n\
         noise_sigma_frac = 0.1\n",
    )
    .unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn simulate_writes_snapshots() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let out = plumeloc(
        &[
            "simulate",
            "--config",
            &cfg,
            "--times",
            "0.01,0.05",
            "--out",
            "figs",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{out:?}");
    assert!(dir.path().join("figs/field_t0.01s.pgm").exists());
    assert!(dir.path().join("figs/field_t0.05s.csv").exists());
}

#[test]
fn gen_data_writes_dataset_with_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let out = plumeloc(
        &[
            "gen-data",
            "--config",
            &cfg,
            "--samples",
            "3",
            "--out",
            "data",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{out:?}");
    assert!(dir.path().join("data/dataset.csv").exists());
    assert!(dir.path().join("data/dataset.json").exists());
}

#[test]
fn localize_map_writes_estimate_json() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let out = plumeloc(&["localize", "map", "--config", &cfg], dir.path());
    assert_eq!(out.status.code(), Some(0), "{out:?}");
    let text = std::fs::read_to_string(dir.path().join("out/estimate.json")).unwrap();
    let est: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(est["method"], "MAP grid search");
    assert!(est["error"].as_f64().unwrap() >= 0.0);
}

#[test]
fn missing_config_file_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = plumeloc(&["localize", "map", "--config", "no-such.cfg"], dir.path());
    assert_eq!(out.status.code(), Some(2), "{out:?}");
}

#[test]
fn malformed_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.cfg");
    std::fs::write(&path, "grid = banana\n").unwrap();
    let out = plumeloc(
        &["localize", "map", "--config", path.to_str().unwrap()],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2), "{out:?}");
    assert!(String::from_utf8_lossy(&out.stderr).contains("grid"));
}

#[test]
fn unknown_method_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let out = plumeloc(&["localize", "gradient", "--config", &cfg], dir.path());
    assert_eq!(out.status.code(), Some(2), "{out:?}");
}

#[test]
fn unknown_override_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let out = plumeloc(
        &[
            "bench",
            "--config",
            &cfg,
            "--methods",
            "map",
            "--set",
            "warp=9",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2), "{out:?}");
}

#[test]
fn bench_with_failing_method_exits_4_but_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let out = plumeloc(
        &[
            "bench",
            "--config",
            &cfg,
            "--methods",
            "map,pinn",
            "--set",
            "pinn_epochs=0",
            "--format",
            "md",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(4), "{out:?}");
    let text = std::fs::read_to_string(dir.path().join("out/report.md")).unwrap();
    assert!(text.starts_with("Method | Estimated Source | True Source | Error (m)"));
    assert!(text.contains("PINN | failed |"));
    assert!(text.contains("MAP grid search | ("));
}

#[test]
fn bench_clean_run_exits_0() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let out = plumeloc(
        &[
            "bench",
            "--config",
            &cfg,
            "--methods",
            "map,kf",
            "--format",
            "csv",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{out:?}");
    let text = std::fs::read_to_string(dir.path().join("out/report.csv")).unwrap();
    assert_eq!(text.lines().count(), 3);
}

#[test]
fn figures_overlay_round_trips_through_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let bench = plumeloc(
        &[
            "bench",
            "--config",
            &cfg,
            "--methods",
            "map",
            "--format",
            "json",
        ],
        dir.path(),
    );
    assert_eq!(bench.status.code(), Some(0), "{bench:?}");
    let out = plumeloc(
        &[
            "figures",
            "--config",
            &cfg,
            "--report",
            "out/report.json",
            "--out",
            "figs",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{out:?}");
    // Horizon 0.05 s: all standard snapshot times skipped with warnings.
    assert!(String::from_utf8_lossy(&out.stderr).contains("skipped"));
    assert!(dir.path().join("figs/posterior.pgm").exists());
    assert!(dir.path().join("figs/estimate_overlay.csv").exists());
}
