use std::path::{Path, PathBuf};
use std::process::Command;

use spectral_lab::output::{read_csv, CurveRow};

fn configs() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn lab(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_spectral-lab"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn validate_accepts_shipped_configs() {
    for name in ["free.toml", "default.toml"] {
        let out = lab(&["validate", "--config", path_str(&configs().join(name))]);
        assert!(
            out.status.success(),
            "{name}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        assert!(String::from_utf8_lossy(&out.stdout).contains("config valid"));
    }
}

#[test]
fn bad_config_exits_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(
        &cfg,
        "potential = \"missing.toml\"\nk = [20.0]\nsteps = 7\n",
    )
    .unwrap();
    let out = lab(&["validate", "--config", path_str(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn free_run_then_emit() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("free.toml");
    let out = lab(&[
        "run",
        "--config",
        path_str(&cfg),
        "--out",
        path_str(dir.path()),
        "--steps",
        "1",
        "--seed",
        "3",
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    let energy = dir.path().join("k20");
    for file in [
        "curves.csv",
        "curves.schema.txt",
        "intervals.json",
        "results.json",
    ] {
        assert!(energy.join(file).exists(), "{file} missing");
    }
    let rows: Vec<CurveRow> = read_csv(&energy.join("curves.csv")).unwrap();
    assert!(!rows.is_empty());
    assert!(rows.iter().all(|r| (r.kappa - 20.0).abs() < 1e-12));

    std::fs::remove_file(energy.join("curves.csv")).unwrap();
    let out = lab(&[
        "emit",
        "--config",
        path_str(&cfg),
        "--out",
        path_str(dir.path()),
        "--steps",
        "1",
        "--kind",
        "curves",
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let again: Vec<CurveRow> = read_csv(&energy.join("curves.csv")).unwrap();
    assert_eq!(again, rows);
}
