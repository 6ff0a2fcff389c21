use std::path::Path;
use std::process::{Command, Output};

use blowuplab::cli::{config_hash, fmt_f64, read_trajectory_csv, RunConfig, RunManifest};
use proptest::prelude::*;
use serde_json::Value;

fn run(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_blowuplab"))
        .arg("--out")
        .arg(out)
        .args(args)
        .env_remove("BLOWUPLAB_THREADS")
        .output()
        .expect("binary runs")
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn manifest(dir: &Path) -> RunManifest {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn listed_everything(dir: &Path) {
    let m = manifest(dir);
    for entry in std::fs::read_dir(dir).unwrap() {
        let name = entry.unwrap().file_name().into_string().unwrap();
        if name != "manifest.json" {
            assert!(m.outputs.contains(&name), "{name} missing from manifest");
        }
    }
    for name in &m.outputs {
        assert!(dir.join(name).exists());
    }
}

#[test]
fn classify_reports_the_supercritical_point() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(tmp.path(), &["classify", "--n", "16", "--q", "10"]);
    assert_eq!(out.status.code(), Some(0));
    let v = json(&tmp.path().join("classify.json"));
    assert_eq!(v["class"], "Supercritical");
    assert!((v["K"].as_f64().unwrap() - 4.741_688_783_876).abs() < 1e-9);
    assert!((v["cH"].as_f64().unwrap() - 6.518_986_469_044).abs() < 1e-9);
    assert!((v["gamma"].as_f64().unwrap() - 2.481_812_717_19).abs() < 1e-8);
    assert!(v["kappa1"].as_f64().unwrap() < 0.0 && v["mu1"].as_f64().unwrap() > 0.0);
    let m = manifest(tmp.path());
    assert_eq!((m.command.as_str(), m.status.as_str(), m.exit_code), ("classify", "ok", 0));
    assert_eq!(m.config_hash.len(), 64);
    assert_eq!(m.config.n, Some(16));
    listed_everything(tmp.path());
}

#[test]
fn invalid_exponent_exits_2_without_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("out");
    let out = run(&dir, &["classify", "--n", "16", "--q", "0.5"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.exists());
}

#[test]
fn unknown_config_key_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"n": 16, "q": 10, "grid": {"nr": 100, "spacing": 2}}"#).unwrap();
    let dir = tmp.path().join("out");
    let out = run(&dir, &["--config", cfg.to_str().unwrap(), "classify"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("spacing"));
    assert!(!dir.exists());
}

#[test]
fn eigs_lists_the_ground_mode_first() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(run(tmp.path(), &["eigs", "--n", "16", "--q", "10", "--count", "6"]).status.code(), Some(0));
    let csv = std::fs::read_to_string(tmp.path().join("eigs.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("i,j,kappa,lambda,radial_exponent,c_small,c_large"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 6);
    assert_eq!((rows[0][0], rows[0][1]), ("1", "1"));
    let lambda: f64 = rows[0][3].parse().unwrap();
    let gamma: f64 = rows[0][4].parse().unwrap();
    assert!((lambda + 0.5 * (gamma - 1.0 / 9.0)).abs() < 1e-12);
    // 17 significant digits in every numeric field
    assert!(rows[0][2..].iter().all(|f| f.split('e').next().unwrap().replace(['-', '.'], "").len() == 17));
}

#[test]
fn identical_configs_give_identical_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        assert_eq!(run(dir, &["profile", "--n", "12", "--q", "8"]).status.code(), Some(0));
    }
    for name in ["profile.csv", "profile.json"] {
        assert_eq!(std::fs::read(a.join(name)).unwrap(), std::fs::read(b.join(name)).unwrap());
    }
    assert_eq!(manifest(&a).config_hash, manifest(&b).config_hash);
    listed_everything(&a);
}

#[test]
fn threads_flag_and_environment_are_validated() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(run(tmp.path(), &["--threads", "0", "classify", "--n", "16", "--q", "10"]).status.code(), Some(2));
    let out = Command::new(env!("CARGO_BIN_EXE_blowuplab"))
        .args(["--out", tmp.path().to_str().unwrap(), "classify", "--n", "16", "--q", "10"])
        .env("BLOWUPLAB_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(run(tmp.path(), &["--threads", "1", "classify", "--n", "16", "--q", "10"]).status.code(), Some(0));
}

#[test]
fn rate_fit_reads_a_trajectory_and_fails_cleanly_when_short() {
    let tmp = tempfile::tempdir().unwrap();
    let traj = tmp.path().join("traj.csv");
    let mut csv = String::from("s,sup_phi,margins_inner,margins_mid,margins_outer,margin_barrier,P_1_1\n");
    for k in 0..60 {
        let s = 8.0 + 0.05 * k as f64;
        let inside = if s < 10.5 { 0.5 } else { -0.1 };
        csv.push_str(&format!("{s},{},{inside},0.5,0.5,0.1,0\n", 1.3 * (0.04 * s).exp()));
    }
    std::fs::write(&traj, &csv).unwrap();
    let dir = tmp.path().join("fit");
    let out = run(&dir, &["rate-fit", "--trajectory", traj.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v = json(&dir.join("rate_fit.json"));
    assert!((v["fit"]["slope"].as_f64().unwrap() - 0.04).abs() < 1e-9);
    // the window stops at the first exit
    assert!(v["fit"]["window"][1].as_f64().unwrap() < 10.5);

    std::fs::write(&traj, "s,sup_phi,margins_inner,margins_mid,margins_outer\n8,1,1,1,1\n8.1,1,1,1,1\n").unwrap();
    let dir = tmp.path().join("short");
    assert_eq!(run(&dir, &["rate-fit", "--trajectory", traj.to_str().unwrap()]).status.code(), Some(3));
    let err = json(&dir.join("error.json"));
    assert!(err["error"].as_str().unwrap().contains("3 points"));
    assert_eq!(manifest(&dir).status, "numerical-failure");
    listed_everything(&dir);
}

#[test]
fn strict_run_reports_region_exit() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{"n": 16, "q": 10, "s2": 9.5, "s_end": 9.5, "d": [0.00023, 0.0],
            "grid": {"horizon": 1.5}, "evolve": {"stop_on_exit": true}}"#,
    )
    .unwrap();
    let dir = tmp.path().join("out");
    let out = run(&dir, &["--strict", "--config", cfg.to_str().unwrap(), "simulate"]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    let v = json(&dir.join("simulate.json"));
    assert!(v["exit_s"].as_f64().unwrap() < 9.5);
    assert_eq!(manifest(&dir).status, "region-exit");
    let rows = read_trajectory_csv(&std::fs::read_to_string(dir.join("trajectory.csv")).unwrap()).unwrap();
    assert!(!rows.last().unwrap().2);
    listed_everything(&dir);
}

#[test]
fn d_outside_the_ball_is_a_schema_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"n": 16, "q": 10, "d": [0.01, 0.0]}"#).unwrap();
    let dir = tmp.path().join("out");
    assert_eq!(run(&dir, &["--config", cfg.to_str().unwrap(), "simulate"]).status.code(), Some(2));
    assert!(!dir.exists());
}

#[test]
fn config_hash_tracks_content() {
    let a = RunConfig { n: Some(16), q: Some(10.0), ..Default::default() };
    let b = RunConfig { n: Some(16), q: Some(10.5), ..Default::default() };
    assert_eq!(config_hash(&a), config_hash(&a.clone()));
    assert_ne!(config_hash(&a), config_hash(&b));
}

proptest! {
    #[test]
    fn csv_numbers_round_trip(v in proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL | proptest::num::f64::ZERO) {
        let text = fmt_f64(v);
        prop_assert_eq!(text.parse::<f64>().unwrap().to_bits(), v.to_bits());
    }
}
