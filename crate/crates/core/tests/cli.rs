use std::path::Path;
use std::process::{Command, Output};

use crosstalk::loss::LossBreakdown;
use crosstalk::pipeline::{AppConfig, SessionManifest};
use crosstalk::solver::{solve, SolveConfig};

fn ctr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctr")).args(args).output().unwrap()
}

fn error_record(out: &Output) -> serde_json::Value {
    let text = String::from_utf8(out.stderr.clone()).unwrap();
    let line = text.lines().last().expect("an error line on stderr");
    serde_json::from_str(line).unwrap_or_else(|e| panic!("not JSON: {line:?}: {e}"))
}

#[test]
fn help_exits_zero() {
    for args in [&["--help"][..], &["simulate", "--help"], &["separate", "--help"], &["--version"]] {
        let out = ctr(args);
        assert_eq!(out.status.code(), Some(0), "{args:?}");
        assert!(!out.stdout.is_empty());
    }
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = ctr(&["separate", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(1));
    let rec = error_record(&out);
    assert_eq!(rec["error"], "usage");
    assert!(rec["message"].as_str().unwrap().contains("--no-such-flag"));
}

#[test]
fn missing_subcommand_is_a_usage_error() {
    assert_eq!(ctr(&[]).status.code(), Some(1));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "[fcp]\npast = 3\n").unwrap();
    let out = ctr(&["--config", cfg.to_str().unwrap(), "simulate", "--out", "x"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_record(&out)["error"], "config");
}

#[test]
fn missing_manifest_is_a_data_error() {
    let out = ctr(&["separate", "--manifest", "/nonexistent/m.json", "--out", "/tmp/x"]);
    assert_eq!(out.status.code(), Some(2));
    let rec = error_record(&out);
    assert_eq!(rec["error"], "io");
    assert_eq!(String::from_utf8(out.stderr).unwrap().lines().count(), 1);
}

#[test]
fn bad_alpha_is_a_usage_error() {
    let out = ctr(&["loss", "--manifest", "m.json", "--alpha", "half"]);
    assert_eq!(out.status.code(), Some(1));
}

fn simulate(dir: &Path, extra: &[&str]) {
    let mut args = vec!["--seed", "4", "simulate", "--out", dir.to_str().unwrap(), "--duration", "2"];
    args.extend_from_slice(extra);
    let out = ctr(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn loss_command_matches_solver_initial_loss() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), &[]);
    let manifest = dir.path().join("manifest.json");
    let out = ctr(&["loss", "--manifest", manifest.to_str().unwrap(), "--past-taps", "4"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let printed: LossBreakdown = serde_json::from_slice(&out.stdout).unwrap();

    let (m, base) = SessionManifest::load(&manifest).unwrap();
    let session = m.load_session(&base).unwrap();
    let mut app = AppConfig::default();
    app.fcp.past_taps = 4;
    let cfg = SolveConfig {
        max_iters: 0,
        ..app.solve_config()
    };
    let mix = session.mixture_set(&app.stft).unwrap();
    let state = solve(&mix, None, &cfg).unwrap();
    assert_eq!(state.loss_trace[0], printed);
}

#[test]
fn weak_loss_includes_activity_term() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), &["--overlap", "sparse"]);
    let manifest = dir.path().join("manifest.json");
    let out = ctr(&["loss", "--manifest", manifest.to_str().unwrap(), "--mode", "weak", "--beta", "1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let printed: LossBreakdown = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(printed.sa.len(), 2);
    assert_eq!(printed.beta, 1.0);
}

#[test]
fn fcp_check_reports_per_frequency_errors() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), &["--speakers", "1"]);
    let manifest = dir.path().join("manifest.json");
    let out = ctr(&["fcp-check", "--manifest", manifest.to_str().unwrap(), "--past-taps", "4"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["domain"], "exact-spectrogram");
    let paths = v["paths"].as_array().unwrap();
    assert_eq!(paths.len(), 2);
    assert_eq!(paths[0]["per_freq"].as_array().unwrap().len(), 65);
    // Noisy single-speaker scene: taps are recovered to within a few percent.
    assert!(v["overall"]["median"].as_f64().unwrap() < 0.05);
}

#[test]
fn separate_then_evaluate_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let scene = dir.path().join("scene");
    let est = dir.path().join("est");
    simulate(&scene, &[]);
    let manifest = scene.join("manifest.json");
    let out = ctr(&[
        "separate", "--manifest", manifest.to_str().unwrap(), "--out", est.to_str().unwrap(),
        "--iters", "5", "--past-taps", "4",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["estimate_spk0.wav", "estimate_spk1.wav", "estimates.json", "loss_trace.json"] {
        assert!(est.join(f).exists(), "{f}");
    }
    let csv = dir.path().join("r.csv");
    let out = ctr(&[
        "evaluate", "--references", manifest.to_str().unwrap(), "--estimates",
        est.join("estimates.json").to_str().unwrap(), "--csv", csv.to_str().unwrap(), "--permute",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["si_sdr"].as_array().unwrap().len(), 2);
    assert_eq!(v["assignment"], serde_json::json!([0, 1]));
    assert_eq!(std::fs::read_to_string(csv).unwrap().lines().count(), 3);
}
