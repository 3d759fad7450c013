//! Command-line contract: artifacts, determinism, exit codes, idempotence.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn dsemk(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dsemk"))
        .args(args)
        .env("DSEMK_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn tmp(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("dsemk-cli-{}-{name}", std::process::id()));
    std::fs::remove_dir_all(&dir).ok();
    dir
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|_| panic!("missing {}", path.display()))
}

#[test]
fn simulate_writes_artifacts_and_is_deterministic() {
    let d1 = tmp("sim1");
    let d2 = tmp("sim2");
    for d in [&d1, &d2] {
        let out = dsemk(&[
            "simulate", "--model", "eg1", "--n", "6", "--t", "9", "--seed", "42",
            "--missing-rate", "0.1", "--out", d.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for file in ["data.csv", "truth.json", "sim_config.json"] {
        assert_eq!(read(&d1.join(file)), read(&d2.join(file)), "{file} differs across runs");
    }
    std::fs::remove_dir_all(&d1).ok();
    std::fs::remove_dir_all(&d2).ok();
}

#[test]
fn invalid_missing_rate_exits_2() {
    let d = tmp("badrate");
    let out = dsemk(&[
        "simulate", "--model", "eg1", "--n", "2", "--t", "4", "--missing-rate", "1.0",
        "--out", d.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing_rate"));
}

#[test]
fn unknown_sampler_exits_2_listing_options() {
    let d = tmp("badsampler");
    std::fs::create_dir_all(&d).unwrap();
    let sim = dsemk(&[
        "simulate", "--model", "eg1", "--n", "2", "--t", "4", "--out", d.to_str().unwrap(),
    ]);
    assert!(sim.status.success());
    let out = dsemk(&[
        "fit", "--model", "eg1", "--data", d.join("data.csv").to_str().unwrap(),
        "--sampler", "gibbs", "--out", d.join("run").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("nuts-kalman") && msg.contains("rwm-collapsed"), "{msg}");
    std::fs::remove_dir_all(&d).ok();
}

#[test]
fn missing_data_file_exits_4() {
    let d = tmp("nodata");
    let out = dsemk(&[
        "fit", "--model", "eg1", "--data", "/nonexistent/nowhere.csv", "--sampler",
        "nuts-kalman", "--out", d.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn fit_diagnose_smooth_pipeline() {
    let d = tmp("pipeline");
    std::fs::create_dir_all(&d).unwrap();
    let sim = dsemk(&[
        "simulate", "--model", "eg1", "--n", "4", "--t", "8", "--seed", "5",
        "--out", d.to_str().unwrap(),
    ]);
    assert!(sim.status.success(), "{}", String::from_utf8_lossy(&sim.stderr));
    let run_dir = d.join("run");
    let fit = dsemk(&[
        "fit", "--model", "eg1", "--data", d.join("data.csv").to_str().unwrap(),
        "--sampler", "nuts-kalman", "--chains", "2", "--iter", "120", "--warmup", "60",
        "--max-treedepth", "8", "--seed", "3", "--out", run_dir.to_str().unwrap(),
    ]);
    assert!(fit.status.success(), "{}", String::from_utf8_lossy(&fit.stderr));
    for file in
        ["manifest.json", "model.json", "chain_0.csv", "chain_1.csv", "stats_0.csv", "diagnostics.csv"]
    {
        assert!(run_dir.join(file).exists(), "missing {file}");
    }
    // Manifest hashes match the inputs.
    let manifest: serde_json::Value =
        serde_json::from_slice(&read(&run_dir.join("manifest.json"))).unwrap();
    let data_bytes = read(&d.join("data.csv"));
    let expect_hash = dsem_kalman::runio::sha256_hex(&data_bytes);
    assert_eq!(manifest["data_hash"].as_str().unwrap(), expect_hash);
    let model_bytes = read(&run_dir.join("model.json"));
    assert_eq!(
        manifest["model_hash"].as_str().unwrap(),
        dsem_kalman::runio::sha256_hex(&model_bytes)
    );

    // diagnose twice: identical output (idempotent).
    let d1 = dsemk(&["diagnose", run_dir.to_str().unwrap()]);
    assert!(d1.status.success(), "{}", String::from_utf8_lossy(&d1.stderr));
    let first = read(&run_dir.join("diagnostics.csv"));
    let d2 = dsemk(&["diagnose", run_dir.to_str().unwrap()]);
    assert!(d2.status.success());
    assert_eq!(first, read(&run_dir.join("diagnostics.csv")));

    // diagnose with an unknown parameter name lists what exists.
    let bad = dsemk(&["diagnose", run_dir.to_str().unwrap(), "--params", "nope"]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("alpha2.1"));

    // smooth at the posterior mean.
    let smooth_dir = d.join("smooth");
    let sm = dsemk(&[
        "smooth", "--run", run_dir.to_str().unwrap(), "--draws", "mean",
        "--out", smooth_dir.to_str().unwrap(),
    ]);
    assert!(sm.status.success(), "{}", String::from_utf8_lossy(&sm.stderr));
    let smoothed = String::from_utf8(read(&smooth_dir.join("smoothed.csv"))).unwrap();
    // header + N * T * V1 rows
    assert_eq!(smoothed.lines().count(), 1 + 4 * 8);

    // smooth at explicit draw indices; out-of-range errors.
    let sm2 = dsemk(&[
        "smooth", "--run", run_dir.to_str().unwrap(), "--draws", "0,5",
        "--out", smooth_dir.to_str().unwrap(),
    ]);
    assert!(sm2.status.success());
    let bad = dsemk(&[
        "smooth", "--run", run_dir.to_str().unwrap(), "--draws", "100000",
        "--out", smooth_dir.to_str().unwrap(),
    ]);
    assert_eq!(bad.status.code(), Some(2));
    std::fs::remove_dir_all(&d).ok();
}

#[test]
fn check_grad_and_dump_ssm() {
    let out = dsemk(&["check-grad", "--model", "eg1", "--n", "2", "--t", "4", "--seed", "9"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("max relative gradient discrepancy"));

    let out = dsemk(&["dump-ssm", "--model", "eg1", "--at-truth"]);
    assert!(out.status.success());
    let dump: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(dump["state_dim"], 2);
    // Scalar AR(1) layout: Z = [0 1], T = [[phi, 0], [phi, 0]].
    assert_eq!(dump["z"][0][0], 0.0);
    assert_eq!(dump["z"][0][1], 1.0);
    let phi = 0.4f64;
    let got = dump["t"][0][0].as_f64().unwrap();
    assert!((got - phi).abs() < 1e-9, "t[0][0] = {got}");
    assert_eq!(dump["t"][0][1], 0.0);
}

#[test]
fn reproduce_validates_replicates() {
    let d = tmp("rep0");
    let out = dsemk(&[
        "reproduce", "--experiment", "eg1", "--replicates", "0",
        "--out", d.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}
