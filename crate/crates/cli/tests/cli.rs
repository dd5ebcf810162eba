use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use opinv::adaptive::RunRecord;
use opinv::deeponet::{load_checkpoint, save_checkpoint};
use serde_json::Value;

const TINY: &[&str] = &[
    "--set",
    "grid=9",
    "--set",
    "n_modes=4",
    "--set",
    "truth.n_modes=4",
    "--set",
    "net.encoder=3",
    "--set",
    "net.width=8",
    "--set",
    "net.depth=2",
    "--set",
    "net.p=4",
    "--set",
    "net.n_prior=2",
    "--set",
    "net.offline_iters=10",
    "--set",
    "net.online_iters=5",
    "--set",
    "policy.i_max=3",
    "--set",
    "policy.t=2",
    "--set",
    "policy.q=3",
    "--set",
    "policy.k=20",
    "--set",
    "policy.m_diag=2",
    "--set",
    "uki.t_fem=3",
];

fn opinv(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_opinv"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs");
    out
}

fn ok(args: &[&str]) -> String {
    let out = opinv(args);
    assert!(
        out.status.success(),
        "opinv {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn run(sub: &str, dir: &Path, extra: &[&str]) -> String {
    let mut args = vec![sub, "--out", dir.to_str().unwrap()];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    ok(&args)
}

fn json(path: &Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

#[test]
fn offline_training_round_trips_and_counts_samples() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("run");
    run("train-offline", &dir, &[]);
    let summary = json(&dir.join("offline.json"));
    assert_eq!(summary["evaluations"], 2);
    assert!(summary["final_loss"].as_f64().unwrap() <= summary["initial_loss"].as_f64().unwrap());

    let s = load_checkpoint(&dir.join("checkpoint.offline.json")).unwrap();
    let again = save_checkpoint(&s, &tmp.path().join("copy")).unwrap();
    let reloaded = load_checkpoint(&again).unwrap();
    assert_eq!(s.weights, reloaded.weights);
    assert_eq!(s.norm, reloaded.norm);
    assert!(dir.join("loss.csv").exists());
}

#[test]
fn modes_respect_their_sampling_contracts() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("run");
    run("train-offline", &dir, &[]);

    let direct = tmp.path().join("direct");
    let ckpt = dir.join("checkpoint.offline.json");
    run("invert", &direct, &["--mode", "deeponet-direct", "--checkpoint", ckpt.to_str().unwrap()]);
    let rec = RunRecord::read_json(&direct.join("record.json")).unwrap();
    assert_eq!(rec.ledger.adaptive_sample, 0);
    assert_eq!(rec.cycles.iter().filter(|c| c.training.is_some()).count(), 0);

    let ada = tmp.path().join("ada");
    run("invert", &ada, &["--mode", "deeponet-adaptive", "--checkpoint", ckpt.to_str().unwrap()]);
    let rec = RunRecord::read_json(&ada.join("record.json")).unwrap();
    assert!(rec.ledger.adaptive_sample <= 3 * 3);
    assert_eq!(rec.ledger.category_sum(), rec.ledger.total);
    assert!(ada.join("series.csv").exists());
    assert!(ada.join("fields/estimate.bin").exists());
}

#[test]
fn report_is_deterministic_and_fem_speedup_is_one() {
    let tmp = tempfile::tempdir().unwrap();
    let fem = tmp.path().join("fem");
    run("invert", &fem, &["--mode", "fem-uki"]);
    let rec = RunRecord::read_json(&fem.join("record.json")).unwrap();
    // (2 N_m + 1) T_FEM with N_m = 4, T_FEM = 3
    assert_eq!(rec.ledger.inversion, 27);

    let out1 = tmp.path().join("r1");
    let out2 = tmp.path().join("r2");
    ok(&["report", fem.to_str().unwrap(), "--out", out1.to_str().unwrap()]);
    ok(&["report", fem.to_str().unwrap(), "--out", out2.to_str().unwrap()]);
    let a = fs::read(out1.join("summary.json")).unwrap();
    assert_eq!(a, fs::read(out2.join("summary.json")).unwrap());
    let summary: Value = serde_json::from_slice(&a).unwrap();
    assert_eq!(summary["rows"][0]["speedup"], 1.0);
    assert!(out1.join("curves.csv").exists());
}

#[test]
fn linear_verification_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("linear.json");
    ok(&["verify-linear", "--seed", "3", "--out", path.to_str().unwrap()]);
    let report = json(&path);
    assert_eq!(report["passed"], true);
    assert_eq!(report["rows"].as_array().unwrap().len(), 4);
}

#[test]
fn forward_and_prior_commands_write_fields() {
    let tmp = tempfile::tempdir().unwrap();
    let prior = tmp.path().join("m.csv");
    let out = ok(&["sample-prior", "--grid", "8", "--modes", "5", "--out", prior.to_str().unwrap()]);
    let zeta: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(zeta["zeta"].as_array().unwrap().len(), 5);
    assert_eq!(fs::read_to_string(&prior).unwrap().lines().count(), 8);

    let state = tmp.path().join("u.bin");
    let out = ok(&[
        "solve-forward",
        "--problem",
        "heat-loc",
        "--grid",
        "9",
        "--params",
        "[0.3, 0.4]",
        "--out",
        state.to_str().unwrap(),
    ]);
    let v: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["observations"].as_array().unwrap().len(), 18);
    assert!(tmp.path().join("u.0.bin").exists() && tmp.path().join("u.1.bin").exists());
}

#[test]
fn conflicting_problem_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    fs::write(&cfg, "preset = \"desk\"\nproblem = \"darcy\"\n").unwrap();
    let out = opinv(&["invert", "--config", cfg.to_str().unwrap(), "--problem", "heat-loc"]);
    assert!(!out.status.success());
    let out = opinv(&["invert", "--set", "policy.bogus=1"]);
    assert!(!out.status.success());
}
