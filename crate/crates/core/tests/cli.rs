use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ered_core::fixtures::smoke_image;
use ered_core::imaging::{load_image, save_image, BitDepth};
use serde_json::{json, Value};

const BIN: &str = env!("CARGO_BIN_EXE_ered");

fn ered(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env_remove("ERED_THREADS").output().expect("spawn ered")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_config(dir: &Path, name: &str, v: &Value) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(v).unwrap()).unwrap();
    path
}

fn deblur_config(iterations: usize, denoiser: Value) -> Value {
    json!({
        "model": {"kind": "deblur", "kernel": {"type": "gaussian", "size": 5, "std": 1.0}, "sigma_y": 0.02},
        "run": {
            "lambda": 0.5,
            "step": {"kind": "constant", "delta0": 2e-4},
            "sigma": {"kind": "constant", "sigma": 0.04},
            "iterations": iterations,
            "transform": {"kind": "flip"},
            "denoiser": denoiser,
            "seed": 3,
            "init": {"kind": "observation"}
        }
    })
}

fn clean_png(dir: &Path, size: usize) -> PathBuf {
    let path = dir.join(format!("clean{size}.png"));
    save_image(&smoke_image(size), &path, BitDepth::Sixteen).unwrap();
    path
}

#[test]
fn degrade_restore_and_replay_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let clean = clean_png(dir.path(), 24);
    let mut c = deblur_config(30, json!({"kind": "dct_threshold"}));
    // the DCT denoiser is exactly flip-equivariant; interpolated rotations
    // make the trajectory depend on the seed
    c["run"]["transform"] = json!({"kind": "subpixel_rotation", "max_angle": 20.0});
    let cfg = write_config(dir.path(), "c.json", &c);
    let deg = dir.path().join("deg");
    let out = ered(&["degrade", "--config", p(&cfg), "--input", p(&clean), "--seed", "5", "--out", p(&deg)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(deg.join("observation.png").exists());
    let sidecar: Value = serde_json::from_str(&fs::read_to_string(deg.join("observation.json")).unwrap()).unwrap();
    assert_eq!(sidecar["seed"], 5);
    assert!(sidecar["psnr_db"].as_f64().unwrap() > 10.0);

    let obs = deg.join("observation.ednz");
    let r1 = dir.path().join("r1");
    let out = ered(&["restore", "--config", p(&cfg), "--observation", p(&obs), "--reference", p(&clean), "--out", p(&r1)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest: Value = serde_json::from_str(&fs::read_to_string(r1.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["iterations_completed"], 30);
    assert_eq!(manifest["transform"]["kind"], "subpixel_rotation");
    assert!(manifest["version"].as_str().unwrap().starts_with("ered "));
    assert!(manifest["metrics"]["psnr"].as_f64().unwrap() > 0.0);
    let trace = fs::read_to_string(r1.join("trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 31);

    let r2 = dir.path().join("r2");
    let out = ered(&["restore", "--manifest", p(&r1.join("manifest.json")), "--out", p(&r2)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read(r1.join("restored.ednz")).unwrap(), fs::read(r2.join("restored.ednz")).unwrap());
    assert_eq!(trace, fs::read_to_string(r2.join("trace.csv")).unwrap());

    // a different seed changes the stochastic trajectory
    let r3 = dir.path().join("r3");
    let out = ered(&["restore", "--manifest", p(&r1.join("manifest.json")), "--seed", "4", "--out", p(&r3)]);
    assert!(out.status.success());
    let a = load_image(r1.join("restored.ednz")).unwrap();
    let b = load_image(r3.join("restored.ednz")).unwrap();
    assert!(a.sub(&b).norm() > 0.0);
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let clean = clean_png(dir.path(), 16);
    let mut bad = deblur_config(5, json!({"kind": "dct_threshold"}));
    bad["run"]["lamda"] = json!(1.0);
    let cfg = write_config(dir.path(), "bad.json", &bad);
    let out = ered(&["restore", "--config", p(&cfg), "--observation", p(&clean), "--out", p(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lamda"));

    let mut neg = deblur_config(5, json!({"kind": "dct_threshold"}));
    neg["run"]["sigma"]["sigma"] = json!(-1.0);
    let cfg = write_config(dir.path(), "neg.json", &neg);
    let out = ered(&["restore", "--config", p(&cfg), "--observation", p(&clean), "--out", p(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));

    let out = ered(&["restore", "--observation", p(&clean), "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn divergence_exits_3_with_partial_trace() {
    let dir = tempfile::tempdir().unwrap();
    let clean = clean_png(dir.path(), 16);
    let mut c = deblur_config(200, json!({"kind": "linear_shrink", "c": 0.5}));
    c["run"]["step"]["delta0"] = json!(10.0);
    let cfg = write_config(dir.path(), "c.json", &c);
    let out_dir = dir.path().join("o");
    let out = ered(&["restore", "--config", p(&cfg), "--observation", p(&clean), "--out", p(&out_dir)]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest: Value = serde_json::from_str(&fs::read_to_string(out_dir.join("manifest.json")).unwrap()).unwrap();
    assert!(manifest["divergence"].is_string());
    assert!(manifest["iterations_completed"].as_u64().unwrap() < 200);
    assert!(out_dir.join("trace.csv").exists());
    assert!(!out_dir.join("restored.png").exists());
}

#[test]
fn verify_prints_json_reports() {
    let out = ered(&["verify", "operators"]);
    assert_eq!(out.status.code(), Some(0));
    let stdout = String::from_utf8(out.stdout).unwrap();
    let reports: Vec<Value> = stdout.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(reports.len(), 1);
    assert_eq!(reports[0]["name"], "operators");
    assert_eq!(reports[0]["passed"], true);

    assert_eq!(ered(&["verify", "bogus"]).status.code(), Some(2));
}

#[test]
fn bench_writes_rows_and_table() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    fs::create_dir(&corpus).unwrap();
    for (i, size) in [16usize, 20].iter().enumerate() {
        save_image(&smoke_image(*size), corpus.join(format!("img{i}.png")), BitDepth::Eight).unwrap();
    }
    let mut c = deblur_config(10, json!({"kind": "dct_threshold"}));
    c["bench"] = json!({
        "kernels": [{"type": "gaussian", "size": 5, "std": 1.0}, {"type": "box", "size": 3}],
        "methods": [
            {"name": "RED", "transform": {"kind": "identity"}},
            {"name": "ERED-rot90", "transform": {"kind": "rot90"}, "lambda": 0.3}
        ]
    });
    let cfg = write_config(dir.path(), "c.json", &c);
    let out_dir = dir.path().join("bench");
    let out = Command::new(BIN)
        .args(["bench", "--config", p(&cfg), "--corpus", p(&corpus), "--out", p(&out_dir)])
        .env("ERED_THREADS", "2")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = fs::read_to_string(out_dir.join("rows.csv")).unwrap();
    assert_eq!(rows.lines().count(), 1 + 2 * 2 * 2);
    let table = fs::read_to_string(out_dir.join("table.txt")).unwrap();
    assert!(table.contains("RED") && table.contains("ERED-rot90"));
    assert_eq!(fs::read_to_string(out_dir.join("aggregate.csv")).unwrap().lines().count(), 3);

    let out = Command::new(BIN)
        .args(["bench", "--config", p(&cfg), "--corpus", p(&corpus), "--out", p(&out_dir)])
        .env("ERED_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn denoise_command_writes_output() {
    let dir = tempfile::tempdir().unwrap();
    let clean = clean_png(dir.path(), 16);
    let cfg = write_config(
        dir.path(),
        "c.json",
        &json!({"denoise": {"denoiser": {"kind": "linear_shrink", "c": 0.5}, "sigma": 0.1, "transform": {"kind": "rot90"}}}),
    );
    let out_dir = dir.path().join("d");
    let out = ered(&["denoise", "--config", p(&cfg), "--input", p(&clean), "--out", p(&out_dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let x = load_image(&clean).unwrap();
    let d = load_image(out_dir.join("denoised.ednz")).unwrap();
    // shrinkage commutes with rotations, so the average is exact
    let expected = x.scale(0.5);
    assert!(d.sub(&expected).max_abs() < 1e-6);
}

#[test]
fn external_denoiser_over_the_echo_server() {
    let dir = tempfile::tempdir().unwrap();
    let clean = clean_png(dir.path(), 16);
    // an identity denoiser makes the regularizer vanish, so the run is
    // plain gradient descent on the data term
    let cfg = write_config(
        dir.path(),
        "c.json",
        &deblur_config(5, json!({"kind": "external", "command": [BIN, "ednz-echo"]})),
    );
    let out = ered(&["restore", "--config", p(&cfg), "--observation", p(&clean), "--out", p(&dir.path().join("ok"))]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let cfg = write_config(
        dir.path(),
        "bad.json",
        &deblur_config(5, json!({"kind": "external", "command": [BIN, "ednz-echo", "--corrupt-dims"]})),
    );
    let out = ered(&["restore", "--config", p(&cfg), "--observation", p(&clean), "--out", p(&dir.path().join("bad"))]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "json") {
            ered_core::cli::ConfigFile::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            n += 1;
        }
    }
    assert!(n >= 4);
}
