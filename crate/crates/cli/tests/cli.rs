// SPDX-License-Identifier: Apache-2.0

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
seed = 3
[collect]
difficulties = [0.5]
control_steps = 15
[train]
epochs = 5
[head]
epochs = 2
[rollout]
goal = [3.0, 0.0]
timeout = 8.0
[sweep]
duration = 2.0
seeds = [0]
"#;

fn cart(dir: &Path, args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_cart"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs");
    if !out.status.success() {
        eprintln!("cart {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

fn ok(dir: &Path, args: &[&str]) {
    assert!(cart(dir, args).status.success(), "cart {args:?} failed");
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// Collect, train both sources and build the library into `dir`.
fn prepare(dir: &Path) {
    fs::write(dir.join("small.toml"), SMALL).unwrap();
    ok(dir, &["--config", "small.toml", "collect", "--out", "ds"]);
    ok(dir, &["--config", "small.toml", "train", "ds", "--out", "ck"]);
    ok(
        dir,
        &["--config", "small.toml", "train", "ds", "--modality", "proprio-only", "--out", "ck"],
    );
    ok(
        dir,
        &[
            "--config",
            "small.toml",
            "build-library",
            "--full",
            "ck/policy-full.ckpt",
            "--proprio",
            "ck/policy-proprio-only.ckpt",
            "--dataset",
            "ds",
            "--out",
            "lib",
        ],
    );
}

#[test]
fn pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    prepare(d);

    let report = json(&d.join("ck/train-report-full.json"));
    let epochs = report["report"]["epochs"].as_array().unwrap();
    assert_eq!(epochs.len(), 5);
    assert!(epochs.iter().all(|e| e["mean_loss"].as_f64().unwrap().is_finite()));
    assert_eq!(report["config"]["train"]["epochs"], 5);
    assert!(report["response_model"].is_object() || report["response_model"].is_string());
    assert!(d.join("lib/head.ckpt").exists() && d.join("lib/library.json").exists());

    let infer = [
        "--config",
        "small.toml",
        "infer",
        "--checkpoint",
        "ck/policy-full.ckpt",
        "--terrain",
        "rough",
        "--out",
        "tr",
    ];
    ok(d, &[&infer[..], &["--library", "lib"]].concat());
    let sel = fs::read_to_string(d.join("tr/cart-3.selections.csv")).unwrap();
    assert!(sel.starts_with("step,source_id,start,len,score"));
    assert!(sel.lines().count() > 1);

    ok(d, &[&infer[..], &["--no-tss", "--label", "plain"]].concat());
    assert!(d.join("tr/plain-3.trace.json").exists());
    assert!(!d.join("tr/plain-3.selections.csv").exists());
    let summary = json(&d.join("tr/plain-3.summary.json"));
    assert_eq!(summary["tss"], false);

    for seed in ["3", "4"] {
        let args = [
            "--config",
            "small.toml",
            "--seed",
            seed,
            "infer",
            "--fixed",
            "0.8,0.45",
            "--terrain",
            "rough",
            "--label",
            "fixed",
            "--out",
            "tr",
        ];
        ok(d, &args);
    }
    assert!(d.join("tr/fixed-3.trace.json").exists() && d.join("tr/fixed-4.trace.json").exists());
    ok(d, &["--config", "small.toml", "eval", "tr", "--out", "ev"]);
    let ev = json(&d.join("ev/eval.json"));
    let labels: Vec<&str> = ev["labels"].as_array().unwrap().iter().map(|l| l["label"].as_str().unwrap()).collect();
    assert_eq!(labels, ["cart", "fixed", "plain"]);
    let runs: Vec<u64> = ev["labels"].as_array().unwrap().iter().map(|l| l["traces"].as_u64().unwrap()).collect();
    assert_eq!(runs, [1, 2, 1]);
    assert_eq!(ev["improvements"].as_array().unwrap().len(), 13);
    let md = fs::read_to_string(d.join("ev/eval.md")).unwrap();
    assert!(md.contains("## Performance") && md.contains("## Stability"));

    ok(d, &["plot", "tr/cart-3.trace.json", "--out", "cart.svg"]);
    assert!(fs::read_to_string(d.join("cart.svg")).unwrap().contains("<svg"));
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    prepare(d);
    let first = ["ck/policy-full.ckpt", "lib/segments.bin", "lib/head.ckpt"].map(|f| fs::read(d.join(f)).unwrap());
    let infer = |out: &str| {
        ok(
            d,
            &[
                "--config",
                "small.toml",
                "infer",
                "--checkpoint",
                "ck/policy-full.ckpt",
                "--library",
                "lib",
                "--terrain",
                "slope_up",
                "--out",
                out,
            ],
        )
    };
    infer("a");
    prepare(d);
    infer("b");
    let second = ["ck/policy-full.ckpt", "lib/segments.bin", "lib/head.ckpt"].map(|f| fs::read(d.join(f)).unwrap());
    assert!(first == second, "checkpoints or library changed between identical runs");
    for f in ["cart-3.trace.json", "cart-3.trace.csv", "cart-3.selections.csv", "cart-3.summary.json"] {
        assert_eq!(
            fs::read(d.join("a").join(f)).unwrap(),
            fs::read(d.join("b").join(f)).unwrap(),
            "{f} differs"
        );
    }
}

#[test]
fn missing_dataset_fails_without_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let out = cart(tmp.path(), &["train", "no-such-dataset", "--out", "ck"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no-such-dataset"));
    assert!(!tmp.path().join("ck/policy-full.ckpt").exists());
}

#[test]
fn malformed_dataset_names_file_and_line() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("small.toml"), SMALL).unwrap();
    ok(d, &["--config", "small.toml", "collect", "--out", "ds"]);
    let p = d.join("ds/run_0001/proprio.csv");
    let mut text = fs::read_to_string(&p).unwrap();
    text = text.replacen('\n', "\nnot,a,number\n", 2);
    fs::write(&p, text).unwrap();
    let out = cart(d, &["--config", "small.toml", "train", "ds", "--out", "ck"]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("run_0001") && err.contains("proprio.csv"), "{err}");
    assert!(!d.join("ck/policy-full.ckpt").exists());
}

#[test]
fn config_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("bad.toml"), "[objective]\nbeta_q = 1.0\n").unwrap();
    assert_eq!(cart(d, &["--config", "bad.toml", "sweep-deltaq"]).status.code(), Some(2));
    fs::write(d.join("bad.toml"), "[objective]\nsigma_v = 0.0\n").unwrap();
    assert_eq!(cart(d, &["--config", "bad.toml", "sweep-deltaq"]).status.code(), Some(2));
    assert_eq!(cart(d, &["infer", "--no-tss"]).status.code(), Some(2));
    assert_eq!(cart(d, &["frobnicate"]).status.code(), Some(2));
}

#[test]
fn incompatible_library_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    prepare(d);
    fs::write(d.join("other.toml"), format!("{SMALL}\n[policy]\nhead_hidden = 8\n")).unwrap();
    ok(d, &["--config", "other.toml", "train", "ds", "--out", "ck2"]);
    let out = cart(
        d,
        &[
            "--config",
            "other.toml",
            "infer",
            "--checkpoint",
            "ck2/policy-full.ckpt",
            "--library",
            "lib",
            "--out",
            "tr",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("parameters"));
    assert!(!d.join("tr/cart-3.trace.json").exists());
}

#[test]
fn sweep_writes_one_row_per_cell() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("small.toml"), SMALL).unwrap();
    ok(d, &["--config", "small.toml", "sweep-deltaq", "--out", "sw"]);
    let csv = fs::read_to_string(d.join("sw/sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 25);
    assert!(csv.starts_with("speed,deltaq,rms_roll,rms_pitch,rms_yaw,rms_total,std_total"));
    let trends = json(&d.join("sw/sweep-trends.json"));
    assert_eq!(trends["trends"].as_array().unwrap().len(), 5);
    assert!(d.join("sw/sweep.svg").exists());
}

#[test]
fn eval_rejects_mixed_timesteps() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("a.toml"), SMALL).unwrap();
    fs::write(d.join("b.toml"), format!("{SMALL}\n[rollout.sim]\ndt = 0.005\n")).unwrap();
    ok(d, &["--config", "a.toml", "infer", "--fixed", "0.6,0.45", "--label", "a", "--out", "tr"]);
    ok(d, &["--config", "b.toml", "infer", "--fixed", "0.6,0.45", "--label", "b", "--out", "tr"]);
    let out = cart(d, &["eval", "tr", "--out", "ev"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("timestep"));
}

#[test]
fn bench_reports_latency() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["bench-tss", "--segments", "2000", "--trials", "3", "--out", "b"]);
    let r = json(&d.join("b/bench-tss.json"));
    assert_eq!(r["latency"]["segments"], 2000);
    assert!(r["latency"]["mean_ms"].as_f64().unwrap() > 0.0);
}
