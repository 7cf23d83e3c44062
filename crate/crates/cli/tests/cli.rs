use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn oamp(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_oamp"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let o = oamp(dir, args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    o
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn small_dataset(dir: &Path) {
    ok(
        dir,
        &[
            "synth", "--seed", "1", "--out", "ds",
            "--set", "synth.n_samples=4",
            "--set", "synth.height=12",
            "--set", "synth.width=12",
        ],
    );
}

fn small_prior(dir: &Path) {
    ok(
        dir,
        &[
            "train-prior", "--seed", "1", "--out", "pr", "--data", "ds", "--steps", "20",
            "--set", "prior.hidden=8", "--set", "prior.blocks=2",
        ],
    );
}

#[test]
fn verify_reports_no_violations() {
    let d = tempfile::tempdir().unwrap();
    let o = ok(d.path(), &["verify", "--trials", "200", "--seed", "7", "--out", "v"]);
    let line: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(line["violations"], 0);
    let report = read_json(&d.path().join("v/report.json"));
    assert_eq!(report["passed"], true);
    assert_eq!(report["campaign"]["trials"], 200);
    assert!(d.path().join("v/config.lock.json").exists());
}

#[test]
fn oracle_predictions_score_perfectly() {
    let d = tempfile::tempdir().unwrap();
    small_dataset(d.path());
    ok(
        d.path(),
        &["evaluate", "--seed", "0", "--out", "ev", "--data", "ds", "--pred", "ds/oracle"],
    );
    let csv = fs::read_to_string(d.path().join("ev/metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("sample_id,mse,psnr,cbgd,n_eval_pixels"));
    for row in lines {
        let cols: Vec<&str> = row.split(',').collect();
        assert_eq!(cols[1].parse::<f64>().unwrap(), 0.0, "{row}");
        assert_eq!(cols[2], "inf", "{row}");
    }
}

#[test]
fn sample_mask_is_reproducible() {
    let d = tempfile::tempdir().unwrap();
    small_dataset(d.path());
    small_prior(d.path());
    for out in ["a", "b"] {
        ok(
            d.path(),
            &[
                "sample-mask", "--seed", "5", "--out", out, "--prior", "pr", "--data", "ds",
                "--guided", "--ensemble", "2", "--steps", "4",
            ],
        );
    }
    for f in ["masks/0000.grd", "masks/0001.grd", "mean.grd", "std.grd", "samples.json"] {
        let a = fs::read(d.path().join("a").join(f)).unwrap();
        let b = fs::read(d.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs between identical runs");
    }
}

#[test]
fn unknown_config_key_is_a_validation_error() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("c.json"), r#"{"guidance.rhoo": 1.0}"#).unwrap();
    let o = oamp(
        d.path(),
        &["heatmap", "--config", "c.json", "--seed", "1", "--out", "h", "--data", "ds"],
    );
    assert_eq!(o.status.code(), Some(1));
    let err: Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "config");
    assert!(!d.path().join("h").exists());
}

#[test]
fn flag_misuse_and_missing_seed_exit_with_one() {
    let d = tempfile::tempdir().unwrap();
    let cases: [&[&str]; 4] = [
        &["synth", "--seed", "1", "--out", "x", "--rho", "0.5"],
        &["synth", "--out", "x"],
        &["verify", "--seed", "1", "--out", "x", "--set", "verify.trials=-3"],
        &["no-such-command"],
    ];
    for args in cases {
        assert_eq!(oamp(d.path(), args).status.code(), Some(1), "{args:?}");
    }
    assert_eq!(oamp(d.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn config_file_and_flags_are_locked() {
    let d = tempfile::tempdir().unwrap();
    fs::write(
        d.path().join("c.json"),
        r#"{"synth.n_samples": 2, "synth.height": 8, "synth.width": 8, "synth.coverage": 0.4}"#,
    )
    .unwrap();
    ok(
        d.path(),
        &["synth", "--config", "c.json", "--seed", "9", "--out", "s", "--set", "synth.style=blobs"],
    );
    let lock = read_json(&d.path().join("s/config.lock.json"));
    assert_eq!(lock["seed"], 9);
    assert_eq!(lock["synth.coverage"], 0.4);
    assert_eq!(lock["synth.style"], "blobs");
    // Re-running from the lock file reproduces the dataset bytes.
    ok(d.path(), &["synth", "--config", "s/config.lock.json", "--out", "t"]);
    let a = fs::read(d.path().join("s/fields/0001.grd")).unwrap();
    let b = fs::read(d.path().join("t/fields/0001.grd")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn train_impute_evaluate_pipeline() {
    let d = tempfile::tempdir().unwrap();
    small_dataset(d.path());
    ok(
        d.path(),
        &[
            "train-imputer", "--seed", "2", "--out", "im", "--data", "ds",
            "--strategy", "pixel-level", "--steps", "10",
            "--set", "imputer.hidden=8", "--set", "imputer.blocks=1",
        ],
    );
    let meta = read_json(&d.path().join("im/imputer.json"));
    assert_eq!(meta["strategy"], "pixel-level");
    for sampler in ["direct-projection", "proximal", "iterative-conditioning", "repaint", "recursive-jump"] {
        ok(
            d.path(),
            &[
                "impute", "--seed", "3", "--out", sampler, "--data", "ds", "--model", "im",
                "--index", "2", "--sampler", sampler, "--steps", "8", "--ensemble", "2",
            ],
        );
        assert!(d.path().join(sampler).join("imputed.grd").exists());
    }
    ok(
        d.path(),
        &["evaluate", "--seed", "4", "--out", "ev", "--data", "ds", "--model", "im", "--ensemble", "2"],
    );
    let s = read_json(&d.path().join("ev/summary.json"));
    assert_eq!(s["n"], 4);
    assert!(s["mean_mse"].as_f64().unwrap().is_finite());
}

#[test]
fn heatmap_writes_grid_and_image() {
    let d = tempfile::tempdir().unwrap();
    small_dataset(d.path());
    ok(
        d.path(),
        &[
            "heatmap", "--seed", "1", "--out", "h", "--data", "ds",
            "--strategy", "block-wise", "--ensemble", "20", "--set", "partition.block_grid=4",
        ],
    );
    let info = read_json(&d.path().join("h/heatmap.json"));
    assert_eq!(info["n_ens"], 20);
    let pgm = fs::read_to_string(d.path().join("h/heatmap.pgm")).unwrap();
    assert!(pgm.starts_with("P2\n12 12\n255\n"));
}
