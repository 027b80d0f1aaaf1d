//! End-to-end checks of the `cdg` binary: file round trips and exit codes.

use std::process::Command;

use cdg_core::precondition::reweighted_h0;
use cdg_core::Tensor4;

fn cdg() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cdg"))
}

fn sample_tensor() -> Tensor4 {
    Tensor4::from_fn([6, 3, 2, 2], |o, i, h, w| {
        ((o * 7 + i * 3 + h * 2 + w) as f64 * 0.37).sin()
    })
    .unwrap()
}

#[test]
fn precondition_subcommand_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("grad.cdg");
    let output = dir.path().join("smoothed.cdg");
    let tensor = sample_tensor();
    tensor.save(&input).unwrap();

    let status = cdg()
        .args([
            "precondition",
            "--in",
            input.to_str().unwrap(),
            "--out",
            output.to_str().unwrap(),
            "--metric",
            "reweighted_h0",
            "--lambda",
            "2.0",
        ])
        .status()
        .unwrap();
    assert!(status.success());

    let got = Tensor4::load(&output).unwrap();
    let expect = reweighted_h0(&tensor, 2.0).unwrap();
    assert_eq!(got, expect);
}

#[test]
fn invalid_lambda_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("grad.cdg");
    sample_tensor().save(&input).unwrap();
    let status = cdg()
        .args([
            "precondition",
            "--in",
            input.to_str().unwrap(),
            "--out",
            dir.path().join("out.cdg").to_str().unwrap(),
            "--metric",
            "sobolev_h1",
            "--lambda",
            "-1.0",
        ])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn missing_input_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let status = cdg()
        .args([
            "precondition",
            "--in",
            dir.path().join("absent.cdg").to_str().unwrap(),
            "--out",
            dir.path().join("out.cdg").to_str().unwrap(),
            "--metric",
            "identity",
        ])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(3));
}

#[test]
fn unknown_metric_exits_2() {
    let status = cdg()
        .args([
            "precondition",
            "--in",
            "x.cdg",
            "--out",
            "y.cdg",
            "--metric",
            "not_a_metric",
        ])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn verify_single_suite_passes() {
    let output = cdg().args(["verify", "--suite", "duality"]).output().unwrap();
    assert!(output.status.success(), "{:?}", output);
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("suite duality"));
    assert!(stdout.contains("PASS"));
}

#[test]
fn verify_unknown_suite_exits_2() {
    let status = cdg()
        .args(["verify", "--suite", "bogus"])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn analyze_writes_correlation_csv() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("weights.cdg");
    let output = dir.path().join("corr.csv");
    sample_tensor().save(&input).unwrap();
    let status = cdg()
        .args([
            "analyze",
            "--in",
            input.to_str().unwrap(),
            "--axis",
            "output",
            "--max-d",
            "3",
            "--out",
            output.to_str().unwrap(),
        ])
        .status()
        .unwrap();
    assert!(status.success());
    let text = std::fs::read_to_string(&output).unwrap();
    assert_eq!(text.lines().next().unwrap(), "layer,axis,d,mean_corr,n_pairs");
    assert_eq!(text.lines().count(), 4); // header + d = 1..=3
}

#[test]
fn train_synthetic_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let status = cdg()
        .args([
            "train",
            "--seed",
            "3",
            "--out-dir",
            out_dir.to_str().unwrap(),
            "--set",
            "task=synthetic",
            "--set",
            "epochs=200",
            "--set",
            "metric=sobolev_tilde_h1",
            "--set",
            "lambda=1",
            "--set",
            "momentum=0",
            "--set",
            "weight_decay=0",
            "--set",
            "lr=0.25",
            "--set",
            "lr_period=0",
        ])
        .status()
        .unwrap();
    assert!(status.success());
    assert!(out_dir.join("accuracy.csv").exists());
    assert!(out_dir.join("summary.json").exists());
    let summary = std::fs::read_to_string(out_dir.join("summary.json")).unwrap();
    assert!(summary.contains("sobolev_tilde_h1"));
}

#[test]
fn train_without_data_dir_exits_2() {
    // Classification task with no data location configured at all.
    let status = cdg()
        .args(["train", "--set", "task=mnist"])
        .env_remove("CDG_DATA_DIR")
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn train_with_missing_files_exits_3(){
    let dir = tempfile::tempdir().unwrap();
    let status = cdg()
        .args([
            "train",
            "--set",
            "task=mnist",
            "--data-dir",
            dir.path().to_str().unwrap(),
        ])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(3));
}

#[test]
fn config_file_drives_training() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.cfg");
    std::fs::write(
        &config,
        "task = synthetic\nepochs = 50\nseeds = 9\nmetric = reweighted_h0\nlambda = 1\n",
    )
    .unwrap();
    let out_dir = dir.path().join("out");
    let status = cdg()
        .args([
            "train",
            "--config",
            config.to_str().unwrap(),
            "--out-dir",
            out_dir.to_str().unwrap(),
        ])
        .status()
        .unwrap();
    assert!(status.success());
    let csv = std::fs::read_to_string(out_dir.join("accuracy.csv")).unwrap();
    // 50 epochs of one seed -> 50 data rows.
    assert_eq!(csv.lines().count(), 51);
}
