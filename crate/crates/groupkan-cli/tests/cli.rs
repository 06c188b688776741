//! End-to-end checks of the command-line surface: subcommands, file
//! outputs, exit codes, and reproducibility.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_groupkan"))
}

fn run_ok(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("spawn groupkan");
    assert!(
        out.status.success(),
        "command {:?} failed\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn read(path: &Path) -> String {
    fs::read_to_string(path).unwrap_or_else(|e| panic!("read {}: {e}", path.display()))
}

#[test]
fn generate_train_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let train_out = dir.path().join("train");
    let eval_out = dir.path().join("eval");

    run_ok(&[
        "generate",
        "--out",
        data.to_str().unwrap(),
        "--count",
        "10",
        "--resolution",
        "32",
        "--seed",
        "3",
    ]);
    assert!(data.join("images/syn00000.pgm").is_file());
    assert!(data.join("masks/syn00009.pgm").is_file());

    run_ok(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        train_out.to_str().unwrap(),
        "--epochs",
        "2",
        "--batch-size",
        "4",
        "--seed",
        "3",
    ]);
    let log = read(&train_out.join("train_log.csv"));
    assert!(log.starts_with("epoch,lr,train_loss,val_iou,val_f1\n"));
    assert_eq!(log.lines().count(), 3); // header + 2 epochs
    assert!(train_out.join("checkpoint.gkn").is_file());
    let frozen = read(&train_out.join("config.resolved.ini"));
    assert!(frozen.contains("[model]") && frozen.contains("seed = 3"));

    run_ok(&[
        "eval",
        "--checkpoint",
        train_out.join("checkpoint.gkn").to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        eval_out.to_str().unwrap(),
    ]);
    let metrics = read(&eval_out.join("metrics.csv"));
    assert!(metrics.starts_with("id,iou,f1\n"));
    assert_eq!(metrics.lines().count(), 11);
    let report = read(&eval_out.join("report.csv"));
    assert!(report.starts_with("dataset,seed,iou,f1,plausibility_iou,params,gflops\n"));
}

#[test]
fn eval_explain_adds_plausibility_column() {
    let dir = tempfile::tempdir().unwrap();
    let train_out = dir.path().join("train");
    run_ok(&[
        "train",
        "--synthetic",
        "--out",
        train_out.to_str().unwrap(),
        "--epochs",
        "1",
        "--resolution",
        "32",
        "--seed",
        "1",
    ]);
    let eval_out = dir.path().join("eval");
    run_ok(&[
        "eval",
        "--checkpoint",
        train_out.join("checkpoint.gkn").to_str().unwrap(),
        "--synthetic",
        "--config",
        train_out.join("config.resolved.ini").to_str().unwrap(),
        "--out",
        eval_out.to_str().unwrap(),
        "--explain",
    ]);
    let metrics = read(&eval_out.join("metrics.csv"));
    assert!(metrics.starts_with("id,iou,f1,plausibility_iou\n"));
    let report = read(&eval_out.join("report.csv"));
    let data_line = report.lines().nth(1).unwrap();
    assert_eq!(data_line.split(',').count(), 7);
    assert!(!data_line.split(',').nth(4).unwrap().is_empty());
}

#[test]
fn train_same_seed_reproduces_the_log_bit_for_bit() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        run_ok(&[
            "train",
            "--synthetic",
            "--out",
            out.to_str().unwrap(),
            "--epochs",
            "2",
            "--resolution",
            "32",
            "--seed",
            "11",
        ]);
    }
    assert_eq!(read(&a.join("train_log.csv")), read(&b.join("train_log.csv")));
    assert_eq!(
        fs::read(a.join("checkpoint.gkn")).unwrap(),
        fs::read(b.join("checkpoint.gkn")).unwrap()
    );
}

#[test]
fn train_without_dataset_source_fails() {
    let out = bin()
        .args(["train", "--out", "/tmp/should_not_exist_gk"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("--synthetic") || stderr.contains("data"), "{stderr}");
}

#[test]
fn eval_rejects_corrupt_checkpoint_magic() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("bad.gkn");
    fs::write(&ckpt, b"XXXX not a checkpoint").unwrap();
    let out = bin()
        .args([
            "eval",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--synthetic",
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("magic"), "{stderr}");
}

fn profile_csv(args: &[&str]) -> Vec<(String, u64, u64)> {
    let out = run_ok(args);
    String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| {
            let mut parts = l.split(',');
            (
                parts.next().unwrap().to_string(),
                parts.next().unwrap().parse().unwrap(),
                parts.next().unwrap().parse().unwrap(),
            )
        })
        .collect()
}

#[test]
fn profile_components_sum_to_total() {
    let rows = profile_csv(&["profile", "--preset", "base"]);
    let total = rows.iter().find(|r| r.0 == "total").unwrap();
    let sum_params: u64 = rows.iter().filter(|r| r.0 != "total").map(|r| r.1).sum();
    let sum_flops: u64 = rows.iter().filter(|r| r.0 != "total").map(|r| r.2).sum();
    assert_eq!(total.1, sum_params);
    assert_eq!(total.2, sum_flops);
}

#[test]
fn profile_group_sweep_halves_spline_params() {
    let mut spline_params = Vec::new();
    for g in ["1", "2", "4", "8", "16"] {
        let rows = profile_csv(&["profile", "--preset", "tiny", "--g-gkt", g]);
        spline_params.push(rows.iter().find(|r| r.0 == "gkt_spline").unwrap().1);
    }
    for pair in spline_params.windows(2) {
        assert_eq!(pair[0], 2 * pair[1], "halving broken: {spline_params:?}");
    }
}

#[test]
fn profile_presets_are_ordered_s_base_l() {
    let rows = profile_csv(&["profile", "--presets"]);
    let names: Vec<&str> = rows.iter().map(|r| r.0.as_str()).collect();
    assert_eq!(names, ["s", "base", "l"]);
    assert!(rows[0].1 < rows[1].1 && rows[1].1 < rows[2].1);
}

#[test]
fn gradcheck_ops_passes_and_reports() {
    let out = run_ok(&["gradcheck", "ops"]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("0 failed"), "{stdout}");
    assert!(stdout.contains("max rel err"));
}

#[test]
fn gradcheck_unknown_scope_is_usage_error() {
    let out = bin().args(["gradcheck", "everything"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("usage error"));
}

#[test]
fn ablate_unknown_axis_fails() {
    let out = bin().args(["ablate", "bogus"]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));
}

#[test]
fn ablate_depth_sweep_emits_increasing_params_and_reproduces() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("ablate.ini");
    fs::write(&cfg_path, "[data]\nresolution = 32\ncount = 12\n").unwrap();
    let sweep_dir = dir.path().join("sweep");
    let args = [
        "ablate",
        "gkt_depth",
        "--config",
        cfg_path.to_str().unwrap(),
        "--epochs",
        "1",
        "--seed",
        "5",
        "--out",
        sweep_dir.to_str().unwrap(),
    ];
    run_ok(&args);
    let csv1 = read(&dir.path().join("sweep/ablate_gkt_depth.csv"));
    let params: Vec<u64> = csv1
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert_eq!(params.len(), 5);
    for pair in params.windows(2) {
        assert!(pair[1] > pair[0], "params not strictly increasing: {params:?}");
    }
    run_ok(&args);
    assert_eq!(csv1, read(&dir.path().join("sweep/ablate_gkt_depth.csv")));
}
