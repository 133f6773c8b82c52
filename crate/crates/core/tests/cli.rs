use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use adacon::cli::dispatch;

const SMALL: &[&str] = &[
    "--set", "n=200",
    "--set", "dim=6",
    "--set", "iterations=40",
    "--set", "milestones=20,30",
    "--set", "eval_every=10",
    "--set", "widths=8",
    "--set", "projection_dim=8",
];

fn run(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_adacon"))
        .args(args)
        .env("ADACON_OUT", out)
        .output()
        .unwrap()
}

fn with_small<'a>(head: &[&'a str]) -> Vec<&'a str> {
    head.iter().copied().chain(SMALL.iter().copied()).collect()
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(dispatch(["adacon", "frobnicate"]), 1);
    assert_eq!(dispatch(["adacon", "train", "--no-such-flag"]), 1);
    assert_eq!(dispatch(["adacon", "train", "--set", "nonsense=1"]), 1);
    assert_eq!(dispatch(["adacon", "train", "--set", "lr"]), 1);
    assert_eq!(dispatch(["adacon", "gradcheck", "--loss", "bogus"]), 1);
    assert_eq!(dispatch(["adacon", "gen", "--dataset", "spiral"]), 1);
}

#[test]
fn missing_config_is_a_runtime_error_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["train", "--config", "missing.cfg"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.cfg"));
}

#[test]
fn gradcheck_passes_for_regression_losses() {
    assert_eq!(dispatch(["adacon", "gradcheck", "--loss", "huber", "--trials", "20", "--seed", "7"]), 0);
}

#[test]
fn train_writes_outputs_and_echoed_config_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &with_small(&["train", "--run-id", "first", "--seed", "3"]));
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let first = dir.path().join("first");
    for f in ["config.txt", "model.bin", "record.csv", "summary.txt"] {
        assert!(first.join(f).exists(), "{f}");
    }
    let record = fs::read_to_string(first.join("record.csv")).unwrap();
    assert!(record.starts_with("iteration,lreg,lcon,ltotal,lr"));
    assert_eq!(record.lines().count(), 41);

    let cfg = first.join("config.txt");
    let cfg = cfg.to_str().unwrap();
    let again = run(dir.path(), &["train", "--config", cfg, "--run-id", "second"]);
    assert_eq!(again.status.code(), Some(0));
    let second = dir.path().join("second");
    for f in ["record.csv", "model.bin", "summary.txt"] {
        assert_eq!(fs::read(first.join(f)).unwrap(), fs::read(second.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn compare_reports_each_seed_and_a_median() {
    let dir = tempfile::tempdir().unwrap();
    let args = with_small(&["compare", "--losses", "adacon,supcon,none", "--seeds", "2", "--dataset", "ring", "--run-id", "cmp"]);
    let out = run(dir.path(), &args);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("cmp/compare.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "loss,seed,mae,rmse,r2,spearman_rho");
    assert_eq!(rows.len(), 1 + 3 * 3);
    for loss in ["adacon", "supcon", "none"] {
        assert_eq!(rows.iter().filter(|r| r.starts_with(&format!("{loss},"))).count(), 3);
        assert!(rows.iter().any(|r| r.starts_with(&format!("{loss},median,"))));
    }
    assert!(dir.path().join("cmp/adacon-s1/record.csv").exists());
}

#[test]
fn gen_eval_plotdata_and_margins() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.csv");
    let data_s = data.to_str().unwrap();
    let out = run(dir.path(), &["gen", "--dataset", "skewed", "--n", "120", "--dim", "6", "--output", data_s]);
    assert_eq!(out.status.code(), Some(0));
    assert!(dir.path().join("data.meta").exists());

    let out = run(dir.path(), &with_small(&["train", "--data", data_s, "--run-id", "t"]));
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let ckpt = dir.path().join("t/model.bin");
    let ckpt_s = ckpt.to_str().unwrap();

    let out = run(dir.path(), &["eval", "--checkpoint", ckpt_s, "--data", data_s]);
    assert_eq!(out.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("mae=") && stdout.contains("spearman_rho="));
    assert!(dir.path().join("eval/metrics.txt").exists());

    let out = run(dir.path(), &["plotdata", "--checkpoint", ckpt_s, "--data", data_s, "--pairs", "50"]);
    assert_eq!(out.status.code(), Some(0));
    let scatter = fs::read_to_string(dir.path().join("plotdata/scatter.csv")).unwrap();
    assert_eq!(scatter.lines().count(), 51);
    let layout = fs::read_to_string(dir.path().join("plotdata/layout.csv")).unwrap();
    assert_eq!(layout.lines().count(), 121);

    let margins = dir.path().join("m.csv");
    let out = run(dir.path(), &["margins", "--data", data_s, "--rows", "5", "--output", margins.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let m = fs::read_to_string(&margins).unwrap();
    assert_eq!(m.lines().count(), 5);
    assert!(m.lines().all(|l| l.split(',').count() == 5));

    let out = run(dir.path(), &["eval", "--checkpoint", "absent.bin", "--data", data_s]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent.bin"));
}

#[test]
fn output_root_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["gen", "--n", "30", "--dim", "4", "--seed", "2"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(dir.path().join("gen-ring-s2/data.csv").exists());
}
