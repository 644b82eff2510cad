use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn coresleep(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_coresleep"))
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = coresleep(out, args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn prepare(out: &Path) {
    ok(out, &["synth", "--patients", "8", "--windows", "60", "--noisy-patients", "2"]);
    ok(out, &["preprocess"]);
    ok(out, &["detect-noise"]);
}

#[test]
fn pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    prepare(out);
    let noise = fs::read_to_string(out.join("noise.txt")).unwrap();
    for id in ["synth-0000", "synth-0001"] {
        assert!(noise.lines().any(|l| l.starts_with(id) && l.ends_with(", 1")), "{id} not selected:\n{noise}");
    }

    ok(out, &["train", "--max-steps", "6"]);
    for f in ["config.toml", "checkpoint.crsc", "manifest.toml", "train_log.txt"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let manifest = fs::read_to_string(out.join("manifest.toml")).unwrap();
    let hash = manifest.lines().next().unwrap().trim_start_matches("hash = ").trim_matches('"').to_string();
    assert!(fs::read_to_string(out.join("config.toml")).unwrap().contains(&hash));

    let report = ok(out, &["eval"]);
    assert!(report.contains("both") && report.contains("eeg_only"));
    let kv = fs::read_to_string(out.join("eval.kv")).unwrap();
    assert!(kv.contains("both.accuracy = ") && kv.contains("both.confusion.W = "));

    ok(out, &["export-hypnogram", "--patient", "synth-0000"]);
    let table = fs::read_to_string(out.join("hypnogram-synth-0000.txt")).unwrap();
    assert!(table.starts_with("# manifest "));
    assert!(table.contains("index, true, pred_mm, pred_eeg, pred_eog"));
}

#[test]
fn repeated_seeds_give_identical_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    prepare(out);
    let mut reports = Vec::new();
    for _ in 0..2 {
        ok(out, &["--seed", "7", "train", "--max-steps", "4"]);
        ok(out, &["--seed", "7", "eval", "--conditions", "both,eog_only"]);
        reports.push(fs::read_to_string(out.join("eval.kv")).unwrap());
    }
    assert_eq!(reports[0], reports[1]);
}

#[test]
fn repeat_flag_aggregates_runs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    prepare(out);
    ok(out, &["--repeat", "2", "train", "--max-steps", "3"]);
    let text = ok(out, &["--repeat", "2", "eval", "--conditions", "both"]);
    assert!(text.contains("mean ± std over 2 runs"));
    assert!(out.join("run-1/eval.kv").exists());
    assert!(out.join("eval_summary.txt").exists());
}

#[test]
fn eval_without_checkpoint_fails_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    prepare(out);
    let o = coresleep(out, &["eval"]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("checkpoint") && err.lines().count() == 1, "{err}");
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    for args in [&["bogus"][..], &["train", "--no-such-flag"], &["--repeat", "0", "eval"]] {
        let o = coresleep(dir.path(), args);
        assert_eq!(o.status.code(), Some(2), "{args:?}");
        assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
    }
}

#[test]
fn bad_config_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[model]\nheads = 3\n").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_coresleep"))
        .args(["--out", dir.path().to_str().unwrap(), "--config", cfg.to_str().unwrap(), "preprocess"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
}
