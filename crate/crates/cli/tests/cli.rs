use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn gtn(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gtn"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn gtn")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const SHORT: &[&str] = &[
    "--seeds",
    "0",
    "--set",
    "optim.pretrain_epochs=2",
    "--set",
    "optim.epochs=2",
    "--set",
    "optim.freeze_epochs=1",
    "--set",
    "optim.lwf_epochs=1",
];

fn short(extra: &[&str]) -> Vec<String> {
    SHORT.iter().chain(extra).map(|s| s.to_string()).collect()
}

fn run_ok(dir: &Path, args: &[String]) -> String {
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    let out = gtn(dir, &args);
    assert_eq!(code(&out), 0, "{args:?}: {}", stderr(&out));
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn usage_and_config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        vec!["frobnicate"],
        vec!["--set", "optim.nope=1", "pretrain"],
        vec!["--set", "optim.lr", "pretrain"],
        vec!["--set", "optim.lr=-1", "pretrain"],
        vec!["--config", "missing.toml", "pretrain"],
        vec!["reproduce", "--only", "11"],
        vec!["eval", "--checkpoint", "nowhere"],
    ] {
        let out = gtn(dir.path(), &args);
        assert_eq!(code(&out), 2, "{args:?}: {}", stderr(&out));
    }
    assert!(!dir.path().join("runs").exists());
}

#[test]
fn version_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let out = gtn(dir.path(), &["--version"]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains(env!("CARGO_PKG_VERSION")));
}

#[test]
fn flags_override_file_which_overrides_defaults() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("exp.toml"),
        "[optim]\nlr = 0.02\nmomentum = 0.5\npretrain_epochs = 1\n[run]\nseeds = [4]\n",
    )
    .unwrap();
    run_ok(
        dir.path(),
        &["--config", "exp.toml", "--lr", "0.03", "--output", "out", "pretrain"].map(String::from),
    );
    let text = std::fs::read_to_string(dir.path().join("out/config.toml")).unwrap();
    let archived: toml::Table = toml::from_str(&text).unwrap();
    let optim = archived["optim"].as_table().unwrap();
    assert_eq!(optim["lr"].as_float(), Some(0.03));
    assert_eq!(optim["momentum"].as_float(), Some(0.5));
    assert_eq!(optim["weight_decay"].as_float(), Some(0.0001));
    assert_eq!(std::fs::read_to_string(dir.path().join("out/seeds.txt")).unwrap(), "4\n");
    assert!(dir.path().join("out/seed-4/pretrain/checkpoint/manifest.json").is_file());
}

#[test]
fn full_pipeline_writes_the_run_layout() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let base = |extra: &[&str]| short(&[&["--output", "run"], extra].concat());

    run_ok(d, &base(&["pretrain"]));
    run_ok(d, &base(&["transfer", "--variant", "gtn"]));
    run_ok(d, &base(&["transfer", "--variant", "classic-ft"]));
    let lwf = run_ok(d, &base(&["lwf"]));
    assert!(lwf.contains("gap to oracle (gtn)"), "{lwf}");
    assert!(lwf.contains("gap to oracle (classic-ft)"), "{lwf}");

    for f in [
        "config.toml",
        "seeds.txt",
        "VERSION",
        "pretrain_summary.csv",
        "pretrain_summary.json",
        "transfer-gtn_summary.json",
        "transfer-classic-ft_summary.csv",
        "lwf_report.csv",
        "lwf_report.json",
        "seed-0/pretrain/training_log.csv",
        "seed-0/pretrain/metrics.json",
        "seed-0/transfer-gtn/checkpoint/manifest.json",
        "seed-0/transfer-gtn/config.toml",
        "seed-0/lwf-gtn/metrics.json",
    ] {
        assert!(d.join("run").join(f).is_file(), "missing {f}");
    }
    let version = std::fs::read_to_string(d.join("run/VERSION")).unwrap();
    assert!(version.starts_with(env!("CARGO_PKG_VERSION")), "{version}");

    // The forgetting oracle is the pretrained model's source test accuracy.
    let pre: Value = serde_json::from_str(&std::fs::read_to_string(d.join("run/seed-0/pretrain/metrics.json")).unwrap()).unwrap();
    let report: Value = serde_json::from_str(&std::fs::read_to_string(d.join("run/lwf_report.json")).unwrap()).unwrap();
    assert_eq!(report["records"][0]["oracle"], pre["test"]["accuracy"]);

    let eval = run_ok(
        d,
        &short(&["eval", "--checkpoint", "run/seed-0/pretrain/checkpoint", "--task", "source"]),
    );
    let stats: Value = serde_json::from_str(&eval).unwrap();
    assert_eq!(stats["accuracy"], pre["test"]["accuracy"]);

    let analyze = run_ok(d, &short(&["analyze", "--checkpoint", "run/seed-0/transfer-gtn/checkpoint"]));
    assert!(analyze.contains("analysis written to"));
    assert!(d.join("run/seed-0/transfer-gtn/analysis/features.csv").is_file());
    assert!(d.join("run/seed-0/transfer-gtn/analysis/classifier_weights.csv").is_file());

    // A checkpoint whose head does not match the task class count is refused.
    let args = short(&["--set", "data.target_classes=3", "eval", "--checkpoint", "run/seed-0/transfer-gtn/checkpoint"]);
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    let out = gtn(d, &args);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

/// Every file under `root`, keyed by relative path.
fn files(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().display().to_string();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

#[test]
fn pretraining_is_reproducible_across_processes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    run_ok(d, &short(&["--output", "a", "pretrain"]));
    run_ok(d, &short(&["--output", "b", "--threads", "2", "pretrain"]));
    let (a, b) = (files(&d.join("a")), files(&d.join("b")));
    assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
    assert!(a.keys().any(|k| k.ends_with("manifest.json")));
    for (name, bytes) in &a {
        // The archived config names its own output directory.
        if !name.ends_with("config.toml") {
            assert!(bytes == &b[name], "{name} differs");
        }
    }
}

#[test]
fn reproduce_writes_summary_schema() {
    let dir = tempfile::tempdir().unwrap();
    let out = gtn(dir.path(), &["reproduce", "--only", "9", "--results", "res"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("[PASS] criterion  9"), "{stdout}");
    let summary: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("res/summary.json")).unwrap()).unwrap();
    let rows = summary.as_array().unwrap();
    assert_eq!(rows.len(), 1);
    let row = rows[0].as_object().unwrap();
    let mut keys: Vec<&str> = row.keys().map(String::as_str).collect();
    keys.sort();
    assert_eq!(keys, ["criterion_id", "description", "pass", "runtime_s", "threshold", "value"]);
    assert_eq!(row["criterion_id"], 9);
    assert_eq!(row["pass"], true);
    assert!(dir.path().join("res/config.toml").is_file());
}

#[test]
fn tightened_tolerance_fails_the_gradient_criterion() {
    let dir = tempfile::tempdir().unwrap();
    let out = gtn(
        dir.path(),
        &["--set", "acceptance.grad_tol=1e-14", "reproduce", "--only", "1", "--results", "res"],
    );
    assert_eq!(code(&out), 1, "{}", stderr(&out));
    assert!(String::from_utf8_lossy(&out.stdout).contains("[FAIL] criterion  1"));
    let summary: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("res/summary.json")).unwrap()).unwrap();
    assert_eq!(summary[0]["pass"], false);
}
