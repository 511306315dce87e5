//! End-to-end checks that drive the compiled binary the way a user would:
//! real argv, real exit codes, real files on disk.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ddxgraph"))
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary should spawn")
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Every regular file under `root`, keyed by its path relative to `root`.
fn dir_snapshot(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).expect("readable dir") {
            let path = entry.expect("dir entry").path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path
                    .strip_prefix(root)
                    .expect("child of root")
                    .to_string_lossy()
                    .into_owned();
                files.insert(rel, fs::read(&path).expect("readable file"));
            }
        }
    }
    files
}

fn assert_same_tree(a: &Path, b: &Path) {
    let left = dir_snapshot(a);
    let right = dir_snapshot(b);
    let left_names: Vec<&String> = left.keys().collect();
    let right_names: Vec<&String> = right.keys().collect();
    assert_eq!(left_names, right_names, "file sets differ between runs");
    for (name, bytes) in &left {
        assert_eq!(bytes, &right[name], "{name} differs between runs");
    }
}

fn evaluate_pairs4(out_dir: &Path, extra: &[&str]) -> Output {
    let pairs = fixture("pairs_4.jsonl");
    let mut args = vec![
        "--out",
        out_dir.to_str().unwrap(),
        "--seed",
        "42",
        "evaluate",
        pairs.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    run(&args)
}

#[test]
fn evaluate_on_the_four_pair_fixture_prints_the_published_rates() {
    let tmp = TempDir::new().unwrap();
    let out = evaluate_pairs4(tmp.path(), &[]);
    assert!(out.status.success(), "stderr: {}", stderr_of(&out));

    let stdout = stdout_of(&out);
    assert!(stdout.contains("n=4"), "stdout: {stdout}");
    assert!(stdout.contains("acc_base=0.7500"), "stdout: {stdout}");
    assert!(stdout.contains("acc_rob=0.5000"), "stdout: {stdout}");
    assert!(stdout.contains("r_bias=0.3333"), "stdout: {stdout}");

    let metrics_path = tmp.path().join("eval/metrics.json");
    let metrics: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&metrics_path).unwrap()).unwrap();
    assert_eq!(metrics["overall"]["n_total"], 4);
    assert_eq!(metrics["overall"]["acc_base"], 0.75);
    assert_eq!(metrics["overall"]["acc_rob"], 0.5);
    let r_bias = metrics["overall"]["r_bias"].as_f64().unwrap();
    assert!((r_bias - 1.0 / 3.0).abs() < 1e-12, "r_bias was {r_bias}");
    assert_eq!(metrics["failure_modes"]["overthinking"], 1);

    for name in ["predictions.jsonl", "results.jsonl", "failure_modes.json", "per_disease.csv"] {
        assert!(tmp.path().join("eval").join(name).is_file(), "missing {name}");
    }
}

#[test]
fn diagnose_reads_the_trap_narrative_to_the_biased_answer() {
    let tmp = TempDir::new().unwrap();
    let input = fixture("case_100473_trap.txt");
    let out = run(&[
        "--out",
        tmp.path().to_str().unwrap(),
        "--seed",
        "42",
        "diagnose",
        input.to_str().unwrap(),
        "--case-id",
        "case-100473-trap",
    ]);
    assert!(out.status.success(), "stderr: {}", stderr_of(&out));
    let stdout = stdout_of(&out);
    assert!(stdout.contains("case-100473-trap: Pulmonary Embolism"), "stdout: {stdout}");

    let trace_path = tmp.path().join("traces/case-100473-trap.json");
    let trace: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&trace_path).unwrap()).unwrap();
    assert_eq!(trace["case_id"], "case-100473-trap");
    assert_eq!(trace["verdict"]["diagnosis"], "Pulmonary Embolism");
}

#[test]
fn unknown_subcommands_exit_with_usage() {
    let out = run(&["definitely-not-a-command"]);
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr_of(&out));
    assert!(stderr_of(&out).contains("Usage"), "stderr: {}", stderr_of(&out));
}

#[test]
fn invalid_config_values_name_the_offending_key() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "[reasoner]\ntau = 1.5\n").unwrap();
    let pairs = fixture("pairs_4.jsonl");
    let out = run(&["--config", cfg.to_str().unwrap(), "evaluate", pairs.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = stderr_of(&out);
    assert!(stderr.contains("reasoner.tau"), "stderr: {stderr}");
}

#[test]
fn dump_config_round_trips_through_the_parser() {
    let out = run(&["--seed", "7", "--dump-config"]);
    assert!(out.status.success(), "stderr: {}", stderr_of(&out));
    let dumped = stdout_of(&out);

    let parsed = ddxgraph_core::RunConfig::from_toml(&dumped).expect("dump should re-parse");
    assert_eq!(parsed.provider.seed, 7);
    assert_eq!(parsed.to_toml(), dumped, "dump should be a fixed point of the serializer");
}

#[test]
fn repeated_runs_emit_byte_identical_artifacts() {
    let first = TempDir::new().unwrap();
    let second = TempDir::new().unwrap();
    assert!(evaluate_pairs4(first.path(), &[]).status.success());
    assert!(evaluate_pairs4(second.path(), &[]).status.success());
    assert_same_tree(first.path(), second.path());
}

#[test]
fn worker_count_does_not_change_the_output() {
    let serial = TempDir::new().unwrap();
    let threaded = TempDir::new().unwrap();
    assert!(evaluate_pairs4(serial.path(), &["--parallel", "1"]).status.success());
    assert!(evaluate_pairs4(threaded.path(), &["--parallel", "4"]).status.success());
    assert_same_tree(serial.path(), threaded.path());
}

#[test]
fn report_re_emits_the_same_metrics_from_saved_results() {
    let eval_dir = TempDir::new().unwrap();
    assert!(evaluate_pairs4(eval_dir.path(), &[]).status.success());

    let report_dir = TempDir::new().unwrap();
    let results = eval_dir.path().join("eval/results.jsonl");
    let modes = eval_dir.path().join("eval/failure_modes.json");
    let out = run(&[
        "--out",
        report_dir.path().to_str().unwrap(),
        "report",
        results.to_str().unwrap(),
        "--failure-modes",
        modes.to_str().unwrap(),
        "--model",
        "ddxgraph-agent",
    ]);
    assert!(out.status.success(), "stderr: {}", stderr_of(&out));

    let original = fs::read(eval_dir.path().join("eval/metrics.json")).unwrap();
    let re_emitted = fs::read(report_dir.path().join("eval/metrics.json")).unwrap();
    assert_eq!(original, re_emitted, "re-emitted metrics should match the original bytes");
}

#[test]
fn build_bench_produces_the_full_artifact_set() {
    let tmp = TempDir::new().unwrap();
    let source = fixture("source_cases.jsonl");
    let out = run(&[
        "--out",
        tmp.path().to_str().unwrap(),
        "--seed",
        "42",
        "build-bench",
        source.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", stderr_of(&out));

    let pairs = fs::read_to_string(tmp.path().join("bench/pairs.jsonl")).unwrap();
    assert_eq!(pairs.lines().filter(|l| !l.trim().is_empty()).count(), 10);
    for name in ["rejects.jsonl", "report.json", "report.csv", "journal.jsonl"] {
        assert!(tmp.path().join("bench").join(name).is_file(), "missing {name}");
    }
}

#[test]
fn evolve_reports_the_memory_update_tallies() {
    let tmp = TempDir::new().unwrap();
    let cases = fixture("evolve_cases.jsonl");
    let out = run(&[
        "--out",
        tmp.path().to_str().unwrap(),
        "--seed",
        "42",
        "evolve",
        cases.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", stderr_of(&out));
    let stdout = stdout_of(&out);
    assert!(stdout.contains("success=3"), "stdout: {stdout}");
    assert!(stdout.contains("discarded=1"), "stdout: {stdout}");

    // Stores stay inside the chosen output directory, never in the cwd.
    assert!(tmp.path().join("stores/exemplars.jsonl").is_file());
    assert!(tmp.path().join("stores/illness").is_dir());
    assert!(tmp.path().join("evolve/journal.jsonl").is_file());
}
