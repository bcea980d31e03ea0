use std::path::Path;
use std::process::{Command, Output};

use kdistill::experiment::{read_ledger, ExperimentConfig};

const TINY: &[&str] = &[
    "--synthetic-train",
    "150",
    "--synthetic-test",
    "10",
    "--epochs",
    "1",
    "--teachers",
    "desk-small",
    "--students",
    "desk-small",
    "--fractions",
    "0.5",
];

fn kdistill(args: &[&str], out: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_kdistill"));
    cmd.args(args).env_remove("KDISTILL_OUT");
    if let Some(dir) = out {
        cmd.env("KDISTILL_OUT", dir);
    }
    cmd.output().expect("spawn kdistill")
}

fn with_tiny<'a>(args: &[&'a str]) -> Vec<&'a str> {
    args.iter().copied().chain(TINY.iter().copied()).collect()
}

fn stdout_json(o: &Output) -> serde_json::Value {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).unwrap()
}

#[test]
fn no_arguments_prints_usage_and_exits_2() {
    let o = kdistill(&[], None);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn unknown_subcommand_or_flag_exits_2() {
    assert_eq!(kdistill(&["conjure"], None).status.code(), Some(2));
    assert_eq!(kdistill(&["report", "--bogus"], None).status.code(), Some(2));
}

#[test]
fn missing_soft_labels_fail_the_provenance_check() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.bin");
    let args = with_tiny(&["distill", "--arch", "desk-small", "--fraction", "0.5", "--soft-labels", missing.to_str().unwrap()]);
    let o = kdistill(&args, Some(dir.path()));
    assert_eq!(o.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_slice(o.stderr.trim_ascii()).unwrap();
    assert_eq!(err["stage"], "distill");
    assert!(err["error"].as_str().unwrap().contains("provenance check"), "{err}");
}

#[test]
fn run_matrix_merges_config_with_flags_then_reports() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = ExperimentConfig::desk_default(dir.path().join("from-file"));
    config.seeds = vec![7];
    let cfg_path = dir.path().join("desk.json");
    std::fs::write(&cfg_path, config.to_json().unwrap()).unwrap();

    let mut args = with_tiny(&["run-matrix", "--config", cfg_path.to_str().unwrap(), "--seeds", "0,1"]);
    let out = dir.path().join("flag-out");
    args.extend(["--output-dir", out.to_str().unwrap()]);
    let summary = stdout_json(&kdistill(&args, None));
    assert_eq!(summary["cells"], 2);
    assert_eq!(summary["failed"], 0);
    let ledger = read_ledger(&out.join("ledger.jsonl")).unwrap();
    let mut seeds: Vec<u64> = ledger.iter().map(|r| r.cell_id.seed).collect();
    seeds.sort();
    assert_eq!(seeds, [0, 1]);
    assert!(!dir.path().join("from-file").exists());

    let ledger_arg = out.join("ledger.jsonl");
    let report = out.join("report");
    let r = stdout_json(&kdistill(
        &["report", "--ledger", ledger_arg.to_str().unwrap(), "--out", report.to_str().unwrap()],
        None,
    ));
    assert_eq!(r["tables"].as_array().unwrap().len(), 4);
    assert!(report.join("accuracy_by_split.svg").exists());
    assert!(report.join("manifest.json").exists());
}

#[test]
fn output_directory_defaults_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let o = kdistill(&with_tiny(&["split", "--fraction", "0.1"]), Some(dir.path()));
    let v = stdout_json(&o);
    assert_eq!(v["train"], 120);
    assert_eq!(v["labeled"], 12);
    assert!(dir.path().join("split.json").exists());
}

#[test]
fn staged_pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = Some(dir.path());
    let ingest = stdout_json(&kdistill(&with_tiny(&["ingest"]), d));
    assert_eq!(ingest["train"], 150);

    let teacher = dir.path().join("t.safetensors");
    let t = teacher.to_str().unwrap();
    stdout_json(&kdistill(&with_tiny(&["train-teacher", "--arch", "desk-small", "--fraction", "0.5", "--out", t]), d));
    let soft = stdout_json(&kdistill(&with_tiny(&["soft-labels", "--teacher", t]), d));
    assert_eq!(soft["rows"], 120);
    let soft_path = soft["soft_labels"].as_str().unwrap().to_string();

    let student = dir.path().join("s.safetensors");
    let s = student.to_str().unwrap();
    let args = with_tiny(&[
        "distill",
        "--arch",
        "desk-small",
        "--fraction",
        "0.5",
        "--seed",
        "3",
        "--soft-labels",
        &soft_path,
        "--teacher",
        t,
        "--out",
        s,
    ]);
    stdout_json(&kdistill(&args, d));
    let eval = stdout_json(&kdistill(&with_tiny(&["eval", "--checkpoint", s, "--split", "test"]), d));
    assert_eq!(eval["examples"], 10);
    let acc = eval["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));

    // soft labels computed under another temperature are refused
    let mut hot = args.clone();
    hot.extend(["--temperature", "4"]);
    let o = kdistill(&hot, d);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("provenance"));
}
