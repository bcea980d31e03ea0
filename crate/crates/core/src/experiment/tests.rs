use proptest::prelude::*;

use super::*;
use crate::dataset::synthetic::SyntheticSpec;
use crate::zoo::{registered_names, Registry};

fn tiny_config(dir: &Path, names: &[&str]) -> ExperimentConfig {
    let specs: Vec<ModelSpec> = names.iter().map(|n| ModelSpec::registered(n).unwrap()).collect();
    let mut c = ExperimentConfig::desk_default(dir);
    c.teacher_specs = specs.clone();
    c.student_specs = specs;
    c.fractions = vec![0.5];
    c.train_config.epochs = 1;
    c.data.source = DataSource::Synthetic(SyntheticSpec {
        train: 150,
        test: 10,
        ..SyntheticSpec::default()
    });
    c
}

fn desk_params() -> HashMap<String, usize> {
    registered_names(Registry::Desk)
        .into_iter()
        .map(|n| (n.to_string(), build_model(&ModelSpec::registered(n).unwrap()).unwrap().parameter_count()))
        .collect()
}

#[test]
fn overfit_gap_examples() {
    assert!((overfit_gap(0.9450, 0.4638).unwrap() - 0.4812).abs() < 1e-12);
    assert_eq!(overfit_gap(0.3, 0.3).unwrap(), 0.0);
    assert!((overfit_gap(0.4904, 0.5073).unwrap() + 0.0169).abs() < 1e-12);
    assert!(overfit_gap(1.1, 0.5).is_err());
    assert!(overfit_gap(0.5, -0.1).is_err());
}

#[test]
fn percent_increase_examples() {
    let p = percent_increase(0.5073, 0.4638).unwrap();
    assert!((p - 9.37).abs() <= 0.02, "{p}");
    assert_eq!(percent_increase(0.42, 0.42).unwrap(), 0.0);
    assert!((percent_increase(0.5, 0.4).unwrap() - 25.0).abs() < 1e-12);
    assert!(percent_increase(0.5, 0.0).is_err());
}

#[test]
fn desk_matrix_has_24_cells() {
    let params = desk_params();
    let dir = Path::new("unused");
    let mut c = ExperimentConfig::desk_default(dir);
    let cells = plan_cells(&c, &params);
    assert_eq!(cells.len(), 24);
    let per_fraction: Vec<_> = cells.iter().filter(|x| x.fraction == 0.1).collect();
    assert_eq!(per_fraction.len(), 6);
    assert_eq!(per_fraction.iter().filter(|x| x.teacher == x.student).count(), 3);
    for x in &cells {
        assert!(params[&x.student] <= params[&x.teacher]);
    }

    c.seeds = vec![0, 1];
    let two = plan_cells(&c, &params);
    assert_eq!(two.len(), 48);
    let keys: std::collections::HashSet<String> = two.iter().map(CellId::key).collect();
    assert_eq!(keys.len(), 48);

    c.include_baselines = true;
    assert_eq!(plan_cells(&c, &params).len(), 48 + 2 * 4 * 3);
}

#[test]
fn config_validation() {
    let dir = Path::new("out");
    let ok = ExperimentConfig::desk_default(dir);
    assert!(ok.validate().is_ok());
    let mut c = ok.clone();
    c.fractions.clear();
    assert!(matches!(c.validate(), Err(Error::InvalidArgument(_))));
    let mut c = ok.clone();
    c.fractions = vec![0.0];
    assert!(c.validate().is_err());
    let mut c = ok.clone();
    c.seeds = vec![1, 1];
    assert!(c.validate().is_err());
    let mut c = ok.clone();
    c.teacher_specs[0] = ModelSpec::registered("resnet-18").unwrap();
    assert!(c.validate().is_err());
}

#[test]
fn config_json_round_trip_and_schema() {
    let c = ExperimentConfig::desk_default("out");
    let text = c.to_json().unwrap();
    assert_eq!(ExperimentConfig::from_json(&text).unwrap(), c);

    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["surprise"] = serde_json::json!(1);
    assert!(ExperimentConfig::from_json(&v.to_string()).is_err());

    let schema: serde_json::Value = serde_json::from_str(CONFIG_SCHEMA).unwrap();
    let props = |s: &serde_json::Value| -> Vec<String> {
        let mut k: Vec<String> = s["properties"].as_object().unwrap().keys().cloned().collect();
        k.sort();
        k
    };
    let mut fields: Vec<String> = serde_json::to_value(&c).unwrap().as_object().unwrap().keys().cloned().collect();
    fields.sort();
    assert_eq!(props(&schema), fields);
    let mut train: Vec<String> =
        serde_json::to_value(&c.train_config).unwrap().as_object().unwrap().keys().cloned().collect();
    train.sort();
    assert_eq!(props(&schema["definitions"]["train_config"]), train);
}

#[test]
fn ledger_round_trip_and_schema_check() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ledger.jsonl");
    let ledger = Ledger::open(&path).unwrap();
    let cell = CellId {
        kind: CellKind::Distill,
        teacher: "a".into(),
        student: "b".into(),
        fraction: 0.1,
        seed: 0,
    };
    let failed = RunRecord {
        schema_version: SCHEMA_VERSION,
        cell_id: cell.clone(),
        status: Status::Failed,
        error: Some("boom".into()),
        config_hash: "h".into(),
        artifacts: Artifacts::default(),
        result: None,
    };
    ledger.upsert(failed.clone()).unwrap();
    ledger.upsert(failed.clone()).unwrap();
    let back = read_ledger(&path).unwrap();
    assert_eq!(back, vec![failed]);
    fs::write(&path, "{\"schema_version\": 99}\n").unwrap();
    assert!(matches!(read_ledger(&path), Err(Error::Format(_))));
}

#[test]
fn small_matrix_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path(), &["desk-small", "desk-medium"]);
    let runner = Runner::new(config.clone()).unwrap();
    let summary = runner.run_matrix();
    assert_eq!(summary.failed, 0, "{:?}", summary.records);
    assert_eq!(summary.records.len(), 3);
    assert_eq!(summary.teachers_trained, 2);
    assert_eq!(summary.students_trained, 3);

    let ledger = read_ledger(&summary.ledger_path).unwrap();
    assert_eq!(ledger.len(), 3);
    for r in &ledger {
        let res = r.result.as_ref().unwrap();
        let again = percent_increase(res.student_val, res.teacher_val).unwrap();
        assert!((again - res.pct_increase).abs() < 1e-9);
        assert!(res.pct_increase.is_finite());
        assert_eq!(res.student_history.len(), 1);
    }
    // both students of the medium teacher consume the same teacher files
    let of_medium: Vec<&RunRecord> = ledger.iter().filter(|r| r.cell_id.teacher == "desk-medium").collect();
    assert_eq!(of_medium.len(), 2);
    assert_eq!(of_medium[0].artifacts.soft_labels, of_medium[1].artifacts.soft_labels);
    assert_eq!(
        of_medium[0].result.as_ref().unwrap().teacher_id,
        of_medium[1].result.as_ref().unwrap().teacher_id
    );
    let student_file = of_medium[0].artifacts.student_checkpoint.clone().unwrap();
    assert!(!student_file.with_file_name(STALE_MARKER).exists());

    // A second run with the same config reloads everything.
    let rerun = Runner::new(config).unwrap().run_matrix();
    assert_eq!(rerun.teachers_trained, 0);
    assert_eq!(rerun.students_trained, 0);
    assert_eq!(rerun.records, summary.records);
}

#[test]
fn matrix_is_fail_soft() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = tiny_config(dir.path(), &["desk-small", "desk-medium"]);
    config.teacher_specs[1].learning_rate = 1e30;
    config.include_baselines = true;
    let summary = run_matrix(config).unwrap();
    // medium teacher diverges: its two distill cells and the medium baseline fail
    assert_eq!(summary.records.len(), 5);
    assert_eq!(summary.failed, 3);
    let ledger = read_ledger(&summary.ledger_path).unwrap();
    assert_eq!(ledger.len(), 5);
    let bad = ledger.iter().find(|r| r.status == Status::Failed).unwrap();
    assert!(bad.error.as_ref().unwrap().contains("train-teacher"));
    assert!(ledger
        .iter()
        .any(|r| r.status == Status::Ok && r.cell_id.kind == CellKind::Baseline && r.cell_id.student == "desk-small"));
}

#[test]
fn zero_fraction_cell_fails_in_partition() {
    let dir = tempfile::tempdir().unwrap();
    let runner = Runner::new(tiny_config(dir.path(), &["desk-small"])).unwrap();
    let cell = CellId {
        kind: CellKind::Distill,
        teacher: "desk-small".into(),
        student: "desk-small".into(),
        fraction: 0.0,
        seed: 0,
    };
    let err = runner.run_cell(&cell).unwrap_err();
    assert!(matches!(err, Error::Stage { stage: "partition", .. }), "{err}");
}

fn record(seed: u64, teacher_val: f64, student_val: f64) -> RunRecord {
    RunRecord {
        schema_version: SCHEMA_VERSION,
        cell_id: CellId {
            kind: CellKind::Distill,
            teacher: "t".into(),
            student: "s".into(),
            fraction: 0.1,
            seed,
        },
        status: Status::Ok,
        error: None,
        config_hash: String::new(),
        artifacts: Artifacts::default(),
        result: Some(CellResult {
            teacher_history: vec![],
            student_history: vec![],
            teacher_val,
            student_val,
            teacher_train: 1.0,
            student_train: 1.0,
            overfit_gap_teacher: 0.0,
            overfit_gap_student: 0.0,
            pct_increase: percent_increase(student_val, teacher_val).unwrap(),
            teacher_params: 1,
            student_params: 1,
            teacher_id: String::new(),
        }),
    }
}

proptest! {
    #[test]
    fn best_seed_is_scale_invariant(
        vals in prop::collection::vec((1u32..1000, 1u32..1000), 1..6),
        scale in 0.25f64..1.0,
    ) {
        let base: Vec<RunRecord> = vals.iter().enumerate()
            .map(|(i, &(t, s))| record(i as u64, t as f64 / 1000.0, s as f64 / 1000.0))
            .collect();
        let scaled: Vec<RunRecord> = vals.iter().enumerate()
            .map(|(i, &(t, s))| record(i as u64, scale * t as f64 / 1000.0, scale * s as f64 / 1000.0))
            .collect();
        let a = best_seed(&base).unwrap();
        let b = best_seed(&scaled).unwrap();
        let pa = a.result.as_ref().unwrap().pct_increase;
        let pb = base[b.cell_id.seed as usize].result.as_ref().unwrap().pct_increase;
        // identical choice unless two seeds tie up to rounding
        prop_assert!(a.cell_id.seed == b.cell_id.seed || (pa - pb).abs() < 1e-9);
    }
}
