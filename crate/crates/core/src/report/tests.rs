use super::*;
use crate::experiment::{percent_increase, Artifacts, CellId, Ledger};

fn rec(kind: CellKind, teacher: &str, student: &str, fraction: f64, seed: u64, tv: f64, sv: f64) -> RunRecord {
    let params = |n: &str| if n.contains("large") { 300_000 } else { 50_000 };
    RunRecord {
        schema_version: SCHEMA_VERSION,
        cell_id: CellId {
            kind,
            teacher: teacher.into(),
            student: student.into(),
            fraction,
            seed,
        },
        status: Status::Ok,
        error: None,
        config_hash: format!("h{seed}"),
        artifacts: Artifacts::default(),
        result: Some(CellResult {
            teacher_history: vec![],
            student_history: vec![],
            teacher_val: tv,
            student_val: sv,
            teacher_train: 0.9,
            student_train: 0.8,
            overfit_gap_teacher: 0.9 - tv,
            overfit_gap_student: 0.8 - sv,
            pct_increase: percent_increase(sv, tv).unwrap(),
            teacher_params: params(teacher),
            student_params: params(student),
            teacher_id: String::new(),
        }),
    }
}

fn write_ledger(dir: &Path, records: &[RunRecord]) -> PathBuf {
    let path = dir.join("ledger.jsonl");
    let ledger = Ledger::open(&path).unwrap();
    for r in records {
        ledger.upsert(r.clone()).unwrap();
    }
    path
}

fn cell<'a>(t: &'a Table, row: usize, col: &str) -> &'a TableCell {
    &t.rows[row][t.column(col).unwrap()]
}

fn sample() -> Vec<RunRecord> {
    let d = CellKind::Distill;
    let mut v = Vec::new();
    for seed in 0..3 {
        let s = seed as f64 * 0.01;
        v.push(rec(d, "small", "small", 0.1, seed, 0.40 + s, 0.44 + 2.0 * s));
        v.push(rec(d, "small", "small", 0.5, seed, 0.55 + s, 0.56 + s));
        v.push(rec(d, "large", "small", 0.1, seed, 0.50 + s, 0.46 + s));
        v.push(rec(CellKind::Baseline, "small", "small", 0.1, seed, 0.40 + s, 0.40 + s));
    }
    v
}

#[test]
fn paper_cell_gives_expected_percent_row() {
    let dir = tempfile::tempdir().unwrap();
    let r = rec(CellKind::Distill, "mobilenet-v3-large", "mobilenet-v3-large", 0.10, 0, 0.4638, 0.5073);
    let ledger = write_ledger(dir.path(), &[r]);
    let bundle = emit_report(&ledger, &dir.path().join("report")).unwrap();
    let t = &bundle.tables[1];
    assert_eq!(t.rows.len(), 1);
    assert_eq!(cell(t, 0, "fraction").text, "0.1");
    let p = cell(t, 0, "pct_increase_median").value.unwrap();
    assert!((p - 9.38).abs() <= 0.01, "{p}");
    // single cell: one bar group per chart that has data
    assert_eq!(bundle.charts[1].groups.len(), 1);
    assert!(bundle.tables[3].rows.is_empty());
}

#[test]
fn medians_match_brute_force() {
    let dir = tempfile::tempdir().unwrap();
    let records = sample();
    let bundle = emit_report(&write_ledger(dir.path(), &records), &dir.path().join("r")).unwrap();
    let acc = &bundle.tables[0];
    let row = acc.rows.iter().position(|r| r[2].text == "0.1").unwrap();
    let mut vals: Vec<f64> = records
        .iter()
        .filter(|r| r.cell_id.kind == CellKind::Distill && r.cell_id.teacher == "small" && r.cell_id.fraction == 0.1)
        .map(|r| r.result.as_ref().unwrap().student_val)
        .collect();
    vals.sort_by(f64::total_cmp);
    assert_eq!(cell(acc, row, "student_val_median").value, Some(vals[1]));
    assert_eq!(cell(acc, row, "student_val_min").value, Some(vals[0]));
    assert_eq!(cell(acc, row, "student_val_max").value, Some(vals[2]));
    assert_eq!(cell(acc, row, "seeds").text, "0 1 2");

    let comp = &bundle.tables[3];
    assert_eq!(comp.rows.len(), 1);
    assert_eq!(cell(comp, 0, "baseline_val_median").value, Some(0.40 + 0.01));
    assert_eq!(comp.row_records[0].len(), 6);
}

#[test]
fn report_is_deterministic_and_traceable() {
    let dir = tempfile::tempdir().unwrap();
    let ledger = write_ledger(dir.path(), &sample());
    let a = emit_report(&ledger, &dir.path().join("a")).unwrap();
    let b = emit_report(&ledger, &dir.path().join("b")).unwrap();
    for (x, y) in a.table_paths.iter().chain(&a.plot_paths).zip(b.table_paths.iter().chain(&b.plot_paths)) {
        assert!(fs::read(x).unwrap() == fs::read(y).unwrap(), "{}", x.display());
    }
    assert_eq!(fs::read(&a.manifest_path).unwrap(), fs::read(&b.manifest_path).unwrap());

    let records = read_ledger(&ledger).unwrap();
    for (t, path) in a.tables.iter().zip(&a.plot_paths) {
        // every sourced value is the named field of the named record
        for row in &t.rows {
            for c in row {
                if let Some((key, f)) = &c.source {
                    let r = records.iter().find(|r| &r.key() == key).unwrap();
                    assert_eq!(c.value, Some(field(r.result.as_ref().unwrap(), f)));
                }
            }
        }
        // every plotted value appears verbatim in the CSV
        let csv_text = String::from_utf8(t.to_csv().unwrap()).unwrap();
        let cells: std::collections::HashSet<&str> =
            csv_text.lines().flat_map(|l| l.split(',')).collect();
        let svg = fs::read_to_string(path).unwrap();
        let plotted: Vec<&str> = svg.split("data-value=\"").skip(1).map(|s| s.split('"').next().unwrap()).collect();
        assert!(!plotted.is_empty() || t.rows.is_empty());
        for v in plotted {
            assert!(cells.contains(v), "{v} not in {}", t.name);
        }
    }
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(&a.manifest_path).unwrap()).unwrap();
    assert_eq!(manifest["records"].as_array().unwrap().len(), 12);
    let first = &manifest["tables"][0]["rows"][0]["cells"]["student_val_median"];
    assert!(first["record"].as_str().unwrap().starts_with("small__small"));
    assert_eq!(first["record_sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn csv_quotes_per_rfc4180() {
    let mut t = Table::new("q", &["a", "b"]);
    t.rows.push(vec![TableCell::label("x,y"), TableCell::label("say \"hi\"")]);
    assert_eq!(t.to_csv().unwrap(), b"a,b\r\n\"x,y\",\"say \"\"hi\"\"\"\r\n");
}

#[test]
fn rejects_empty_and_foreign_ledgers() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ledger.jsonl");
    fs::write(&path, "").unwrap();
    assert!(matches!(emit_report(&path, dir.path()), Err(Error::InvalidArgument(_))));
    let mut v = serde_json::to_value(&sample()[0]).unwrap();
    v["schema_version"] = serde_json::json!(SCHEMA_VERSION + 1);
    fs::write(&path, format!("{v}\n")).unwrap();
    assert!(matches!(emit_report(&path, dir.path()), Err(Error::Format(_))));
}

#[test]
fn failed_records_are_listed_not_tabulated() {
    let dir = tempfile::tempdir().unwrap();
    let mut records = sample();
    records[0].status = Status::Failed;
    records[0].result = None;
    records[0].error = Some("diverged".into());
    let bundle = emit_report(&write_ledger(dir.path(), &records), &dir.path().join("r")).unwrap();
    assert_eq!(cell(&bundle.tables[0], 0, "seeds").text, "1 2");
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(&bundle.manifest_path).unwrap()).unwrap();
    assert_eq!(manifest["records"][0]["status"], "failed");
}
