//! CSV tables and SVG charts built from a run ledger.
//!
//! Seeds of one cell are aggregated into median, min and max. The median of
//! an even count is the lower middle value, so every number in a table is a
//! field of exactly one record; `manifest.json` names that record and its
//! hash for each table cell.

mod svg;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

pub use svg::{render as render_svg, Bar, Chart};

use crate::error::{Error, IoContext, Result};
use crate::experiment::{read_ledger, CellKind, CellResult, RunRecord, Status, SCHEMA_VERSION};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq)]
pub struct TableCell {
    pub text: String,
    pub value: Option<f64>,
    /// (record key, field) the value was copied from.
    pub source: Option<(String, String)>,
}

impl TableCell {
    fn label(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            value: None,
            source: None,
        }
    }

    fn empty() -> Self {
        Self::label("")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: &'static str,
    pub header: Vec<String>,
    pub rows: Vec<Vec<TableCell>>,
    /// Keys of the records aggregated into each row.
    pub row_records: Vec<Vec<String>>,
}

impl Table {
    fn new(name: &'static str, header: &[&str]) -> Self {
        Self {
            name,
            header: header.iter().map(|h| h.to_string()).collect(),
            rows: Vec::new(),
            row_records: Vec::new(),
        }
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    /// RFC 4180 text of the table.
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::CRLF).from_writer(Vec::new());
        w.write_record(&self.header)?;
        for row in &self.rows {
            w.write_record(row.iter().map(|c| c.text.as_str()))?;
        }
        w.into_inner().map_err(|e| Error::io("csv buffer", e.into_error()))
    }
}

#[derive(Debug, Clone)]
pub struct ReportBundle {
    pub tables: Vec<Table>,
    pub charts: Vec<Chart>,
    pub table_paths: Vec<PathBuf>,
    pub plot_paths: Vec<PathBuf>,
    pub manifest_path: PathBuf,
}

fn num(v: f64) -> String {
    format!("{v}")
}

fn field(r: &CellResult, name: &str) -> f64 {
    match name {
        "teacher_val" => r.teacher_val,
        "student_val" => r.student_val,
        "teacher_train" => r.teacher_train,
        "student_train" => r.student_train,
        "overfit_gap_teacher" => r.overfit_gap_teacher,
        "overfit_gap_student" => r.overfit_gap_student,
        "pct_increase" => r.pct_increase,
        _ => unreachable!("unknown field {name}"),
    }
}

struct Group<'a> {
    records: Vec<&'a RunRecord>,
}

impl Group<'_> {
    fn result(r: &RunRecord) -> &CellResult {
        r.result.as_ref().expect("ok records carry results")
    }

    /// Records sorted by the field, ties broken by seed.
    fn sorted(&self, name: &str) -> Vec<&RunRecord> {
        let mut v = self.records.clone();
        v.sort_by(|a, b| {
            field(Self::result(a), name)
                .total_cmp(&field(Self::result(b), name))
                .then(a.cell_id.seed.cmp(&b.cell_id.seed))
        });
        v
    }

    fn pick(r: &RunRecord, name: &str) -> TableCell {
        let v = field(Self::result(r), name);
        TableCell {
            text: num(v),
            value: Some(v),
            source: Some((r.key(), name.to_string())),
        }
    }

    fn median(&self, name: &str) -> TableCell {
        let v = self.sorted(name);
        Self::pick(v[(v.len() - 1) / 2], name)
    }

    /// Median, min and max cells of one field.
    fn stats(&self, name: &str) -> [TableCell; 3] {
        let v = self.sorted(name);
        [Self::pick(v[(v.len() - 1) / 2], name), Self::pick(v[0], name), Self::pick(v[v.len() - 1], name)]
    }

    fn first(&self) -> &RunRecord {
        self.records[0]
    }

    fn keys(&self) -> Vec<String> {
        self.records.iter().map(|r| r.key()).collect()
    }

    fn seeds(&self) -> String {
        let mut s: Vec<u64> = self.records.iter().map(|r| r.cell_id.seed).collect();
        s.sort_unstable();
        s.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
    }

    fn teacher_params(&self) -> usize {
        Self::result(self.first()).teacher_params
    }

    fn student_params(&self) -> usize {
        Self::result(self.first()).student_params
    }
}

type GroupKey = (CellKind, String, String, u64);

fn group(records: &[RunRecord]) -> BTreeMap<GroupKey, Group<'_>> {
    let mut groups: BTreeMap<GroupKey, Group> = BTreeMap::new();
    for r in records.iter().filter(|r| r.status == Status::Ok && r.result.is_some()) {
        let c = &r.cell_id;
        groups
            .entry((c.kind, c.teacher.clone(), c.student.clone(), c.fraction.to_bits()))
            .or_insert(Group { records: Vec::new() })
            .records
            .push(r);
    }
    groups
}

fn fraction(key: &GroupKey) -> f64 {
    f64::from_bits(key.3)
}

fn self_distill_rows<'a, 'b>(groups: &'b BTreeMap<GroupKey, Group<'a>>) -> Vec<(&'b GroupKey, &'b Group<'a>)> {
    groups.iter().filter(|(k, _)| k.0 == CellKind::Distill && k.1 == k.2).collect()
}

fn accuracy_table(groups: &BTreeMap<GroupKey, Group>) -> Table {
    let mut t = Table::new(
        "accuracy_by_split",
        &[
            "model",
            "params",
            "fraction",
            "seeds",
            "teacher_val_median",
            "teacher_val_min",
            "teacher_val_max",
            "student_val_median",
            "student_val_min",
            "student_val_max",
            "teacher_train_median",
            "student_train_median",
            "overfit_gap_teacher_median",
            "overfit_gap_student_median",
        ],
    );
    let mut rows = self_distill_rows(groups);
    rows.sort_by(|a, b| {
        (a.1.student_params(), &a.0 .2)
            .cmp(&(b.1.student_params(), &b.0 .2))
            .then(fraction(a.0).total_cmp(&fraction(b.0)))
    });
    for (k, g) in rows {
        let mut row = vec![
            TableCell::label(&k.2),
            TableCell::label(g.student_params().to_string()),
            TableCell::label(num(fraction(k))),
            TableCell::label(g.seeds()),
        ];
        row.extend(g.stats("teacher_val"));
        row.extend(g.stats("student_val"));
        row.push(g.median("teacher_train"));
        row.push(g.median("student_train"));
        row.push(g.median("overfit_gap_teacher"));
        row.push(g.median("overfit_gap_student"));
        t.rows.push(row);
        t.row_records.push(g.keys());
    }
    t
}

fn pct_table(groups: &BTreeMap<GroupKey, Group>, name: &'static str, by_params: bool) -> Table {
    let mut t = Table::new(
        name,
        &["model", "params", "fraction", "seeds", "pct_increase_median", "pct_increase_min", "pct_increase_max"],
    );
    let mut rows = self_distill_rows(groups);
    rows.sort_by(|a, b| {
        let ka = (a.1.student_params(), &a.0 .2);
        let kb = (b.1.student_params(), &b.0 .2);
        let (fa, fb) = (fraction(a.0), fraction(b.0));
        if by_params {
            ka.cmp(&kb).then(fa.total_cmp(&fb))
        } else {
            fa.total_cmp(&fb).then(ka.cmp(&kb))
        }
    });
    for (k, g) in rows {
        let mut row = vec![
            TableCell::label(&k.2),
            TableCell::label(g.student_params().to_string()),
            TableCell::label(num(fraction(k))),
            TableCell::label(g.seeds()),
        ];
        row.extend(g.stats("pct_increase"));
        t.rows.push(row);
        t.row_records.push(g.keys());
    }
    t
}

fn compression_table(groups: &BTreeMap<GroupKey, Group>) -> Table {
    let mut t = Table::new(
        "compression",
        &[
            "teacher",
            "student",
            "teacher_params",
            "student_params",
            "fraction",
            "seeds",
            "teacher_val_median",
            "teacher_val_min",
            "teacher_val_max",
            "student_val_median",
            "student_val_min",
            "student_val_max",
            "baseline_val_median",
            "baseline_val_min",
            "baseline_val_max",
            "pct_increase_median",
            "pct_increase_min",
            "pct_increase_max",
        ],
    );
    let mut rows: Vec<_> = groups.iter().filter(|(k, _)| k.0 == CellKind::Distill && k.1 != k.2).collect();
    rows.sort_by(|a, b| {
        (b.1.teacher_params(), a.1.student_params())
            .cmp(&(a.1.teacher_params(), b.1.student_params()))
            .then(a.0 .1.cmp(&b.0 .1))
            .then(a.0 .2.cmp(&b.0 .2))
            .then(fraction(a.0).total_cmp(&fraction(b.0)))
    });
    for (k, g) in rows {
        let mut row = vec![
            TableCell::label(&k.1),
            TableCell::label(&k.2),
            TableCell::label(g.teacher_params().to_string()),
            TableCell::label(g.student_params().to_string()),
            TableCell::label(num(fraction(k))),
            TableCell::label(g.seeds()),
        ];
        row.extend(g.stats("teacher_val"));
        row.extend(g.stats("student_val"));
        let mut keys = g.keys();
        match groups.get(&(CellKind::Baseline, k.2.clone(), k.2.clone(), k.3)) {
            Some(b) => {
                row.extend(b.stats("student_val"));
                keys.extend(b.keys());
            }
            None => row.extend([TableCell::empty(), TableCell::empty(), TableCell::empty()]),
        }
        row.extend(g.stats("pct_increase"));
        t.rows.push(row);
        t.row_records.push(keys);
    }
    t
}

fn bar(row: &[TableCell], t: &Table, stem: &str) -> Option<Bar> {
    let m = &row[t.column(&format!("{stem}_median"))?];
    let lo = row[t.column(&format!("{stem}_min"))?].value?;
    let hi = row[t.column(&format!("{stem}_max"))?].value?;
    Some(Bar {
        value: m.value?,
        text: m.text.clone(),
        whisker: Some((lo, hi)),
    })
}

/// Builds a chart whose groups come from `group_of` and whose series are
/// (`series_of`, value stem) pairs, in first-seen order.
fn chart_from(
    t: &Table,
    title: &str,
    y_label: &str,
    decimals: usize,
    group_of: impl Fn(&[TableCell]) -> String,
    series_of: impl Fn(&[TableCell]) -> Vec<(String, &'static str)>,
) -> Chart {
    let mut groups: Vec<String> = Vec::new();
    let mut series: Vec<String> = Vec::new();
    let mut cells: Vec<(usize, usize, Option<Bar>)> = Vec::new();
    for row in &t.rows {
        let g = group_of(row);
        let gi = groups.iter().position(|x| *x == g).unwrap_or_else(|| {
            groups.push(g);
            groups.len() - 1
        });
        for (name, stem) in series_of(row) {
            let si = series.iter().position(|x| *x == name).unwrap_or_else(|| {
                series.push(name);
                series.len() - 1
            });
            cells.push((gi, si, bar(row, t, stem)));
        }
    }
    let mut values = vec![vec![None; series.len()]; groups.len()];
    for (g, s, b) in cells {
        values[g][s] = b;
    }
    Chart {
        title: title.to_string(),
        y_label: y_label.to_string(),
        groups,
        series,
        values,
        label_decimals: decimals,
    }
}

fn charts(tables: &[Table]) -> Vec<Chart> {
    let col = |t: &Table, row: &[TableCell], name: &str| row[t.column(name).expect("column")].text.clone();
    let acc = &tables[0];
    let by_split = &tables[1];
    let by_params = &tables[2];
    let comp = &tables[3];
    vec![
        chart_from(
            acc,
            "Validation accuracy before and after self-distillation",
            "val accuracy",
            3,
            |r| format!("f={}", col(acc, r, "fraction")),
            |r| {
                let m = col(acc, r, "model");
                vec![(format!("{m} teacher"), "teacher_val"), (format!("{m} self-distilled"), "student_val")]
            },
        ),
        chart_from(
            by_split,
            "Percent increase in val accuracy by label fraction",
            "% increase",
            2,
            |r| format!("f={}", col(by_split, r, "fraction")),
            |r| vec![(col(by_split, r, "model"), "pct_increase")],
        ),
        chart_from(
            by_params,
            "Percent increase in val accuracy by parameter count",
            "% increase",
            2,
            |r| format!("{} ({})", col(by_params, r, "model"), col(by_params, r, "params")),
            |r| vec![(format!("f={}", col(by_params, r, "fraction")), "pct_increase")],
        ),
        chart_from(
            comp,
            "Teacher, distilled student and undistilled baseline",
            "val accuracy",
            3,
            |r| format!("{} -> {} f={}", col(comp, r, "teacher"), col(comp, r, "student"), col(comp, r, "fraction")),
            |_| {
                vec![
                    ("teacher".to_string(), "teacher_val"),
                    ("distilled student".to_string(), "student_val"),
                    ("baseline student".to_string(), "baseline_val"),
                ]
            },
        ),
    ]
}

/// Builds the four tables from parsed records.
pub fn build_tables(records: &[RunRecord]) -> Vec<Table> {
    let groups = group(records);
    vec![
        accuracy_table(&groups),
        pct_table(&groups, "pct_increase_by_split", false),
        pct_table(&groups, "pct_increase_by_params", true),
        compression_table(&groups),
    ]
}

#[derive(Serialize)]
struct ManifestRecord {
    key: String,
    line: usize,
    status: Status,
    sha256: String,
}

#[derive(Serialize)]
struct ManifestCell {
    record: String,
    record_sha256: String,
    field: String,
}

#[derive(Serialize)]
struct ManifestRow {
    records: Vec<String>,
    cells: BTreeMap<String, ManifestCell>,
}

#[derive(Serialize)]
struct ManifestTable {
    name: String,
    csv: String,
    csv_sha256: String,
    svg: String,
    svg_sha256: String,
    rows: Vec<ManifestRow>,
}

#[derive(Serialize)]
struct Manifest {
    schema_version: u32,
    ledger_sha256: String,
    records: Vec<ManifestRecord>,
    tables: Vec<ManifestTable>,
}

fn sha(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Reads the ledger at `ledger_path` and writes tables, charts and the
/// manifest into `out_dir`. Output bytes depend only on the ledger bytes.
pub fn emit_report(ledger_path: &Path, out_dir: &Path) -> Result<ReportBundle> {
    let records = read_ledger(ledger_path)?;
    if records.is_empty() {
        return Err(Error::invalid(format!("ledger {} has no records", ledger_path.display())));
    }
    let raw = fs::read(ledger_path).at(ledger_path)?;
    let text = String::from_utf8_lossy(&raw);
    let lines: Vec<(usize, &str)> =
        text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()).map(|(i, l)| (i + 1, l)).collect();
    let mut hashes: BTreeMap<String, String> = BTreeMap::new();
    let mut manifest_records = Vec::new();
    for (r, (line, body)) in records.iter().zip(&lines) {
        let h = sha(body.as_bytes());
        if hashes.insert(r.key(), h.clone()).is_some() {
            return Err(Error::Format(format!("ledger lists cell {} twice", r.key())));
        }
        manifest_records.push(ManifestRecord {
            key: r.key(),
            line: *line,
            status: r.status,
            sha256: h,
        });
    }

    let tables = build_tables(&records);
    let charts = charts(&tables);
    fs::create_dir_all(out_dir).at(out_dir)?;
    let mut bundle = ReportBundle {
        tables: Vec::new(),
        charts: Vec::new(),
        table_paths: Vec::new(),
        plot_paths: Vec::new(),
        manifest_path: out_dir.join(MANIFEST_FILE),
    };
    let mut manifest_tables = Vec::new();
    for (table, chart) in tables.into_iter().zip(charts) {
        let csv_name = format!("{}.csv", table.name);
        let svg_name = format!("{}.svg", table.name);
        let csv_bytes = table.to_csv()?;
        let svg_text = svg::render(&chart);
        let csv_path = out_dir.join(&csv_name);
        let svg_path = out_dir.join(&svg_name);
        fs::write(&csv_path, &csv_bytes).at(&csv_path)?;
        fs::write(&svg_path, &svg_text).at(&svg_path)?;

        let rows = table
            .rows
            .iter()
            .zip(&table.row_records)
            .map(|(row, keys)| ManifestRow {
                records: keys.clone(),
                cells: table
                    .header
                    .iter()
                    .zip(row)
                    .filter_map(|(h, c)| {
                        let (key, f) = c.source.clone()?;
                        Some((
                            h.clone(),
                            ManifestCell {
                                record_sha256: hashes[&key].clone(),
                                record: key,
                                field: f,
                            },
                        ))
                    })
                    .collect(),
            })
            .collect();
        manifest_tables.push(ManifestTable {
            name: table.name.to_string(),
            csv_sha256: sha(&csv_bytes),
            svg_sha256: sha(svg_text.as_bytes()),
            csv: csv_name,
            svg: svg_name,
            rows,
        });
        bundle.tables.push(table);
        bundle.charts.push(chart);
        bundle.table_paths.push(csv_path);
        bundle.plot_paths.push(svg_path);
    }
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        ledger_sha256: sha(&raw),
        records: manifest_records,
        tables: manifest_tables,
    };
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    fs::write(&bundle.manifest_path, json).at(&bundle.manifest_path)?;
    Ok(bundle)
}

#[cfg(test)]
mod tests;
