//! Sweeps of (teacher, student, label fraction, seed) cells.
//!
//! One teacher is trained per (architecture, fraction, seed) and shared by
//! all students of that key, together with its soft-label file. Cells are
//! independent jobs; each writes into its own directory and the ledger is
//! the only shared state.

mod config;
mod ledger;

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use config::{
    overfit_gap, percent_increase, DataConfig, DataSource, ExperimentConfig, SignalMode, Subset, CONFIG_SCHEMA,
};
pub use ledger::{read_ledger, Artifacts, CellId, CellKind, CellResult, Ledger, RunRecord, Status};

use crate::dataset::{self, make_splits, partition_labels, DatasetSource, PreprocessSpec, SplitIndex, SplitManifest};
use crate::error::{Error, IoContext, Result};
use crate::par;
use crate::trainers::{
    distill_student, generate_soft_labels, load_checkpoint, save_checkpoint, teacher_id, train_teacher, RunData,
    SoftLabelSet, TeacherSignal, TrainConfig, TrainReport,
};
use crate::zoo::{build_model, ModelSpec};

pub const SCHEMA_VERSION: u32 = 1;
pub const LEDGER_FILE: &str = "ledger.jsonl";
const STUDENT_SEED_OFFSET: u64 = 1_000_003;
const STALE_MARKER: &str = "STALE";

fn hash_json<T: Serialize>(value: &T) -> Result<String> {
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(value)?)))
}

pub fn load_source(data: &DataConfig) -> Result<DatasetSource> {
    match &data.source {
        DataSource::Cifar { path } => dataset::ingest(path),
        DataSource::Synthetic(spec) => dataset::synthetic::generate(spec),
    }
}

/// Split (and subset) `source` as `data` asks, with normalisation taken
/// from the resulting train split.
pub fn prepare_data(data: &DataConfig, source: &DatasetSource) -> Result<(SplitIndex, PreprocessSpec)> {
    let mut split = make_splits(source, data.split_seed).map_err(|e| e.in_stage("split"))?;
    if let Some(s) = &data.subset {
        split = split.subset(s.train, s.val).map_err(|e| e.in_stage("split"))?;
    }
    let preprocess = PreprocessSpec::from_train_stats(source, &split.train_idx)?;
    Ok((split, preprocess))
}

/// Every cell of the matrix in execution order: per seed and fraction, each
/// (teacher, student) pair with `params(student) <= params(teacher)`, then
/// the baselines when enabled.
pub fn plan_cells(config: &ExperimentConfig, params: &HashMap<String, usize>) -> Vec<CellId> {
    let mut cells = Vec::new();
    for &seed in &config.seeds {
        for &fraction in &config.fractions {
            for t in &config.teacher_specs {
                for s in &config.student_specs {
                    if params[&s.name] <= params[&t.name] {
                        cells.push(CellId {
                            kind: CellKind::Distill,
                            teacher: t.name.clone(),
                            student: s.name.clone(),
                            fraction,
                            seed,
                        });
                    }
                }
            }
            if config.include_baselines {
                for s in &config.student_specs {
                    cells.push(CellId {
                        kind: CellKind::Baseline,
                        teacher: s.name.clone(),
                        student: s.name.clone(),
                        fraction,
                        seed,
                    });
                }
            }
        }
    }
    cells
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TeacherDone {
    hash: String,
    teacher_id: String,
    report: TrainReport,
}

#[derive(Debug, Clone)]
struct TeacherArtifacts {
    checkpoint: PathBuf,
    soft_labels: PathBuf,
    manifest: PathBuf,
    teacher_id: String,
    report: TrainReport,
}

#[derive(Serialize)]
struct TeacherInputs<'a> {
    dataset: &'a str,
    split_seed: u64,
    subset: &'a Option<Subset>,
    stratified: bool,
    spec: &'a ModelSpec,
    fraction: f64,
    seed: u64,
    train: &'a TrainConfig,
    preprocess: &'a PreprocessSpec,
}

#[derive(Serialize)]
struct CellInputs<'a> {
    cell: &'a CellId,
    teacher_hash: &'a str,
    student: &'a ModelSpec,
    signal: SignalMode,
}

#[derive(Debug, Clone)]
pub struct MatrixSummary {
    pub records: Vec<RunRecord>,
    pub failed: usize,
    pub ledger_path: PathBuf,
    pub teachers_trained: usize,
    pub students_trained: usize,
}

/// Loaded dataset, split and parameter counts for one config.
pub struct Runner {
    pub config: ExperimentConfig,
    pub source: DatasetSource,
    pub split: SplitIndex,
    pub preprocess: PreprocessSpec,
    params: HashMap<String, usize>,
    ledger: Ledger,
    teachers_trained: AtomicUsize,
    students_trained: AtomicUsize,
}

impl Runner {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let source = load_source(&config.data).map_err(|e| e.in_stage("ingest"))?;
        Self::with_source(config, source)
    }

    /// Uses an already loaded dataset instead of reading `config.data`.
    pub fn with_source(config: ExperimentConfig, source: DatasetSource) -> Result<Self> {
        config.validate()?;
        let (split, preprocess) = prepare_data(&config.data, &source)?;
        let mut params = HashMap::new();
        for spec in config.teacher_specs.iter().chain(&config.student_specs) {
            if !params.contains_key(&spec.name) {
                params.insert(spec.name.clone(), build_model(spec)?.parameter_count());
            }
        }
        fs::create_dir_all(&config.output_dir).at(&config.output_dir)?;
        SplitManifest::new(&split, None).save(config.output_dir.join("split.json"))?;
        let ledger = Ledger::open(config.output_dir.join(LEDGER_FILE))?;
        Ok(Self {
            config,
            source,
            split,
            preprocess,
            params,
            ledger,
            teachers_trained: AtomicUsize::new(0),
            students_trained: AtomicUsize::new(0),
        })
    }

    pub fn cells(&self) -> Vec<CellId> {
        plan_cells(&self.config, &self.params)
    }

    pub fn ledger(&self) -> &Ledger {
        &self.ledger
    }

    pub fn parameter_count(&self, name: &str) -> Option<usize> {
        self.params.get(name).copied()
    }

    fn data(&self) -> RunData<'_> {
        RunData {
            source: &self.source,
            split: &self.split,
            preprocess: &self.preprocess,
        }
    }

    fn spec(&self, name: &str, teacher_side: bool) -> Result<&ModelSpec> {
        let list = if teacher_side {
            &self.config.teacher_specs
        } else {
            &self.config.student_specs
        };
        list.iter()
            .chain(&self.config.teacher_specs)
            .chain(&self.config.student_specs)
            .find(|s| s.name == name)
            .ok_or_else(|| Error::UnknownArchitecture(name.to_string()))
    }

    fn teacher_config(&self, spec: &ModelSpec, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: spec.learning_rate,
            seed,
            ..self.config.train_config.clone()
        }
    }

    fn teacher_dir(&self, arch: &str, fraction: f64, seed: u64) -> PathBuf {
        self.config.output_dir.join("teachers").join(format!("{arch}__f{fraction}__s{seed}"))
    }

    fn teacher_hash(&self, spec: &ModelSpec, fraction: f64, seed: u64) -> Result<String> {
        hash_json(&TeacherInputs {
            dataset: &self.source.checksum,
            split_seed: self.split.seed,
            subset: &self.config.data.subset,
            stratified: self.config.data.stratified,
            spec: &spec.clone().with_seed(seed),
            fraction,
            seed,
            train: &self.teacher_config(spec, seed),
            preprocess: &self.preprocess,
        })
    }

    /// Trains (or reloads) the teacher for `(arch, fraction, seed)` and its
    /// soft labels.
    fn ensure_teacher(&self, arch: &str, fraction: f64, seed: u64) -> Result<TeacherArtifacts> {
        let spec = self.spec(arch, true)?;
        let hash = self.teacher_hash(spec, fraction, seed)?;
        let dir = self.teacher_dir(arch, fraction, seed);
        let art = |teacher_id: String, report: TrainReport| TeacherArtifacts {
            checkpoint: dir.join("teacher.safetensors"),
            soft_labels: dir.join("soft_labels.bin"),
            manifest: dir.join("partition.json"),
            teacher_id,
            report,
        };
        let done_path = dir.join("done.json");
        if let Ok(bytes) = fs::read(&done_path) {
            if let Ok(done) = serde_json::from_slice::<TeacherDone>(&bytes) {
                let a = art(done.teacher_id, done.report);
                if done.hash == hash && a.checkpoint.exists() && a.soft_labels.exists() {
                    return Ok(a);
                }
            }
        }
        fs::create_dir_all(&dir).at(&dir)?;
        let _ = fs::remove_file(&done_path);
        let part = partition_labels(&self.source, &self.split, fraction, seed, self.config.data.stratified)
            .map_err(|e| e.in_stage("partition"))?;
        let train_config = self.teacher_config(spec, seed);
        let model = build_model(&spec.clone().with_seed(seed)).map_err(|e| e.in_stage("build-model"))?;
        log::info!("training teacher {arch} at fraction {fraction}, seed {seed}");
        let (teacher, report) = train_teacher(model, self.data(), &part.labeled_idx, &train_config)
            .map_err(|e| e.in_stage("train-teacher"))?;
        self.teachers_trained.fetch_add(1, Ordering::Relaxed);
        let id = teacher_id(&teacher)?;
        let a = art(id.clone(), report.clone());
        SplitManifest::new(&self.split, Some(&part)).save(&a.manifest)?;
        save_checkpoint(&a.checkpoint, &teacher, &report, &train_config)?;
        let soft = generate_soft_labels(
            &teacher,
            self.source.images_only(),
            &self.split,
            &self.preprocess.without_augmentation(),
            train_config.temperature,
        )
        .map_err(|e| e.in_stage("soft-labels"))?;
        soft.save(&a.soft_labels)?;
        let done = TeacherDone {
            hash,
            teacher_id: id,
            report,
        };
        fs::write(&done_path, serde_json::to_vec_pretty(&done)?).at(&done_path)?;
        Ok(a)
    }

    fn cell_hash(&self, cell: &CellId, teacher_hash: &str) -> Result<String> {
        let student = self.spec(&cell.student, false)?;
        hash_json(&CellInputs {
            cell,
            teacher_hash,
            student: &student.clone().with_seed(cell.seed.wrapping_add(STUDENT_SEED_OFFSET)),
            signal: self.config.signal,
        })
    }

    fn cell_config_hash(&self, cell: &CellId) -> Result<String> {
        let teacher = self.spec(&cell.teacher, cell.kind == CellKind::Distill)?;
        let th = self.teacher_hash(teacher, cell.fraction, cell.seed)?;
        self.cell_hash(cell, &th)
    }

    fn execute(&self, cell: &CellId, config_hash: &str) -> Result<(CellResult, Artifacts)> {
        let t_params = self.params_of(&cell.teacher)?;
        let s_params = self.params_of(&cell.student)?;
        if s_params > t_params {
            return Err(Error::invalid(format!(
                "student {} ({s_params} parameters) is larger than teacher {} ({t_params})",
                cell.student, cell.teacher
            )));
        }
        let teacher = self.ensure_teacher(&cell.teacher, cell.fraction, cell.seed)?;
        let tm = teacher.report.selected().clone();
        let mut artifacts = Artifacts {
            split_manifest: Some(teacher.manifest.clone()),
            teacher_checkpoint: Some(teacher.checkpoint.clone()),
            soft_labels: None,
            student_checkpoint: None,
        };
        let (student_history, sm) = match cell.kind {
            CellKind::Baseline => (teacher.report.history.clone(), tm.clone()),
            CellKind::Distill => {
                let dir = self.config.output_dir.join("cells").join(cell.key());
                fs::create_dir_all(&dir).at(&dir)?;
                let stale = dir.join(STALE_MARKER);
                fs::write(&stale, config_hash).at(&stale)?;
                let spec = self.spec(&cell.student, false)?;
                let student = build_model(&spec.clone().with_seed(cell.seed.wrapping_add(STUDENT_SEED_OFFSET)))?;
                let teacher_spec = self.spec(&cell.teacher, true)?;
                let config = self.teacher_config(teacher_spec, cell.seed);
                log::info!("distilling {}", cell.key());
                let (student, report) = match self.config.signal {
                    SignalMode::Cached => {
                        let soft = SoftLabelSet::load(&teacher.soft_labels).map_err(|e| e.in_stage("distill"))?;
                        soft.check(&self.source.checksum, &self.split, config.temperature, Some(&teacher.teacher_id))
                            .map_err(|e| e.in_stage("distill"))?;
                        artifacts.soft_labels = Some(teacher.soft_labels.clone());
                        distill_student(student, TeacherSignal::Cached(&soft), self.data(), &config)
                    }
                    SignalMode::Live => {
                        let (t, _) = load_checkpoint(&teacher.checkpoint).map_err(|e| e.in_stage("distill"))?;
                        distill_student(student, TeacherSignal::Live(&t), self.data(), &config)
                    }
                }
                .map_err(|e| e.in_stage("distill"))?;
                self.students_trained.fetch_add(1, Ordering::Relaxed);
                let path = dir.join("student.safetensors");
                save_checkpoint(&path, &student, &report, &config)?;
                fs::remove_file(&stale).at(&stale)?;
                artifacts.student_checkpoint = Some(path);
                let sm = report.selected().clone();
                (report.history, sm)
            }
        };
        let result = CellResult {
            teacher_history: teacher.report.history.clone(),
            student_history,
            teacher_val: tm.val_accuracy,
            student_val: sm.val_accuracy,
            teacher_train: tm.train_accuracy,
            student_train: sm.train_accuracy,
            overfit_gap_teacher: overfit_gap(tm.train_accuracy, tm.val_accuracy)?,
            overfit_gap_student: overfit_gap(sm.train_accuracy, sm.val_accuracy)?,
            pct_increase: percent_increase(sm.val_accuracy, tm.val_accuracy)?,
            teacher_params: t_params,
            student_params: s_params,
            teacher_id: teacher.teacher_id,
        };
        Ok((result, artifacts))
    }

    fn params_of(&self, name: &str) -> Result<usize> {
        self.params.get(name).copied().ok_or_else(|| Error::UnknownArchitecture(name.to_string()))
    }

    fn reusable(&self, cell: &CellId, config_hash: &str) -> Option<RunRecord> {
        let r = self.ledger.get(&cell.key())?;
        let files_exist = [&r.artifacts.teacher_checkpoint, &r.artifacts.student_checkpoint]
            .iter()
            .all(|p| p.as_ref().is_none_or(|p| p.exists()));
        (r.status == Status::Ok && r.config_hash == config_hash && files_exist).then_some(r)
    }

    /// Runs one cell (training its teacher if needed) and records it in the
    /// ledger. A cell whose inputs are unchanged since its last successful
    /// run is reloaded without training.
    pub fn run_cell(&self, cell: &CellId) -> Result<RunRecord> {
        let config_hash = self.cell_config_hash(cell)?;
        if let Some(r) = self.reusable(cell, &config_hash) {
            return Ok(r);
        }
        let (result, artifacts) = self.execute(cell, &config_hash)?;
        let record = RunRecord {
            schema_version: SCHEMA_VERSION,
            cell_id: cell.clone(),
            status: Status::Ok,
            error: None,
            config_hash,
            artifacts,
            result: Some(result),
        };
        self.ledger.upsert(record.clone())?;
        Ok(record)
    }

    /// Like [`Runner::run_cell`] but turns failures into `failed` records.
    fn run_cell_soft(&self, cell: &CellId) -> RunRecord {
        match self.run_cell(cell) {
            Ok(r) => r,
            Err(e) => {
                log::warn!("cell {} failed: {e}", cell.key());
                let record = RunRecord {
                    schema_version: SCHEMA_VERSION,
                    cell_id: cell.clone(),
                    status: Status::Failed,
                    error: Some(e.to_string()),
                    config_hash: self.cell_config_hash(cell).unwrap_or_default(),
                    artifacts: Artifacts::default(),
                    result: None,
                };
                if let Err(e) = self.ledger.upsert(record.clone()) {
                    log::error!("could not record failure of {}: {e}", cell.key());
                }
                record
            }
        }
    }

    /// Runs every planned cell, at most `config.jobs` at a time. Teachers
    /// are trained first so concurrent students never race on one.
    pub fn run_matrix(&self) -> MatrixSummary {
        let cells = self.cells();
        let mut keys: BTreeMap<String, (String, f64, u64)> = BTreeMap::new();
        for c in &cells {
            let arch = c.teacher.clone();
            keys.entry(format!("{arch}__f{}__s{}", c.fraction, c.seed)).or_insert((arch, c.fraction, c.seed));
        }
        let keys: Vec<_> = keys.into_values().collect();
        let jobs = self.config.jobs;
        let teacher_errors: Vec<Option<String>> = par::run_jobs(keys.len(), jobs, |i| {
            let (arch, f, s) = &keys[i];
            self.ensure_teacher(arch, *f, *s).err().map(|e| {
                log::warn!("teacher {arch} at fraction {f}, seed {s} failed: {e}");
                e.to_string()
            })
        });
        if teacher_errors.iter().any(Option::is_some) {
            log::warn!("{} teacher runs failed", teacher_errors.iter().flatten().count());
        }
        let records = par::run_jobs(cells.len(), jobs, |i| self.run_cell_soft(&cells[i]));
        let failed = records.iter().filter(|r| r.status == Status::Failed).count();
        MatrixSummary {
            records,
            failed,
            ledger_path: self.ledger.path().to_path_buf(),
            teachers_trained: self.teachers_trained.load(Ordering::Relaxed),
            students_trained: self.students_trained.load(Ordering::Relaxed),
        }
    }
}

/// Convenience wrapper: load the config's dataset and run the matrix.
pub fn run_matrix(config: ExperimentConfig) -> Result<MatrixSummary> {
    Ok(Runner::new(config)?.run_matrix())
}

/// Convenience wrapper for a single cell.
pub fn run_cell(config: ExperimentConfig, cell: &CellId) -> Result<RunRecord> {
    Runner::new(config)?.run_cell(cell)
}

/// Picks the seed whose record has the highest `pct_increase` (earliest on
/// ties) among `ok` records.
pub fn best_seed(records: &[RunRecord]) -> Option<&RunRecord> {
    let mut best: Option<(&RunRecord, f64)> = None;
    for r in records {
        if let (Status::Ok, Some(res)) = (r.status, &r.result) {
            if best.is_none_or(|(_, p)| res.pct_increase > p) {
                best = Some((r, res.pct_increase));
            }
        }
    }
    best.map(|(r, _)| r)
}

/// Path of the ledger inside an output directory.
pub fn ledger_path(output_dir: &Path) -> PathBuf {
    output_dir.join(LEDGER_FILE)
}

#[cfg(test)]
mod tests;
