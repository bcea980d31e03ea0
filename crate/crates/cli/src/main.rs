use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use kdistill::dataset::{self, partition_labels, DatasetSource, PreprocessSpec, SplitIndex, SplitManifest};
use kdistill::dataset::synthetic::SyntheticSpec;
use kdistill::experiment::{
    ledger_path, load_source, prepare_data, DataSource, ExperimentConfig, Runner, SignalMode, Status, Subset,
};
use kdistill::report::emit_report;
use kdistill::trainers::{
    distill_student, evaluate, generate_soft_labels, load_checkpoint, save_checkpoint, teacher_id, train_teacher,
    RunData, SoftLabelSet, TeacherSignal, TrainConfig,
};
use kdistill::zoo::{build_model, registered_names, ModelSpec, Registry};
use kdistill::Error;

/// Environment variable naming the default output directory.
const OUT_ENV: &str = "KDISTILL_OUT";

#[derive(Parser)]
#[command(name = "kdistill", version, about = "Teacher/student distillation experiments", arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load the dataset and write its summary (optionally export it in CIFAR layout).
    Ingest {
        #[command(flatten)]
        common: Common,
        /// Write the loaded images as CIFAR-10 binary batches here.
        #[arg(long)]
        export: Option<PathBuf>,
    },
    /// Write the train/val/test split, and a labeled partition if a fraction is given.
    Split {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        fraction: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a supervised teacher on a labeled fraction.
    TrainTeacher {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a teacher over the whole dataset and cache its probabilities.
    SoftLabels {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a student on a teacher's soft labels.
    Distill {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        soft_labels: Option<PathBuf>,
        /// Teacher checkpoint; checked against the soft labels, or queried live with `--signal live`.
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Accuracy of a checkpoint on one split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitName::Val)]
        split: SplitName,
    },
    /// Run every cell of the configured matrix.
    RunMatrix {
        #[command(flatten)]
        common: Common,
    },
    /// Build tables and charts from a ledger.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ledger: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitName {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum RegistryArg {
    Paper,
    Desk,
}

#[derive(Clone, Copy, ValueEnum)]
enum SignalArg {
    Cached,
    Live,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    arch: String,
    #[arg(long)]
    fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Flags that override fields of the experiment config.
#[derive(Args, Default)]
struct Common {
    /// JSON experiment config; flags given on the command line win.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long, value_enum)]
    registry: Option<RegistryArg>,
    #[arg(long, value_delimiter = ',')]
    teachers: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    students: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    fractions: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// CIFAR-10 binary directory (replaces the synthetic source).
    #[arg(long)]
    cifar_dir: Option<PathBuf>,
    /// Generate a synthetic source with this many train images.
    #[arg(long)]
    synthetic_train: Option<usize>,
    #[arg(long)]
    synthetic_test: Option<usize>,
    #[arg(long)]
    split_seed: Option<u64>,
    #[arg(long, requires = "subset_val")]
    subset_train: Option<usize>,
    #[arg(long, requires = "subset_train")]
    subset_val: Option<usize>,
    #[arg(long)]
    no_stratify: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Overrides the registry learning rate of every listed architecture.
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long, value_enum)]
    signal: Option<SignalArg>,
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    baselines: bool,
}

fn specs(names: &[String]) -> kdistill::Result<Vec<ModelSpec>> {
    names.iter().map(|n| ModelSpec::registered(n)).collect()
}

impl Common {
    fn resolve(&self) -> kdistill::Result<ExperimentConfig> {
        let default_out = std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("kdistill-out"));
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::load(p).map_err(|e| e.in_stage("config"))?,
            None => ExperimentConfig::desk_default(default_out),
        };
        if let Some(d) = &self.output_dir {
            c.output_dir = d.clone();
        }
        if let Some(r) = self.registry {
            c.registry = match r {
                RegistryArg::Paper => Registry::Paper,
                RegistryArg::Desk => Registry::Desk,
            };
            if self.teachers.is_none() || self.students.is_none() {
                let all: Vec<String> = registered_names(c.registry).into_iter().map(String::from).collect();
                c.teacher_specs = specs(&all)?;
                c.student_specs = c.teacher_specs.clone();
            }
        }
        if let Some(t) = &self.teachers {
            c.teacher_specs = specs(t)?;
        }
        if let Some(s) = &self.students {
            c.student_specs = specs(s)?;
        }
        if let Some(f) = &self.fractions {
            c.fractions = f.clone();
        }
        if let Some(s) = &self.seeds {
            c.seeds = s.clone();
        }
        if let Some(p) = &self.cifar_dir {
            c.data.source = DataSource::Cifar { path: p.clone() };
        }
        if self.synthetic_train.is_some() || self.synthetic_test.is_some() {
            let mut spec = match &c.data.source {
                DataSource::Synthetic(s) => s.clone(),
                DataSource::Cifar { .. } => SyntheticSpec::default(),
            };
            spec.train = self.synthetic_train.unwrap_or(spec.train);
            spec.test = self.synthetic_test.unwrap_or(spec.test);
            c.data.source = DataSource::Synthetic(spec);
        }
        if let Some(s) = self.split_seed {
            c.data.split_seed = s;
        }
        if let (Some(train), Some(val)) = (self.subset_train, self.subset_val) {
            c.data.subset = Some(Subset { train, val });
        }
        if self.no_stratify {
            c.data.stratified = false;
        }
        let t = &mut c.train_config;
        t.epochs = self.epochs.unwrap_or(t.epochs);
        t.batch_size = self.batch_size.unwrap_or(t.batch_size);
        t.momentum = self.momentum.unwrap_or(t.momentum);
        t.weight_decay = self.weight_decay.unwrap_or(t.weight_decay);
        t.temperature = self.temperature.unwrap_or(t.temperature);
        if let Some(lr) = self.learning_rate {
            t.learning_rate = lr;
            for s in c.teacher_specs.iter_mut().chain(c.student_specs.iter_mut()) {
                s.learning_rate = lr;
            }
        }
        if let Some(s) = self.signal {
            c.signal = match s {
                SignalArg::Cached => SignalMode::Cached,
                SignalArg::Live => SignalMode::Live,
            };
        }
        c.jobs = self.jobs.unwrap_or(c.jobs);
        c.include_baselines |= self.baselines;
        c.validate().map_err(|e| e.in_stage("config"))?;
        Ok(c)
    }
}

/// Loaded dataset with its split, shared by the single-stage commands.
struct Workspace {
    config: ExperimentConfig,
    source: DatasetSource,
    split: SplitIndex,
    preprocess: PreprocessSpec,
}

impl Workspace {
    fn open(common: &Common) -> kdistill::Result<Self> {
        let config = common.resolve()?;
        let source = load_source(&config.data).map_err(|e| e.in_stage("ingest"))?;
        let (split, preprocess) = prepare_data(&config.data, &source)?;
        Ok(Self {
            config,
            source,
            split,
            preprocess,
        })
    }

    fn data(&self) -> RunData<'_> {
        RunData {
            source: &self.source,
            split: &self.split,
            preprocess: &self.preprocess,
        }
    }

    fn spec(&self, name: &str) -> kdistill::Result<ModelSpec> {
        let mut spec = self
            .config
            .teacher_specs
            .iter()
            .chain(&self.config.student_specs)
            .find(|s| s.name == name)
            .cloned()
            .map_or_else(|| ModelSpec::registered(name), Ok)?;
        if spec.registry() != Some(self.config.registry) {
            return Err(Error::invalid(format!("{name} is not in the {:?} registry", self.config.registry)));
        }
        if let Some(lr) = self.config.teacher_specs.iter().find(|s| s.name == name).map(|s| s.learning_rate) {
            spec.learning_rate = lr;
        }
        Ok(spec)
    }

    fn train_config(&self, spec: &ModelSpec, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: spec.learning_rate,
            seed,
            ..self.config.train_config.clone()
        }
    }

    fn dir(&self, parts: &[&str]) -> PathBuf {
        parts.iter().fold(self.config.output_dir.clone(), |p, s| p.join(s))
    }
}

fn print(value: serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(&value).expect("json"));
}

fn ensure_parent(path: &Path) -> kdistill::Result<()> {
    if let Some(d) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    Ok(())
}

fn run(cmd: Command) -> kdistill::Result<bool> {
    match cmd {
        Command::Ingest { common, export } => {
            let ws = Workspace::open(&common)?;
            let s = &ws.source;
            let mut counts = [0usize; 10];
            for &l in s.labels() {
                counts[l as usize] += 1;
            }
            let summary = json!({
                "checksum": s.checksum,
                "train": s.train_count(),
                "test": s.test_count(),
                "class_counts": counts,
            });
            let path = ws.dir(&["dataset.json"]);
            ensure_parent(&path)?;
            std::fs::write(&path, serde_json::to_vec_pretty(&summary)?).map_err(|e| Error::io(&path, e))?;
            if let Some(dir) = export {
                dataset::write_cifar_dir(s, &dir).map_err(|e| e.in_stage("ingest"))?;
            }
            print(summary);
        }
        Command::Split { common, fraction, seed } => {
            let ws = Workspace::open(&common)?;
            let part = fraction
                .map(|f| partition_labels(&ws.source, &ws.split, f, seed, ws.config.data.stratified))
                .transpose()
                .map_err(|e| e.in_stage("partition"))?;
            let path = ws.dir(&["split.json"]);
            ensure_parent(&path)?;
            SplitManifest::new(&ws.split, part.as_ref()).save(&path)?;
            print(json!({
                "train": ws.split.train_idx.len(),
                "val": ws.split.val_idx.len(),
                "test": ws.split.test_idx.len(),
                "labeled": part.as_ref().map(|p| p.labeled_idx.len()),
                "manifest": path,
            }));
        }
        Command::TrainTeacher { common, run, out } => {
            let ws = Workspace::open(&common)?;
            let spec = ws.spec(&run.arch)?.with_seed(run.seed);
            let part = partition_labels(&ws.source, &ws.split, run.fraction, run.seed, ws.config.data.stratified)
                .map_err(|e| e.in_stage("partition"))?;
            let config = ws.train_config(&spec, run.seed);
            let model = build_model(&spec).map_err(|e| e.in_stage("build-model"))?;
            let (teacher, report) =
                train_teacher(model, ws.data(), &part.labeled_idx, &config).map_err(|e| e.in_stage("train-teacher"))?;
            let key = format!("{}__f{}__s{}", run.arch, run.fraction, run.seed);
            let path = out.unwrap_or_else(|| ws.dir(&["teachers", &key, "teacher.safetensors"]));
            ensure_parent(&path)?;
            save_checkpoint(&path, &teacher, &report, &config)?;
            SplitManifest::new(&ws.split, Some(&part)).save(path.with_file_name("partition.json"))?;
            print(json!({ "checkpoint": path, "teacher_id": teacher_id(&teacher)?, "selected": report.selected() }));
        }
        Command::SoftLabels { common, teacher, out } => {
            let ws = Workspace::open(&common)?;
            let (model, _) = load_checkpoint(&teacher).map_err(|e| e.in_stage("soft-labels"))?;
            let soft = generate_soft_labels(
                &model,
                ws.source.images_only(),
                &ws.split,
                &ws.preprocess.without_augmentation(),
                ws.config.train_config.temperature,
            )
            .map_err(|e| e.in_stage("soft-labels"))?;
            let path = out.unwrap_or_else(|| teacher.with_file_name("soft_labels.bin"));
            ensure_parent(&path)?;
            soft.save(&path)?;
            print(json!({ "soft_labels": path, "rows": soft.num_rows(), "provenance": soft.provenance }));
        }
        Command::Distill {
            common,
            run,
            soft_labels,
            teacher,
            out,
        } => {
            let ws = Workspace::open(&common)?;
            let spec = ws.spec(&run.arch)?.with_seed(run.seed);
            let config = ws.train_config(&spec, run.seed);
            let student = build_model(&spec).map_err(|e| e.in_stage("build-model"))?;
            let teacher_model = teacher
                .as_ref()
                .map(|p| load_checkpoint(p).map(|(m, _)| m))
                .transpose()
                .map_err(|e| e.in_stage("distill"))?;
            let (student, report) = match (ws.config.signal, &teacher_model) {
                (SignalMode::Live, Some(t)) => distill_student(student, TeacherSignal::Live(t), ws.data(), &config),
                (SignalMode::Live, None) => Err(Error::invalid("live distillation needs --teacher")),
                (SignalMode::Cached, _) => {
                    let path = soft_labels.ok_or_else(|| Error::invalid("cached distillation needs --soft-labels"))?;
                    if !path.exists() {
                        return Err(Error::Provenance(format!("soft-label file {} does not exist", path.display()))
                            .in_stage("distill"));
                    }
                    let soft = SoftLabelSet::load(&path).map_err(|e| e.in_stage("distill"))?;
                    let id = teacher_model.as_ref().map(teacher_id).transpose()?;
                    soft.check(&ws.source.checksum, &ws.split, config.temperature, id.as_deref())
                        .map_err(|e| e.in_stage("distill"))?;
                    distill_student(student, TeacherSignal::Cached(&soft), ws.data(), &config)
                }
            }
            .map_err(|e| e.in_stage("distill"))?;
            let key = format!("{}__f{}__s{}", run.arch, run.fraction, run.seed);
            let path = out.unwrap_or_else(|| ws.dir(&["students", &key, "student.safetensors"]));
            ensure_parent(&path)?;
            save_checkpoint(&path, &student, &report, &config)?;
            print(json!({ "checkpoint": path, "selected": report.selected() }));
        }
        Command::Eval {
            common,
            checkpoint,
            split,
        } => {
            let ws = Workspace::open(&common)?;
            let (model, _) = load_checkpoint(&checkpoint).map_err(|e| e.in_stage("eval"))?;
            let (name, ids) = match split {
                SplitName::Train => ("train", &ws.split.train_idx),
                SplitName::Val => ("val", &ws.split.val_idx),
                SplitName::Test => ("test", &ws.split.test_idx),
            };
            let acc = evaluate(&model, &ws.source, ids, &ws.preprocess).map_err(|e| e.in_stage("eval"))?;
            print(json!({ "split": name, "examples": ids.len(), "accuracy": acc }));
        }
        Command::RunMatrix { common } => {
            let config = common.resolve()?;
            let summary = Runner::new(config)?.run_matrix();
            print(json!({
                "cells": summary.records.len(),
                "failed": summary.failed,
                "ledger": summary.ledger_path,
                "teachers_trained": summary.teachers_trained,
                "students_trained": summary.students_trained,
                "failures": summary.records.iter().filter(|r| r.status == Status::Failed)
                    .map(|r| json!({ "cell": r.key(), "error": r.error })).collect::<Vec<_>>(),
            }));
            return Ok(summary.failed == 0);
        }
        Command::Report { common, ledger, out } => {
            let (ledger, out) = match (ledger, out) {
                (Some(l), Some(o)) => (l, o),
                (l, o) => {
                    let c = common.resolve()?;
                    (l.unwrap_or_else(|| ledger_path(&c.output_dir)), o.unwrap_or_else(|| c.output_dir.join("report")))
                }
            };
            let bundle = emit_report(&ledger, &out).map_err(|e| e.in_stage("report"))?;
            print(json!({
                "tables": bundle.table_paths,
                "plots": bundle.plot_paths,
                "manifest": bundle.manifest_path,
            }));
        }
    }
    Ok(true)
}

fn stage_of(e: &Error) -> Option<&'static str> {
    match e {
        Error::Stage { stage, .. } => Some(stage),
        _ => None,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("{}", json!({ "error": "one or more cells failed", "stage": "run-matrix" }));
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("{}", json!({ "error": e.to_string(), "stage": stage_of(&e) }));
            ExitCode::from(1)
        }
    }
}
