//! Experiment configuration, run directories and metrics files.
//!
//! A run directory holds `config.json` (the fully defaulted config),
//! `rounds.jsonl`, `evals.jsonl`, `timings.jsonl` and `summary.json`.
//! Everything except `timings.jsonl` is a pure function of the config.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    load_cifar10_subset, load_features, load_mnist, make_synthetic, split_validation, Dataset, PartitionMode, Split,
};
use crate::error::{Error, Result};
use crate::fed::{
    AggregationMode, EvalRecord, FedConfig, FixedSchedule, RoundRecord, RunSink, Simulation, RECORD_SCHEMA_VERSION,
};
use crate::hyper::{GridConfig, GridProfile, TunerConfig, LEARNING_RATE, SGD_ITERATIONS};
use crate::losses::LossConfig;
use crate::model_zoo::{build_arch, ArchId, NUM_CLASSES};
use crate::rng;

pub const DATA_DIR_ENV: &str = "FEDRM_DATA_DIR";
pub const OUTPUT_ROOT_ENV: &str = "FEDRM_OUTPUT_ROOT";

pub const CONFIG_FILE: &str = "config.json";
pub const ROUNDS_FILE: &str = "rounds.jsonl";
pub const EVALS_FILE: &str = "evals.jsonl";
pub const TIMINGS_FILE: &str = "timings.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const TRAJECTORY_FILE: &str = "trajectory.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Mnist,
    Cifar10,
    Kws,
    Synthetic,
}

impl Task {
    pub fn arch(self) -> ArchId {
        match self {
            Task::Mnist | Task::Synthetic => ArchId::MnistMlp,
            Task::Cifar10 => ArchId::CifarCnn,
            Task::Kws => ArchId::KwsCnn,
        }
    }

    fn dir_name(self) -> &'static str {
        match self {
            Task::Mnist => "mnist",
            Task::Cifar10 => "cifar10",
            Task::Kws => "kws",
            Task::Synthetic => "synthetic",
        }
    }
}

/// Gaussian-blob task shaped like flattened MNIST.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub spread: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            train_per_class: 300,
            test_per_class: 50,
            spread: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    /// Required; there is no implicit entropy anywhere in a run.
    pub seed: u64,
    #[serde(default)]
    pub name: Option<String>,
    /// Directory holding the task's files. Defaults to `<data root>/<task>`.
    #[serde(default)]
    pub data_dir: Option<PathBuf>,
    /// Keep only the first samples of the training / test files.
    #[serde(default)]
    pub train_limit: Option<usize>,
    #[serde(default)]
    pub test_limit: Option<usize>,
    #[serde(default)]
    pub synthetic: SyntheticConfig,
    #[serde(default = "default_partition")]
    pub partition: PartitionMode,
    #[serde(default)]
    pub use_rm: bool,
    #[serde(default)]
    pub use_ah: bool,
    #[serde(default)]
    pub use_wd: bool,
    #[serde(default)]
    pub aggregation: AggregationMode,
    #[serde(default = "default_clients")]
    pub clients: usize,
    #[serde(default = "default_fraction")]
    pub client_fraction: f64,
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default = "default_validation")]
    pub validation_size: usize,
    #[serde(default)]
    pub parallel: bool,
    #[serde(default = "default_true")]
    pub match_input: bool,
    #[serde(default)]
    pub schedule: FixedSchedule,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub tuner: TunerConfig,
    #[serde(default)]
    pub loss: LossConfig,
    /// Independent runs with seeds `seed, seed + 1, ...`.
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    /// Relative paths resolve under the output root.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn default_partition() -> PartitionMode {
    PartitionMode::Iid
}
fn default_clients() -> usize {
    10
}
fn default_fraction() -> f64 {
    1.0
}
fn default_rounds() -> usize {
    200
}
fn default_batch() -> usize {
    64
}
fn default_eval_every() -> usize {
    10
}
fn default_validation() -> usize {
    1000
}
fn default_true() -> bool {
    true
}
fn default_repeats() -> usize {
    1
}

impl ExperimentConfig {
    /// A config with every default applied.
    pub fn new(task: Task, seed: u64) -> Self {
        serde_json::from_value(serde_json::json!({ "task": task, "seed": seed })).expect("defaults deserialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Json {
            context: "experiment config".into(),
            source: e,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn fed_config(&self) -> FedConfig {
        let mut grid = self.grid.clone();
        if self.task == Task::Kws {
            grid.profile = GridProfile::Kws;
        }
        FedConfig {
            clients: self.clients,
            client_fraction: self.client_fraction,
            rounds: self.rounds,
            batch_size: self.batch_size,
            aggregation: self.aggregation,
            eval_every: self.eval_every,
            parallel: self.parallel,
            match_input: self.match_input,
            tuning: self.use_ah,
            schedule: self.schedule.clone(),
            grid,
            tuner: self.tuner.clone(),
            loss: LossConfig {
                use_matching: self.use_rm,
                use_wd: self.use_wd,
                ..self.loss.clone()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.fed_config().validate()?;
        if self.partition == PartitionMode::NonIid && self.clients != NUM_CLASSES {
            return Err(Error::config(
                "clients (K)",
                format!("non_iid partitioning needs {NUM_CLASSES} clients, got {}", self.clients),
            ));
        }
        if self.validation_size == 0 {
            return Err(Error::config("validation_size", "must be >= 1"));
        }
        if self.repeats == 0 {
            return Err(Error::config("repeats", "must be >= 1"));
        }
        if self.train_limit == Some(0) || self.test_limit == Some(0) {
            return Err(Error::config("train_limit/test_limit", "must be >= 1 when set"));
        }
        let s = &self.synthetic;
        if s.train_per_class == 0 || s.test_per_class == 0 || !(s.spread > 0.0) {
            return Err(Error::config("synthetic", "sample counts and spread must be positive"));
        }
        Ok(())
    }

    /// Hash of everything that affects results except the seed, so repeats
    /// of one setting share it. Names and paths are excluded too.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(m) = v.as_object_mut() {
            for k in ["seed", "name", "output_dir", "repeats", "data_dir", "parallel"] {
                m.remove(k);
            }
        }
        // serde_json maps are ordered by key, so this text is canonical
        let canonical = serde_json::to_string(&v).expect("value serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn label(&self) -> String {
        self.name.clone().unwrap_or_else(|| {
            let mut s = format!("{}-{}", self.task.dir_name(), partition_name(self.partition));
            for (on, tag) in [(self.use_rm, "rm"), (self.use_ah, "ah"), (self.use_wd, "wd")] {
                if on {
                    s.push('-');
                    s.push_str(tag);
                }
            }
            s
        })
    }

    pub fn resolved_output_dir(&self) -> PathBuf {
        let dir = self
            .output_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from("runs").join(self.label()));
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if dir.is_relative() => PathBuf::from(root).join(dir),
            _ => dir,
        }
    }

    pub fn resolved_data_dir(&self) -> PathBuf {
        self.data_dir
            .clone()
            .unwrap_or_else(|| data_root().join(self.task.dir_name()))
    }
}

fn partition_name(p: PartitionMode) -> &'static str {
    match p {
        PartitionMode::Iid => "iid",
        PartitionMode::NonIid => "noniid",
    }
}

/// `$FEDRM_DATA_DIR`, or `data` under the current directory.
pub fn data_root() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data"))
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ExperimentConfig::from_json(&text)
}

fn first(data: Dataset, limit: Option<usize>, split: Split) -> Result<Dataset> {
    match limit {
        Some(n) if n < data.len() => data.subset(&(0..n).collect::<Vec<_>>(), split),
        _ => Ok(data),
    }
}

/// Train and test sets for the configured task, limits applied.
pub fn load_task_data(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let dir = cfg.resolved_data_dir();
    match cfg.task {
        Task::Mnist => {
            let (train, test) = load_mnist(&dir)?;
            Ok((
                first(train, cfg.train_limit, Split::Train)?,
                first(test, cfg.test_limit, Split::Test)?,
            ))
        }
        Task::Cifar10 => load_cifar10_subset(
            &dir,
            cfg.train_limit.unwrap_or(usize::MAX),
            cfg.test_limit.unwrap_or(usize::MAX),
        ),
        Task::Kws => {
            let train = load_features(&dir.join("train.fedf"), Split::Train)?;
            let test = load_features(&dir.join("test.fedf"), Split::Test)?;
            Ok((
                first(train, cfg.train_limit, Split::Train)?,
                first(test, cfg.test_limit, Split::Test)?,
            ))
        }
        Task::Synthetic => {
            let s = &cfg.synthetic;
            let per = s.train_per_class + s.test_per_class;
            let all = make_synthetic(
                NUM_CLASSES,
                per,
                784,
                s.spread,
                &mut rng::stream(cfg.seed, &[rng::SYNTHETIC]),
            )?;
            let (mut tr, mut te) = (Vec::new(), Vec::new());
            for i in 0..all.len() {
                if i % per < s.train_per_class {
                    tr.push(i);
                } else {
                    te.push(i);
                }
            }
            Ok((all.subset(&tr, Split::Train)?, all.subset(&te, Split::Test)?))
        }
    }
}

/// Builds the simulation for one seed: loads data, holds out the
/// validation set and partitions the rest.
pub fn build_simulation(cfg: &ExperimentConfig) -> Result<Simulation> {
    cfg.validate()?;
    let (train, test) = load_task_data(cfg)?;
    let (train, validation) = split_validation(
        &train,
        cfg.validation_size,
        &mut rng::stream(cfg.seed, &[rng::VALIDATION]),
    )?;
    Simulation::new(
        cfg.fed_config(),
        build_arch(cfg.task.arch()),
        train,
        cfg.partition,
        validation,
        test,
        cfg.seed,
    )
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn write_line(w: &mut BufWriter<File>, path: &Path, value: &impl Serialize) -> Result<()> {
    let line = serde_json::to_string(value).map_err(|e| Error::Json {
        context: path.display().to_string(),
        source: e,
    })?;
    writeln!(w, "{line}")
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

#[derive(Debug, Serialize)]
struct TimingRecord {
    schema_version: u32,
    round: usize,
    seconds: f64,
}

/// Writes one JSON record per line, flushed after every record.
pub struct MetricsSink {
    dir: PathBuf,
    rounds: BufWriter<File>,
    evals: BufWriter<File>,
    timings: BufWriter<File>,
}

impl MetricsSink {
    /// Starts fresh metrics files in `dir`, replacing earlier ones.
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            rounds: create(&dir.join(ROUNDS_FILE))?,
            evals: create(&dir.join(EVALS_FILE))?,
            timings: create(&dir.join(TIMINGS_FILE))?,
        })
    }
}

impl RunSink for MetricsSink {
    fn round(&mut self, record: &RoundRecord, elapsed: Duration) -> Result<()> {
        write_line(&mut self.rounds, &self.dir.join(ROUNDS_FILE), record)?;
        let t = TimingRecord {
            schema_version: RECORD_SCHEMA_VERSION,
            round: record.round,
            seconds: elapsed.as_secs_f64(),
        };
        write_line(&mut self.timings, &self.dir.join(TIMINGS_FILE), &t)
    }

    fn eval(&mut self, record: &EvalRecord) -> Result<()> {
        write_line(&mut self.evals, &self.dir.join(EVALS_FILE), record)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema_version: u32,
    pub config_hash: String,
    pub label: String,
    pub seed: u64,
    pub rounds: usize,
    pub final_test_accuracy: f64,
    pub final_test_loss: f64,
    pub final_validation_loss: f64,
}

/// Summary of several repeats of one config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatSummary {
    pub schema_version: u32,
    pub config_hash: String,
    pub label: String,
    pub runs: Vec<PathBuf>,
    pub accuracies: Vec<f64>,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        context: path.display().to_string(),
        source: e,
    })?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        context: path.display().to_string(),
        source: e,
    })
}

/// Runs one seed of `cfg` into `dir`.
pub fn run_single(cfg: &ExperimentConfig, dir: &Path) -> Result<RunSummary> {
    let mut sim = build_simulation(cfg)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    fs::write(dir.join(CONFIG_FILE), cfg.to_json() + "\n").map_err(|e| Error::io(dir.join(CONFIG_FILE), e))?;
    let mut sink = MetricsSink::create(dir)?;
    let start = Instant::now();
    let out = sim.run(&mut sink)?;
    let summary = RunSummary {
        schema_version: RECORD_SCHEMA_VERSION,
        config_hash: cfg.hash(),
        label: cfg.label(),
        seed: cfg.seed,
        rounds: out.rounds,
        final_test_accuracy: out.final_test.accuracy,
        final_test_loss: out.final_test.loss,
        final_validation_loss: out.final_validation_loss,
    };
    write_json(&dir.join(SUMMARY_FILE), &summary)?;
    let total = TimingRecord {
        schema_version: RECORD_SCHEMA_VERSION,
        round: out.rounds,
        seconds: start.elapsed().as_secs_f64(),
    };
    let path = dir.join(TIMINGS_FILE);
    let mut f = fs::OpenOptions::new()
        .append(true)
        .open(&path)
        .map_err(|e| Error::io(&path, e))?;
    writeln!(
        f,
        "{}",
        serde_json::json!({ "schema_version": total.schema_version, "total_seconds": total.seconds })
    )
    .map_err(|e| Error::io(&path, e))?;
    Ok(summary)
}

/// Outcome of `cmd_run`.
#[derive(Debug, Clone)]
pub enum RunReport {
    Single(RunSummary),
    Repeated(RepeatSummary),
}

/// Runs a config. With repeats, each seed gets its own `repeat-<r>`
/// subdirectory and the parent holds a summary over them.
pub fn cmd_run(config_path: &Path) -> Result<(PathBuf, RunReport)> {
    let cfg = parse_config(config_path)?;
    run_config(&cfg)
}

pub fn run_config(cfg: &ExperimentConfig) -> Result<(PathBuf, RunReport)> {
    cfg.validate()?;
    let dir = cfg.resolved_output_dir();
    if cfg.repeats == 1 {
        let s = run_single(cfg, &dir)?;
        return Ok((dir, RunReport::Single(s)));
    }
    let mut runs = Vec::new();
    let mut accuracies = Vec::new();
    for r in 0..cfg.repeats {
        let sub = dir.join(format!("repeat-{r}"));
        let one = ExperimentConfig {
            seed: cfg.seed + r as u64,
            repeats: 1,
            output_dir: Some(sub.clone()),
            ..cfg.clone()
        };
        let s = run_single(&one, &sub)?;
        runs.push(sub);
        accuracies.push(s.final_test_accuracy);
    }
    let (mean, std) = mean_std(&accuracies);
    let summary = RepeatSummary {
        schema_version: RECORD_SCHEMA_VERSION,
        config_hash: cfg.hash(),
        label: cfg.label(),
        runs,
        accuracies,
        mean_accuracy: mean,
        std_accuracy: std,
    };
    write_json(&dir.join(SUMMARY_FILE), &summary)?;
    Ok((dir, RunReport::Repeated(summary)))
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn read_rounds(dir: &Path) -> Result<Vec<RoundRecord>> {
    let path = dir.join(ROUNDS_FILE);
    let f = File::open(&path).map_err(|e| Error::io(&path, e))?;
    BufReader::new(f)
        .lines()
        .enumerate()
        .map(|(i, line)| {
            let line = line.map_err(|e| Error::io(&path, e))?;
            serde_json::from_str(&line).map_err(|e| Error::Json {
                context: format!("{} line {}", path.display(), i + 1),
                source: e,
            })
        })
        .collect()
}

/// Writes `trajectory.csv` into the run directory and returns its path.
/// The tuner columns are empty for runs on a fixed schedule.
pub fn cmd_export_trajectory(run_dir: &Path) -> Result<PathBuf> {
    let cfg: ExperimentConfig = read_json(&run_dir.join(CONFIG_FILE))?;
    let grid = cfg.fed_config().grid.build()?;
    let lr_axis = grid.axis_index(LEARNING_RATE);
    let it_axis = grid.axis_index(SGD_ITERATIONS);
    let rounds = read_rounds(run_dir)?;
    let mut out = String::from("round,mu_learning_rate_raw,mu_sgd_iterations_raw,sampled_lr,sampled_iters,reward\n");
    for (i, r) in rounds.iter().enumerate() {
        if r.round != i + 1 {
            return Err(Error::format(
                run_dir.join(ROUNDS_FILE),
                format!("expected round {}, found {}", i + 1, r.round),
            ));
        }
        let mu = |axis: Option<usize>| {
            r.mu_raw
                .as_ref()
                .zip(axis)
                .and_then(|(m, a)| m.get(a))
                .map(|v| v.to_string())
                .unwrap_or_default()
        };
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.round,
            mu(lr_axis),
            mu(it_axis),
            r.lr,
            r.iterations,
            r.reward
        ));
    }
    let path = run_dir.join(TRAJECTORY_FILE);
    fs::write(&path, out).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// One line of the accuracy table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TableRow {
    pub config_hash: String,
    pub label: String,
    pub runs: usize,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
}

fn collect_run_dirs(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if dir.join(CONFIG_FILE).is_file() {
        out.push(dir.to_path_buf());
        return Ok(());
    }
    let mut subs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(CONFIG_FILE).is_file())
        .collect();
    if subs.is_empty() {
        return Err(Error::format(dir, "not a run directory"));
    }
    subs.sort();
    out.extend(subs);
    Ok(())
}

/// Groups finished runs by config hash and reports mean and sample std of
/// their final test accuracies. Directories holding repeats are expanded.
pub fn cmd_table(run_dirs: &[PathBuf]) -> Result<Vec<TableRow>> {
    if run_dirs.is_empty() {
        return Err(Error::invalid("table needs at least one run directory"));
    }
    let mut dirs = Vec::new();
    for d in run_dirs {
        collect_run_dirs(d, &mut dirs)?;
    }
    let mut groups: BTreeMap<String, (String, ExperimentConfig, Vec<f64>)> = BTreeMap::new();
    for d in &dirs {
        let cfg: ExperimentConfig = read_json(&d.join(CONFIG_FILE))?;
        let summary: RunSummary = read_json(&d.join(SUMMARY_FILE))?;
        let hash = cfg.hash();
        if summary.config_hash != hash {
            return Err(Error::format(d, "summary was produced by a different config"));
        }
        let entry = groups
            .entry(hash)
            .or_insert_with(|| (cfg.label(), cfg.clone(), Vec::new()));
        let strip = |c: &ExperimentConfig| ExperimentConfig {
            seed: 0,
            name: None,
            output_dir: None,
            repeats: 1,
            data_dir: None,
            parallel: false,
            ..c.clone()
        };
        if strip(&entry.1) != strip(&cfg) {
            return Err(Error::format(d, "config differs from others with the same hash"));
        }
        entry.2.push(summary.final_test_accuracy);
    }
    Ok(groups
        .into_iter()
        .map(|(hash, (label, _, accs))| {
            let (mean, std) = mean_std(&accs);
            TableRow {
                config_hash: hash,
                label,
                runs: accs.len(),
                mean_accuracy: mean,
                std_accuracy: std,
            }
        })
        .collect())
}

/// Plain-text rendering of [`cmd_table`] output, accuracies in percent.
pub fn format_table(rows: &[TableRow]) -> String {
    let width = rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(6);
    let mut s = format!("{:<16}  {:<width$}  {:>4}  accuracy (%)\n", "config", "label", "runs");
    for r in rows {
        s.push_str(&format!(
            "{:<16}  {:<width$}  {:>4}  {:.2} ± {:.2}\n",
            r.config_hash,
            r.label,
            r.runs,
            100.0 * r.mean_accuracy,
            100.0 * r.std_accuracy
        ));
    }
    s
}
