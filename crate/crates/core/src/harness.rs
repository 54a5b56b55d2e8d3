//! Experiment runner behind the CLI.
//!
//! A run walks the task stream one bundle at a time: enqueue the task's
//! samples into the stream buffer, train on them mixed with EM draws (gating
//! and swapping as configured), admit the stream into the EM, flush whatever
//! the EM did not keep to storage, then evaluate after each task.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::gate::{GatePolicy, PolicyKind};
use crate::learner::{
    evaluate, train_bundle, BundleSpec, LearnerError, MetricsRecord, MetricsSummary, Swapping, TaskStream, Trainer,
    TrainerConfig,
};
use crate::memory::{EpisodicMemory, MemoryError, StreamBuffer, UpdatePolicy, DEFAULT_PARTITIONS};
use crate::scalar::Scalar;
use crate::storage::{Archive, ArchiveConfig, EntryState, StorageError};
use crate::swap::{SwapContext, SwapMode, SwapStats, SwapWorker, DEFAULT_CONCURRENCY};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid config at `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },
    #[error("output error: {0}")]
    Io(#[from] io::Error),
}

/// Pipeline stage an error came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Incoming,
    Training,
    MemoryUpdate,
    StorageUpdate,
    Evaluation,
    Setup,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Incoming => "data incoming",
            Stage::Training => "training",
            Stage::MemoryUpdate => "EM updating",
            Stage::StorageUpdate => "storage updating",
            Stage::Evaluation => "evaluation",
            Stage::Setup => "setup",
        })
    }
}

fn at<E: std::error::Error + Send + Sync + 'static>(stage: Stage) -> impl FnOnce(E) -> HarnessError {
    move |e| HarnessError::Stage {
        stage,
        source: Box::new(e),
    }
}

fn invalid(field: &str, reason: impl Into<String>) -> HarnessError {
    HarnessError::InvalidConfig {
        field: field.to_string(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    Off,
    Sync,
    Async,
}

impl RunMode {
    pub fn swap_mode(self) -> Option<SwapMode> {
        match self {
            RunMode::Off => None,
            RunMode::Sync => Some(SwapMode::Sync),
            RunMode::Async => Some(SwapMode::Async),
        }
    }
}

impl FromStr for RunMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "off" => Ok(RunMode::Off),
            "sync" => Ok(RunMode::Sync),
            "async" => Ok(RunMode::Async),
            other => Err(format!("unknown mode `{other}` (expected sync, async or off)")),
        }
    }
}

impl fmt::Display for RunMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RunMode::Off => "off",
            RunMode::Sync => "sync",
            RunMode::Async => "async",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamSection {
    pub num_tasks: usize,
    pub classes_per_task: usize,
    pub samples_per_class: usize,
    pub dim: usize,
    pub stddev: f64,
    /// Class means are drawn from `N(0, mean_scale^2 I)`.
    pub mean_scale: f64,
    pub seed: u64,
    pub eval_per_class: usize,
}

impl Default for StreamSection {
    fn default() -> Self {
        StreamSection {
            num_tasks: 5,
            classes_per_task: 4,
            samples_per_class: 100,
            dim: 16,
            stddev: 1.0,
            mean_scale: 1.0,
            seed: 0,
            eval_per_class: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MemorySection {
    pub capacity: usize,
    pub policy: UpdatePolicy,
    pub partitions: usize,
}

impl Default for MemorySection {
    fn default() -> Self {
        MemorySection {
            capacity: 40,
            policy: UpdatePolicy::Reservoir,
            partitions: DEFAULT_PARTITIONS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StorageSection {
    /// Live-sample capacity; absent means unbounded.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub capacity: Option<usize>,
    pub latency_ms: f64,
    /// Archive directory; defaults to a per-run directory under the output path.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub root: Option<PathBuf>,
    pub io_threads: usize,
}

impl Default for StorageSection {
    fn default() -> Self {
        StorageSection {
            capacity: None,
            latency_ms: 0.0,
            root: None,
            io_threads: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GateSection {
    pub kind: PolicyKind,
    pub swap_ratio: f64,
}

impl Default for GateSection {
    fn default() -> Self {
        GateSection {
            kind: PolicyKind::Entropy,
            swap_ratio: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SwapSection {
    pub mode: RunMode,
    pub concurrency: usize,
}

impl Default for SwapSection {
    fn default() -> Self {
        SwapSection {
            mode: RunMode::Async,
            concurrency: DEFAULT_CONCURRENCY,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    /// Simulated backbone compute per mini-batch.
    pub compute_delay_ms: f64,
    pub output: PathBuf,
    pub seeds: Vec<u64>,
    /// Stream samples per bundle; absent means one bundle per task.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bundle_size: Option<usize>,
    pub precision: Precision,
    pub drain_timeout_ms: u64,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            compute_delay_ms: 0.0,
            output: PathBuf::from("out"),
            seeds: vec![1],
            bundle_size: None,
            precision: Precision::F64,
            drain_timeout_ms: 600_000,
        }
    }
}

/// Declarative description of one experiment.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: Version,
    pub stream: StreamSection,
    pub memory: MemorySection,
    pub storage: StorageSection,
    pub gate: GateSection,
    pub swap: SwapSection,
    pub trainer: TrainerConfig,
    pub run: RunSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Version(pub u32);

impl Default for Version {
    fn default() -> Self {
        Version(CONFIG_VERSION)
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| HarnessError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path.as_ref())?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Short stable digest of the configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        hex::encode(&digest[..8])
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.version.0 != CONFIG_VERSION {
            return Err(invalid("version", format!("unsupported version {}", self.version.0)));
        }
        let positive = [
            ("stream.num_tasks", self.stream.num_tasks),
            ("stream.classes_per_task", self.stream.classes_per_task),
            ("stream.samples_per_class", self.stream.samples_per_class),
            ("stream.dim", self.stream.dim),
            ("stream.eval_per_class", self.stream.eval_per_class),
            ("memory.capacity", self.memory.capacity),
            ("memory.partitions", self.memory.partitions),
            ("storage.io_threads", self.storage.io_threads),
            ("swap.concurrency", self.swap.concurrency),
            ("trainer.hidden", self.trainer.hidden),
            ("trainer.batch_size", self.trainer.batch_size),
            ("trainer.passes", self.trainer.passes),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(invalid(field, "must be positive"));
            }
        }
        if self.stream.classes_per_task * self.stream.num_tasks < 2 {
            return Err(invalid("stream.classes_per_task", "need at least two classes overall"));
        }
        if let Some(0) = self.run.bundle_size {
            return Err(invalid("run.bundle_size", "must be positive"));
        }
        let unit = [
            ("gate.swap_ratio", self.gate.swap_ratio),
            ("trainer.old_fraction", self.trainer.old_fraction),
            ("trainer.alpha", self.trainer.alpha),
        ];
        for (field, v) in unit {
            if !(0.0..=1.0).contains(&v) {
                return Err(invalid(field, format!("{v} outside [0, 1]")));
            }
        }
        let nonneg = [
            ("stream.stddev", self.stream.stddev),
            ("stream.mean_scale", self.stream.mean_scale),
            ("storage.latency_ms", self.storage.latency_ms),
            ("run.compute_delay_ms", self.run.compute_delay_ms),
            ("trainer.weight_decay", self.trainer.weight_decay),
        ];
        for (field, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid(field, format!("{v} must be a finite non-negative number")));
            }
        }
        if !(self.trainer.learning_rate > 0.0 && self.trainer.learning_rate.is_finite()) {
            return Err(invalid("trainer.learning_rate", "must be positive"));
        }
        if self.run.seeds.is_empty() {
            return Err(invalid("run.seeds", "at least one seed required"));
        }
        Ok(())
    }
}

/// Per-bundle timing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleTiming {
    pub task: usize,
    pub bundle: usize,
    pub batches: u64,
    pub swap_items: u64,
    /// EM held samples when the bundle arrived, so swapping could take place.
    pub memory_warm: bool,
    pub wall_ms: f64,
}

/// Where every generated sample ended up.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub generated: usize,
    pub in_memory: usize,
    pub live_in_storage: usize,
    pub evicted: usize,
    pub missing: Vec<u64>,
    pub duplicated: Vec<u64>,
    /// Ids found in a tier that were never generated.
    pub unknown: Vec<u64>,
}

impl AuditReport {
    pub fn is_clean(&self) -> bool {
        self.missing.is_empty()
            && self.duplicated.is_empty()
            && self.unknown.is_empty()
            && self.in_memory + self.live_in_storage + self.evicted == self.generated
    }
}

/// Outcome of one seeded run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub config_hash: String,
    pub metrics: MetricsRecord,
    pub summary: MetricsSummary,
    pub swap_stats: SwapStats,
    pub bundles: Vec<BundleTiming>,
    pub audit: AuditReport,
    pub storage_root: PathBuf,
}

impl RunResult {
    /// Wall time over bundles that started with a non-empty EM.
    pub fn warm_wall_ms(&self) -> (u64, f64) {
        self.bundles
            .iter()
            .filter(|b| b.memory_warm)
            .fold((0, 0.0), |(n, t), b| (n + b.batches, t + b.wall_ms))
    }
}

fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a.wrapping_add(b.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Runs `cfg` once with run seed `seed`; the archive lives under `storage_root`.
pub fn run_experiment(cfg: &ExperimentConfig, seed: u64, storage_root: &Path) -> Result<RunResult, HarnessError> {
    cfg.validate()?;
    match cfg.run.precision {
        Precision::F32 => run_typed::<f32>(cfg, seed, storage_root),
        Precision::F64 => run_typed::<f64>(cfg, seed, storage_root),
    }
}

fn run_typed<T: Scalar>(cfg: &ExperimentConfig, seed: u64, storage_root: &Path) -> Result<RunResult, HarnessError> {
    let sc = &cfg.stream;
    let stream = TaskStream::new(
        sc.num_tasks,
        sc.classes_per_task,
        sc.samples_per_class,
        sc.dim,
        sc.stddev,
        sc.mean_scale,
        mix_seed(sc.seed, seed),
    );
    let memory = Arc::new(EpisodicMemory::with_partitions(
        cfg.memory.capacity,
        cfg.memory.partitions,
        cfg.memory.policy,
    ));
    let archive = Arc::new(
        Archive::create(
            storage_root,
            ArchiveConfig {
                capacity: cfg.storage.capacity,
                seed: mix_seed(seed, 11),
                read_latency: Duration::from_secs_f64(cfg.storage.latency_ms / 1e3),
                io_threads: cfg.storage.io_threads.max(cfg.swap.concurrency),
            },
        )
        .map_err(at(Stage::Setup))?,
    );
    let mut worker = cfg.swap.mode.swap_mode().map(|mode| {
        SwapWorker::spawn(
            SwapContext {
                memory: Arc::clone(&memory),
                archive: Arc::clone(&archive),
                concurrency: cfg.swap.concurrency,
            },
            mode,
            mix_seed(seed, 13),
        )
    });

    let mut init_rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 1));
    let mut train_rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 2));
    let mut gate_rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 3));
    let mut em_rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 4));
    let mut trainer: Trainer<T> = Trainer::new(sc.dim, stream.num_classes(), cfg.trainer, &mut init_rng);
    let spec = BundleSpec::from_config(&cfg.trainer, Duration::from_secs_f64(cfg.run.compute_delay_ms / 1e3));
    let policy = GatePolicy::new(cfg.gate.kind, cfg.gate.swap_ratio);
    let drain_timeout = Duration::from_millis(cfg.run.drain_timeout_ms);
    let bundle_size = cfg.run.bundle_size.unwrap_or(stream.task_size());

    let mut metrics = MetricsRecord::new(sc.num_tasks);
    let mut bundles = Vec::new();
    let mut generated = Vec::new();
    let mut batch_counter = 0u64;

    for task in 0..sc.num_tasks {
        trainer.begin_task((task + 1) * sc.classes_per_task);
        let samples = stream.generate_task(task).map_err(at(Stage::Incoming))?;
        generated.extend(samples.iter().map(|s| s.id));
        let mut arrivals = samples.into_iter().peekable();
        let mut bundle_index = 0;
        while arrivals.peek().is_some() {
            let mut buffer = StreamBuffer::new(bundle_size);
            while !buffer.is_full() {
                let Some(s) = arrivals.next() else { break };
                buffer.enqueue(s).map_err(at::<MemoryError>(Stage::Incoming))?;
            }
            let memory_warm = memory.occupied() > 0;
            let swapping = worker.as_mut().map(|w| Swapping {
                policy,
                worker: w,
                rng: &mut gate_rng,
                drain_timeout,
            });
            let report = train_bundle(
                &mut trainer,
                buffer.entries(),
                &spec,
                &memory,
                &mut train_rng,
                swapping,
                &mut batch_counter,
            )
            .map_err(at::<LearnerError>(Stage::Training))?;
            let leftovers = memory.update(buffer.drain(), &mut em_rng);
            archive.put(leftovers).map_err(at::<StorageError>(Stage::StorageUpdate))?;
            bundles.push(BundleTiming {
                task,
                bundle: bundle_index,
                batches: report.batches,
                swap_items: report.items_submitted,
                memory_warm,
                wall_ms: report.wall_time.as_secs_f64() * 1e3,
            });
            bundle_index += 1;
        }
        if let Some(w) = worker.as_ref() {
            w.drain(drain_timeout).map_err(at(Stage::Evaluation))?;
        }
        let row = evaluate(&trainer.model, &stream, task + 1, sc.eval_per_class).map_err(at(Stage::Evaluation))?;
        metrics.record_row(task, &row);
    }

    let swap_stats = worker.as_mut().map(SwapWorker::stop).unwrap_or_default();
    drop(worker);
    let audit = audit(&generated, &memory, &archive);
    archive.flush().map_err(at(Stage::StorageUpdate))?;
    metrics.bundle_wall_ms = bundles.iter().map(|b| b.wall_ms).collect();
    let summary = metrics.compute().map_err(at(Stage::Evaluation))?;
    Ok(RunResult {
        seed,
        config_hash: cfg.hash(),
        metrics,
        summary,
        swap_stats,
        bundles,
        audit,
        storage_root: storage_root.to_path_buf(),
    })
}

/// Checks that every generated id sits in exactly one of EM, live storage or eviction tombstones.
pub fn audit(generated: &[u64], memory: &EpisodicMemory, archive: &Archive) -> AuditReport {
    let in_memory: Vec<u64> = memory.snapshot().into_iter().flatten().map(|s| s.id).collect();
    let live = archive.ids_in_state(EntryState::Live);
    let evicted = archive.ids_in_state(EntryState::Evicted);
    let mut seen: HashMap<u64, usize> = generated.iter().map(|&id| (id, 0)).collect();
    let mut unknown = Vec::new();
    for id in in_memory.iter().chain(&live).chain(&evicted) {
        match seen.get_mut(id) {
            Some(n) => *n += 1,
            None => unknown.push(*id),
        }
    }
    let mut missing: Vec<u64> = seen.iter().filter(|(_, &n)| n == 0).map(|(&id, _)| id).collect();
    let mut duplicated: Vec<u64> = seen.iter().filter(|(_, &n)| n > 1).map(|(&id, _)| id).collect();
    missing.sort_unstable();
    duplicated.sort_unstable();
    unknown.sort_unstable();
    AuditReport {
        generated: generated.len(),
        in_memory: in_memory.len(),
        live_in_storage: live.len(),
        evicted: evicted.len(),
        missing,
        duplicated,
        unknown,
    }
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Seed-aggregated results of one configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub label: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub final_accuracy_mean: f64,
    pub final_accuracy_std: f64,
    pub final_forgetting_mean: f64,
    pub final_forgetting_std: f64,
    pub runs: Vec<RunResult>,
}

impl ExperimentSummary {
    pub fn from_runs(label: impl Into<String>, config_hash: String, runs: Vec<RunResult>) -> Self {
        let acc: Vec<f64> = runs.iter().map(|r| r.summary.final_accuracy).collect();
        let fgt: Vec<f64> = runs.iter().map(|r| r.summary.final_forgetting).collect();
        let (am, asd) = mean_std(&acc);
        let (fm, fsd) = mean_std(&fgt);
        ExperimentSummary {
            label: label.into(),
            config_hash,
            seeds: runs.iter().map(|r| r.seed).collect(),
            final_accuracy_mean: am,
            final_accuracy_std: asd,
            final_forgetting_mean: fm,
            final_forgetting_std: fsd,
            runs,
        }
    }
}

fn storage_dir(cfg: &ExperimentConfig, label: &str, seed: u64) -> PathBuf {
    let base = cfg
        .storage
        .root
        .clone()
        .unwrap_or_else(|| cfg.run.output.join("storage"));
    if label.is_empty() {
        base.join(format!("seed-{seed}"))
    } else {
        base.join(format!("{label}-seed-{seed}"))
    }
}

/// Runs every seed of `cfg.run.seeds`.
pub fn run_seeds(cfg: &ExperimentConfig, label: &str) -> Result<ExperimentSummary, HarnessError> {
    cfg.validate()?;
    let runs = cfg
        .run
        .seeds
        .iter()
        .map(|&seed| run_experiment(cfg, seed, &storage_dir(cfg, label, seed)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ExperimentSummary::from_runs(label, cfg.hash(), runs))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    EmSize,
    SwapRatio,
    StorageCapacity,
    NumTasks,
}

impl FromStr for SweepAxis {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "em_size" => Ok(SweepAxis::EmSize),
            "swap_ratio" => Ok(SweepAxis::SwapRatio),
            "storage_capacity" => Ok(SweepAxis::StorageCapacity),
            "num_tasks" => Ok(SweepAxis::NumTasks),
            other => Err(format!(
                "unknown axis `{other}` (expected em_size, swap_ratio, storage_capacity or num_tasks)"
            )),
        }
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepAxis::EmSize => "em_size",
            SweepAxis::SwapRatio => "swap_ratio",
            SweepAxis::StorageCapacity => "storage_capacity",
            SweepAxis::NumTasks => "num_tasks",
        })
    }
}

impl SweepAxis {
    /// Applies one axis value. Storage capacities accept `unbounded` and
    /// multiples of the EM size such as `1.5x`.
    pub fn apply(self, cfg: &ExperimentConfig, value: &str) -> Result<ExperimentConfig, HarnessError> {
        let mut out = cfg.clone();
        let bad = |reason: String| invalid(&format!("sweep.{self}"), reason);
        let int = |v: &str| v.trim().parse::<usize>().map_err(|e| bad(format!("`{v}`: {e}")));
        match self {
            SweepAxis::EmSize => out.memory.capacity = int(value)?,
            SweepAxis::NumTasks => out.stream.num_tasks = int(value)?,
            SweepAxis::SwapRatio => {
                out.gate.swap_ratio = value.trim().parse().map_err(|e| bad(format!("`{value}`: {e}")))?
            }
            SweepAxis::StorageCapacity => {
                let v = value.trim();
                out.storage.capacity = if v.eq_ignore_ascii_case("unbounded") || v.eq_ignore_ascii_case("inf") {
                    None
                } else if let Some(mult) = v.strip_suffix(['x', 'X']) {
                    let m: f64 = mult.parse().map_err(|e| bad(format!("`{v}`: {e}")))?;
                    if !(m >= 0.0 && m.is_finite()) {
                        return Err(bad(format!("`{v}`: multiple must be non-negative")));
                    }
                    Some((m * cfg.memory.capacity as f64).round() as usize)
                } else {
                    Some(int(v)?)
                };
            }
        }
        out.validate()?;
        Ok(out)
    }
}

/// One configuration per axis value, all sharing the base seeds.
pub fn run_sweep(
    base: &ExperimentConfig,
    axis: SweepAxis,
    values: &[String],
) -> Result<Vec<(String, ExperimentSummary)>, HarnessError> {
    values
        .iter()
        .map(|v| {
            let cfg = axis.apply(base, v)?;
            let label = format!("{axis}-{}", v.trim());
            Ok((v.trim().to_string(), run_seeds(&cfg, &label)?))
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpeedRow {
    pub mode: RunMode,
    pub seed: u64,
    /// Mini-batches trained in bundles that started with a non-empty EM.
    pub timed_batches: u64,
    pub timed_wall_ms: f64,
    pub per_batch_ms: f64,
    pub all_bundles_wall_ms: f64,
    /// Relative to the `off` row; `None` for `off` itself or when it was not run.
    pub overhead_pct: Option<f64>,
    pub swap_stats: SwapStats,
}

/// Trains the same workload under each mode and compares bundle wall time.
///
/// Bundles that start with an empty EM cannot swap and cost the same in
/// every mode; they are excluded from the timed total.
pub fn run_speed_test(cfg: &ExperimentConfig, modes: &[RunMode]) -> Result<Vec<SpeedRow>, HarnessError> {
    if cfg.run.compute_delay_ms <= 0.0 {
        return Err(invalid("run.compute_delay_ms", "speed test needs a positive compute delay"));
    }
    let seed = cfg.run.seeds[0];
    let mut rows = Vec::with_capacity(modes.len());
    for &mode in modes {
        let mut c = cfg.clone();
        c.swap.mode = mode;
        let result = run_experiment(&c, seed, &storage_dir(&c, &format!("speed-{mode}"), seed))?;
        let (batches, ms) = result.warm_wall_ms();
        rows.push(SpeedRow {
            mode,
            seed,
            timed_batches: batches,
            timed_wall_ms: ms,
            per_batch_ms: if batches > 0 { ms / batches as f64 } else { 0.0 },
            all_bundles_wall_ms: result.bundles.iter().map(|b| b.wall_ms).sum(),
            overhead_pct: None,
            swap_stats: result.swap_stats,
        });
    }
    if let Some(off) = rows.iter().find(|r| r.mode == RunMode::Off).map(|r| r.timed_wall_ms) {
        for r in rows.iter_mut().filter(|r| r.mode != RunMode::Off) {
            r.overhead_pct = Some(100.0 * (r.timed_wall_ms - off) / off);
        }
    }
    Ok(rows)
}

pub const METRICS_COLUMNS: [&str; 8] = ["axis", "axis_value", "seed", "kind", "metric", "task", "after_task", "value"];
pub const TIMINGS_COLUMNS: [&str; 9] = [
    "axis",
    "axis_value",
    "seed",
    "task",
    "bundle",
    "batches",
    "swap_items",
    "memory_warm",
    "wall_ms",
];

/// Results of one experiment, optionally tagged with a sweep coordinate.
pub struct Labeled<'a> {
    pub axis: Option<SweepAxis>,
    pub axis_value: String,
    pub summary: &'a ExperimentSummary,
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

pub fn write_metrics_csv<W: io::Write>(out: W, groups: &[Labeled<'_>]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| HarnessError::Io(io::Error::other(e));
    w.write_record(METRICS_COLUMNS).map_err(csv_err)?;
    for g in groups {
        let axis = opt(g.axis);
        let mut row = |seed: String, kind: &str, metric: &str, task: String, after: String, value: f64| {
            w.write_record([&axis, &g.axis_value, &seed, kind, metric, &task, &after, &value.to_string()])
                .map_err(csv_err)
        };
        for r in &g.summary.runs {
            let seed = r.seed.to_string();
            for (j, cells) in r.metrics.acc.iter().enumerate() {
                for (t, a) in cells.iter().enumerate() {
                    if let Some(a) = a {
                        row(seed.clone(), "cell", "accuracy", j.to_string(), t.to_string(), *a)?;
                    }
                }
            }
            for (t, a) in r.summary.incremental_accuracy.iter().enumerate() {
                row(seed.clone(), "summary", "incremental_accuracy", String::new(), t.to_string(), *a)?;
            }
            row(seed.clone(), "summary", "final_accuracy", String::new(), String::new(), r.summary.final_accuracy)?;
            row(seed, "summary", "final_forgetting", String::new(), String::new(), r.summary.final_forgetting)?;
        }
        let s = g.summary;
        for (metric, v) in [
            ("final_accuracy_mean", s.final_accuracy_mean),
            ("final_accuracy_std", s.final_accuracy_std),
            ("final_forgetting_mean", s.final_forgetting_mean),
            ("final_forgetting_std", s.final_forgetting_std),
        ] {
            row(String::new(), "aggregate", metric, String::new(), String::new(), v)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_timings_csv<W: io::Write>(out: W, groups: &[Labeled<'_>]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| HarnessError::Io(io::Error::other(e));
    w.write_record(TIMINGS_COLUMNS).map_err(csv_err)?;
    for g in groups {
        let axis = opt(g.axis);
        for r in &g.summary.runs {
            for b in &r.bundles {
                w.write_record([
                    axis.clone(),
                    g.axis_value.clone(),
                    r.seed.to_string(),
                    b.task.to_string(),
                    b.bundle.to_string(),
                    b.batches.to_string(),
                    b.swap_items.to_string(),
                    b.memory_warm.to_string(),
                    b.wall_ms.to_string(),
                ])
                .map_err(csv_err)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct SummaryJson<'a> {
    config_version: u32,
    config_hash: &'a str,
    axis: Option<SweepAxis>,
    experiments: Vec<SummaryEntry<'a>>,
}

#[derive(Serialize)]
struct SummaryEntry<'a> {
    axis_value: &'a str,
    label: &'a str,
    seeds: &'a [u64],
    final_accuracy_mean: f64,
    final_accuracy_std: f64,
    final_forgetting_mean: f64,
    final_forgetting_std: f64,
    runs: Vec<RunJson<'a>>,
}

#[derive(Serialize)]
struct RunJson<'a> {
    seed: u64,
    config_hash: &'a str,
    final_accuracy: f64,
    final_forgetting: f64,
    incremental_accuracy: &'a [f64],
    accuracy_matrix: &'a [Vec<Option<f64>>],
    audit: &'a AuditReport,
}

/// Writes `metrics.csv`, `timings.csv`, `summary.json` and `swapstats.json` into `dir`.
pub fn write_outputs(dir: &Path, base_hash: &str, groups: &[Labeled<'_>]) -> Result<(), HarnessError> {
    fs::create_dir_all(dir)?;
    write_metrics_csv(fs::File::create(dir.join("metrics.csv"))?, groups)?;
    write_timings_csv(fs::File::create(dir.join("timings.csv"))?, groups)?;
    let summary = SummaryJson {
        config_version: CONFIG_VERSION,
        config_hash: base_hash,
        axis: groups.first().and_then(|g| g.axis),
        experiments: groups
            .iter()
            .map(|g| SummaryEntry {
                axis_value: &g.axis_value,
                label: &g.summary.label,
                seeds: &g.summary.seeds,
                final_accuracy_mean: g.summary.final_accuracy_mean,
                final_accuracy_std: g.summary.final_accuracy_std,
                final_forgetting_mean: g.summary.final_forgetting_mean,
                final_forgetting_std: g.summary.final_forgetting_std,
                runs: g
                    .summary
                    .runs
                    .iter()
                    .map(|r| RunJson {
                        seed: r.seed,
                        config_hash: &r.config_hash,
                        final_accuracy: r.summary.final_accuracy,
                        final_forgetting: r.summary.final_forgetting,
                        incremental_accuracy: &r.summary.incremental_accuracy,
                        accuracy_matrix: &r.metrics.acc,
                        audit: &r.audit,
                    })
                    .collect(),
            })
            .collect(),
    };
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary).map_err(io::Error::other)?)?;
    let stats: BTreeMap<String, BTreeMap<u64, &SwapStats>> = groups
        .iter()
        .map(|g| {
            (
                g.summary.label.clone(),
                g.summary.runs.iter().map(|r| (r.seed, &r.swap_stats)).collect(),
            )
        })
        .collect();
    fs::write(dir.join("swapstats.json"), serde_json::to_string_pretty(&stats).map_err(io::Error::other)?)?;
    Ok(())
}

/// Writes the speed comparison as `timings.csv`, `summary.json` and `swapstats.json`.
pub fn write_speed_outputs(dir: &Path, config_hash: &str, rows: &[SpeedRow]) -> Result<(), HarnessError> {
    fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("timings.csv")).map_err(io::Error::other)?;
    let csv_err = |e: csv::Error| HarnessError::Io(io::Error::other(e));
    w.write_record(["mode", "seed", "timed_batches", "timed_wall_ms", "per_batch_ms", "all_bundles_wall_ms", "overhead_pct"])
        .map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.mode.to_string(),
            r.seed.to_string(),
            r.timed_batches.to_string(),
            r.timed_wall_ms.to_string(),
            r.per_batch_ms.to_string(),
            r.all_bundles_wall_ms.to_string(),
            opt(r.overhead_pct),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    #[derive(Serialize)]
    struct SpeedJson<'a> {
        config_version: u32,
        config_hash: &'a str,
        modes: &'a [SpeedRow],
    }
    let json = SpeedJson {
        config_version: CONFIG_VERSION,
        config_hash,
        modes: rows,
    };
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&json).map_err(io::Error::other)?)?;
    let stats: BTreeMap<String, &SwapStats> = rows.iter().map(|r| (r.mode.to_string(), &r.swap_stats)).collect();
    fs::write(dir.join("swapstats.json"), serde_json::to_string_pretty(&stats).map_err(io::Error::other)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_with_stable_hash() {
        let mut cfg = ExperimentConfig::default();
        cfg.storage.capacity = Some(120);
        cfg.run.seeds = vec![1, 2, 3];
        let text = cfg.to_toml();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_eq!(ExperimentConfig::from_toml(&back.to_toml()).unwrap().hash(), cfg.hash());
        let mut other = cfg.clone();
        other.gate.swap_ratio = 0.5;
        assert_ne!(other.hash(), cfg.hash());
    }

    #[test]
    fn partial_config_uses_defaults() {
        let cfg = ExperimentConfig::from_toml("[gate]\nswap_ratio = 0.5\n[memory]\npolicy = \"greedy_balanced\"\n").unwrap();
        assert_eq!(cfg.gate.swap_ratio, 0.5);
        assert_eq!(cfg.memory.policy, UpdatePolicy::GreedyBalanced);
        assert_eq!(cfg.trainer, TrainerConfig::default());
    }

    #[test]
    fn validation_names_the_field() {
        let bad = [
            ("[gate]\nswap_ratio = 1.5\n", "gate.swap_ratio"),
            ("[memory]\ncapacity = 0\n", "memory.capacity"),
            ("[trainer]\nold_fraction = -0.1\n", "trainer.old_fraction"),
            ("[run]\nseeds = []\n", "run.seeds"),
        ];
        for (text, field) in bad {
            match ExperimentConfig::from_toml(text) {
                Err(HarnessError::InvalidConfig { field: f, .. }) => assert_eq!(f, field),
                other => panic!("{text}: {other:?}"),
            }
        }
        assert!(matches!(
            ExperimentConfig::from_toml("[gate]\nbogus = 1\n"),
            Err(HarnessError::Parse(_))
        ));
    }

    #[test]
    fn sweep_values_parse() {
        let cfg = ExperimentConfig::default();
        let c = SweepAxis::StorageCapacity.apply(&cfg, "1.5x").unwrap();
        assert_eq!(c.storage.capacity, Some(60));
        let c = SweepAxis::StorageCapacity.apply(&cfg, "unbounded").unwrap();
        assert_eq!(c.storage.capacity, None);
        let c = SweepAxis::SwapRatio.apply(&cfg, "0.2").unwrap();
        assert_eq!(c.gate.swap_ratio, 0.2);
        assert!(SweepAxis::SwapRatio.apply(&cfg, "2").is_err());
        assert!(SweepAxis::EmSize.apply(&cfg, "abc").is_err());
        assert_eq!("num_tasks".parse::<SweepAxis>().unwrap(), SweepAxis::NumTasks);
    }

    #[test]
    fn mean_std_matches_hand_values() {
        assert_eq!(mean_std(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]).0, 5.0);
        let (_, sd) = mean_std(&[1.0, 2.0, 3.0]);
        assert!((sd - 1.0).abs() < 1e-12);
        assert_eq!(mean_std(&[3.0]), (3.0, 0.0));
    }
}
