//! Experiment configuration and the end-to-end runner behind the CLI.
//!
//! A run is fully determined by its resolved [`ExperimentConfig`]. Every
//! random stream is derived from the master `seed` with
//! [`derive_seed`](crate::rng::derive_seed), so changing the worker count
//! never changes the output.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::client::LocalTrainConfig;
use crate::data::{
    dirichlet_partition, dirichlet_partition_indices, holdout_per_class, import_dataset, make_longtail_counts,
    split_many_medium_few, subsample_longtail, synth_blobs, BlobSpec, ClassCounts, Group, GroupMap, LabeledDataset,
    PartitionSpec,
};
use crate::embedding::load_embeddings;
use crate::error::{Error, Result};
use crate::metrics::{Evaluator, RoundMetrics};
use crate::model::ModelParams;
use crate::rng::{derive_seed, seeded, stream};
use crate::server::{run_round, Federation, Method, RoundConfig, ServerState};
use crate::synthesis::{PclNegatives, RetrainConfig, SynthesisConfig};
use crate::teacher::{FileTeacher, StubTeacher, TeacherCache, TeacherProvider, DEFAULT_LOGIT_SCALE};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SUMMARY_FILE: &str = "final.json";
pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub method: Method,
    pub out_dir: Option<PathBuf>,
    pub dataset: DatasetConfig,
    pub partition: PartitionConfig,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub server: ServerConfig,
    pub teacher: TeacherConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            method: Method::Clip2fl,
            out_dir: None,
            dataset: DatasetConfig::default(),
            partition: PartitionConfig::default(),
            model: ModelConfig::default(),
            training: TrainingConfig::default(),
            server: ServerConfig::default(),
            teacher: TeacherConfig::default(),
        }
    }
}

/// Gaussian blobs unless `import` points at an exported dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub import: Option<PathBuf>,
    pub num_classes: usize,
    pub input_dim: usize,
    pub n_max: usize,
    pub imbalance_factor: f64,
    pub spread: f64,
    pub separation: f64,
    /// Balanced per-class test holdout, taken before the long-tail cut.
    pub test_per_class: usize,
    /// `[hi, lo]`: Many if `n_c > hi`, Few if `n_c < lo`.
    pub group_thresholds: [usize; 2],
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            import: None,
            num_classes: 10,
            input_dim: 32,
            n_max: 500,
            imbalance_factor: 100.0,
            spread: 1.0,
            separation: BlobSpec::DEFAULT_SEPARATION,
            test_per_class: 100,
            group_thresholds: [100, 20],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionConfig {
    pub num_clients: usize,
    pub alpha: f64,
    /// Defaults to a stream of the master seed.
    pub seed: Option<u64>,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            num_clients: 20,
            alpha: 0.5,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64],
            feature_dim: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub rounds: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub beta: f64,
    /// Samples per class used for the uploaded class gradients.
    pub per_class_cap: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        let local = LocalTrainConfig::default();
        Self {
            rounds: 50,
            epochs: local.epochs,
            batch_size: local.batch_size,
            lr: local.lr,
            momentum: local.momentum,
            beta: local.beta,
            per_class_cap: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerConfig {
    pub fraction: f64,
    pub features_per_class: usize,
    pub bank_init_scale: f64,
    pub feature_steps: usize,
    pub feature_lr: f64,
    pub eta_pcl: f64,
    pub tau: f64,
    pub pcl_negatives: PclNegatives,
    pub retrain_steps: usize,
    pub retrain_lr: f64,
    /// 0 means full batch.
    pub retrain_batch: usize,
}

impl Default for ServerConfig {
    fn default() -> Self {
        let s = SynthesisConfig::default();
        let r = RetrainConfig::default();
        Self {
            fraction: 0.4,
            features_per_class: 100,
            bank_init_scale: 0.1,
            feature_steps: s.steps,
            feature_lr: s.lr,
            eta_pcl: s.eta_pcl,
            tau: s.tau,
            pcl_negatives: s.negatives,
            retrain_steps: r.steps,
            retrain_lr: r.lr,
            retrain_batch: r.batch_size,
        }
    }
}

/// Stub teacher with noise `sigma`, or exported embeddings at `embeddings`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherConfig {
    pub embeddings: Option<PathBuf>,
    pub sigma: f64,
    pub logit_scale: f64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            embeddings: None,
            sigma: 0.3,
            logit_scale: DEFAULT_LOGIT_SCALE,
        }
    }
}

fn config_err(field: &str, why: impl std::fmt::Display) -> Error {
    Error::Config(format!("{field}: {why}"))
}

/// Parses a `--set` value as TOML, falling back to a bare string.
fn parse_override_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&wrapped) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Applies `section.key=value` overrides to a parsed TOML document.
pub fn apply_overrides(doc: &mut toml::Table, overrides: &[String]) -> Result<()> {
    for item in overrides {
        let (path, raw) = item
            .split_once('=')
            .ok_or_else(|| config_err(item, "override must look like section.key=value"))?;
        let keys: Vec<&str> = path.trim().split('.').collect();
        if keys.iter().any(|k| k.is_empty()) {
            return Err(config_err(path, "empty key in override path"));
        }
        let mut table = &mut *doc;
        for k in &keys[..keys.len() - 1] {
            let entry = table
                .entry(k.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            table = entry
                .as_table_mut()
                .ok_or_else(|| config_err(path, format!("`{k}` is not a section")))?;
        }
        table.insert(keys[keys.len() - 1].to_string(), parse_override_value(raw.trim()));
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        apply_overrides(&mut doc, overrides)?;
        let cfg: Self = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        if d.import.is_none() {
            if d.num_classes < 2 {
                return Err(config_err("dataset.num_classes", "must be >= 2"));
            }
            if d.input_dim == 0 {
                return Err(config_err("dataset.input_dim", "must be >= 1"));
            }
            if !(d.spread >= 0.0) || !(d.separation > 0.0) {
                return Err(config_err("dataset.spread/separation", "spread >= 0 and separation > 0 required"));
            }
        }
        if d.n_max == 0 {
            return Err(config_err("dataset.n_max", "must be >= 1"));
        }
        if !(d.imbalance_factor >= 1.0) {
            return Err(config_err("dataset.imbalance_factor", "must be >= 1"));
        }
        if d.test_per_class == 0 {
            return Err(config_err("dataset.test_per_class", "must be >= 1"));
        }
        let [hi, lo] = d.group_thresholds;
        if !(hi > lo && lo > 0) {
            return Err(config_err("dataset.group_thresholds", "need [hi, lo] with hi > lo > 0"));
        }
        if self.partition.num_clients == 0 {
            return Err(config_err("partition.num_clients", "must be >= 1"));
        }
        if !(self.partition.alpha > 0.0) || !self.partition.alpha.is_finite() {
            return Err(config_err("partition.alpha", "must be a positive number"));
        }
        if self.model.feature_dim == 0 || self.model.hidden.contains(&0) {
            return Err(config_err("model", "layer widths must be >= 1"));
        }
        if self.training.rounds == 0 {
            return Err(config_err("training.rounds", "must be >= 1"));
        }
        if self.server.features_per_class == 0 {
            return Err(config_err("server.features_per_class", "must be >= 1"));
        }
        if !(self.server.bank_init_scale > 0.0) {
            return Err(config_err("server.bank_init_scale", "must be > 0"));
        }
        if !(self.teacher.sigma >= 0.0) || !(self.teacher.logit_scale > 0.0) {
            return Err(config_err("teacher", "sigma >= 0 and logit_scale > 0 required"));
        }
        self.round_config().validate()
    }

    /// Round settings after the method's overrides.
    pub fn round_config(&self) -> RoundConfig {
        let t = &self.training;
        let s = &self.server;
        let mut cfg = RoundConfig {
            method: self.method,
            client_fraction: s.fraction,
            local: LocalTrainConfig {
                epochs: t.epochs,
                batch_size: t.batch_size,
                lr: t.lr,
                momentum: t.momentum,
                beta: t.beta,
            },
            per_class_cap: t.per_class_cap,
            synthesis: SynthesisConfig {
                steps: s.feature_steps,
                lr: s.feature_lr,
                eta_pcl: s.eta_pcl,
                tau: s.tau,
                negatives: s.pcl_negatives,
            },
            retrain: RetrainConfig {
                steps: s.retrain_steps,
                lr: s.retrain_lr,
                batch_size: s.retrain_batch,
            },
        };
        self.method.apply(&mut cfg);
        cfg
    }

    /// This config with the method's overrides written back into the
    /// sections, as echoed in `config.resolved.json`.
    pub fn resolved(&self) -> Self {
        let mut out = self.clone();
        let r = self.round_config();
        out.training.beta = r.local.beta;
        out.server.eta_pcl = r.synthesis.eta_pcl;
        if out.partition.seed.is_none() {
            out.partition.seed = Some(self.partition_seed());
        }
        out
    }

    pub fn partition_seed(&self) -> u64 {
        self.partition
            .seed
            .unwrap_or_else(|| derive_seed(self.seed, stream::PARTITION, 0))
    }
}

/// Train/test split, long-tail counts and client shards for a config.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    pub counts: ClassCounts,
    pub groups: GroupMap,
    pub shards: Vec<LabeledDataset>,
}

fn source_dataset(cfg: &ExperimentConfig) -> Result<LabeledDataset> {
    let d = &cfg.dataset;
    match &d.import {
        Some(dir) => import_dataset(dir),
        None => synth_blobs(
            &BlobSpec {
                num_classes: d.num_classes,
                input_dim: d.input_dim,
                n_per_class: d.n_max + d.test_per_class,
                spread: d.spread,
                separation: d.separation,
            },
            derive_seed(cfg.seed, stream::DATA, 0),
        ),
    }
}

fn as_config_error(field: &str, e: Error) -> Error {
    match e {
        Error::InvalidArgument(msg) => config_err(field, msg),
        other => other,
    }
}

/// Builds the long-tailed training set, the balanced test set and shards.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let d = &cfg.dataset;
    let source = source_dataset(cfg)?;
    let (rest, test) = holdout_per_class(&source, d.test_per_class, derive_seed(cfg.seed, stream::HOLDOUT, 0))
        .map_err(|e| as_config_error("dataset.test_per_class", e))?;
    let counts = make_longtail_counts(d.n_max, source.num_classes(), d.imbalance_factor)
        .map_err(|e| as_config_error("dataset", e))?;
    let train = subsample_longtail(&rest, &counts, derive_seed(cfg.seed, stream::LONGTAIL, 0))
        .map_err(|e| as_config_error("dataset.n_max", e))?;
    let groups = split_many_medium_few(counts.as_slice(), (d.group_thresholds[0], d.group_thresholds[1]))?;
    let shards = dirichlet_partition(&train, &partition_spec(cfg))?;
    Ok(PreparedData {
        train,
        test,
        counts,
        groups,
        shards,
    })
}

fn partition_spec(cfg: &ExperimentConfig) -> PartitionSpec {
    PartitionSpec {
        num_clients: cfg.partition.num_clients,
        alpha: cfg.partition.alpha,
        seed: cfg.partition_seed(),
    }
}

fn build_teacher(cfg: &ExperimentConfig, train: &LabeledDataset) -> Result<Box<dyn TeacherProvider>> {
    let dim = cfg.model.feature_dim;
    let provider: Box<dyn TeacherProvider> = match &cfg.teacher.embeddings {
        Some(dir) => {
            let loaded = load_embeddings(dir)?;
            Box::new(FileTeacher::new(&loaded.set, train.class_names(), cfg.teacher.logit_scale)?)
        }
        None => Box::new(StubTeacher::new(
            train,
            dim,
            cfg.teacher.sigma,
            derive_seed(cfg.seed, stream::TEACHER, 0),
            cfg.teacher.logit_scale,
        )?),
    };
    if provider.prototypes().dim() != dim {
        return Err(config_err(
            "model.feature_dim",
            format!("must equal the teacher embedding dimension {}", provider.prototypes().dim()),
        ));
    }
    Ok(provider)
}

/// Everything a run needs before its first round.
pub struct Simulation {
    pub config: ExperimentConfig,
    pub round_config: RoundConfig,
    pub data: PreparedData,
    pub federation: Federation,
    pub evaluator: Evaluator,
    pub state: ServerState,
}

/// Probe rows used for CKA.
pub const CKA_PROBE_SIZE: usize = 256;

impl Simulation {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let data = prepare_data(config)?;
        let teacher = build_teacher(config, &data.train)?;
        let cache = TeacherCache::build(teacher.as_ref(), &data.train)?;
        let num_classes = data.train.num_classes();
        let global = ModelParams::random(
            data.train.input_dim(),
            &config.model.hidden,
            config.model.feature_dim,
            num_classes,
            &mut seeded(derive_seed(config.seed, stream::MODEL_INIT, 0)),
        )?;
        let state = ServerState::new(
            global,
            config.server.features_per_class,
            config.server.bank_init_scale,
            derive_seed(config.seed, stream::BANK_INIT, 0),
        )?;
        let evaluator = Evaluator::new(data.test.clone(), data.train.clone(), data.groups.clone(), CKA_PROBE_SIZE)?;
        let federation = Federation {
            shards: data.shards.clone(),
            teacher: cache,
            prototypes: teacher.prototypes().clone(),
        };
        Ok(Self {
            config: config.resolved(),
            round_config: config.round_config(),
            data,
            federation,
            evaluator,
            state,
        })
    }

    pub fn step(&mut self) -> Result<RoundMetrics> {
        let (next, metrics) = run_round(
            &self.state,
            &self.federation,
            &self.evaluator,
            &self.round_config,
            self.config.seed,
        )?;
        self.state = next;
        Ok(metrics)
    }

    /// Runs the remaining rounds, handing each record to `on_round`.
    pub fn run(&mut self, mut on_round: impl FnMut(&RoundMetrics) -> Result<()>) -> Result<Vec<RoundMetrics>> {
        let mut all = Vec::with_capacity(self.config.training.rounds);
        while self.state.round < self.config.training.rounds {
            let m = self.step()?;
            on_round(&m)?;
            all.push(m);
        }
        Ok(all)
    }
}

/// Contents of `final.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: Method,
    pub seed: u64,
    pub rounds: usize,
    pub acc_all: f64,
    pub acc_many: Option<f64>,
    pub acc_medium: Option<f64>,
    pub acc_few: Option<f64>,
    /// Latest reported value per group (a group can be missing from late
    /// rounds when no selected client holds its classes).
    pub grad_dissim: BTreeMap<Group, f64>,
    pub feat_dissim: BTreeMap<Group, f64>,
    pub cka_final: Option<f64>,
    /// Mean of `cka_mean` over all rounds that report it.
    pub cka_average: Option<f64>,
    pub class_counts: Vec<usize>,
}

impl RunSummary {
    pub fn from_metrics(config: &ExperimentConfig, counts: &ClassCounts, metrics: &[RoundMetrics]) -> Result<Self> {
        let last = metrics.last().ok_or(Error::Empty("round metrics"))?;
        let mut grad = BTreeMap::new();
        let mut feat = BTreeMap::new();
        for m in metrics {
            grad.extend(m.grad_dissim.iter().map(|(g, v)| (*g, *v)));
            feat.extend(m.feat_dissim.iter().map(|(g, v)| (*g, *v)));
        }
        let ckas: Vec<f64> = metrics.iter().filter_map(|m| m.cka_mean).collect();
        Ok(Self {
            method: config.method,
            seed: config.seed,
            rounds: metrics.len(),
            acc_all: last.acc_all,
            acc_many: last.acc_many,
            acc_medium: last.acc_medium,
            acc_few: last.acc_few,
            grad_dissim: grad,
            feat_dissim: feat,
            cka_final: last.cka_mean,
            cka_average: (!ckas.is_empty()).then(|| ckas.iter().sum::<f64>() / ckas.len() as f64),
            class_counts: counts.as_slice().to_vec(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub metrics: Vec<RoundMetrics>,
    pub summary: RunSummary,
    pub resolved: ExperimentConfig,
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Runs every round. With `out`, writes `metrics.jsonl` (one line per round,
/// flushed as rounds finish), `final.json` and `config.resolved.json`.
pub fn run(config: &ExperimentConfig, out: Option<&Path>) -> Result<RunOutput> {
    let mut sim = Simulation::new(config)?;
    let mut sink = match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            write_file(&dir.join(RESOLVED_CONFIG_FILE), &serde_json::to_string_pretty(&sim.config)?)?;
            let path = dir.join(METRICS_FILE);
            let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            Some((std::io::BufWriter::new(file), path))
        }
        None => None,
    };
    let metrics = sim.run(|m| {
        if let Some((w, path)) = sink.as_mut() {
            use std::io::Write;
            writeln!(w, "{}", m.to_json_line()?).and_then(|_| w.flush()).map_err(|e| Error::io(&*path, e))?;
        }
        log::info!(
            "round {} acc_all {:.4} few {:?} loss_grad {:?}",
            m.round,
            m.acc_all,
            m.acc_few,
            m.loss_grad
        );
        Ok(())
    })?;
    let summary = RunSummary::from_metrics(&sim.config, &sim.data.counts, &metrics)?;
    if let Some(dir) = out {
        write_file(&dir.join(SUMMARY_FILE), &serde_json::to_string_pretty(&summary)?)?;
    }
    Ok(RunOutput {
        metrics,
        summary,
        resolved: sim.config,
    })
}

/// [`run`] on a dedicated pool of `workers` threads.
#[cfg(feature = "parallel")]
pub fn run_with_workers(config: &ExperimentConfig, out: Option<&Path>, workers: usize) -> Result<RunOutput> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("cannot build worker pool: {e}")))?;
    pool.install(|| run(config, out))
}

/// Per-client per-class counts as CSV: a header, then one row per client.
pub fn partition_report(config: &ExperimentConfig) -> Result<String> {
    let data = prepare_data(config)?;
    let rows = dirichlet_partition_indices(&data.train, &partition_spec(config))?;
    let c = data.train.num_classes();
    let mut out = String::from("client");
    for name in data.train.class_names() {
        write!(out, ",{name}").expect("string write");
    }
    out.push('\n');
    for (k, idx) in rows.iter().enumerate() {
        let mut counts = vec![0usize; c];
        for &r in idx {
            counts[data.train.labels()[r]] += 1;
        }
        write!(out, "{k}").expect("string write");
        for n in counts {
            write!(out, ",{n}").expect("string write");
        }
        out.push('\n');
    }
    Ok(out)
}

/// Reads `final.json` from a run directory, checking `metrics.jsonl` parses.
pub fn read_run(dir: &Path) -> Result<RunSummary> {
    let metrics_path = dir.join(METRICS_FILE);
    let text = fs::read_to_string(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        serde_json::from_str::<RoundMetrics>(line)
            .map_err(|e| Error::Format(format!("{} line {}: {e}", metrics_path.display(), i + 1)))?;
    }
    let summary_path = dir.join(SUMMARY_FILE);
    let text = fs::read_to_string(&summary_path).map_err(|e| Error::io(&summary_path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", summary_path.display())))
}

/// Final accuracies per method, one column per run and the mean.
#[derive(Debug, Clone, PartialEq)]
pub struct CompareTable {
    pub methods: BTreeMap<String, Vec<RunSummary>>,
}

const COMPARE_COLUMNS: [&str; 4] = ["all", "many", "medium", "few"];

fn summary_value(s: &RunSummary, column: &str) -> Option<f64> {
    match column {
        "all" => Some(s.acc_all),
        "many" => s.acc_many,
        "medium" => s.acc_medium,
        "few" => s.acc_few,
        _ => None,
    }
}

impl CompareTable {
    pub fn mean(&self, method: &str, column: &str) -> Option<f64> {
        let runs = self.methods.get(method)?;
        let vals: Vec<f64> = runs.iter().filter_map(|s| summary_value(s, column)).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    /// Markdown table, accuracies in percent.
    pub fn render(&self) -> String {
        let width = self.methods.values().map(Vec::len).max().unwrap_or(0);
        let mut out = String::from("| method | metric |");
        for i in 0..width {
            write!(out, " run {} |", i + 1).expect("string write");
        }
        out.push_str(" mean |\n|---|---|");
        out.push_str(&"---|".repeat(width + 1));
        out.push('\n');
        let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{:.2}", 100.0 * x));
        for (method, runs) in &self.methods {
            for col in COMPARE_COLUMNS {
                write!(out, "| {method} | {col} |").expect("string write");
                for i in 0..width {
                    let v = runs.get(i).and_then(|s| summary_value(s, col));
                    write!(out, " {} |", cell(v)).expect("string write");
                }
                writeln!(out, " {} |", cell(self.mean(method, col))).expect("string write");
            }
            let seeds: Vec<String> = runs.iter().map(|s| s.seed.to_string()).collect();
            writeln!(out, "| {method} | seeds | {} |{}", seeds.join(" | "), " |".repeat(width + 1 - runs.len()))
                .expect("string write");
        }
        out
    }
}

pub fn compare(dirs: &[PathBuf]) -> Result<CompareTable> {
    if dirs.len() < 2 {
        return Err(Error::InvalidArgument("compare needs at least two run directories".into()));
    }
    let mut methods: BTreeMap<String, Vec<RunSummary>> = BTreeMap::new();
    for dir in dirs {
        let s = read_run(dir)?;
        methods.entry(s.method.as_str().to_string()).or_default().push(s);
    }
    Ok(CompareTable { methods })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_validate() {
        let cfg = ExperimentConfig::from_toml_str("", &[]).unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.round_config().synthesis.eta_pcl, 0.001);
    }

    #[test]
    fn unknown_field_is_a_config_error() {
        let err = ExperimentConfig::from_toml_str("[server]\nfractoin = 0.5\n", &[]).unwrap_err();
        assert!(matches!(&err, Error::Config(msg) if msg.contains("fractoin")), "{err}");
    }

    #[test]
    fn invalid_values_name_the_field() {
        let err = ExperimentConfig::from_toml_str("[training]\nrounds = 0\n", &[]).unwrap_err();
        assert!(err.to_string().contains("training.rounds"), "{err}");
        let err = ExperimentConfig::from_toml_str("method = \"fedprox\"\n", &[]).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn overrides_apply() {
        let cfg = ExperimentConfig::from_toml_str(
            "[server]\nfraction = 0.4\n",
            &["server.fraction=1.0".into(), "method=no_pcl".into(), "model.hidden=[8, 4]".into()],
        )
        .unwrap();
        assert_eq!(cfg.server.fraction, 1.0);
        assert_eq!(cfg.method, Method::NoPcl);
        assert_eq!(cfg.model.hidden, vec![8, 4]);
        assert!(ExperimentConfig::from_toml_str("", &["novalue".into()]).is_err());
    }

    #[test]
    fn resolved_config_echoes_method_overrides() {
        let cfg = ExperimentConfig { method: Method::NoKd, ..Default::default() }.resolved();
        assert_eq!(cfg.training.beta, 0.0);
        assert!(cfg.partition.seed.is_some());
        let cfg = ExperimentConfig { method: Method::NoPcl, ..Default::default() }.resolved();
        assert_eq!(cfg.server.eta_pcl, 0.0);
        assert_eq!(cfg.training.beta, 3.0);
    }

    #[test]
    fn desk_data_has_expected_shape() {
        let data = prepare_data(&ExperimentConfig::default()).unwrap();
        assert_eq!(data.counts.as_slice(), &[500, 300, 180, 108, 65, 39, 23, 14, 8, 5]);
        assert_eq!(data.train.class_histogram(), data.counts.as_slice());
        assert_eq!(data.test.class_histogram(), vec![100; 10]);
        assert_eq!(data.shards.len(), 20);
        assert_eq!(data.groups.classes_in(Group::Many), vec![0, 1, 2, 3]);
        assert_eq!(data.groups.classes_in(Group::Few), vec![7, 8, 9]);
    }

    #[test]
    fn partition_report_single_client() {
        let mut cfg = ExperimentConfig::default();
        cfg.partition.num_clients = 1;
        let csv = partition_report(&cfg).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[1], "0,500,300,180,108,65,39,23,14,8,5");
    }
}
