//! Experiment driver: configuration, trial orchestration, and
//! machine-readable outputs. A run is a pure function of (config,
//! root_seed) at the level of every emitted numeric value; only the
//! wall-clock column varies between executions.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::data::{load_images, load_labels, ImageSet, LabelSet};
use crate::error::{Error, Result};
use crate::fed::{sample_clients, FederationConfig, RoundPlan};
use crate::metrics::{
    summarize, threshold_key, RoundRecord, ThresholdStats, TrialSummary, THRESHOLDS,
};
use crate::nn::{self, MiniBatch, NetworkSpec};
use crate::partition::{iid_partition, shard_partition, FederatedPartition, PartitionKind};
use crate::rng::{trial_seed, TrialStreams};
use crate::server::{epochs_at, maybe_server_average, EpochDecayConfig, ModelHistory, ServerAveragingConfig};

/// Input files and the partition scheme applied to the training split.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DataConfig {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    #[serde(default = "default_partition")]
    pub partition: PartitionKind,
}

fn default_partition() -> PartitionKind {
    PartitionKind::NonIid
}

/// Network architecture; defaults to the MNIST 784-200-200-10 net.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub layer_sizes: Vec<usize>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            layer_sizes: vec![784, 200, 200, 10],
        }
    }
}

/// Epoch decay as configured on disk; the starting epoch count comes from
/// `federation.local_epochs`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct EpochDecaySection {
    pub enabled: bool,
    /// D: rounds between halvings.
    pub decay_interval: usize,
}

impl Default for EpochDecaySection {
    fn default() -> Self {
        Self {
            enabled: false,
            decay_interval: 100,
        }
    }
}

/// Trial count, seeding, and output location.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ExperimentSection {
    pub trials: usize,
    /// First trial index to run. Trial seeds depend only on (root_seed,
    /// absolute trial index), so disjoint offset ranges can run in
    /// separate processes and produce the same files as one combined run.
    pub trial_offset: usize,
    pub root_seed: u64,
    /// Evaluate every this many rounds (the final round always evaluates).
    pub eval_every: usize,
    pub out_dir: PathBuf,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            trials: 5,
            trial_offset: 0,
            root_seed: 42,
            eval_every: 1,
            out_dir: PathBuf::from("runs/out"),
        }
    }
}

/// Everything one `fedsim run` needs.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub federation: FederationConfig,
    #[serde(default)]
    pub server_averaging: ServerAveragingConfig,
    #[serde(default)]
    pub epoch_decay: EpochDecaySection,
    #[serde(default)]
    pub experiment: ExperimentSection,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config parse error: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.federation.validate()?;
        self.server_averaging.validate()?;
        self.decay_config().validate()?;
        NetworkSpec::new(self.network.layer_sizes.clone())?;
        if self.experiment.trials < 1 {
            return Err(Error::Config("experiment.trials must be >= 1".into()));
        }
        if self.experiment.eval_every < 1 {
            return Err(Error::Config("experiment.eval_every must be >= 1".into()));
        }
        if self.epoch_decay.decay_interval < 1 {
            return Err(Error::Config("epoch_decay.decay_interval must be >= 1".into()));
        }
        Ok(())
    }

    /// The runtime decay schedule, seeded with the federation's E.
    pub fn decay_config(&self) -> EpochDecayConfig {
        EpochDecayConfig {
            enabled: self.epoch_decay.enabled,
            initial_epochs: self.federation.local_epochs,
            decay_interval: self.epoch_decay.decay_interval,
        }
    }

    pub fn network_spec(&self) -> Result<NetworkSpec> {
        NetworkSpec::new(self.network.layer_sizes.clone())
    }
}

/// Command-line overrides applied on top of a config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    /// P: models averaged.
    pub p: Option<usize>,
    /// R: averaging period.
    pub r: Option<usize>,
    /// D: epoch-decay interval; 0 disables decay.
    pub decay_d: Option<usize>,
    pub trials: Option<usize>,
    pub trial_offset: Option<usize>,
    pub seed: Option<u64>,
    pub rounds: Option<usize>,
    pub out: Option<PathBuf>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(p) = self.p {
            cfg.server_averaging.models_averaged = p;
            cfg.server_averaging.enabled = true;
        }
        if let Some(r) = self.r {
            cfg.server_averaging.period = r;
            cfg.server_averaging.enabled = true;
        }
        if let Some(d) = self.decay_d {
            if d == 0 {
                cfg.epoch_decay.enabled = false;
            } else {
                cfg.epoch_decay.enabled = true;
                cfg.epoch_decay.decay_interval = d;
            }
        }
        if let Some(t) = self.trials {
            cfg.experiment.trials = t;
        }
        if let Some(o) = self.trial_offset {
            cfg.experiment.trial_offset = o;
        }
        if let Some(s) = self.seed {
            cfg.experiment.root_seed = s;
        }
        if let Some(n) = self.rounds {
            cfg.federation.max_rounds = n;
        }
        if let Some(ref o) = self.out {
            cfg.experiment.out_dir = o.clone();
        }
    }
}

/// Loaded train/test data, validated against the network shape.
pub struct LoadedData {
    pub train_images: ImageSet,
    pub train_labels: LabelSet,
    pub test_images: ImageSet,
    pub test_labels: LabelSet,
}

impl LoadedData {
    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        let train_images = load_images(&cfg.data.train_images)?;
        let train_labels = load_labels(&cfg.data.train_labels)?;
        let test_images = load_images(&cfg.data.test_images)?;
        let test_labels = load_labels(&cfg.data.test_labels)?;
        if train_images.count() != train_labels.count() {
            return Err(Error::Shape(format!(
                "train set: {} images but {} labels",
                train_images.count(),
                train_labels.count()
            )));
        }
        if test_images.count() != test_labels.count() {
            return Err(Error::Shape(format!(
                "test set: {} images but {} labels",
                test_images.count(),
                test_labels.count()
            )));
        }
        let spec = cfg.network_spec()?;
        for (name, images) in [("train", &train_images), ("test", &test_images)] {
            if images.dim() != spec.input_dim() {
                return Err(Error::Shape(format!(
                    "{name} images are {}-dimensional but the network expects {}",
                    images.dim(),
                    spec.input_dim()
                )));
            }
        }
        let out_dim = spec.output_dim();
        for (name, labels) in [("train", &train_labels), ("test", &test_labels)] {
            if let Some(&bad) = labels.labels().iter().find(|&&l| l as usize >= out_dim) {
                return Err(Error::Range(format!(
                    "{name} label {bad} outside network output range 0..{out_dim}"
                )));
            }
        }
        Ok(Self {
            train_images,
            train_labels,
            test_images,
            test_labels,
        })
    }
}

/// Report for one trial inside the summary JSON.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrialReport {
    pub trial: usize,
    pub seed: u64,
    pub rounds_run: usize,
    pub final_accuracy: f64,
    pub rounds_to: BTreeMap<String, Option<usize>>,
}

/// The machine-readable result of a whole experiment.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub trials: Vec<TrialReport>,
    pub thresholds: BTreeMap<String, ThresholdStats>,
}

impl ExperimentReport {
    pub fn write_file(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Format(format!("summary serialize failed: {e}")))?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn read_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("summary parse error in {}: {e}", path.display())))
    }
}

/// Builds the partition for one trial according to the configured scheme.
fn build_partition(
    cfg: &ExperimentConfig,
    train_labels: &LabelSet,
    streams: &TrialStreams,
) -> Result<FederatedPartition> {
    match cfg.data.partition {
        PartitionKind::NonIid => shard_partition(
            train_labels,
            cfg.federation.n_clients,
            streams.partition_seed(),
        ),
        PartitionKind::Iid => iid_partition(
            train_labels.count(),
            cfg.federation.n_clients,
            streams.partition_seed(),
        ),
    }
}

/// Runs one trial: partition, init, round loop with policies, evaluation.
/// Pure in (config, trial seed) except for the wall-clock fields.
pub fn run_trial(
    cfg: &ExperimentConfig,
    data: &LoadedData,
    test_batch: &MiniBatch,
    trial: usize,
) -> Result<(TrialSummary, FederatedPartition)> {
    let spec = cfg.network_spec()?;
    let fed = &cfg.federation;
    let sa_cfg = &cfg.server_averaging;
    let decay_cfg = cfg.decay_config();
    let streams = TrialStreams::new(trial_seed(cfg.experiment.root_seed, trial));

    let partition = build_partition(cfg, &data.train_labels, &streams)?;
    let mut model = nn::init_params(&spec, streams.init_seed());
    let mut history = ModelHistory::new(sa_cfg.history_capacity());
    let mut records = Vec::new();
    let mut cumulative_units = 0.0;

    for t in 1..=fed.max_rounds {
        let started = Instant::now();
        let e_t = epochs_at(t, &decay_cfg);
        cumulative_units += e_t;

        let mut sampling = streams.sampling_rng(t);
        let selected = sample_clients(&mut sampling, fed.n_clients, fed.clients_per_round)?;
        let plan = RoundPlan {
            round: t,
            selected,
            epochs: e_t,
        };
        let outcome = crate::fed::run_round(
            &model,
            &plan,
            &partition,
            &data.train_images,
            &data.train_labels,
            &spec,
            fed,
            &streams,
        )?;

        history.push(t, outcome.model.clone())?;
        let mut broadcast = outcome.model;
        let mut applied = false;
        if let Some(avg) = maybe_server_average(&mut history, t, sa_cfg) {
            broadcast = avg;
            applied = true;
        }
        model = broadcast;
        if !model.is_finite() {
            return Err(Error::Divergence { trial, round: t });
        }

        if t % cfg.experiment.eval_every == 0 || t == fed.max_rounds {
            let accuracy = nn::evaluate(&model, &spec, test_batch)?;
            let wall_ms = started.elapsed().as_millis() as u64;
            log::debug!(
                "trial {trial} round {t}: accuracy {accuracy:.4}, E_t {e_t}, avg {applied}"
            );
            records.push(RoundRecord {
                round: t,
                test_accuracy: accuracy,
                mean_train_loss: outcome.mean_train_loss,
                epochs_used: e_t,
                cumulative_epoch_units: cumulative_units,
                server_avg_applied: applied,
                wall_ms,
            });
        }
    }

    let summary = TrialSummary::from_records(streams.trial_seed(), records)?;
    Ok((summary, partition))
}

/// CSV header for per-trial traces.
pub const CSV_HEADER: &str =
    "round,test_accuracy,mean_train_loss,epochs_used,cumulative_epoch_units,server_avg_applied,wall_ms";

/// Writes one trial's rounds as CSV. Accuracy and loss use 6 decimal
/// places; epoch columns use shortest round-trip formatting.
pub fn write_trial_csv(path: &Path, records: &[RoundRecord]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let write = |w: &mut std::io::BufWriter<std::fs::File>, s: String| {
        w.write_all(s.as_bytes()).map_err(|e| Error::io(path, e))
    };
    write(&mut w, format!("{CSV_HEADER}\n"))?;
    for r in records {
        write(
            &mut w,
            format!(
                "{},{:.6},{:.6},{},{},{},{}\n",
                r.round,
                r.test_accuracy,
                r.mean_train_loss,
                r.epochs_used,
                r.cumulative_epoch_units,
                r.server_avg_applied,
                r.wall_ms
            ),
        )?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn trial_csv_path(out_dir: &Path, trial: usize) -> PathBuf {
    out_dir.join(format!("trial_{trial:03}.csv"))
}

fn trial_manifest_path(out_dir: &Path, trial: usize) -> PathBuf {
    out_dir.join(format!("trial_{trial:03}.partition.txt"))
}

/// Runs every trial, writes per-trial CSVs, partition manifests, and the
/// summary JSON, and returns the assembled report.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let data = LoadedData::load(cfg)?;
    let out_dir = &cfg.experiment.out_dir;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let test_batch = MiniBatch::new(
        data.test_images.pixels().to_vec(),
        data.test_labels.labels().to_vec(),
        data.test_images.dim(),
    )?;

    let mut summaries = Vec::new();
    let mut trial_reports = Vec::new();
    let first = cfg.experiment.trial_offset;
    for trial in first..first + cfg.experiment.trials {
        let started = Instant::now();
        let (summary, partition) = run_trial(cfg, &data, &test_batch, trial)?;
        write_trial_csv(&trial_csv_path(out_dir, trial), &summary.records)?;
        partition.write_manifest_file(trial_manifest_path(out_dir, trial))?;
        let last = summary.records.last().expect("max_rounds >= 1");
        log::info!(
            "trial {trial}: {} rounds, final accuracy {:.4} ({:.1}s)",
            last.round,
            last.test_accuracy,
            started.elapsed().as_secs_f64()
        );
        trial_reports.push(TrialReport {
            trial,
            seed: summary.seed,
            rounds_run: last.round,
            final_accuracy: last.test_accuracy,
            rounds_to: summary.rounds_to_map(),
        });
        summaries.push(summary);
    }

    let thresholds = THRESHOLDS
        .iter()
        .map(|&a| Ok((threshold_key(a), summarize(&summaries, a)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;

    let report = ExperimentReport {
        config: cfg.clone(),
        trials: trial_reports,
        thresholds,
    };
    report.write_file(out_dir.join("summary.json"))?;
    Ok(report)
}

/// Which run reached a threshold first (smaller mean T_a).
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FirstToReach {
    A,
    B,
    Tie,
    Incomparable,
}

/// Per-threshold comparison of two runs.
#[derive(Debug, Clone, serde::Serialize)]
pub struct CompareEntry {
    pub threshold: String,
    pub mean_a: Option<f64>,
    pub mean_b: Option<f64>,
    /// mean_b - mean_a; negative means run B reached the threshold sooner.
    pub delta_mean: Option<f64>,
    /// Pooled standard deviation of the two samples, when defined.
    pub pooled_std: Option<f64>,
    pub first: FirstToReach,
}

/// Delta table between two experiment reports.
#[derive(Debug, Clone, serde::Serialize)]
pub struct RunComparison {
    pub entries: Vec<CompareEntry>,
}

/// Compares per-threshold means of two runs (B relative to A). Thresholds
/// absent from either report are skipped; having none in common is a
/// config error.
pub fn compare_runs(a: &ExperimentReport, b: &ExperimentReport) -> Result<RunComparison> {
    let common: Vec<&String> = a
        .thresholds
        .keys()
        .filter(|k| b.thresholds.contains_key(*k))
        .collect();
    if common.is_empty() {
        return Err(Error::Config(
            "reports share no accuracy thresholds to compare".into(),
        ));
    }
    let entries = common
        .into_iter()
        .map(|key| {
            let sa = &a.thresholds[key];
            let sb = &b.thresholds[key];
            let (delta_mean, first) = match (sa.mean, sb.mean) {
                (Some(ma), Some(mb)) => {
                    let first = if mb < ma {
                        FirstToReach::B
                    } else if ma < mb {
                        FirstToReach::A
                    } else {
                        FirstToReach::Tie
                    };
                    (Some(mb - ma), first)
                }
                _ => (None, FirstToReach::Incomparable),
            };
            let pooled_std = pooled_std(sa, sb);
            CompareEntry {
                threshold: key.clone(),
                mean_a: sa.mean,
                mean_b: sb.mean,
                delta_mean,
                pooled_std,
                first,
            }
        })
        .collect();
    Ok(RunComparison { entries })
}

fn pooled_std(a: &ThresholdStats, b: &ThresholdStats) -> Option<f64> {
    let (sa, sb) = (a.std?, b.std?);
    let (na, nb) = (a.reached, b.reached);
    if na + nb < 3 {
        return None;
    }
    let num = (na.saturating_sub(1)) as f64 * sa * sa + (nb.saturating_sub(1)) as f64 * sb * sb;
    Some((num / (na + nb - 2) as f64).sqrt())
}

impl std::fmt::Display for RunComparison {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "{:<10} {:>10} {:>10} {:>10} {:>12} {:>14}",
            "threshold", "mean_a", "mean_b", "delta", "pooled_std", "first_to_reach"
        )?;
        let fmt_opt = |v: Option<f64>| match v {
            Some(x) => format!("{x:.2}"),
            None => "-".to_string(),
        };
        for e in &self.entries {
            writeln!(
                f,
                "{:<10} {:>10} {:>10} {:>10} {:>12} {:>14}",
                e.threshold,
                fmt_opt(e.mean_a),
                fmt_opt(e.mean_b),
                fmt_opt(e.delta_mean),
                fmt_opt(e.pooled_std),
                match e.first {
                    FirstToReach::A => "a",
                    FirstToReach::B => "b",
                    FirstToReach::Tie => "tie",
                    FirstToReach::Incomparable => "incomparable",
                }
            )?;
        }
        Ok(())
    }
}
