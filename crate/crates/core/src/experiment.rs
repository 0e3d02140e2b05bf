//! Experiment configuration, single runs, sweeps, dataset verification and
//! report rendering. The `dynamoe` binary is a thin shell over this module.
//!
//! A run directory holds:
//!
//! - `config.toml`: the resolved configuration with every default filled in
//!   and paths made absolute; running it again reproduces the run.
//! - `metrics.jsonl`: one [`EpochMetrics`] record per line.
//! - `model.ckpt`: the final weights (see [`crate::checkpoint`]).
//! - `summary.txt` / `summary.json`: the final tables and their data.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::analysis::{
    efficiency, epochs_to_fraction, format_comparison_table, format_usage_table, grad_variance_probe,
    ComparisonRow, LayerUsageStats, ProbeResult,
};
use crate::checkpoint;
use crate::data::{load_cifar10, load_idx, make_synthetic_with_variance, Dataset, SYNTHETIC_VARIANCE};
use crate::error::{Error, Result};
use crate::nn::{Baseline, Model, ModelConfig, SizePreset};
use crate::routing::{RoutingConfig, RoutingMode};
use crate::schedules::{ScheduleKind, ScheduleSpec};
use crate::train::{fit_with, EpochMetrics, FitOptions, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetName {
    Mnist,
    FashionMnist,
    Cifar10,
    Synthetic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub name: DatasetName,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_images: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_labels: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_images: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_labels: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub train_batches: Vec<PathBuf>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub test_batches: Vec<PathBuf>,
    /// Cap on evaluation samples (the first `n` of the test split).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_subset_size: Option<usize>,
    /// Synthetic-only settings.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSection>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSection {
    pub train_samples: usize,
    pub test_samples: usize,
    pub input_dim: usize,
    pub num_classes: usize,
    #[serde(default = "default_variance")]
    pub variance: f64,
}

fn default_variance() -> f64 {
    SYNTHETIC_VARIANCE
}

/// Model architecture as written in a config file. Input width and class
/// count come from the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub size: SizePreset,
    /// A schedule kind, or `mlp` for the dense baseline.
    pub schedule: String,
    #[serde(default = "default_n_max")]
    pub n_max: usize,
    #[serde(default = "default_n_min")]
    pub n_min: usize,
    #[serde(default = "default_expert_expansion")]
    pub expert_expansion: f64,
    #[serde(default = "default_dense_expansion")]
    pub dense_expansion: f64,
    #[serde(default)]
    pub routing: RoutingConfig,
}

fn default_n_max() -> usize {
    8
}
fn default_n_min() -> usize {
    1
}
fn default_expert_expansion() -> f64 {
    0.5
}
fn default_dense_expansion() -> f64 {
    2.0
}

impl ModelSection {
    /// `None` for the dense baseline.
    pub fn schedule_kind(&self) -> Result<Option<ScheduleKind>> {
        if self.schedule.eq_ignore_ascii_case("mlp") {
            return Ok(None);
        }
        self.schedule
            .parse()
            .map(Some)
            .map_err(|e: Error| Error::config("model.schedule", e.to_string()))
    }

    pub fn to_model_config(&self, input_dim: usize, num_classes: usize) -> Result<ModelConfig> {
        let kind = self.schedule_kind()?;
        let cfg = ModelConfig {
            size: self.size,
            schedule: ScheduleSpec {
                kind: kind.unwrap_or(ScheduleKind::Uniform),
                n_max: if kind.is_some() { self.n_max } else { 1 },
                n_min: if kind.is_some() { self.n_min } else { 1 },
                layers: self.size.layers(),
            },
            routing: self.routing,
            input_dim,
            num_classes,
            expert_expansion: self.expert_expansion,
            dense_expansion: self.dense_expansion,
            baseline: if kind.is_some() { Baseline::Dynamoe } else { Baseline::DenseMlp },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSection {
    /// Batches for the gate-gradient variance probe; 0 disables it.
    #[serde(default = "default_probe_batches")]
    pub probe_batches: usize,
    /// `K` of the Top-K mode the probe compares against.
    #[serde(default = "default_probe_topk")]
    pub probe_topk: usize,
}

fn default_probe_batches() -> usize {
    4
}
fn default_probe_topk() -> usize {
    2
}

impl Default for AnalysisSection {
    fn default() -> Self {
        AnalysisSection {
            probe_batches: default_probe_batches(),
            probe_topk: default_probe_topk(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Drop wall-clock fields so reruns produce byte-identical metrics.
    #[serde(default)]
    pub reproducible: bool,
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    #[serde(default)]
    pub analysis: AnalysisSection,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/latest")
}

/// Command-line overrides applied on top of a config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub output_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub subset_size: Option<usize>,
    pub epochs: Option<usize>,
    pub reproducible: bool,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            // Map serde's "missing field `x`" to the config-field form.
            let field = msg
                .split('`')
                .nth(1)
                .map_or_else(|| "<root>".to_string(), str::to_string);
            Error::config(field, msg)
        })
    }

    /// Reads a config file, resolving relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::from_toml(&text)?;
        let parent = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let base = std::path::absolute(parent).map_err(io_err(parent))?;
        cfg.resolve_paths(&base);
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(dir) = &o.output_dir {
            self.output_dir = dir.clone();
        }
        if let Some(seed) = o.seed {
            self.train.seed = seed;
        }
        if let Some(n) = o.subset_size {
            self.train.subset_size = Some(n);
        }
        if let Some(e) = o.epochs {
            self.train.epochs = e;
        }
        self.reproducible |= o.reproducible;
    }

    fn resolve_paths(&mut self, base: &Path) {
        let abs = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        abs(&mut self.output_dir);
        let d = &mut self.dataset;
        for p in [&mut d.train_images, &mut d.train_labels, &mut d.test_images, &mut d.test_labels]
            .into_iter()
            .flatten()
        {
            abs(p);
        }
        d.train_batches.iter_mut().chain(d.test_batches.iter_mut()).for_each(abs);
    }

    /// Field-level validation, including that every referenced file exists.
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.model.schedule_kind()?;
        self.model.routing.validate()?;
        if self.dataset.test_subset_size == Some(0) {
            return Err(Error::config("dataset.test_subset_size", "must be at least 1"));
        }
        let d = &self.dataset;
        let need = |field: &str, p: &Option<PathBuf>| -> Result<()> {
            match p {
                None => Err(Error::config(
                    format!("dataset.{field}"),
                    format!("required for the {:?} dataset", d.name),
                )),
                Some(p) if !p.is_file() => Err(Error::config(
                    format!("dataset.{field}"),
                    format!("file not found: {}", p.display()),
                )),
                Some(_) => Ok(()),
            }
        };
        match d.name {
            DatasetName::Mnist | DatasetName::FashionMnist => {
                need("train_images", &d.train_images)?;
                need("train_labels", &d.train_labels)?;
                need("test_images", &d.test_images)?;
                need("test_labels", &d.test_labels)?;
            }
            DatasetName::Cifar10 => {
                for (field, list) in [("train_batches", &d.train_batches), ("test_batches", &d.test_batches)] {
                    if list.is_empty() {
                        return Err(Error::config(format!("dataset.{field}"), "at least one file required"));
                    }
                    for p in list {
                        if !p.is_file() {
                            return Err(Error::config(
                                format!("dataset.{field}"),
                                format!("file not found: {}", p.display()),
                            ));
                        }
                    }
                }
            }
            DatasetName::Synthetic => {
                let s = d
                    .synthetic
                    .as_ref()
                    .ok_or_else(|| Error::config("dataset.synthetic", "required for the synthetic dataset"))?;
                if s.train_samples < s.num_classes || s.test_samples < s.num_classes {
                    return Err(Error::config(
                        "dataset.synthetic",
                        "train_samples and test_samples must be at least num_classes",
                    ));
                }
            }
        }
        Ok(())
    }

    /// Loads `(train, test)` splits.
    pub fn load_data(&self) -> Result<(Dataset, Dataset)> {
        let d = &self.dataset;
        let (train, test) = match d.name {
            DatasetName::Mnist | DatasetName::FashionMnist => {
                let p = |o: &Option<PathBuf>| o.clone().expect("validated");
                (
                    load_idx(&p(&d.train_images), &p(&d.train_labels))?,
                    load_idx(&p(&d.test_images), &p(&d.test_labels))?,
                )
            }
            DatasetName::Cifar10 => (load_cifar10(&d.train_batches)?, load_cifar10(&d.test_batches)?),
            DatasetName::Synthetic => {
                let s = d.synthetic.as_ref().expect("validated");
                // Train and test draw from the same class means with
                // independent noise.
                let seed = self.train.seed;
                (
                    make_synthetic_with_variance(s.train_samples, s.input_dim, s.num_classes, seed, s.variance)?,
                    make_synthetic_with_variance(
                        s.test_samples,
                        s.input_dim,
                        s.num_classes,
                        seed ^ 0x7465_7374,
                        s.variance,
                    )?,
                )
            }
        };
        let test = match d.test_subset_size {
            Some(n) => test.take(n),
            None => test,
        };
        if train.input_dim() != test.input_dim() {
            return Err(Error::Domain(format!(
                "train inputs have {} features, test inputs {}",
                train.input_dim(),
                test.input_dim()
            )));
        }
        Ok((train, test))
    }
}

/// Everything a finished run reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub label: String,
    pub dataset: DatasetName,
    pub seed: u64,
    pub params: usize,
    pub expert_counts: Vec<usize>,
    pub epochs: usize,
    pub final_val_accuracy: f64,
    pub final_val_loss: f64,
    pub efficiency: f64,
    pub epochs_to_95: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_seconds: Option<f64>,
    pub usage: Vec<LayerUsageStats>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub grad_variance: Vec<ProbeResult>,
    pub accuracy_curve: Vec<f64>,
}

impl RunSummary {
    pub fn row(&self) -> ComparisonRow {
        ComparisonRow {
            label: self.label.clone(),
            params: self.params,
            accuracy_pct: 100.0 * self.final_val_accuracy,
            efficiency: self.efficiency,
            epochs_to_95: self.epochs_to_95,
            wall_seconds: self.wall_seconds,
        }
    }

    pub fn render(&self) -> String {
        let mut s = format!(
            "{} on {:?}, seed {}, {} epochs\n\n",
            self.label, self.dataset, self.seed, self.epochs
        );
        s.push_str(&format_comparison_table(&[self.row()]));
        s.push_str("\nexpert usage on the val/test split\n");
        s.push_str(&format_usage_table(&self.usage));
        if !self.grad_variance.is_empty() {
            s.push_str("\ngate-gradient variance probe\n");
            for p in &self.grad_variance {
                s.push_str(&format!(
                    "{:<22} variance={:.3e}  routing entropy={:.3} bits\n",
                    mode_label(p.mode),
                    p.mean_variance,
                    p.routing_entropy_bits
                ));
            }
        }
        s
    }
}

fn mode_label(mode: RoutingMode) -> String {
    match mode {
        RoutingMode::DynamicPerToken => "dynamic".into(),
        RoutingMode::DynamicBatch => "dynamic (batch)".into(),
        RoutingMode::FixedTopk(k) => format!("fixed top-{k}"),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(io_err(path))
}

/// Trains, evaluates and analyses one configuration, writing all artifacts
/// into `cfg.output_dir`.
pub fn run(cfg: &ExperimentConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let started = Instant::now();
    let out = &cfg.output_dir;
    fs::create_dir_all(out).map_err(io_err(out))?;
    write_file(&out.join("config.toml"), cfg.to_toml().as_bytes())?;

    let (train, test) = cfg.load_data()?;
    let model_cfg = cfg.model.to_model_config(train.input_dim(), train.num_classes.max(test.num_classes))?;
    let mut model = Model::new(model_cfg, cfg.train.seed)?;

    let metrics_path = out.join("metrics.jsonl");
    let mut metrics_file = fs::File::create(&metrics_path).map_err(io_err(&metrics_path))?;
    let opts = FitOptions {
        timing: !cfg.reproducible,
    };
    let history = fit_with(&mut model, &train, &test, &cfg.train, opts, |m: &EpochMetrics| {
        let line = serde_json::to_string(m).expect("metrics serialize");
        writeln!(metrics_file, "{line}").map_err(io_err(&metrics_path))
    })?;
    drop(metrics_file);

    checkpoint::save(&out.join("model.ckpt"), &model, cfg.train.seed, history.len())?;

    let grad_variance = if model.config.baseline == Baseline::Dynamoe && cfg.analysis.probe_batches >= 2 {
        let available = test.len().div_ceil(cfg.train.batch_size);
        let n = cfg.analysis.probe_batches.min(available);
        if n >= 2 {
            let modes = [RoutingMode::DynamicPerToken, RoutingMode::FixedTopk(cfg.analysis.probe_topk.max(1))];
            grad_variance_probe(&model, &test, &modes, n, cfg.train.batch_size, cfg.train.seed)?
        } else {
            Vec::new()
        }
    } else {
        Vec::new()
    };

    let last = history.last().expect("at least one epoch");
    let curve: Vec<f64> = history.iter().map(|m| m.val_accuracy).collect();
    let params = model.param_count();
    let summary = RunSummary {
        label: model.config.label(),
        dataset: cfg.dataset.name,
        seed: cfg.train.seed,
        params,
        expert_counts: model.expert_counts(),
        epochs: history.len(),
        final_val_accuracy: last.val_accuracy,
        final_val_loss: last.val_loss,
        efficiency: efficiency(100.0 * last.val_accuracy, params)?,
        epochs_to_95: epochs_to_fraction(&curve, 0.95).expect("non-empty"),
        wall_seconds: (!cfg.reproducible).then(|| started.elapsed().as_secs_f64()),
        usage: last.per_layer_usage.clone(),
        grad_variance,
        accuracy_curve: curve,
    };
    write_file(&out.join("summary.txt"), summary.render().as_bytes())?;
    write_file(
        &out.join("summary.json"),
        serde_json::to_string_pretty(&summary).expect("summary serializes").as_bytes(),
    )?;
    Ok(summary)
}

/// Reads back a metrics stream.
pub fn read_metrics(path: &Path) -> Result<Vec<EpochMetrics>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::format(path, format!("line {}: {e}", i + 1))))
        .collect()
}

/// What a sweep varies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// Schedule kinds, or `mlp`.
    Schedules(Vec<String>),
    /// `(n_max, n_min)` pairs, keeping the base schedule kind.
    Experts(Vec<(usize, usize)>),
}

impl SweepAxis {
    pub fn len(&self) -> usize {
        match self {
            SweepAxis::Schedules(v) => v.len(),
            SweepAxis::Experts(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn variants(&self, base: &ExperimentConfig) -> Vec<(String, ExperimentConfig)> {
        match self {
            SweepAxis::Schedules(kinds) => kinds
                .iter()
                .map(|k| {
                    let mut c = base.clone();
                    c.model.schedule = k.clone();
                    (k.to_ascii_lowercase().replace('-', "_"), c)
                })
                .collect(),
            SweepAxis::Experts(pairs) => pairs
                .iter()
                .map(|&(hi, lo)| {
                    let mut c = base.clone();
                    c.model.n_max = hi;
                    c.model.n_min = lo;
                    (format!("E{hi}-{lo}"), c)
                })
                .collect(),
        }
    }
}

/// A sweep variant averaged over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub variant: String,
    pub label: String,
    pub params: usize,
    pub seeds: Vec<u64>,
    pub accuracies: Vec<f64>,
    pub mean_accuracy: f64,
    pub efficiency: f64,
    pub mean_epochs_to_95: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_wall_seconds: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepFailure {
    pub variant: String,
    pub seed: u64,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub axis: SweepAxis,
    /// Ranked by mean accuracy, best first.
    pub rows: Vec<SweepRow>,
    pub failures: Vec<SweepFailure>,
}

impl SweepReport {
    pub fn render(&self) -> String {
        let rows: Vec<ComparisonRow> = self
            .rows
            .iter()
            .map(|r| ComparisonRow {
                label: r.label.clone(),
                params: r.params,
                accuracy_pct: 100.0 * r.mean_accuracy,
                efficiency: r.efficiency,
                epochs_to_95: r.mean_epochs_to_95.round() as usize,
                wall_seconds: r.mean_wall_seconds,
            })
            .collect();
        let mut s = format_comparison_table(&rows);
        if let Some(first) = self.rows.first() {
            if first.seeds.len() > 1 {
                s.push_str(&format!("\nmeans over seeds {:?}\n", first.seeds));
            }
        }
        for f in &self.failures {
            s.push_str(&format!("FAILED {} (seed {}): {}\n", f.variant, f.seed, f.error));
        }
        s
    }
}

/// Runs every variant of `axis` for every seed under `base`, each in its
/// own subdirectory of `base.output_dir`. Failed members are recorded and
/// the sweep carries on.
pub fn sweep(base: &ExperimentConfig, axis: &SweepAxis, seeds: &[u64]) -> Result<SweepReport> {
    if axis.is_empty() {
        return Err(Error::config("sweep.axis", "no variants to run"));
    }
    let seeds: Vec<u64> = if seeds.is_empty() { vec![base.train.seed] } else { seeds.to_vec() };
    let root = &base.output_dir;
    fs::create_dir_all(root).map_err(io_err(root))?;

    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (variant, cfg) in axis.variants(base) {
        let mut runs: Vec<RunSummary> = Vec::new();
        for &seed in &seeds {
            let mut c = cfg.clone();
            c.train.seed = seed;
            c.output_dir = root.join(&variant).join(format!("seed-{seed}"));
            match run(&c) {
                Ok(s) => runs.push(s),
                Err(e) => failures.push(SweepFailure {
                    variant: variant.clone(),
                    seed,
                    error: e.to_string(),
                }),
            }
        }
        if runs.is_empty() {
            continue;
        }
        let n = runs.len() as f64;
        let accuracies: Vec<f64> = runs.iter().map(|r| r.final_val_accuracy).collect();
        let mean_accuracy = accuracies.iter().sum::<f64>() / n;
        let params = runs[0].params;
        let walls: Option<Vec<f64>> = runs.iter().map(|r| r.wall_seconds).collect();
        rows.push(SweepRow {
            variant,
            label: runs[0].label.clone(),
            params,
            seeds: runs.iter().map(|r| r.seed).collect(),
            accuracies,
            mean_accuracy,
            efficiency: efficiency(100.0 * mean_accuracy, params)?,
            mean_epochs_to_95: runs.iter().map(|r| r.epochs_to_95 as f64).sum::<f64>() / n,
            mean_wall_seconds: walls.map(|w| w.iter().sum::<f64>() / n),
        });
    }
    rows.sort_by(|a, b| {
        b.mean_accuracy
            .total_cmp(&a.mean_accuracy)
            .then_with(|| a.variant.cmp(&b.variant))
    });
    let report = SweepReport {
        axis: axis.clone(),
        rows,
        failures,
    };
    write_file(&root.join("sweep.txt"), report.render().as_bytes())?;
    write_file(
        &root.join("sweep.json"),
        serde_json::to_string_pretty(&report).expect("report serializes").as_bytes(),
    )?;
    Ok(report)
}

/// Renders the report for a run or sweep directory from its JSON export.
pub fn report(dir: &Path) -> Result<String> {
    let sweep_path = dir.join("sweep.json");
    if sweep_path.is_file() {
        let text = fs::read_to_string(&sweep_path).map_err(io_err(&sweep_path))?;
        let r: SweepReport = serde_json::from_str(&text).map_err(|e| Error::format(&sweep_path, e.to_string()))?;
        return Ok(r.render());
    }
    let run_path = dir.join("summary.json");
    let text = fs::read_to_string(&run_path).map_err(io_err(&run_path))?;
    let s: RunSummary = serde_json::from_str(&text).map_err(|e| Error::format(&run_path, e.to_string()))?;
    Ok(s.render())
}

/// Published file sizes for the standard distributions.
pub fn published_sizes(name: DatasetName) -> BTreeMap<&'static str, u64> {
    let list: &[(&str, u64)] = match name {
        DatasetName::Mnist => &[
            ("train-images-idx3-ubyte.gz", 9_912_422),
            ("train-labels-idx1-ubyte.gz", 28_881),
            ("t10k-images-idx3-ubyte.gz", 1_648_877),
            ("t10k-labels-idx1-ubyte.gz", 4_542),
            ("train-images-idx3-ubyte", 47_040_016),
            ("train-labels-idx1-ubyte", 60_008),
            ("t10k-images-idx3-ubyte", 7_840_016),
            ("t10k-labels-idx1-ubyte", 10_008),
        ],
        DatasetName::FashionMnist => &[
            ("train-images-idx3-ubyte.gz", 26_421_880),
            ("train-labels-idx1-ubyte.gz", 29_515),
            ("t10k-images-idx3-ubyte.gz", 4_422_102),
            ("t10k-labels-idx1-ubyte.gz", 5_148),
            ("train-images-idx3-ubyte", 47_040_016),
            ("train-labels-idx1-ubyte", 60_008),
            ("t10k-images-idx3-ubyte", 7_840_016),
            ("t10k-labels-idx1-ubyte", 10_008),
        ],
        DatasetName::Cifar10 => &[
            ("data_batch_1.bin", 30_730_000),
            ("data_batch_2.bin", 30_730_000),
            ("data_batch_3.bin", 30_730_000),
            ("data_batch_4.bin", 30_730_000),
            ("data_batch_5.bin", 30_730_000),
            ("test_batch.bin", 30_730_000),
        ],
        DatasetName::Synthetic => &[],
    };
    list.iter().copied().collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FileStatus {
    /// Present with the published size.
    Ok,
    /// Present and parseable, but not the published size (e.g. a subset).
    SizeMismatch { expected: u64, actual: u64 },
    /// Present and parseable; the name has no published size.
    Unlisted,
    Missing,
    Corrupt(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileCheck {
    pub path: PathBuf,
    pub status: FileStatus,
    /// Records found, when the file parsed.
    pub records: Option<usize>,
}

/// Checks that a dataset's files exist, parse, and (when they carry a
/// standard name) have the published byte length. Does not download.
pub fn verify_data(name: DatasetName, files: &[PathBuf]) -> Vec<FileCheck> {
    let sizes = published_sizes(name);
    files
        .iter()
        .map(|path| {
            let Ok(meta) = fs::metadata(path) else {
                return FileCheck {
                    path: path.clone(),
                    status: FileStatus::Missing,
                    records: None,
                };
            };
            let parsed = match name {
                DatasetName::Cifar10 => {
                    crate::data::read_maybe_gz(path).and_then(|b| {
                        if b.len() % crate::data::CIFAR_RECORD == 0 {
                            Ok(b.len() / crate::data::CIFAR_RECORD)
                        } else {
                            Err(Error::format(path, "length is not a multiple of 3073"))
                        }
                    })
                }
                _ => crate::data::read_maybe_gz(path).and_then(|b| {
                    let h = crate::data::parse_idx_header(&b, path)?;
                    let per: usize = h.dims[1..].iter().product();
                    if b.len() - h.header_len != h.dims[0] * per {
                        return Err(Error::format(path, "payload length disagrees with header"));
                    }
                    Ok(h.dims[0])
                }),
            };
            let fname = path.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
            let status = match &parsed {
                Err(e) => FileStatus::Corrupt(e.to_string()),
                Ok(_) => match sizes.get(fname.as_str()) {
                    Some(&expected) if expected == meta.len() => FileStatus::Ok,
                    Some(&expected) => FileStatus::SizeMismatch {
                        expected,
                        actual: meta.len(),
                    },
                    None => FileStatus::Unlisted,
                },
            };
            FileCheck {
                path: path.clone(),
                status,
                records: parsed.ok(),
            }
        })
        .collect()
}

/// All data files a config refers to.
pub fn dataset_files(d: &DatasetSection) -> Vec<PathBuf> {
    [&d.train_images, &d.train_labels, &d.test_images, &d.test_labels]
        .into_iter()
        .flatten()
        .cloned()
        .chain(d.train_batches.iter().cloned())
        .chain(d.test_batches.iter().cloned())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic_toml(out: &Path) -> String {
        format!(
            r#"
output_dir = "{}"
reproducible = true

[dataset]
name = "synthetic"
synthetic = {{ train_samples = 96, test_samples = 48, input_dim = 8, num_classes = 3 }}

[model]
size = "tiny"
schedule = "descending"
n_max = 4
n_min = 1

[train]
epochs = 2
batch_size = 32
seed = 7
"#,
            out.display()
        )
    }

    #[test]
    fn missing_seed_is_a_field_error() {
        let text = synthetic_toml(Path::new("x")).replace("seed = 7\n", "");
        let err = ExperimentConfig::from_toml(&text).unwrap_err().to_string();
        assert!(err.contains("seed"), "{err}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = synthetic_toml(Path::new("x")).replace("epochs = 2", "epochs = 2\nepoch = 3");
        assert!(ExperimentConfig::from_toml(&text).unwrap_err().to_string().contains("epoch"));
    }

    #[test]
    fn missing_path_names_the_field() {
        let text = r#"
[dataset]
name = "mnist"
train_images = "/nonexistent/train-images-idx3-ubyte.gz"
[model]
size = "small"
schedule = "descending"
[train]
seed = 1
"#;
        let cfg = ExperimentConfig::from_toml(text).unwrap();
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("dataset.train_images"), "{err}");
    }

    #[test]
    fn run_writes_artifacts_and_echo_reproduces() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::from_toml(&synthetic_toml(&dir.path().join("a"))).unwrap();
        let s = run(&cfg).unwrap();
        let out = dir.path().join("a");
        assert_eq!(read_metrics(&out.join("metrics.jsonl")).unwrap().len(), 2);
        assert_eq!(s.expert_counts, vec![4, 1]);
        assert_eq!(s.grad_variance.len(), 2);
        assert!(checkpoint::load(&out.join("model.ckpt")).is_ok());

        let mut echoed = ExperimentConfig::load(&out.join("config.toml")).unwrap();
        assert_eq!(echoed, cfg);
        echoed.output_dir = dir.path().join("b");
        run(&echoed).unwrap();
        let a = fs::read(out.join("metrics.jsonl")).unwrap();
        let b = fs::read(dir.path().join("b/metrics.jsonl")).unwrap();
        assert_eq!(a, b);
        assert!(report(&out).unwrap().contains("descending E4-1"));
    }

    #[test]
    fn sweep_records_failures_and_ranks() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig::from_toml(&synthetic_toml(dir.path())).unwrap();
        cfg.train.epochs = 1;
        let axis = SweepAxis::Schedules(vec!["mlp".into(), "uniform".into(), "bogus".into()]);
        let r = sweep(&cfg, &axis, &[1]).unwrap();
        assert_eq!(r.rows.len(), 2);
        assert_eq!(r.failures.len(), 1);
        assert!(r.rows[0].mean_accuracy >= r.rows[1].mean_accuracy);
        assert!(report(dir.path()).unwrap().contains("FAILED bogus"));

        let experts = SweepAxis::Experts(vec![(2, 1), (4, 1), (8, 1)]);
        let r = sweep(&cfg, &experts, &[1]).unwrap();
        let mut params: Vec<(usize, usize)> = r
            .rows
            .iter()
            .map(|row| (row.variant[1..].split('-').next().unwrap().parse().unwrap(), row.params))
            .collect();
        params.sort();
        assert!(params.windows(2).all(|w| w[0].1 < w[1].1), "{params:?}");

        assert!(sweep(&cfg, &SweepAxis::Schedules(vec![]), &[1]).is_err());
    }

    #[test]
    fn verify_flags_missing_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let good = dir.path().join("train-labels-idx1-ubyte");
        let mut bytes = 2049u32.to_be_bytes().to_vec();
        bytes.extend(3u32.to_be_bytes());
        bytes.extend([1, 2, 3]);
        fs::write(&good, &bytes).unwrap();
        let checks = verify_data(DatasetName::Mnist, &[good, dir.path().join("nope")]);
        assert_eq!(
            checks[0].status,
            FileStatus::SizeMismatch {
                expected: 60_008,
                actual: 11
            }
        );
        assert_eq!(checks[0].records, Some(3));
        assert_eq!(checks[1].status, FileStatus::Missing);
    }
}
