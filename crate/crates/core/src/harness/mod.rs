//! Experiment orchestration: configuration, data preparation, runs of one
//! variant, sweeps over one axis, metrics files and summary reports.

mod config;
pub mod stats;

pub use config::{
    ChannelConfig, DatasetConfig, DatasetKind, ExperimentConfig, ModemConfig, NoiseLevel, NoiseUnit,
    PredictorConfig, SyntheticConfig,
};

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_cifar10_bin, load_idx, partition, synth_classification, Dataset, PartitionMode};
use crate::diagnostics::rounds_to_converge;
use crate::error::{Error, Result};
use crate::flcore::round::{run_round, Environment, RoundOutcome, RoundTiming, Variant};
use crate::flcore::ModelArch;
use crate::par;
use crate::rng::{derive_seed, substream, Stream};

/// Bumped whenever a metrics column changes.
pub const SCHEMA_VERSION: u32 = 1;

/// Environment variable naming the dataset root.
pub const DATA_ROOT_ENV: &str = "AIRFL_DATA_ROOT";

/// Rounds averaged into the reported converged accuracy.
pub const ACCURACY_WINDOW: usize = 5;

/// Training and test splits, loaded once and shared by every run.
#[derive(Debug, Clone)]
pub struct DataBundle {
    pub train: Dataset,
    pub test: Dataset,
}

fn data_root(cfg: &DatasetConfig) -> PathBuf {
    cfg.root
        .clone()
        .or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("data"))
}

fn missing(kind: &str, dir: &Path, e: Error) -> Error {
    Error::MissingData(format!(
        "{kind} not found under {} ({e}); set dataset.root, pass --data-root or export {DATA_ROOT_ENV}, \
         or use dataset.kind = \"synthetic\"",
        dir.display()
    ))
}

/// Load the configured dataset. Synthetic data is generated from `seed`.
pub fn load_data(cfg: &ExperimentConfig, seed: u64) -> Result<DataBundle> {
    let ds = &cfg.dataset;
    match ds.kind {
        DatasetKind::Synthetic => {
            let s = &ds.synthetic;
            let n_train = cfg.devices * cfg.samples_per_device;
            let all = synth_classification(
                derive_seed(seed, Stream::Data, 0, 0, 0),
                s.classes,
                s.dim,
                n_train + ds.test_samples,
                s.separation,
            )?;
            let idx: Vec<usize> = (0..all.len()).collect();
            Ok(DataBundle {
                train: all.subset(&idx[..n_train]),
                test: all.subset(&idx[n_train..]),
            })
        }
        DatasetKind::FashionMnist => {
            let dir = data_root(ds).join("fashion-mnist");
            let load = |img: &str, lab: &str| {
                load_idx(&dir.join(img), &dir.join(lab)).map_err(|e| missing("Fashion-MNIST", &dir, e))
            };
            Ok(DataBundle {
                train: load("train-images-idx3-ubyte", "train-labels-idx1-ubyte")?,
                test: load("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")?,
            })
        }
        DatasetKind::Cifar10 => {
            let dir = data_root(ds).join("cifar-10-batches-bin");
            let train: Vec<PathBuf> = (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect();
            let refs: Vec<&Path> = train.iter().map(PathBuf::as_path).collect();
            let test = dir.join("test_batch.bin");
            Ok(DataBundle {
                train: load_cifar10_bin(&refs).map_err(|e| missing("CIFAR-10", &dir, e))?,
                test: load_cifar10_bin(&[&test]).map_err(|e| missing("CIFAR-10", &dir, e))?,
            })
        }
    }
}

/// Partition the data and assemble the fixed inputs of one run.
pub fn build_environment(
    cfg: &ExperimentConfig,
    data: &DataBundle,
    variant: Variant,
    seed: u64,
) -> Result<Environment> {
    cfg.validate()?;
    let arch = ModelArch::new(cfg.arch, data.train.shape.clone(), data.train.classes)?;
    let mut rng = substream(seed, Stream::Partition, 0, 0, 0);
    let part = partition(&data.train, cfg.devices, cfg.partition, Some(cfg.samples_per_device), &mut rng)?;
    let shards: Vec<Dataset> = part.assignment.iter().map(|rows| data.train.subset(rows)).collect();
    let per = cfg.dataset.train_eval_samples.div_ceil(cfg.devices);
    let eval_rows: Vec<usize> = part
        .assignment
        .iter()
        .flat_map(|rows| rows.iter().take(per).copied())
        .collect();
    let train_eval = data.train.subset(&eval_rows);
    let n_test = cfg.dataset.test_samples.min(data.test.len());
    let test_rows: Vec<usize> = (0..n_test).collect();
    let test = data.test.subset(&test_rows);
    Environment::new(arch, shards, train_eval, test, cfg.sim_config(variant, seed))
}

/// One CSV row per round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub schema_version: u32,
    pub variant: Variant,
    pub seed: u64,
    pub round: usize,
    pub train_loss: f64,
    pub test_loss: f64,
    pub test_accuracy: f64,
    pub local_loss: f64,
    pub clip: f64,
    pub aggregate_error: f64,
    pub modulation_error: f64,
    pub transmission_error: f64,
    pub beam_objective: f64,
    pub beam_iterations: usize,
    pub degenerate_slots: usize,
    pub saturated: usize,
    pub off_grid: usize,
    pub prediction_mse: f64,
    pub symbols: usize,
    pub blocks: usize,
    pub latency_mlp_update: f64,
    pub latency_fl_update: f64,
    pub latency_mlp_transmit: f64,
    pub latency_fl_transmit: f64,
    pub latency_total: f64,
    pub converged: bool,
}

impl MetricsRecord {
    fn new(variant: Variant, seed: u64, o: &RoundOutcome, converged: bool) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            variant,
            seed,
            round: o.round,
            train_loss: o.train_loss,
            test_loss: o.test_loss,
            test_accuracy: o.test_accuracy,
            local_loss: o.local_loss,
            clip: o.clip,
            aggregate_error: o.aggregate_error,
            modulation_error: o.modulation_error,
            transmission_error: o.transmission_error,
            beam_objective: o.beam_objective,
            beam_iterations: o.beam_iterations,
            degenerate_slots: o.degenerate_slots,
            saturated: o.saturated,
            off_grid: o.off_grid,
            prediction_mse: o.prediction_mse,
            symbols: o.symbols,
            blocks: o.blocks,
            latency_mlp_update: o.latency.mlp_update,
            latency_fl_update: o.latency.fl_update,
            latency_mlp_transmit: o.latency.mlp_transmit,
            latency_fl_transmit: o.latency.fl_transmit,
            latency_total: o.latency.total(),
            converged,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub round: usize,
    pub train_s: f64,
    pub beamform_s: f64,
    pub total_s: f64,
}

/// Result of one run held in memory.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub variant: Variant,
    pub seed: u64,
    pub records: Vec<MetricsRecord>,
    pub timing: Vec<TimingRecord>,
    pub capacity: f64,
    pub error: Option<String>,
}

impl RunResult {
    /// First round (1-based) at which the training-loss detector fires.
    pub fn rounds_to_converge(&self) -> Option<usize> {
        let losses: Vec<f64> = self.records.iter().map(|r| r.train_loss).collect();
        rounds_to_converge(&losses)
    }

    /// Mean test accuracy over the last few completed rounds.
    pub fn converged_accuracy(&self) -> f64 {
        let n = self.records.len();
        if n == 0 {
            return f64::NAN;
        }
        let tail = &self.records[n.saturating_sub(ACCURACY_WINDOW)..];
        tail.iter().map(|r| r.test_accuracy).sum::<f64>() / tail.len() as f64
    }

    pub fn final_accuracy(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.test_accuracy)
    }
}

/// Run `cfg.rounds` rounds of `variant` in memory. A failing round stops the
/// run; the rows completed so far are kept and the error is recorded.
pub fn simulate(cfg: &ExperimentConfig, data: &DataBundle, variant: Variant, seed: u64) -> Result<RunResult> {
    let env = build_environment(cfg, data, variant, seed)?;
    let mut state = env.initial_state();
    let mut out = RunResult {
        variant,
        seed,
        records: Vec::with_capacity(cfg.rounds),
        timing: Vec::with_capacity(cfg.rounds),
        capacity: env.capacity,
        error: None,
    };
    let mut losses = Vec::with_capacity(cfg.rounds);
    for t in 0..cfg.rounds {
        match run_round(&env, &state) {
            Ok((next, outcome, timing)) => {
                losses.push(outcome.train_loss);
                let converged = crate::diagnostics::convergence_detector(&losses);
                out.records.push(MetricsRecord::new(variant, seed, &outcome, converged));
                out.timing.push(timing_row(t, &timing));
                log::info!(
                    "{variant} seed {seed} round {t}: loss {:.4} acc {:.4}",
                    outcome.train_loss,
                    outcome.test_accuracy
                );
                state = next;
                if converged && cfg.stop_on_convergence {
                    break;
                }
            }
            Err(e) => {
                log::warn!("{variant} seed {seed} round {t} failed: {e}");
                out.error = Some(format!("round {t}: {e}"));
                break;
            }
        }
    }
    Ok(out)
}

fn timing_row(round: usize, t: &RoundTiming) -> TimingRecord {
    TimingRecord {
        round,
        train_s: t.train_s,
        beamform_s: t.beamform_s,
        total_s: t.total_s,
    }
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub const METRICS_COLUMNS: [&str; 26] = [
    "schema_version",
    "variant",
    "seed",
    "round",
    "train_loss",
    "test_loss",
    "test_accuracy",
    "local_loss",
    "clip",
    "aggregate_error",
    "modulation_error",
    "transmission_error",
    "beam_objective",
    "beam_iterations",
    "degenerate_slots",
    "saturated",
    "off_grid",
    "prediction_mse",
    "symbols",
    "blocks",
    "latency_mlp_update",
    "latency_fl_update",
    "latency_mlp_transmit",
    "latency_fl_transmit",
    "latency_total",
    "converged",
];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub code_version: String,
    pub variant: Variant,
    pub seed: u64,
    pub parallel: bool,
    pub capacity_bps: f64,
    pub rounds_completed: usize,
    pub rounds_to_converge: Option<usize>,
    pub converged_accuracy: f64,
    pub error: Option<String>,
    pub config: ExperimentConfig,
}

/// Persist `metrics.csv`, `timing.csv` and `manifest.json` into `dir`.
/// `metrics.csv` holds only seeded quantities, so reruns are byte-identical.
pub fn write_run(dir: &Path, cfg: &ExperimentConfig, run: &RunResult) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_csv(&dir.join("metrics.csv"), &run.records, &METRICS_COLUMNS)?;
    write_csv(
        &dir.join("timing.csv"),
        &run.timing,
        &["round", "train_s", "beamform_s", "total_s"],
    )?;
    let manifest = RunManifest {
        schema_version: SCHEMA_VERSION,
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        variant: run.variant,
        seed: run.seed,
        parallel: par::is_parallel(),
        capacity_bps: run.capacity,
        rounds_completed: run.records.len(),
        rounds_to_converge: run.rounds_to_converge(),
        converged_accuracy: run.converged_accuracy(),
        error: run.error.clone(),
        config: cfg.clone(),
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Run the configured variant and seed into `cfg.output`. Fails if the data
/// cannot be prepared or a round fails (after persisting completed rows).
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunResult> {
    run_variant(cfg, cfg.variant)
}

pub fn run_variant(cfg: &ExperimentConfig, variant: Variant) -> Result<RunResult> {
    cfg.validate()?;
    let data = load_data(cfg, cfg.seed)?;
    let run = simulate(cfg, &data, variant, cfg.seed)?;
    write_run(&cfg.output, cfg, &run)?;
    match &run.error {
        Some(e) => Err(Error::Diverged(e.clone())),
        None => Ok(run),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepAxis {
    Snr,
    K,
    NR,
    LabelsPerDevice,
    M,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Snr => "snr",
            SweepAxis::K => "K",
            SweepAxis::NR => "N_r",
            SweepAxis::LabelsPerDevice => "labels_per_device",
            SweepAxis::M => "M",
        }
    }

    /// Configuration with this axis set to `value`.
    pub fn apply(self, base: &ExperimentConfig, value: f64) -> Result<ExperimentConfig> {
        let mut cfg = base.clone();
        let int = |v: f64| -> Result<usize> {
            if v >= 1.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::usage(self.name(), format!("expected a positive integer, got {v}")))
            }
        };
        match self {
            SweepAxis::Snr => cfg.channel.snr_db = Some(value),
            SweepAxis::K => cfg.devices = int(value)?,
            SweepAxis::NR => cfg.channel.n_r = int(value)?,
            SweepAxis::LabelsPerDevice => {
                cfg.partition = PartitionMode::NonIid {
                    labels_per_device: int(value)?,
                }
            }
            SweepAxis::M => cfg.modem.order = int(value)?,
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "snr" => Ok(SweepAxis::Snr),
            "K" | "k" | "devices" => Ok(SweepAxis::K),
            "N_r" | "n_r" | "nr" => Ok(SweepAxis::NR),
            "labels_per_device" | "labels" => Ok(SweepAxis::LabelsPerDevice),
            "M" | "m" | "order" => Ok(SweepAxis::M),
            _ => Err(Error::usage(
                "axis",
                format!("unknown sweep axis `{s}`; expected snr, K, N_r, labels_per_device or M"),
            )),
        }
    }
}

/// One row of a sweep summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub schema_version: u32,
    pub axis: String,
    pub value: f64,
    pub variant: Variant,
    pub seed: u64,
    pub status: String,
    pub rounds_run: usize,
    pub converged_accuracy: f64,
    pub final_accuracy: f64,
    pub final_train_loss: f64,
    pub rounds_to_converge: Option<usize>,
    pub latency_per_round: f64,
}

fn summary_row(axis: &str, value: f64, run: &RunResult) -> SummaryRow {
    SummaryRow {
        schema_version: SCHEMA_VERSION,
        axis: axis.to_string(),
        value,
        variant: run.variant,
        seed: run.seed,
        status: run.error.clone().map_or_else(|| "ok".to_string(), |e| format!("failed: {e}")),
        rounds_run: run.records.len(),
        converged_accuracy: run.converged_accuracy(),
        final_accuracy: run.final_accuracy(),
        final_train_loss: run.records.last().map_or(f64::NAN, |r| r.train_loss),
        rounds_to_converge: run.rounds_to_converge(),
        latency_per_round: run.records.last().map_or(f64::NAN, |r| r.latency_total),
    }
}

fn failed_row(axis: &str, value: f64, variant: Variant, seed: u64, e: &Error) -> SummaryRow {
    SummaryRow {
        schema_version: SCHEMA_VERSION,
        axis: axis.to_string(),
        value,
        variant,
        seed,
        status: format!("failed: {e}"),
        rounds_run: 0,
        converged_accuracy: f64::NAN,
        final_accuracy: f64::NAN,
        final_train_loss: f64::NAN,
        rounds_to_converge: None,
        latency_per_round: f64::NAN,
    }
}

pub fn cell_dir(root: &Path, axis: SweepAxis, value: f64, variant: Variant, seed: u64) -> PathBuf {
    root.join(format!("{}={value}", axis.name()))
        .join(variant.name())
        .join(format!("seed-{seed}"))
}

/// Run every (value, variant, seed) cell. Failures are recorded in the
/// summary and do not stop the sweep. Output goes to `out` when given.
pub fn sweep(
    base: &ExperimentConfig,
    axis: SweepAxis,
    values: &[f64],
    variants: &[Variant],
    out: Option<&Path>,
) -> Result<Vec<SummaryRow>> {
    if values.is_empty() {
        return Err(Error::usage("values", "a sweep needs at least one value"));
    }
    if variants.is_empty() {
        return Err(Error::usage("variants", "a sweep needs at least one variant"));
    }
    base.validate()?;
    let seeds = base.seed_list();
    let mut cells = Vec::new();
    for &v in values {
        for &var in variants {
            for &s in &seeds {
                cells.push((v, var, s));
            }
        }
    }
    // Data is shared across cells unless it depends on the axis or the seed.
    let shared = match base.dataset.kind {
        DatasetKind::Synthetic => None,
        _ => Some(load_data(base, base.seed)?),
    };
    let rows = par::map_slice(&cells, |&(value, variant, seed)| {
        let cell = || -> Result<SummaryRow> {
            let mut cfg = axis.apply(base, value)?;
            cfg.seed = seed;
            cfg.variant = variant;
            let owned;
            let data = match &shared {
                Some(d) => d,
                None => {
                    owned = load_data(&cfg, seed)?;
                    &owned
                }
            };
            let run = simulate(&cfg, data, variant, seed)?;
            if let Some(root) = out {
                let dir = cell_dir(root, axis, value, variant, seed);
                cfg.output = dir.clone();
                write_run(&dir, &cfg, &run)?;
            }
            Ok(summary_row(axis.name(), value, &run))
        };
        cell().unwrap_or_else(|e| failed_row(axis.name(), value, variant, seed, &e))
    });
    if let Some(root) = out {
        fs::create_dir_all(root)?;
        write_summary(&root.join("summary.csv"), &rows)?;
    }
    Ok(rows)
}

pub fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_summary(path: &Path) -> Result<Vec<SummaryRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let rows: Vec<SummaryRow> = r.deserialize().collect::<std::result::Result<_, _>>()?;
    check_schema(rows.iter().map(|r| r.schema_version))?;
    Ok(rows)
}

fn check_schema(versions: impl Iterator<Item = u32>) -> Result<()> {
    let mut seen: Vec<u32> = versions.collect();
    seen.sort_unstable();
    seen.dedup();
    match seen.as_slice() {
        [] | [SCHEMA_VERSION] => Ok(()),
        [v] => Err(Error::Schema(format!("schema version {v}, expected {SCHEMA_VERSION}"))),
        _ => Err(Error::Schema(format!("mixed schema versions {seen:?}"))),
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    let rows: Vec<MetricsRecord> = r.deserialize().collect::<std::result::Result<_, _>>()?;
    Ok(rows)
}

/// Per-run summary rebuilt from the metrics files under `dir`.
pub fn summarize_metrics(dir: &Path) -> Result<Vec<SummaryRow>> {
    let mut files = Vec::new();
    collect_metrics(dir, &mut files)?;
    files.sort();
    let mut runs = Vec::new();
    for f in &files {
        let records = read_metrics(f)?;
        runs.push((f.clone(), records));
    }
    check_schema(runs.iter().flat_map(|(_, r)| r.iter().map(|x| x.schema_version)))?;
    Ok(runs
        .into_iter()
        .filter(|(_, r)| !r.is_empty())
        .map(|(f, records)| {
            let run = RunResult {
                variant: records[0].variant,
                seed: records[0].seed,
                records,
                timing: Vec::new(),
                capacity: f64::NAN,
                error: None,
            };
            let (axis, value) = parse_cell(dir, &f);
            summary_row(&axis, value, &run)
        })
        .collect())
}

fn parse_cell(root: &Path, file: &Path) -> (String, f64) {
    let rel = file.strip_prefix(root).unwrap_or(file);
    for c in rel.components() {
        if let Some((a, v)) = c.as_os_str().to_string_lossy().split_once('=') {
            if let Ok(v) = v.parse() {
                return (a.to_string(), v);
            }
        }
    }
    ("run".to_string(), f64::NAN)
}

fn collect_metrics(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let p = entry?.path();
        if p.is_dir() {
            collect_metrics(&p, out)?;
        } else if p.file_name().is_some_and(|n| n == "metrics.csv") {
            out.push(p);
        }
    }
    Ok(())
}

/// Seed-averaged cell of a report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportCell {
    pub axis: String,
    pub value: f64,
    pub variant: Variant,
    pub runs: usize,
    pub failed: usize,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub mean_rounds_to_converge: f64,
    pub converged_runs: usize,
}

/// Trend of one variant along the sweep axis.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trend {
    pub variant: Variant,
    pub metric: &'static str,
    pub rho: f64,
    /// One-sided exact permutation p-value for the sign of `rho`.
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub cells: Vec<ReportCell>,
    pub trends: Vec<Trend>,
}

/// Seed-average the summary rows and test each variant for a monotone trend.
/// Runs that never converge count as having taken all their rounds.
pub fn report(rows: &[SummaryRow]) -> Result<Report> {
    check_schema(rows.iter().map(|r| r.schema_version))?;
    let mut groups: BTreeMap<(String, Variant, u64), Vec<&SummaryRow>> = BTreeMap::new();
    for r in rows {
        groups
            .entry((r.axis.clone(), r.variant, r.value.to_bits()))
            .or_default()
            .push(r);
    }
    let mut cells: Vec<ReportCell> = groups
        .into_values()
        .map(|g| {
            let ok: Vec<&&SummaryRow> = g.iter().filter(|r| r.status == "ok").collect();
            let acc: Vec<f64> = ok.iter().map(|r| r.converged_accuracy).collect();
            let rtc: Vec<f64> = ok
                .iter()
                .map(|r| r.rounds_to_converge.unwrap_or(r.rounds_run) as f64)
                .collect();
            ReportCell {
                axis: g[0].axis.clone(),
                value: g[0].value,
                variant: g[0].variant,
                runs: g.len(),
                failed: g.len() - ok.len(),
                mean_accuracy: stats::mean(&acc),
                std_accuracy: stats::std_dev(&acc),
                mean_rounds_to_converge: stats::mean(&rtc),
                converged_runs: ok.iter().filter(|r| r.rounds_to_converge.is_some()).count(),
            }
        })
        .collect();
    cells.sort_by(|a, b| {
        (a.variant.name(), a.value)
            .partial_cmp(&(b.variant.name(), b.value))
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut trends = Vec::new();
    for variant in Variant::ALL {
        let vc: Vec<&ReportCell> = cells
            .iter()
            .filter(|c| c.variant == variant && c.mean_accuracy.is_finite())
            .collect();
        if vc.len() < 3 {
            continue;
        }
        let x: Vec<f64> = vc.iter().map(|c| c.value).collect();
        for (metric, y) in [
            ("accuracy", vc.iter().map(|c| c.mean_accuracy).collect::<Vec<_>>()),
            ("rounds_to_converge", vc.iter().map(|c| c.mean_rounds_to_converge).collect()),
        ] {
            let t = stats::spearman_exact(&x, &y)?;
            trends.push(Trend {
                variant,
                metric,
                rho: t.rho,
                p_value: if t.rho >= 0.0 { t.p_greater } else { t.p_less },
            });
        }
    }
    Ok(Report { cells, trends })
}

impl Report {
    pub fn render(&self) -> String {
        let mut s = String::from("axis,value,variant,runs,failed,mean_accuracy,std_accuracy,mean_rounds_to_converge,converged_runs\n");
        for c in &self.cells {
            s += &format!(
                "{},{},{},{},{},{:.4},{:.4},{:.2},{}\n",
                c.axis,
                c.value,
                c.variant,
                c.runs,
                c.failed,
                c.mean_accuracy,
                c.std_accuracy,
                c.mean_rounds_to_converge,
                c.converged_runs
            );
        }
        if !self.trends.is_empty() {
            s += "\nvariant,metric,spearman_rho,p_value\n";
            for t in &self.trends {
                s += &format!("{},{},{:.4},{:.4}\n", t.variant, t.metric, t.rho, t.p_value);
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[allow(clippy::field_reassign_with_default)]
    fn tiny() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.devices = 3;
        cfg.samples_per_device = 60;
        cfg.rounds = 2;
        cfg.arch = crate::flcore::ArchKind::LinearSoftmax;
        cfg.dataset.kind = DatasetKind::Synthetic;
        cfg.dataset.synthetic.dim = 6;
        cfg.dataset.synthetic.classes = 3;
        cfg.dataset.test_samples = 50;
        cfg.dataset.train_eval_samples = 30;
        cfg.modem.block_len = 16;
        cfg.predictor.hidden = 4;
        cfg.capacity_draws = 4;
        cfg
    }

    #[test]
    fn every_variant_runs() {
        let cfg = tiny();
        let data = load_data(&cfg, cfg.seed).unwrap();
        for v in Variant::ALL {
            let run = simulate(&cfg, &data, v, 3).unwrap();
            assert_eq!(run.records.len(), 2, "{v}");
            assert!(run.error.is_none(), "{v}: {:?}", run.error);
            assert!(run.records.iter().all(|r| r.train_loss.is_finite()));
        }
    }

    #[test]
    fn axis_application() {
        let base = tiny();
        assert_eq!(SweepAxis::K.apply(&base, 7.0).unwrap().devices, 7);
        assert!(SweepAxis::K.apply(&base, 2.5).is_err());
        assert_eq!(SweepAxis::Snr.apply(&base, 5.0).unwrap().channel.snr_db, Some(5.0));
        assert!(SweepAxis::M.apply(&base, 8.0).is_err());
        assert!("bogus".parse::<SweepAxis>().is_err());
    }

    #[test]
    fn mixed_schema_rejected() {
        assert!(check_schema([1, 1].into_iter()).is_ok());
        assert!(matches!(check_schema([1, 2].into_iter()), Err(Error::Schema(_))));
        assert!(matches!(check_schema([7].into_iter()), Err(Error::Schema(_))));
    }
}
