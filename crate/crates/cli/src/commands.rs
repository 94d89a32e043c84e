//! The five subcommands. Each takes a validated [`RunConfig`] and writes its
//! artifacts under an output directory.

use crate::config::{ConfigError, RunConfig};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use symreg_core::bench::{gates_for, make_datasets, run_single, streams, AggregateMetrics, Benchmark, BenchError, DatasetSplits};
use symreg_core::dataset::{Dataset, DatasetError};
use symreg_core::expr::TokenLibrary;
use symreg_core::gating::{train_ngm, GateVector, GatingError, NgmHyper};
use symreg_core::numerics::RngStream;
use symreg_core::policy::PolicyError;
use symreg_core::rl::{train_observed, IterationLog, RlError, RunReport, RunStatus};
use thiserror::Error;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_ABORT: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error(transparent)]
    Bench(#[from] BenchError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Gating(#[from] GatingError),
    #[error(transparent)]
    Rl(#[from] RlError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("run aborted: {0}")]
    Aborted(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => EXIT_CONFIG,
            _ => EXIT_ABORT,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes through a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(bytes).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn to_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut text = serde_json::to_string_pretty(value).expect("serialisable artifact");
    text.push('\n');
    text.into_bytes()
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| CliError::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn variable_names(n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("x{i}")).collect()
}

// ---------------------------------------------------------------- gen-data

pub const DATA_FILES: [&str; 3] = ["ngm.csv", "reward.csv", "eval.csv"];

/// Companion of the CSV files; the CSVs alone do not say which columns
/// are noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataMeta {
    pub benchmark: Benchmark,
    pub noise_count: usize,
    pub seed: u64,
    pub noise_mask: Vec<bool>,
}

pub fn generate(cfg: &RunConfig) -> Result<DatasetSplits> {
    Ok(make_datasets(
        cfg.run.benchmark,
        cfg.run.noise_count,
        cfg.sizes,
        RngStream::new(cfg.run.seed, streams::DATA),
    )?)
}

pub fn cmd_gen_data(cfg: &RunConfig, out: &Path, force: bool) -> Result<Vec<PathBuf>> {
    let targets: Vec<PathBuf> = DATA_FILES.iter().chain(["meta.json"].iter()).map(|f| out.join(f)).collect();
    if !force {
        if let Some(existing) = targets.iter().find(|p| p.exists()) {
            return Err(CliError::Usage(format!(
                "{} exists; pass --force to overwrite",
                existing.display()
            )));
        }
    }
    let data = generate(cfg)?;
    for (set, path) in [&data.ngm, &data.reward, &data.eval].into_iter().zip(&targets) {
        let mut bytes = Vec::new();
        set.write_csv(&mut bytes)?;
        write_atomic(path, &bytes)?;
    }
    let meta = DataMeta {
        benchmark: cfg.run.benchmark,
        noise_count: cfg.run.noise_count,
        seed: cfg.run.seed,
        noise_mask: data.ngm.noise_mask.clone(),
    };
    write_atomic(&targets[3], &to_json(&meta))?;
    Ok(targets)
}

/// Loads a directory written by `gen-data`.
pub fn load_data(dir: &Path) -> Result<DatasetSplits> {
    let meta: DataMeta = read_json(&dir.join("meta.json"))?;
    let load = |name: &str| Dataset::load_csv(&dir.join(name), Some(meta.noise_mask.clone()));
    Ok(DatasetSplits {
        ngm: load(DATA_FILES[0])?,
        reward: load(DATA_FILES[1])?,
        eval: load(DATA_FILES[2])?,
    })
}

fn datasets(cfg: &RunConfig, data_dir: Option<&Path>) -> Result<DatasetSplits> {
    match data_dir {
        Some(dir) => load_data(dir),
        None => generate(cfg),
    }
}

// --------------------------------------------------------------- train-ngm

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateFile {
    pub probabilities: Vec<f64>,
    pub binary: Vec<bool>,
    pub threshold_used: f64,
    pub fallback_applied: bool,
    pub hyper: NgmHyper,
    pub seed: u64,
}

impl GateFile {
    pub fn new(gates: GateVector, hyper: NgmHyper, seed: u64) -> Self {
        Self {
            probabilities: gates.probabilities,
            binary: gates.binary,
            threshold_used: gates.threshold_used,
            fallback_applied: gates.fallback_applied,
            hyper,
            seed,
        }
    }

    pub fn gates(&self) -> GateVector {
        GateVector {
            probabilities: self.probabilities.clone(),
            binary: self.binary.clone(),
            threshold_used: self.threshold_used,
            fallback_applied: self.fallback_applied,
        }
    }

    /// Human-readable kept/dropped listing.
    pub fn summary(&self) -> String {
        let names = variable_names(self.binary.len());
        let pick = |keep: bool| {
            let v: Vec<&str> = names
                .iter()
                .zip(&self.binary)
                .filter(|(_, &b)| b == keep)
                .map(|(n, _)| n.as_str())
                .collect();
            if v.is_empty() {
                "-".to_string()
            } else {
                v.join(" ")
            }
        };
        let mut s = format!("kept: {}\ndropped: {}\nthreshold: {:.6}", pick(true), pick(false), self.threshold_used);
        if self.fallback_applied {
            s.push_str("\nfallback applied: no variable passed the threshold, keeping all");
        }
        s
    }
}

pub fn cmd_train_ngm(cfg: &RunConfig, data_dir: Option<&Path>, out: &Path) -> Result<GateFile> {
    let data = datasets(cfg, data_dir)?;
    let training = train_ngm(&data.ngm, &cfg.ngm, RngStream::new(cfg.run.seed, streams::NGM))?;
    let file = GateFile::new(training.gates, cfg.ngm, cfg.run.seed);
    write_atomic(out, &to_json(&file))?;
    Ok(file)
}

// --------------------------------------------------------------------- run

/// One run's persisted result; `run` and `bench` share this format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub benchmark: Benchmark,
    pub noise_count: usize,
    pub seed: u64,
    /// Disabled components; empty for the full method.
    pub ablation: Vec<String>,
    pub kept_variables: Vec<String>,
    pub gate_fallback: bool,
    pub report: RunReport,
}

impl RunRecord {
    fn new(cfg: &RunConfig, benchmark: Benchmark, seed: u64, gates: &GateVector, report: RunReport) -> Self {
        let kept_variables = variable_names(gates.binary.len())
            .into_iter()
            .zip(&gates.binary)
            .filter(|(_, &b)| b)
            .map(|(n, _)| n)
            .collect();
        Self {
            benchmark,
            noise_count: cfg.run.noise_count,
            seed,
            ablation: cfg.toggles.ablations(),
            kept_variables,
            gate_fallback: gates.fallback_applied,
            report,
        }
    }
}

pub const RUN_FILES: [&str; 5] = ["report.json", "log.jsonl", "best.txt", "gates.json", "policy.json"];

pub fn cmd_run(cfg: &RunConfig, data_dir: Option<&Path>, gate_file: Option<&Path>, out: &Path) -> Result<RunRecord> {
    let data = datasets(cfg, data_dir)?;
    let experiment = cfg.experiment();
    let gates = match gate_file {
        Some(path) => read_json::<GateFile>(path)?.gates(),
        None => gates_for(&data, &experiment, cfg.run.seed)?,
    };
    let lib = TokenLibrary::standard(data.reward.columns());
    let result = train_observed(
        &experiment.trainer,
        &experiment.mask,
        &lib,
        &data.reward,
        &data.eval,
        &gates,
        cfg.run.seed,
        None,
        &mut |_, _| {},
    )?;
    let record = RunRecord::new(cfg, cfg.run.benchmark, cfg.run.seed, &gates, result.report);
    write_atomic(&out.join(RUN_FILES[0]), &to_json(&record))?;
    write_atomic(&out.join(RUN_FILES[1]), &log_lines(&result.log))?;
    let best = format!(
        "traversal: {}\ninfix: {}\n",
        record.report.best_traversal.as_deref().unwrap_or("-"),
        record.report.best_infix.as_deref().unwrap_or("-"),
    );
    write_atomic(&out.join(RUN_FILES[2]), best.as_bytes())?;
    let gate_record = GateFile::new(gates, cfg.ngm, cfg.run.seed);
    write_atomic(&out.join(RUN_FILES[3]), &to_json(&gate_record))?;
    result.policy.save(&out.join(RUN_FILES[4]))?;
    if let RunStatus::Aborted { reason } = &record.report.status {
        return Err(CliError::Aborted(reason.clone()));
    }
    Ok(record)
}

fn log_lines(log: &[IterationLog]) -> Vec<u8> {
    let mut out = Vec::new();
    for entry in log {
        serde_json::to_writer(&mut out, entry).expect("serialisable log");
        out.push(b'\n');
    }
    out
}

// ------------------------------------------------------------ bench/report

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub benchmark: Benchmark,
    pub noise_count: usize,
    #[serde(rename = "RR")]
    pub rr: f64,
    #[serde(rename = "mean_EEN")]
    pub mean_een: f64,
    #[serde(rename = "mean_NMSE")]
    pub mean_nmse: f64,
    #[serde(rename = "EER")]
    pub eer: f64,
    /// Seeds aggregated, `;`-separated.
    pub seeds: String,
    #[serde(rename = "median_EEN")]
    pub median_een: f64,
    pub invalid_nmse: usize,
    pub failures: usize,
}

pub fn run_file_name(benchmark: Benchmark, noise_count: usize, seed: u64) -> String {
    format!("{benchmark}-noise{noise_count}-seed{seed}.json")
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchOutcome {
    pub completed: usize,
    pub skipped: usize,
    pub failures: Vec<String>,
    pub rows: Vec<SummaryRow>,
}

/// Runs every missing (benchmark, seed) pair of the configured suite, then
/// rebuilds the summary from the report files on disk.
pub fn cmd_bench(cfg: &RunConfig, out: &Path) -> Result<BenchOutcome> {
    let runs_dir = out.join("runs");
    fs::create_dir_all(&runs_dir).map_err(io_err(&runs_dir))?;
    let mut pending = Vec::new();
    let mut skipped = 0;
    for &b in &cfg.run.benchmarks {
        for &s in &cfg.run.seeds {
            let path = runs_dir.join(run_file_name(b, cfg.run.noise_count, s));
            if read_json::<RunRecord>(&path).is_ok() {
                skipped += 1;
            } else {
                pending.push((b, s, path));
            }
        }
    }
    let experiment = cfg.experiment();
    use rayon::prelude::*;
    let results: Vec<std::result::Result<(), (Benchmark, String)>> = pending
        .par_iter()
        .map(|(b, s, path)| {
            let fail = |e: &dyn std::fmt::Display| (*b, format!("{b} seed {s}: {e}"));
            let outcome = run_single(*b, cfg.run.noise_count, *s, &experiment).map_err(|e| fail(&e))?;
            let record = RunRecord::new(cfg, *b, *s, &outcome.gates, outcome.report);
            write_atomic(path, &to_json(&record)).map_err(|e| fail(&e))?;
            eprintln!(
                "{b} seed {s}: recovered={} een={}",
                record.report.recovered, record.report.expressions_consumed
            );
            Ok(())
        })
        .collect();
    let failures: Vec<(Benchmark, String)> = results.into_iter().filter_map(|r| r.err()).collect();
    let completed = pending.len() - failures.len();
    let records = collect_records(&runs_dir)?;
    let selected: Vec<RunRecord> = records
        .into_iter()
        .filter(|r| {
            r.noise_count == cfg.run.noise_count
                && cfg.run.benchmarks.contains(&r.benchmark)
                && cfg.run.seeds.contains(&r.seed)
        })
        .collect();
    let rows = summarise(&selected, &failures_by_benchmark(&failures));
    write_summary(&out.join("summary.csv"), &rows)?;
    write_reports_jsonl(&out.join("reports.jsonl"), &selected)?;
    Ok(BenchOutcome {
        completed,
        skipped,
        failures: failures.into_iter().map(|(_, m)| m).collect(),
        rows,
    })
}

fn failures_by_benchmark(failures: &[(Benchmark, String)]) -> BTreeMap<Benchmark, usize> {
    let mut out = BTreeMap::new();
    for (b, _) in failures {
        *out.entry(*b).or_insert(0) += 1;
    }
    out
}

/// Every parseable run record under `runs_dir`, in (benchmark, noise, seed)
/// order.
pub fn collect_records(runs_dir: &Path) -> Result<Vec<RunRecord>> {
    let mut records = Vec::new();
    let entries = fs::read_dir(runs_dir).map_err(io_err(runs_dir))?;
    for entry in entries {
        let path = entry.map_err(io_err(runs_dir))?.path();
        if path.extension().is_some_and(|e| e == "json") {
            records.push(read_json::<RunRecord>(&path)?);
        }
    }
    records.sort_by_key(|r| (r.benchmark, r.noise_count, r.seed));
    Ok(records)
}

/// Per-(benchmark, noise) aggregate in a fixed order; `failures` counts runs
/// that produced no record.
pub fn summarise(records: &[RunRecord], failures: &BTreeMap<Benchmark, usize>) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(Benchmark, usize), Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        groups.entry((r.benchmark, r.noise_count)).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((benchmark, noise_count), rs)| {
            let reports: Vec<RunReport> = rs.iter().map(|r| r.report.clone()).collect();
            let failed = failures.get(&benchmark).copied().unwrap_or(0);
            let m = AggregateMetrics::from_reports(&reports, failed);
            SummaryRow {
                benchmark,
                noise_count,
                rr: m.recovery_rate,
                mean_een: m.mean_een,
                mean_nmse: m.mean_nmse,
                eer: m.eer,
                seeds: rs.iter().map(|r| r.seed.to_string()).collect::<Vec<_>>().join(";"),
                median_een: m.median_een,
                invalid_nmse: m.invalid_nmse,
                failures: m.failures,
            }
        })
        .collect()
}

pub fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row).map_err(|e| CliError::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    write_atomic(path, &bytes)
}

pub fn read_summary(path: &Path) -> Result<Vec<SummaryRow>> {
    let fmt = |e: csv::Error| CliError::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut r = csv::Reader::from_path(path).map_err(fmt)?;
    r.deserialize().collect::<std::result::Result<_, _>>().map_err(fmt)
}

fn write_reports_jsonl(path: &Path, records: &[RunRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).expect("serialisable record");
        out.push(b'\n');
    }
    write_atomic(path, &out)
}

/// Rebuilds `summary.csv` from the run records in `dir/runs`.
pub fn cmd_report(dir: &Path) -> Result<Vec<SummaryRow>> {
    let records = collect_records(&dir.join("runs"))?;
    let rows = summarise(&records, &BTreeMap::new());
    write_summary(&dir.join("summary.csv"), &rows)?;
    Ok(rows)
}

pub fn format_rows(rows: &[SummaryRow]) -> String {
    let mut s = format!(
        "{:<10} {:>5} {:>6} {:>12} {:>12} {:>12} {:>8} seeds\n",
        "benchmark", "noise", "RR", "mean_EEN", "median_EEN", "mean_NMSE", "EER"
    );
    for r in rows {
        s.push_str(&format!(
            "{:<10} {:>5} {:>6.2} {:>12.0} {:>12.0} {:>12.3e} {:>8.4} {}\n",
            r.benchmark.to_string(),
            r.noise_count,
            r.rr,
            r.mean_een,
            r.median_een,
            r.mean_nmse,
            r.eer,
            r.seeds
        ));
    }
    s
}
