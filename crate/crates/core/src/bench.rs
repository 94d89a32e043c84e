//! Nguyen benchmark suite, dataset protocol, metric aggregation and
//! multi-seed experiment orchestration.

use crate::constraints::MaskConfig;
use crate::dataset::{variance, Dataset, DatasetError};
use crate::expr::{evaluate, ExprError, TokenLibrary, Traversal};
use crate::gating::{train_ngm, GateVector, GatingError, NgmHyper};
use crate::numerics::RngStream;
use crate::rl::{train, IterationLog, RlError, RunReport, TrainerConfig};
use ndarray::Array2;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("unknown benchmark `{0}` (expected nguyen-1 .. nguyen-12)")]
    UnknownBenchmark(String),
    #[error("target variance is zero")]
    ZeroVariance,
    #[error("could not draw a non-degenerate dataset after {0} attempts")]
    Degenerate(usize),
    #[error("invalid sizes: {0}")]
    Sizes(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error(transparent)]
    Gating(#[from] GatingError),
    #[error(transparent)]
    Rl(#[from] RlError),
}

/// One of the twelve Nguyen expressions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Benchmark(u8);

impl Benchmark {
    pub const ALL: [Benchmark; 12] = [
        Benchmark(1),
        Benchmark(2),
        Benchmark(3),
        Benchmark(4),
        Benchmark(5),
        Benchmark(6),
        Benchmark(7),
        Benchmark(8),
        Benchmark(9),
        Benchmark(10),
        Benchmark(11),
        Benchmark(12),
    ];

    pub fn nguyen(index: u8) -> Option<Self> {
        (1..=12).contains(&index).then_some(Self(index))
    }

    pub fn index(self) -> u8 {
        self.0
    }

    pub fn spec(self) -> BenchmarkSpec {
        let (variable_count, low, high, formula) = match self.0 {
            1 => (1, -1.0, 1.0, "x1^3 + x1^2 + x1"),
            2 => (1, -1.0, 1.0, "x1^4 + x1^3 + x1^2 + x1"),
            3 => (1, -1.0, 1.0, "x1^5 + x1^4 + x1^3 + x1^2 + x1"),
            4 => (1, -1.0, 1.0, "x1^6 + x1^5 + x1^4 + x1^3 + x1^2 + x1"),
            5 => (1, -1.0, 1.0, "sin(x1^2) cos(x1) - 1"),
            6 => (1, -1.0, 1.0, "sin(x1) + sin(x1 + x1^2)"),
            7 => (1, -1.0, 1.0, "log(x1 + 1) + sin(x1^2 + 1)"),
            8 => (1, 0.0, 4.0, "sqrt(x1)"),
            9 => (2, 0.0, 1.0, "sin(x1) + sin(x2^2)"),
            10 => (2, 0.0, 1.0, "2 sin(x1) cos(x2)"),
            11 => (2, 0.0, 1.0, "x1^x2"),
            _ => (2, 0.0, 1.0, "x1^4 - x1^3 + 0.5 x2^2 - x2"),
        };
        BenchmarkSpec {
            benchmark: self,
            variable_count,
            low,
            high,
            formula,
        }
    }

    /// Closed-form target on the true variables.
    pub fn ground_truth(self, x: &[f64]) -> f64 {
        let poly = |x: f64, degree: i32| (1..=degree).map(|k| x.powi(k)).sum::<f64>();
        match self.0 {
            1 => poly(x[0], 3),
            2 => poly(x[0], 4),
            3 => poly(x[0], 5),
            4 => poly(x[0], 6),
            5 => (x[0] * x[0]).sin() * x[0].cos() - 1.0,
            6 => x[0].sin() + (x[0] + x[0] * x[0]).sin(),
            7 => (x[0] + 1.0).ln() + (x[0] * x[0] + 1.0).sin(),
            8 => x[0].sqrt(),
            9 => x[0].sin() + (x[1] * x[1]).sin(),
            10 => 2.0 * x[0].sin() * x[1].cos(),
            11 => (x[1] * x[0].ln()).exp(),
            _ => x[0].powi(4) - x[0].powi(3) + 0.5 * x[1] * x[1] - x[1],
        }
    }

    /// An expression in the search library equal to the target on its domain.
    pub fn reference_traversal(self) -> String {
        fn power(var: &str, k: usize) -> String {
            let mut s = String::new();
            for _ in 1..k {
                s.push_str("mul ");
                s.push_str(var);
                s.push(' ');
            }
            s.push_str(var);
            s
        }
        fn sum(terms: &[String]) -> String {
            let mut s = "add ".repeat(terms.len() - 1);
            s.push_str(&terms.join(" "));
            s
        }
        let poly = |d: usize| sum(&(1..=d).rev().map(|k| power("x1", k)).collect::<Vec<_>>());
        match self.0 {
            1 => poly(3),
            2 => poly(4),
            3 => poly(5),
            4 => poly(6),
            5 => "sub mul sin mul x1 x1 cos x1 div x1 x1".into(),
            6 => "add sin x1 sin add x1 mul x1 x1".into(),
            7 => "add log add x1 div x1 x1 sin add mul x1 x1 div x1 x1".into(),
            8 => "exp div log x1 add div x1 x1 div x1 x1".into(),
            9 => "add sin x1 sin mul x2 x2".into(),
            10 => "add mul sin x1 cos x2 mul sin x1 cos x2".into(),
            11 => "exp mul x2 log x1".into(),
            _ => format!(
                "sub add sub {} {} div mul x2 x2 add div x2 x2 div x2 x2 x2",
                power("x1", 4),
                power("x1", 3)
            ),
        }
    }
}

impl fmt::Display for Benchmark {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "nguyen-{}", self.0)
    }
}

impl FromStr for Benchmark {
    type Err = BenchError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.trim().to_ascii_lowercase();
        let digits = lower
            .strip_prefix("nguyen-")
            .or_else(|| lower.strip_prefix("nguyen"))
            .unwrap_or(&lower);
        digits
            .parse::<u8>()
            .ok()
            .and_then(Benchmark::nguyen)
            .ok_or_else(|| BenchError::UnknownBenchmark(s.to_string()))
    }
}

impl TryFrom<String> for Benchmark {
    type Error = BenchError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Benchmark> for String {
    fn from(b: Benchmark) -> Self {
        b.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchmarkSpec {
    pub benchmark: Benchmark,
    pub variable_count: usize,
    pub low: f64,
    pub high: f64,
    pub formula: &'static str,
}

/// Row counts of the gating, reward and evaluation sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Sizes {
    pub ngm: usize,
    pub reward: usize,
    pub eval: usize,
}

impl Default for Sizes {
    fn default() -> Self {
        Self {
            ngm: 20_000,
            reward: 20,
            eval: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplits {
    pub ngm: Dataset,
    pub reward: Dataset,
    pub eval: Dataset,
}

const MAX_DRAW_ATTEMPTS: usize = 16;

/// Draws one dataset: the true variables followed by `noise_count`
/// irrelevant columns, all uniform over the benchmark range.
pub fn draw_dataset(
    benchmark: Benchmark,
    noise_count: usize,
    rows: usize,
    rng: &mut impl Rng,
) -> Result<Dataset, BenchError> {
    let spec = benchmark.spec();
    let n = spec.variable_count + noise_count;
    let mut noise_mask = vec![false; spec.variable_count];
    noise_mask.resize(n, true);
    for _ in 0..MAX_DRAW_ATTEMPTS {
        let mut x = Array2::<f64>::zeros((rows, n));
        let mut y = Vec::with_capacity(rows);
        for mut row in x.rows_mut() {
            for v in row.iter_mut() {
                *v = loop {
                    let draw = rng.gen_range(spec.low..spec.high);
                    // x1^x2 is evaluated through ln(x1)
                    if benchmark.index() == 11 && draw == 0.0 {
                        continue;
                    }
                    break draw;
                };
            }
            let real: Vec<f64> = row.iter().take(spec.variable_count).copied().collect();
            y.push(benchmark.ground_truth(&real));
        }
        if variance(&y).sqrt() >= 1e-12 {
            return Ok(Dataset::new(x, y, noise_mask)?);
        }
        eprintln!("warning: degenerate target draw for {benchmark}; resampling");
    }
    Err(BenchError::Degenerate(MAX_DRAW_ATTEMPTS))
}

/// The three-way protocol: gating set, reward set and evaluation set, each
/// from its own stream.
pub fn make_datasets(
    benchmark: Benchmark,
    noise_count: usize,
    sizes: Sizes,
    rng: RngStream,
) -> Result<DatasetSplits, BenchError> {
    if sizes.ngm == 0 || sizes.reward == 0 || sizes.eval == 0 {
        return Err(BenchError::Sizes(format!("{sizes:?}")));
    }
    Ok(DatasetSplits {
        ngm: draw_dataset(benchmark, noise_count, sizes.ngm, &mut rng.child(0).rng())?,
        reward: draw_dataset(benchmark, noise_count, sizes.reward, &mut rng.child(1).rng())?,
        eval: draw_dataset(benchmark, noise_count, sizes.eval, &mut rng.child(2).rng())?,
    })
}

/// `MSE / Var(y)` (population variance) of raw predictions.
pub fn nmse_of_predictions(predictions: &[f64], targets: &[f64]) -> Result<Option<f64>, BenchError> {
    let var = variance(targets);
    if var == 0.0 {
        return Err(BenchError::ZeroVariance);
    }
    if predictions.iter().any(|p| !p.is_finite()) {
        return Ok(None);
    }
    let mse = predictions
        .iter()
        .zip(targets)
        .map(|(p, y)| (p - y) * (p - y))
        .sum::<f64>()
        / targets.len() as f64;
    Ok(Some(mse / var))
}

/// NMSE of a traversal on a dataset; `None` when the expression is invalid
/// anywhere on the data.
pub fn nmse(traversal: &Traversal, lib: &TokenLibrary, data: &Dataset) -> Result<Option<f64>, BenchError> {
    let eval = evaluate(traversal, lib, data.x.view())?;
    nmse_of_predictions(&eval.values, &data.y)
}

/// Cross-seed summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub runs: usize,
    pub failures: usize,
    pub recovery_rate: f64,
    pub mean_een: f64,
    pub median_een: f64,
    /// Mean eval-set NMSE over runs whose best expression is valid.
    pub mean_nmse: f64,
    pub invalid_nmse: usize,
    /// Unique expressions summed over recovered runs only; a failed run
    /// contributes zero.
    pub uen_total: u64,
    pub een_total: u64,
    pub eer: f64,
}

pub fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let mid = values.len() / 2;
    if values.len() % 2 == 1 {
        values[mid]
    } else {
        0.5 * (values[mid - 1] + values[mid])
    }
}

impl AggregateMetrics {
    pub fn from_reports(reports: &[RunReport], failures: usize) -> Self {
        let runs = reports.len();
        let recovered = reports.iter().filter(|r| r.recovered).count();
        let een: Vec<f64> = reports.iter().map(|r| r.expressions_consumed as f64).collect();
        let nmses: Vec<f64> = reports.iter().filter_map(|r| r.eval_nmse).collect();
        let uen_total: u64 = reports.iter().filter(|r| r.recovered).map(|r| r.unique_expressions).sum();
        let een_total: u64 = reports.iter().map(|r| r.expressions_consumed).sum();
        let mean = |v: &[f64]| if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 };
        Self {
            runs,
            failures,
            recovery_rate: if runs == 0 { 0.0 } else { recovered as f64 / runs as f64 },
            mean_een: mean(&een),
            median_een: median(&mut een.clone()),
            mean_nmse: mean(&nmses),
            invalid_nmse: runs - nmses.len(),
            uen_total,
            een_total,
            eer: if een_total == 0 { 0.0 } else { uen_total as f64 / een_total as f64 },
        }
    }
}

/// Everything needed to run one benchmark/seed pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub sizes: Sizes,
    pub ngm: NgmHyper,
    pub trainer: TrainerConfig,
    pub mask: MaskConfig,
    pub use_ngm: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            sizes: Sizes::default(),
            ngm: NgmHyper::default(),
            trainer: TrainerConfig::default(),
            mask: MaskConfig::default(),
            use_ngm: true,
        }
    }
}

/// Stream ids derived from the single run seed.
pub mod streams {
    pub const DATA: u64 = 0;
    pub const NGM: u64 = 1;
    pub const POLICY_INIT: u64 = 2;
    /// Sampling for iteration `i` uses stream `SAMPLING_BASE + i`.
    pub const SAMPLING_BASE: u64 = 3;
}

/// Result of one benchmark/seed pair.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub benchmark: Benchmark,
    pub noise_count: usize,
    pub seed: u64,
    pub gates: GateVector,
    pub report: RunReport,
    pub log: Vec<IterationLog>,
}

/// Gate vector for a run: trained when gating is enabled, all-open otherwise.
pub fn gates_for(data: &DatasetSplits, cfg: &ExperimentConfig, seed: u64) -> Result<GateVector, BenchError> {
    if cfg.use_ngm {
        Ok(train_ngm(&data.ngm, &cfg.ngm, RngStream::new(seed, streams::NGM))?.gates)
    } else {
        Ok(GateVector::all_open(data.ngm.columns()))
    }
}

/// Data → gates → policy search for one seed.
pub fn run_single(
    benchmark: Benchmark,
    noise_count: usize,
    seed: u64,
    cfg: &ExperimentConfig,
) -> Result<RunOutcome, BenchError> {
    let data = make_datasets(benchmark, noise_count, cfg.sizes, RngStream::new(seed, streams::DATA))?;
    let gates = gates_for(&data, cfg, seed)?;
    let lib = TokenLibrary::standard(data.reward.columns());
    let (report, log) = train(&cfg.trainer, &cfg.mask, &lib, &data.reward, &data.eval, &gates, seed, None)?;
    Ok(RunOutcome {
        benchmark,
        noise_count,
        seed,
        gates,
        report,
        log,
    })
}

/// Per-run results and the aggregate for one benchmark.
#[derive(Debug)]
pub struct SuiteResult {
    pub benchmark: Benchmark,
    pub noise_count: usize,
    pub outcomes: Vec<RunOutcome>,
    pub errors: Vec<(u64, String)>,
    pub metrics: AggregateMetrics,
}

/// Runs every (benchmark, seed) pair; failed runs are excluded from the
/// means and counted. Parallel over pairs, aggregated in seed order.
pub fn run_suite(
    benchmarks: &[Benchmark],
    noise_count: usize,
    seeds: &[u64],
    cfg: &ExperimentConfig,
) -> Vec<SuiteResult> {
    let pairs: Vec<(Benchmark, u64)> = benchmarks
        .iter()
        .flat_map(|&b| seeds.iter().map(move |&s| (b, s)))
        .collect();
    let results: Vec<_> = pairs
        .par_iter()
        .map(|&(b, s)| (b, s, run_single(b, noise_count, s, cfg)))
        .collect();
    benchmarks
        .iter()
        .map(|&benchmark| {
            let mut outcomes = Vec::new();
            let mut errors = Vec::new();
            for (b, s, r) in &results {
                if *b != benchmark {
                    continue;
                }
                match r {
                    Ok(o) => outcomes.push(o.clone()),
                    Err(e) => errors.push((*s, e.to_string())),
                }
            }
            let reports: Vec<RunReport> = outcomes.iter().map(|o| o.report.clone()).collect();
            let metrics = AggregateMetrics::from_reports(&reports, errors.len());
            SuiteResult {
                benchmark,
                noise_count,
                outcomes,
                errors,
                metrics,
            }
        })
        .collect()
}

/// True iff the gate keeps exactly the real variables. A fallback gate is
/// imperfect whenever noise columns exist.
pub fn is_perfect_filter(gates: &GateVector, noise_mask: &[bool]) -> bool {
    if gates.fallback_applied && noise_mask.iter().any(|&m| m) {
        return false;
    }
    gates.binary.len() == noise_mask.len() && gates.binary.iter().zip(noise_mask).all(|(&keep, &noise)| keep != noise)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterTrial {
    pub benchmark: Benchmark,
    pub noise_count: usize,
    pub seed: u64,
    pub probabilities: Vec<f64>,
    /// Perfect-filter outcome for each requested Otsu scale.
    pub perfect: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterAccuracy {
    pub noise_count: usize,
    pub otsu_scale: f64,
    pub trials: usize,
    pub perfect: usize,
    pub rate: f64,
}

/// Gating accuracy per noise setting. The averaged probabilities do not
/// depend on the Otsu scale, so one training serves every scale.
pub fn ngm_accuracy_suite(
    benchmarks: &[Benchmark],
    noise_counts: &[usize],
    seeds: &[u64],
    hyper: &NgmHyper,
    otsu_scales: &[f64],
    ngm_rows: usize,
) -> Result<(Vec<FilterTrial>, Vec<FilterAccuracy>), BenchError> {
    let jobs: Vec<(Benchmark, usize, u64)> = noise_counts
        .iter()
        .flat_map(|&n| benchmarks.iter().flat_map(move |&b| seeds.iter().map(move |&s| (b, n, s))))
        .collect();
    let trials: Vec<FilterTrial> = jobs
        .par_iter()
        .map(|&(benchmark, noise_count, seed)| -> Result<FilterTrial, BenchError> {
            let data = draw_dataset(
                benchmark,
                noise_count,
                ngm_rows,
                &mut RngStream::new(seed, streams::DATA).child(0).rng(),
            )?;
            let training = train_ngm(&data, hyper, RngStream::new(seed, streams::NGM))?;
            let probabilities = training.gates.probabilities;
            let perfect = otsu_scales
                .iter()
                .map(|&scale| {
                    GateVector::from_probabilities(probabilities.clone(), scale)
                        .map(|g| is_perfect_filter(&g, &data.noise_mask))
                })
                .collect::<Result<Vec<_>, _>>()?;
            Ok(FilterTrial {
                benchmark,
                noise_count,
                seed,
                probabilities,
                perfect,
            })
        })
        .collect::<Result<_, _>>()?;
    let mut summary = Vec::new();
    for &noise_count in noise_counts {
        for (k, &otsu_scale) in otsu_scales.iter().enumerate() {
            let set: Vec<&FilterTrial> = trials.iter().filter(|t| t.noise_count == noise_count).collect();
            let perfect = set.iter().filter(|t| t.perfect[k]).count();
            summary.push(FilterAccuracy {
                noise_count,
                otsu_scale,
                trials: set.len(),
                perfect,
                rate: if set.is_empty() { 0.0 } else { perfect as f64 / set.len() as f64 },
            });
        }
    }
    Ok((trials, summary))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rl::{nrmse_of_predictions, reward_from_nrmse, RunStatus};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_sizes() -> Sizes {
        Sizes {
            ngm: 500,
            reward: 20,
            eval: 20,
        }
    }

    #[test]
    fn benchmark_names_round_trip() {
        for b in Benchmark::ALL {
            assert_eq!(b.to_string().parse::<Benchmark>().unwrap(), b);
        }
        assert_eq!("Nguyen7".parse::<Benchmark>().unwrap(), Benchmark::nguyen(7).unwrap());
        assert!("nguyen-13".parse::<Benchmark>().is_err());
        let json = serde_json::to_string(&Benchmark::nguyen(4).unwrap()).unwrap();
        assert_eq!(json, "\"nguyen-4\"");
    }

    #[test]
    fn datasets_follow_the_protocol() {
        for b in Benchmark::ALL {
            let spec = b.spec();
            let d = make_datasets(b, 3, small_sizes(), RngStream::new(9, streams::DATA)).unwrap();
            for (set, rows) in [(&d.ngm, 500), (&d.reward, 20), (&d.eval, 20)] {
                assert_eq!(set.rows(), rows);
                assert_eq!(set.columns(), spec.variable_count + 3);
                let mut want = vec![false; spec.variable_count];
                want.extend([true; 3]);
                assert_eq!(set.noise_mask, want);
                assert!(set.x.iter().all(|&v| v >= spec.low && v < spec.high));
                for (row, &y) in set.x.rows().into_iter().zip(&set.y) {
                    let real: Vec<f64> = row.iter().take(spec.variable_count).copied().collect();
                    assert_eq!(b.ground_truth(&real), y);
                }
            }
            assert_ne!(d.reward.x, d.eval.x);
        }
    }

    #[test]
    fn noise_columns_do_not_move_the_target() {
        let b = Benchmark::nguyen(9).unwrap();
        let d = draw_dataset(b, 4, 50, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for (i, row) in d.x.rows().into_iter().enumerate() {
            let mut shuffled = row.to_vec();
            shuffled[2..].reverse();
            assert_eq!(b.ground_truth(&shuffled[..2]), d.y[i]);
        }
    }

    #[test]
    fn datasets_are_reproducible() {
        let b = Benchmark::nguyen(3).unwrap();
        let a = make_datasets(b, 2, small_sizes(), RngStream::new(4, streams::DATA)).unwrap();
        let c = make_datasets(b, 2, small_sizes(), RngStream::new(4, streams::DATA)).unwrap();
        assert_eq!(a, c);
        let other = make_datasets(b, 2, small_sizes(), RngStream::new(5, streams::DATA)).unwrap();
        assert_ne!(a.reward, other.reward);
    }

    #[test]
    fn reference_traversals_reproduce_targets() {
        for b in Benchmark::ALL {
            let d = make_datasets(b, 0, small_sizes(), RngStream::new(2, streams::DATA)).unwrap();
            let lib = TokenLibrary::standard(d.reward.columns());
            let t = Traversal::parse(&b.reference_traversal(), &lib).unwrap();
            for set in [&d.ngm, &d.reward, &d.eval] {
                let e = nmse(&t, &lib, set).unwrap().unwrap();
                assert!(e < 1e-20, "{b}: nmse {e}");
            }
        }
    }

    #[test]
    fn mean_predictor_identities() {
        for b in Benchmark::ALL {
            let d = make_datasets(b, 1, small_sizes(), RngStream::new(3, streams::DATA)).unwrap();
            for set in [&d.ngm, &d.reward, &d.eval] {
                let m = crate::dataset::mean(&set.y);
                let pred = vec![m; set.rows()];
                let e = nmse_of_predictions(&pred, &set.y).unwrap().unwrap();
                assert!((e - 1.0).abs() < 1e-12, "{b}: {e}");
                let r = reward_from_nrmse(nrmse_of_predictions(&pred, set).unwrap());
                assert!((r.reward - 0.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn invalid_predictions_have_no_nmse() {
        assert_eq!(nmse_of_predictions(&[1.0, f64::NAN], &[0.0, 1.0]).unwrap(), None);
        assert!(matches!(
            nmse_of_predictions(&[1.0, 2.0], &[3.0, 3.0]),
            Err(BenchError::ZeroVariance)
        ));
    }

    fn report(recovered: bool, een: u64, uen: u64, nmse: Option<f64>) -> RunReport {
        RunReport {
            recovered,
            best_traversal: None,
            best_infix: None,
            best_reward: 0.0,
            expressions_consumed: een,
            unique_expressions: uen,
            eval_nmse: nmse,
            iterations: 0,
            wall_time_secs: 0.0,
            seed: 0,
            status: RunStatus::BudgetExhausted,
        }
    }

    #[test]
    fn aggregation_by_hand() {
        let reports = [
            report(true, 40_000, 30_000, Some(0.0)),
            report(false, 2_000_000, 1_500_000, Some(0.3)),
            report(true, 100_000, 80_000, None),
            report(true, 60_000, 50_000, Some(0.1)),
        ];
        let m = AggregateMetrics::from_reports(&reports, 1);
        assert_eq!(m.runs, 4);
        assert_eq!(m.failures, 1);
        assert_eq!(m.recovery_rate, 0.75);
        assert_eq!(m.mean_een, 2_200_000.0 / 4.0);
        assert_eq!(m.median_een, 80_000.0);
        assert!((m.mean_nmse - 0.4 / 3.0).abs() < 1e-15);
        assert_eq!(m.invalid_nmse, 1);
        assert_eq!(m.uen_total, 160_000);
        assert_eq!(m.een_total, 2_200_000);
        assert!((m.eer - 160_000.0 / 2_200_000.0).abs() < 1e-15);
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
    }

    #[test]
    fn perfect_filter_cases() {
        let noise = [false, true, true];
        let mut g = GateVector::all_open(3);
        assert!(!is_perfect_filter(&g, &noise));
        g.binary = vec![true, false, false];
        assert!(is_perfect_filter(&g, &noise));
        g.binary = vec![true, true, false];
        assert!(!is_perfect_filter(&g, &noise));
        let mut fb = GateVector::all_open(1);
        fb.fallback_applied = true;
        assert!(is_perfect_filter(&fb, &[false]));
    }

    #[test]
    fn suite_runs_are_deterministic_and_ordered() {
        let mut cfg = ExperimentConfig {
            sizes: Sizes {
                ngm: 400,
                reward: 20,
                eval: 20,
            },
            use_ngm: false,
            ..ExperimentConfig::default()
        };
        cfg.trainer.batch_size = 100;
        cfg.trainer.max_expressions = 300;
        cfg.trainer.hidden_size = 8;
        let benches = [Benchmark::nguyen(1).unwrap(), Benchmark::nguyen(9).unwrap()];
        let a = run_suite(&benches, 1, &[0, 1], &cfg);
        let b = run_suite(&benches, 1, &[0, 1], &cfg);
        assert_eq!(a.len(), 2);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.benchmark, y.benchmark);
            assert_eq!(x.outcomes.iter().map(|o| o.seed).collect::<Vec<_>>(), vec![0, 1]);
            for (p, q) in x.outcomes.iter().zip(&y.outcomes) {
                assert!(p.report.same_outcome(&q.report));
                assert!(p.gates.binary.iter().all(|&g| g));
            }
            assert_eq!(x.metrics.runs, 2);
        }
    }
}
