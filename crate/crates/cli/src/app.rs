//! Argument parsing and dispatch.

use crate::commands::{self, CliError, Result, EXIT_CONFIG};
use crate::config::RunConfig;
use clap::{Args, Parser, Subcommand};
use std::ffi::OsString;
use std::path::PathBuf;
use symreg_core::bench::Benchmark;

#[derive(Debug, Parser)]
#[command(name = "symreg", version, about = "Symbolic regression with input gating and policy-gradient search")]
pub struct Cli {
    /// TOML configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Default)]
pub struct Common {
    #[arg(long)]
    pub benchmark: Option<String>,
    /// Number of irrelevant input columns.
    #[arg(long, allow_hyphen_values = true)]
    pub noise: Option<i64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads; 0 uses every core.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Expression budget per run.
    #[arg(long)]
    pub budget: Option<u64>,
    #[arg(long)]
    pub no_ngm: bool,
    #[arg(long)]
    pub no_path_entropy: bool,
    #[arg(long)]
    pub no_ppo: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the gating, reward and evaluation CSVs.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Overwrite existing files.
        #[arg(long)]
        force: bool,
    },
    /// Train the gating network and write gates.json.
    TrainNgm {
        #[command(flatten)]
        common: Common,
        /// Directory written by gen-data; generated in memory when absent.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// One search run: report, log, best expression, gates and policy.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Gate file from train-ngm; trained in-process when absent.
        #[arg(long)]
        gates: Option<PathBuf>,
    },
    /// Every (benchmark, seed) pair; completed pairs are skipped.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Comma-separated list, or `all`.
        #[arg(long, value_delimiter = ',')]
        benchmarks: Option<Vec<String>>,
        /// `a..b` (half-open) or a comma-separated list.
        #[arg(long)]
        seeds: Option<String>,
    },
    /// Rebuild summary.csv from a bench directory.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
}

fn parse_benchmark(s: &str) -> Result<Benchmark> {
    s.parse().map_err(|e: symreg_core::bench::BenchError| CliError::Usage(e.to_string()))
}

pub fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let bad = || CliError::Usage(format!("invalid seed list `{s}`"));
    if let Some((a, b)) = s.split_once("..") {
        let (a, b): (u64, u64) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
        if a >= b {
            return Err(bad());
        }
        return Ok((a..b).collect());
    }
    s.split(',').map(|t| t.trim().parse().map_err(|_| bad())).collect()
}

impl Common {
    pub fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        if let Some(b) = &self.benchmark {
            cfg.run.benchmark = parse_benchmark(b)?;
        }
        if let Some(n) = self.noise {
            cfg.run.noise_count =
                usize::try_from(n).map_err(|_| CliError::Usage(format!("noise count must be non-negative, got {n}")))?;
        }
        if let Some(s) = self.seed {
            cfg.run.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.run.output = o.clone();
        }
        if let Some(j) = self.jobs {
            cfg.run.jobs = j;
        }
        if let Some(b) = self.budget {
            cfg.trainer.max_expressions = b;
        }
        cfg.toggles.use_ngm &= !self.no_ngm;
        cfg.toggles.use_path_entropy &= !self.no_path_entropy;
        cfg.toggles.use_ppo &= !self.no_ppo;
        Ok(())
    }
}

fn load_config(path: Option<&PathBuf>) -> Result<RunConfig> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

fn in_pool<T: Send>(jobs: usize, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    pool.install(f)
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn dispatch(cli: Cli) -> Result<()> {
    let mut cfg = load_config(cli.config.as_ref())?;
    match cli.command {
        Command::GenData { common, force } => {
            common.apply(&mut cfg)?;
            cfg.validate()?;
            let files = commands::cmd_gen_data(&cfg, &cfg.run.output, force)?;
            for f in files {
                println!("wrote {}", f.display());
            }
        }
        Command::TrainNgm { common, data } => {
            common.apply(&mut cfg)?;
            cfg.validate()?;
            let out = cfg.run.output.join("gates.json");
            let gates = in_pool(cfg.run.jobs, || commands::cmd_train_ngm(&cfg, data.as_deref(), &out))?;
            println!("{}", gates.summary());
            println!("wrote {}", out.display());
        }
        Command::Run { common, data, gates } => {
            common.apply(&mut cfg)?;
            cfg.validate()?;
            let out = cfg.run.output.clone();
            let record = in_pool(cfg.run.jobs, || commands::cmd_run(&cfg, data.as_deref(), gates.as_deref(), &out))?;
            let r = &record.report;
            if !record.ablation.is_empty() {
                println!("ablation: {}", record.ablation.join(", "));
            }
            println!("kept variables: {}", record.kept_variables.join(" "));
            println!(
                "recovered: {}  expressions: {}  unique: {}  best reward: {:.6}",
                r.recovered, r.expressions_consumed, r.unique_expressions, r.best_reward
            );
            println!("traversal: {}", r.best_traversal.as_deref().unwrap_or("-"));
            println!("infix: {}", r.best_infix.as_deref().unwrap_or("-"));
            println!("wrote {}", out.display());
        }
        Command::Bench { common, benchmarks, seeds } => {
            common.apply(&mut cfg)?;
            if let Some(list) = benchmarks {
                cfg.run.benchmarks = if list.iter().any(|b| b == "all") {
                    Benchmark::ALL.to_vec()
                } else {
                    list.iter().map(|b| parse_benchmark(b)).collect::<Result<_>>()?
                };
            }
            if let Some(s) = seeds {
                cfg.run.seeds = parse_seeds(&s)?;
            }
            cfg.validate()?;
            let out = cfg.run.output.clone();
            let outcome = in_pool(cfg.run.jobs, || commands::cmd_bench(&cfg, &out))?;
            println!("completed {} runs, skipped {} existing", outcome.completed, outcome.skipped);
            for f in &outcome.failures {
                eprintln!("failed: {f}");
            }
            print!("{}", commands::format_rows(&outcome.rows));
            println!("wrote {}", out.join("summary.csv").display());
        }
        Command::Report { dir } => {
            let rows = commands::cmd_report(&dir)?;
            print!("{}", commands::format_rows(&rows));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_lists() {
        assert_eq!(parse_seeds("0..4").unwrap(), vec![0, 1, 2, 3]);
        assert_eq!(parse_seeds("5, 2,9").unwrap(), vec![5, 2, 9]);
        assert!(parse_seeds("3..3").is_err());
        assert!(parse_seeds("a").is_err());
    }

    #[test]
    fn flags_override_file() {
        let mut cfg = RunConfig::default();
        let common = Common {
            benchmark: Some("nguyen-4".into()),
            noise: Some(3),
            budget: Some(1000),
            no_ppo: true,
            ..Common::default()
        };
        common.apply(&mut cfg).unwrap();
        assert_eq!(cfg.run.benchmark.index(), 4);
        assert_eq!(cfg.run.noise_count, 3);
        assert_eq!(cfg.trainer.max_expressions, 1000);
        assert!(!cfg.toggles.use_ppo && cfg.toggles.use_ngm);
    }

    #[test]
    fn negative_noise_is_a_config_error() {
        let mut cfg = RunConfig::default();
        let common = Common {
            noise: Some(-1),
            ..Common::default()
        };
        let err = common.apply(&mut cfg).unwrap_err();
        assert_eq!(err.exit_code(), EXIT_CONFIG);
        assert!(err.to_string().contains("non-negative"));
    }
}
