//! `laglab`: run, sweep, verify and report.
//!
//! Exit codes: 0 success, 1 runtime failure (including failed verification),
//! 2 usage or configuration error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use laglab_core::config::ExperimentConfig;
use laglab_core::error::LabError;
use laglab_core::eval::BootstrapConfig;
use laglab_core::experiment::{build_report, run_sweep, run_to_dir, SweepPlan};
use laglab_core::par::Exec;
use laglab_core::policyopt::Algorithm;
use laglab_core::verify::{gradient_suite, lemma_suite, vtrace_suite, zero_backward_lag_suite, Fault, SuiteReport};
use sha2::{Digest, Sha256};

#[derive(Parser)]
#[command(name = "laglab", version, about = "Policy-lag laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment per seed into a single output directory.
    Run {
        #[command(flatten)]
        common: Common,
        /// Seeds to run, overriding the config's seed list.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Run the algorithm x capacity x seed grid, skipping finished cells.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', required = true)]
        capacities: Vec<usize>,
        #[arg(long, value_delimiter = ',', required = true)]
        algos: Vec<Algorithm>,
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
    },
    /// Run the numerical property suites and print a pass/fail table.
    Verify {
        #[arg(value_enum)]
        suite: Suite,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Instances (or minibatches, for the gradient suite) per suite.
        #[arg(long)]
        instances: Option<usize>,
        #[arg(long, hide = true, default_value = "none")]
        inject_fault: Fault,
    },
    /// Aggregate every finished run under a directory into CSVs and SVGs.
    Report {
        /// Results directory (defaults to --out).
        dir: Option<PathBuf>,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        resamples: usize,
    },
}

#[derive(Args)]
struct Common {
    /// TOML config file. Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-key override, e.g. `--set loss.delta=0.1`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory (overrides the config's `out`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Maximum number of sweep cells run at once.
    #[arg(long, env = "LAGLAB_THREADS", default_value_t = 1)]
    threads: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum Suite {
    Lemmas,
    Vtrace,
    Gradients,
    All,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<LabError> for Failure {
    fn from(e: LabError) -> Self {
        match e {
            LabError::Config(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig, Failure> {
    let base = match &common.config {
        Some(path) => {
            if !path.is_file() {
                return Err(Failure::Usage(format!("config file not found: {}", path.display())));
            }
            ExperimentConfig::load(path)?
        }
        None => ExperimentConfig::default(),
    };
    let mut cfg = base.with_overrides(&common.overrides)?;
    if let Some(out) = &common.out {
        cfg.out = out.display().to_string();
    }
    Ok(cfg)
}

fn executable_sha256() -> Option<String> {
    let bytes = std::fs::read(std::env::current_exe().ok()?).ok()?;
    Some(hex::encode(Sha256::digest(bytes)))
}

fn cmd_run(common: &Common, seeds: &[u64]) -> Result<(), Failure> {
    let mut cfg = load_config(common)?;
    if !seeds.is_empty() {
        cfg.seeds = seeds.to_vec();
    }
    cfg.validate()?;
    let dir = PathBuf::from(&cfg.out);
    let manifest = run_to_dir(&cfg, &dir, executable_sha256())?;
    for r in &manifest.runs {
        println!("seed {}: final return {:.4} ({} iterations)", r.seed, r.final_return, r.iterations);
    }
    println!("wrote {}", dir.display());
    Ok(())
}

fn cmd_sweep(common: &Common, capacities: &[usize], algos: &[Algorithm], seeds: &[u64]) -> Result<(), Failure> {
    let base = load_config(common)?;
    if capacities.contains(&0) {
        return Err(Failure::Usage("capacities must be >= 1".into()));
    }
    let plan = SweepPlan { base, algorithms: algos.to_vec(), capacities: capacities.to_vec(), seeds: seeds.to_vec() };
    let root = PathBuf::from(&plan.base.out);
    let start = Instant::now();
    let outcome = run_sweep(&plan, &root, common.threads.max(1), executable_sha256())?;
    println!(
        "sweep: {} cells run, {} skipped, {:.1}s, results under {}",
        outcome.ran,
        outcome.skipped,
        start.elapsed().as_secs_f64(),
        root.display()
    );
    Ok(())
}

fn cmd_verify(suite: Suite, seed: u64, instances: Option<usize>, fault: Fault) -> Result<(), Failure> {
    let exec = Exec::Parallel;
    let mut reports: Vec<SuiteReport> = Vec::new();
    if matches!(suite, Suite::Lemmas | Suite::All) {
        reports.push(lemma_suite(seed, instances.unwrap_or(1000), fault, exec)?);
        reports.push(zero_backward_lag_suite(seed, instances.unwrap_or(200), fault, exec)?);
    }
    if matches!(suite, Suite::Vtrace | Suite::All) {
        reports.push(vtrace_suite(seed, instances.unwrap_or(200), fault, exec)?);
    }
    if matches!(suite, Suite::Gradients | Suite::All) {
        reports.push(gradient_suite(seed, instances.unwrap_or(50), fault, exec)?);
    }
    for r in &reports {
        println!("{r}");
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.suite.as_str()).collect();
    if failed.is_empty() {
        println!("all suites passed");
        Ok(())
    } else {
        Err(Failure::Runtime(format!("verification failed: {}", failed.join(", "))))
    }
}

fn cmd_report(dir: &Path, resamples: usize) -> Result<(), Failure> {
    if !dir.is_dir() {
        return Err(Failure::Usage(format!("no runs found under {}", dir.display())));
    }
    let cfg = BootstrapConfig { resamples, ..Default::default() };
    let summary = build_report(dir, &cfg)?;
    println!("{} runs in {} groups", summary.runs, summary.groups);
    for f in &summary.files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match &cli.command {
        Command::Run { common, seeds } => cmd_run(common, seeds),
        Command::Sweep { common, capacities, algos, seeds } => cmd_sweep(common, capacities, algos, seeds),
        Command::Verify { suite, seed, instances, inject_fault } => cmd_verify(*suite, *seed, *instances, *inject_fault),
        Command::Report { dir, out, resamples } => cmd_report(dir.as_ref().unwrap_or(out), *resamples),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
