//! Run directories: manifests, per-seed stats streams and eval curves, lag
//! sweeps over a grid of cells, and the aggregate report.
//!
//! A run directory holds `manifest.json`, `run_<seed>.jsonl` (one
//! `IterationStats` per line) and `eval_<seed>.csv`. The manifest carries the
//! full config, so a `RunRecord` can be rebuilt from the directory alone.

mod report;
mod svg;
mod sweep;

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::asyncsim::{run_experiment, EvalPoint, RunRecord};
use crate::config::ExperimentConfig;
use crate::error::{LabError, Result};
use crate::policyopt::IterationStats;

pub use report::{build_report, ReportSummary};
pub use svg::{Plot, Series};
pub use sweep::{cell_dir, run_sweep, SweepOutcome, SweepPlan};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRun {
    pub seed: u64,
    pub record_hash: String,
    pub final_return: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub config: ExperimentConfig,
    pub config_hash: String,
    /// SHA-256 of the executable that produced the runs, when known.
    pub executable_sha256: Option<String>,
    pub runs: Vec<ManifestRun>,
    pub complete: bool,
}

impl Manifest {
    pub fn new(config: &ExperimentConfig, executable_sha256: Option<String>) -> Self {
        Self {
            version: env!("CARGO_PKG_VERSION").into(),
            config: config.clone(),
            config_hash: config.hash(),
            executable_sha256,
            runs: Vec::new(),
            complete: false,
        }
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join(MANIFEST))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Writes through a temporary file so an interrupted write never
    /// leaves a truncated manifest behind.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let tmp = dir.join(format!("{MANIFEST}.tmp"));
        fs::write(&tmp, serde_json::to_string_pretty(self)?)?;
        fs::rename(tmp, dir.join(MANIFEST))?;
        Ok(())
    }

    /// True when `dir` holds a finished manifest for exactly `config`.
    pub fn is_complete_for(dir: &Path, config: &ExperimentConfig) -> bool {
        match Self::load(dir) {
            Ok(m) => m.complete && m.config_hash == config.hash() && m.runs.len() == config.seeds.len(),
            Err(_) => false,
        }
    }
}

pub fn stats_path(dir: &Path, seed: u64) -> PathBuf {
    dir.join(format!("run_{seed}.jsonl"))
}

pub fn eval_path(dir: &Path, seed: u64) -> PathBuf {
    dir.join(format!("eval_{seed}.csv"))
}

fn write_eval_csv(path: &Path, curve: &[EvalPoint]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "iteration,env_steps,mean_return")?;
    for p in curve {
        writeln!(w, "{},{},{}", p.iteration, p.env_steps, p.mean_return)?;
    }
    w.flush()?;
    Ok(())
}

fn read_eval_csv(path: &Path) -> Result<Vec<EvalPoint>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate().skip(1) {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: &str| LabError::Parse { line: i + 1, msg: format!("{}: {msg}", path.display()) };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 3 {
            return Err(bad("expected 3 fields"));
        }
        out.push(EvalPoint {
            iteration: f[0].parse().map_err(|_| bad("bad iteration"))?,
            env_steps: f[1].parse().map_err(|_| bad("bad env_steps"))?,
            mean_return: f[2].parse().map_err(|_| bad("bad mean_return"))?,
        });
    }
    Ok(out)
}

/// Runs every seed of `config` into `dir`, streaming stats as they are
/// produced. The manifest is marked complete only after the last seed.
pub fn run_to_dir(config: &ExperimentConfig, dir: &Path, executable_sha256: Option<String>) -> Result<Manifest> {
    config.validate()?;
    fs::create_dir_all(dir)?;
    let mut manifest = Manifest::new(config, executable_sha256);
    manifest.save(dir)?;
    for &seed in &config.seeds {
        let mut w = BufWriter::new(File::create(stats_path(dir, seed))?);
        let record = run_experiment(config, seed, |s| {
            serde_json::to_writer(&mut w, s)?;
            w.write_all(b"\n")?;
            w.flush()?;
            Ok(())
        })?;
        drop(w);
        write_eval_csv(&eval_path(dir, seed), &record.eval_curve)?;
        log::info!("seed {seed}: final return {:.4}", record.final_return);
        manifest.runs.push(ManifestRun {
            seed,
            record_hash: record.hash(),
            final_return: record.final_return,
            iterations: record.stats.len(),
        });
        manifest.save(dir)?;
    }
    manifest.complete = true;
    manifest.save(dir)?;
    Ok(manifest)
}

/// Rebuilds the `RunRecord` of `seed` from a run directory.
pub fn load_record(dir: &Path, manifest: &Manifest, seed: u64) -> Result<RunRecord> {
    let reader = BufReader::new(File::open(stats_path(dir, seed))?);
    let mut stats = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            stats.push(serde_json::from_str::<IterationStats>(&line)?);
        }
    }
    let eval_curve = read_eval_csv(&eval_path(dir, seed))?;
    let final_return = eval_curve.last().map(|p| p.mean_return).unwrap_or(0.0);
    Ok(RunRecord { config: manifest.config.clone(), seed, stats, eval_curve, final_return })
}
