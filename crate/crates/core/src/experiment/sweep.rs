use std::path::{Path, PathBuf};

use super::{run_to_dir, Manifest};
use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::par::map_range_pool;
use crate::policyopt::Algorithm;

/// Cartesian grid of (algorithm, capacity, seed) cells over a base config.
#[derive(Debug, Clone)]
pub struct SweepPlan {
    pub base: ExperimentConfig,
    pub algorithms: Vec<Algorithm>,
    pub capacities: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl SweepPlan {
    /// One single-seed config per cell, in algorithm, capacity, seed order.
    pub fn cells(&self) -> Vec<(Algorithm, usize, u64, ExperimentConfig)> {
        let mut out = Vec::new();
        for &alg in &self.algorithms {
            for &cap in &self.capacities {
                for &seed in &self.seeds {
                    let mut cfg = self.base.clone();
                    cfg.loss.algorithm = alg;
                    cfg.buffer_capacity = cap;
                    cfg.seeds = vec![seed];
                    out.push((alg, cap, seed, cfg));
                }
            }
        }
        out
    }
}

pub fn cell_dir(root: &Path, alg: Algorithm, capacity: usize, seed: u64) -> PathBuf {
    root.join(alg.name()).join(format!("cap{capacity}")).join(format!("seed{seed}"))
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SweepOutcome {
    pub ran: usize,
    pub skipped: usize,
}

/// Runs every cell that does not already hold a complete manifest for the
/// same config, using up to `threads` cells at once. Cells that fail do not
/// stop the others; the first failure is returned after all cells finish.
pub fn run_sweep(plan: &SweepPlan, root: &Path, threads: usize, executable_sha256: Option<String>) -> Result<SweepOutcome> {
    for cfg in plan.cells().iter().map(|c| &c.3) {
        cfg.validate()?;
    }
    let cells = plan.cells();
    let results = map_range_pool(threads, cells.len(), |i| -> Result<bool> {
        let (alg, cap, seed, cfg) = &cells[i];
        let dir = cell_dir(root, *alg, *cap, *seed);
        if Manifest::is_complete_for(&dir, cfg) {
            log::info!("skip {}", dir.display());
            return Ok(false);
        }
        log::info!("run {}", dir.display());
        run_to_dir(cfg, &dir, executable_sha256.clone())?;
        Ok(true)
    });
    let mut outcome = SweepOutcome::default();
    for r in results {
        if r? {
            outcome.ran += 1;
        } else {
            outcome.skipped += 1;
        }
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::super::tests::tiny;
    use super::*;

    #[test]
    fn sweep_runs_then_skips_and_reruns_broken_cells() {
        let root = tempfile::tempdir().unwrap();
        let plan = SweepPlan {
            base: tiny(Algorithm::Vaco, 1, vec![0]),
            algorithms: vec![Algorithm::Vaco, Algorithm::PpoClip],
            capacities: vec![1, 2],
            seeds: vec![0, 1],
        };
        assert_eq!(plan.cells().len(), 8);
        assert_eq!(run_sweep(&plan, root.path(), 2, None).unwrap(), SweepOutcome { ran: 8, skipped: 0 });
        assert_eq!(run_sweep(&plan, root.path(), 1, None).unwrap(), SweepOutcome { ran: 0, skipped: 8 });

        // An interrupted cell leaves an incomplete manifest behind.
        let dir = cell_dir(root.path(), Algorithm::PpoClip, 2, 1);
        let mut m = Manifest::load(&dir).unwrap();
        m.complete = false;
        m.save(&dir).unwrap();
        assert_eq!(run_sweep(&plan, root.path(), 1, None).unwrap(), SweepOutcome { ran: 1, skipped: 7 });
    }
}
