//! Aggregate metrics over run grids.
//!
//! Conventions follow the rliable family: IQM and optimality gap are taken
//! over all (run, task) scores pooled together, while median and mean are
//! taken over per-task mean scores. Intervals come from a stratified
//! percentile bootstrap that resamples runs independently within each task.

use rand::Rng;

use crate::error::{LabError, Result};
use crate::par::{map_range, Exec};
use crate::rng;

/// `(x - min) / (max - min)`; a degenerate range maps everything to 0.5.
pub fn normalize(raw: &[f64], min: f64, max: f64) -> Vec<f64> {
    if max <= min {
        log::warn!("degenerate normalization range [{min}, {max}]; emitting 0.5");
        return vec![0.5; raw.len()];
    }
    raw.iter().map(|x| (x - min) / (max - min)).collect()
}

/// Interquartile mean with fractional trimming.
///
/// With the sorted values `x_0..x_{n-1}`, value `x_i` occupies `[i, i+1]` on
/// the rank axis and receives weight equal to its overlap with
/// `[n/4, 3n/4]`, divided by `n/2`. When `n` is divisible by 4 this is the
/// plain mean of the middle half.
pub fn iqm(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(LabError::EmptyBatch);
    }
    let mut xs = values.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let (lo, hi) = (n / 4.0, 3.0 * n / 4.0);
    let total: f64 = xs
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let w = ((i + 1) as f64).min(hi) - (i as f64).max(lo);
            if w > 0.0 {
                w * x
            } else {
                0.0
            }
        })
        .sum();
    Ok(total / (n / 2.0))
}

pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(LabError::EmptyBatch);
    }
    let mut xs = values.to_vec();
    xs.sort_by(f64::total_cmp);
    let m = xs.len() / 2;
    Ok(if xs.len() % 2 == 1 { xs[m] } else { 0.5 * (xs[m - 1] + xs[m]) })
}

pub fn mean(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(LabError::EmptyBatch);
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// `mean(1 - min(x, 1))`.
pub fn optimality_gap(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(LabError::EmptyBatch);
    }
    Ok(values.iter().map(|x| 1.0 - x.min(1.0)).sum::<f64>() / values.len() as f64)
}

/// Normalized scores, `scores[run][task]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    scores: Vec<Vec<f64>>,
}

impl ScoreMatrix {
    pub fn new(scores: Vec<Vec<f64>>) -> Result<Self> {
        let tasks = scores.first().map_or(0, Vec::len);
        if tasks == 0 || scores.iter().any(|r| r.len() != tasks) {
            return Err(LabError::ShapeMismatch("score matrix must be rectangular and non-empty".into()));
        }
        if scores.iter().flatten().any(|x| !x.is_finite()) {
            return Err(LabError::Config("score matrix contains non-finite values".into()));
        }
        Ok(Self { scores })
    }

    pub fn runs(&self) -> usize {
        self.scores.len()
    }

    pub fn tasks(&self) -> usize {
        self.scores[0].len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.scores
    }

    pub fn flat(&self) -> Vec<f64> {
        self.scores.iter().flatten().copied().collect()
    }

    pub fn task_means(&self) -> Vec<f64> {
        (0..self.tasks()).map(|t| self.scores.iter().map(|r| r[t]).sum::<f64>() / self.runs() as f64).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aggregate {
    pub median: f64,
    pub iqm: f64,
    pub mean: f64,
    pub optimality_gap: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Statistic {
    Median,
    Iqm,
    Mean,
    OptimalityGap,
}

impl Statistic {
    pub const ALL: [Statistic; 4] = [Self::Median, Self::Iqm, Self::Mean, Self::OptimalityGap];

    pub fn name(self) -> &'static str {
        match self {
            Self::Median => "median",
            Self::Iqm => "iqm",
            Self::Mean => "mean",
            Self::OptimalityGap => "optimality_gap",
        }
    }

    pub fn of(self, m: &ScoreMatrix) -> f64 {
        let r = match self {
            Self::Median => median(&m.task_means()),
            Self::Iqm => iqm(&m.flat()),
            Self::Mean => mean(&m.task_means()),
            Self::OptimalityGap => optimality_gap(&m.flat()),
        };
        r.expect("score matrices are non-empty")
    }
}

pub fn aggregate(m: &ScoreMatrix) -> Aggregate {
    Aggregate {
        median: Statistic::Median.of(m),
        iqm: Statistic::Iqm.of(m),
        mean: Statistic::Mean.of(m),
        optimality_gap: Statistic::OptimalityGap.of(m),
    }
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (i, frac) = (pos.floor() as usize, pos - pos.floor());
    if i + 1 >= sorted.len() {
        sorted[sorted.len() - 1]
    } else {
        sorted[i] + frac * (sorted[i + 1] - sorted[i])
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BootstrapConfig {
    pub resamples: usize,
    pub confidence: f64,
    pub seed: u64,
    pub exec: Exec,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self { resamples: 2000, confidence: 0.95, seed: 0, exec: Exec::Parallel }
    }
}

/// Percentile interval of `statistic` under stratified run resampling.
/// Resample `r` uses its own stream, so results do not depend on `exec`.
pub fn stratified_bootstrap_ci<F>(m: &ScoreMatrix, statistic: F, cfg: &BootstrapConfig) -> Result<(f64, f64)>
where
    F: Fn(&ScoreMatrix) -> f64 + Sync + Send,
{
    check_bootstrap(cfg)?;
    let mut stats = map_range(cfg.exec, cfg.resamples, |r| {
        statistic(&resample(m, &mut rng::stream(cfg.seed, r as u64)))
    });
    Ok(percentile_interval(&mut stats, cfg.confidence))
}

/// Interval for `statistic(a) - statistic(b)` where both groups are
/// resampled independently, as for two cells of a run grid.
pub fn bootstrap_difference_ci<F>(a: &ScoreMatrix, b: &ScoreMatrix, statistic: F, cfg: &BootstrapConfig) -> Result<(f64, f64)>
where
    F: Fn(&ScoreMatrix) -> f64 + Sync + Send,
{
    check_bootstrap(cfg)?;
    if a.tasks() != b.tasks() {
        return Err(LabError::ShapeMismatch("groups must share the task set".into()));
    }
    let mut stats = map_range(cfg.exec, cfg.resamples, |r| {
        let mut rng = rng::stream(cfg.seed, r as u64);
        let ra = resample(a, &mut rng);
        let rb = resample(b, &mut rng);
        statistic(&ra) - statistic(&rb)
    });
    Ok(percentile_interval(&mut stats, cfg.confidence))
}

fn check_bootstrap(cfg: &BootstrapConfig) -> Result<()> {
    if cfg.resamples == 0 || !(0.0..1.0).contains(&cfg.confidence) {
        return Err(LabError::Config("bootstrap needs resamples >= 1 and confidence in (0,1)".into()));
    }
    Ok(())
}

/// Draws runs with replacement independently for every task.
fn resample(m: &ScoreMatrix, rng: &mut rng::LabRng) -> ScoreMatrix {
    let (runs, tasks) = (m.runs(), m.tasks());
    let mut rows = vec![vec![0.0; tasks]; runs];
    for t in 0..tasks {
        for row in rows.iter_mut() {
            row[t] = m.scores[rng.random_range(0..runs)][t];
        }
    }
    ScoreMatrix { scores: rows }
}

fn percentile_interval(stats: &mut [f64], confidence: f64) -> (f64, f64) {
    stats.sort_by(f64::total_cmp);
    let tail = (1.0 - confidence) / 2.0;
    (quantile(stats, tail), quantile(stats, 1.0 - tail))
}

/// Trapezoidal area under `(steps, scores)`, divided by the step span.
pub fn auc(steps: &[f64], scores: &[f64]) -> Result<f64> {
    if steps.len() != scores.len() || steps.len() < 2 {
        return Err(LabError::ShapeMismatch("auc needs two or more aligned points".into()));
    }
    let span = steps[steps.len() - 1] - steps[0];
    if span <= 0.0 || steps.windows(2).any(|w| w[1] < w[0]) {
        return Err(LabError::Config("auc steps must be increasing".into()));
    }
    let area: f64 = (1..steps.len()).map(|i| 0.5 * (scores[i] + scores[i - 1]) * (steps[i] - steps[i - 1])).sum();
    Ok(area / span)
}
