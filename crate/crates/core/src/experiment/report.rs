//! Aggregate CSVs and plots over every completed run under a directory.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::svg::{Plot, Series};
use super::{load_record, Manifest, MANIFEST};
use crate::asyncsim::RunRecord;
use crate::env::make_env;
use crate::error::{LabError, Result};
use crate::eval::{bootstrap_difference_ci, iqm, normalize, stratified_bootstrap_ci, BootstrapConfig, ScoreMatrix, Statistic};

#[derive(Debug, Clone, PartialEq)]
pub struct ReportSummary {
    pub runs: usize,
    pub groups: usize,
    pub files: Vec<PathBuf>,
}

struct Entry {
    task: String,
    record: RunRecord,
    bounds: (f64, f64),
}

impl Entry {
    fn normalized(&self, raw: f64) -> f64 {
        normalize(&[raw], self.bounds.0, self.bounds.1)[0]
    }
}

type Group = (String, usize);

fn find_manifests(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<std::io::Result<Vec<_>>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let path = e.path();
        if path.is_dir() {
            if e.file_name() != "report" {
                find_manifests(&path, out)?;
            }
        } else if e.file_name() == MANIFEST {
            out.push(dir.to_path_buf());
        }
    }
    Ok(())
}

fn load_entries(root: &Path) -> Result<Vec<Entry>> {
    let mut dirs = Vec::new();
    if root.is_dir() {
        find_manifests(root, &mut dirs)?;
    }
    let mut entries = Vec::new();
    for dir in dirs {
        let m = Manifest::load(&dir)?;
        if !m.complete {
            log::warn!("skipping incomplete run directory {}", dir.display());
            continue;
        }
        let cfg = &m.config;
        let bounds = make_env(&cfg.env, cfg.horizon)?.return_bounds();
        let task = match cfg.horizon {
            Some(h) => format!("{}@{h}", cfg.env),
            None => cfg.env.clone(),
        };
        for run in &m.runs {
            let record = load_record(&dir, &m, run.seed)?;
            entries.push(Entry { task: task.clone(), record, bounds });
        }
    }
    Ok(entries)
}

/// Scores of one group as a run-by-task matrix. Tasks with more runs than
/// others are truncated to the smallest count, in seed order.
fn score_matrix(entries: &[&Entry], tasks: &[String], score: impl Fn(&Entry) -> f64) -> Option<ScoreMatrix> {
    let mut per_task: Vec<Vec<(u64, f64)>> = Vec::new();
    for t in tasks {
        let mut col: Vec<(u64, f64)> = entries.iter().filter(|e| &e.task == t).map(|e| (e.record.seed, score(e))).collect();
        col.sort_by_key(|c| c.0);
        per_task.push(col);
    }
    let runs = per_task.iter().map(Vec::len).min().unwrap_or(0);
    if runs == 0 {
        return None;
    }
    if per_task.iter().any(|c| c.len() != runs) {
        log::warn!("uneven run counts across tasks; truncating to {runs}");
    }
    ScoreMatrix::new((0..runs).map(|r| per_task.iter().map(|c| c[r].1).collect()).collect()).ok()
}

fn csv_file(dir: &Path, name: &str, body: String, files: &mut Vec<PathBuf>) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, body)?;
    files.push(path);
    Ok(())
}

/// Writes `report/` under `root`: per-run scores, aggregate metrics with
/// bootstrap intervals, capacity degradation, IQM learning curves and TV
/// traces, plus SVG plots of the last three.
pub fn build_report(root: &Path, bootstrap: &BootstrapConfig) -> Result<ReportSummary> {
    let entries = load_entries(root)?;
    if entries.is_empty() {
        return Err(LabError::NoRuns(root.display().to_string()));
    }
    let out = root.join("report");
    fs::create_dir_all(&out)?;
    let tasks: Vec<String> = entries.iter().map(|e| e.task.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let mut groups: BTreeMap<Group, Vec<&Entry>> = BTreeMap::new();
    for e in &entries {
        let c = &e.record.config;
        groups.entry((c.loss.algorithm.name().to_string(), c.buffer_capacity)).or_default().push(e);
    }
    let mut files = Vec::new();

    let mut runs_csv = String::from("algorithm,capacity,task,seed,final_return,normalized_return,mean_tv_end,max_tv_end\n");
    for ((alg, cap), es) in &groups {
        for e in es {
            let tv: Vec<f64> = e.record.stats.iter().filter(|s| !s.skipped).map(|s| s.tv_end).collect();
            let mean_tv = if tv.is_empty() { 0.0 } else { tv.iter().sum::<f64>() / tv.len() as f64 };
            let max_tv = tv.iter().copied().fold(0.0, f64::max);
            let _ = writeln!(
                runs_csv,
                "{alg},{cap},{},{},{},{},{mean_tv},{max_tv}",
                e.task,
                e.record.seed,
                e.record.final_return,
                e.normalized(e.record.final_return)
            );
        }
    }
    csv_file(&out, "runs.csv", runs_csv, &mut files)?;

    let finals: BTreeMap<&Group, ScoreMatrix> = groups
        .iter()
        .filter_map(|(g, es)| score_matrix(es, &tasks, |e| e.normalized(e.record.final_return)).map(|m| (g, m)))
        .collect();

    let mut agg_csv = String::from("algorithm,capacity,runs,statistic,value,ci_low,ci_high\n");
    for ((alg, cap), m) in &finals {
        for stat in Statistic::ALL {
            let (lo, hi) = stratified_bootstrap_ci(m, |x| stat.of(x), bootstrap)?;
            let _ = writeln!(agg_csv, "{alg},{cap},{},{},{},{lo},{hi}", m.runs(), stat.name(), stat.of(m));
        }
    }
    csv_file(&out, "aggregates.csv", agg_csv, &mut files)?;

    let mut deg_csv = String::from("algorithm,capacity,baseline_capacity,iqm_degradation,ci_low,ci_high\n");
    let algorithms: BTreeSet<&String> = finals.keys().map(|g| &g.0).collect();
    for alg in &algorithms {
        let cells: Vec<(&usize, &ScoreMatrix)> = finals.iter().filter(|(g, _)| &&g.0 == alg).map(|(g, m)| (&g.1, m)).collect();
        let (base_cap, base) = cells[0];
        for (cap, m) in &cells[1..] {
            let d = Statistic::Iqm.of(base) - Statistic::Iqm.of(m);
            let (lo, hi) = bootstrap_difference_ci(base, m, |x| Statistic::Iqm.of(x), bootstrap)?;
            let _ = writeln!(deg_csv, "{alg},{cap},{base_cap},{d},{lo},{hi}");
        }
    }
    csv_file(&out, "degradation.csv", deg_csv, &mut files)?;

    // Metric against capacity, one line per algorithm.
    let mut cap_plot = Plot {
        title: "Final normalized return vs buffer capacity".into(),
        x_label: "policy buffer capacity".into(),
        y_label: "IQM normalized return".into(),
        ..Default::default()
    };
    for alg in &algorithms {
        let mut points = Vec::new();
        let mut band = Vec::new();
        for ((a, cap), m) in &finals {
            if a == *alg {
                let (lo, hi) = stratified_bootstrap_ci(m, |x| Statistic::Iqm.of(x), bootstrap)?;
                points.push((*cap as f64, Statistic::Iqm.of(m)));
                band.push((*cap as f64, lo, hi));
            }
        }
        cap_plot.series.push(Series { label: (*alg).clone(), points, band: Some(band) });
    }
    csv_file(&out, "metric_vs_capacity.svg", cap_plot.render(), &mut files)?;

    let mut curve_csv = String::from("algorithm,capacity,eval_index,iteration,env_steps,iqm_normalized_return\n");
    let mut curve_plot = Plot {
        title: "IQM normalized return vs environment steps".into(),
        x_label: "environment steps".into(),
        y_label: "IQM normalized return".into(),
        ..Default::default()
    };
    for ((alg, cap), es) in &groups {
        let len = es.iter().map(|e| e.record.eval_curve.len()).min().unwrap_or(0);
        let mut points = Vec::new();
        for j in 0..len {
            let vals: Vec<f64> = es.iter().map(|e| e.normalized(e.record.eval_curve[j].mean_return)).collect();
            let p = &es[0].record.eval_curve[j];
            let v = iqm(&vals)?;
            let _ = writeln!(curve_csv, "{alg},{cap},{j},{},{},{v}", p.iteration, p.env_steps);
            points.push((p.env_steps as f64, v));
        }
        curve_plot.series.push(Series { label: format!("{alg} cap{cap}"), points, band: None });
    }
    csv_file(&out, "iqm_curves.csv", curve_csv, &mut files)?;
    csv_file(&out, "iqm_curves.svg", curve_plot.render(), &mut files)?;

    let mut tv_csv = String::from("algorithm,capacity,iteration,mean_tv,min_tv,max_tv,half_delta\n");
    let mut tv_plot = Plot {
        title: "End-of-iteration total variation".into(),
        x_label: "iteration".into(),
        y_label: "batch TV estimate".into(),
        ..Default::default()
    };
    let mut half_deltas = BTreeSet::new();
    for ((alg, cap), es) in &groups {
        let half = es[0].record.config.loss.delta / 2.0;
        half_deltas.insert(half.to_bits());
        let len = es.iter().map(|e| e.record.stats.len()).min().unwrap_or(0);
        let mut points = Vec::new();
        let mut band = Vec::new();
        for i in 0..len {
            let tv: Vec<f64> = es.iter().map(|e| &e.record.stats[i]).filter(|s| !s.skipped).map(|s| s.tv_end).collect();
            if tv.is_empty() {
                continue;
            }
            let mean = tv.iter().sum::<f64>() / tv.len() as f64;
            let lo = tv.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = tv.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let _ = writeln!(tv_csv, "{alg},{cap},{i},{mean},{lo},{hi},{half}");
            points.push((i as f64, mean));
            band.push((i as f64, lo, hi));
        }
        tv_plot.series.push(Series { label: format!("{alg} cap{cap}"), points, band: Some(band) });
    }
    tv_plot.hlines = half_deltas.into_iter().map(|b| (f64::from_bits(b), "delta / 2".to_string())).collect();
    csv_file(&out, "tv_traces.csv", tv_csv, &mut files)?;
    csv_file(&out, "tv_traces.svg", tv_plot.render(), &mut files)?;

    Ok(ReportSummary { runs: entries.len(), groups: groups.len(), files })
}
