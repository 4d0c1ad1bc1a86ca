use std::time::Instant;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::loss::{self, FilterMask};
use super::{Algorithm, LossConfig};
use crate::advantage::{self, normalize, AdvantageEstimate, Trajectories};
use crate::approx::{adam_step, clip_grad_norm, Architecture, OptimizerState, Tape};
use crate::env::RolloutBatch;
use crate::error::{LabError, Result};
use crate::rng::LabRng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub gamma: f64,
    pub lambda: f64,
    pub rho_bar: f64,
    pub c_bar: f64,
    pub normalize_advantages: bool,
    pub max_grad_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossConfig::default(),
            gamma: 0.99,
            lambda: 0.95,
            rho_bar: 1.0,
            c_bar: 1.0,
            normalize_advantages: false,
            max_grad_norm: 0.5,
        }
    }
}

/// Per-iteration training record, one JSON line per iteration.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IterationStats {
    pub iteration: usize,
    pub env_steps: u64,
    /// Mean minibatch TV estimate at minibatch entry, per epoch.
    pub epoch_tv: Vec<f64>,
    /// Fraction of minibatches with the filter active, per epoch.
    pub epoch_filter_active: Vec<f64>,
    /// Full-batch TV estimate before the first update (backward lag).
    pub tv_start: f64,
    /// Largest `|ratio - 1|` over the full batch before the first update.
    pub max_ratio_dev_start: f64,
    /// Full-batch TV estimate after the last update.
    pub tv_end: f64,
    /// TV estimate of the last minibatch after its update.
    pub tv_final_minibatch: f64,
    pub filter_active_fraction: f64,
    pub masked_fraction: f64,
    pub clip_fraction: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub grad_norm: f64,
    pub learning_rate: f64,
    pub vtrace_recomputations: usize,
    pub advantage_fingerprint: String,
    pub episodes_completed: usize,
    pub episode_return_mean: Option<f64>,
    pub eval_return: Option<f64>,
    /// Set when the update was rolled back after a non-finite loss.
    pub skipped: bool,
    pub wall_time: f64,
}

/// Gathered rows of one minibatch.
#[derive(Debug, Clone)]
pub struct Minibatch {
    pub observations: Array2<f64>,
    pub actions: Array2<f64>,
    pub behavior_logprob: Vec<f64>,
    pub advantages: Vec<f64>,
    pub value_targets: Vec<f64>,
    pub old_values: Vec<f64>,
    /// `min(rho_bar, ratio)` at realignment time; used by IMPALA.
    pub clipped_ratios: Vec<f64>,
}

impl Minibatch {
    pub fn len(&self) -> usize {
        self.behavior_logprob.len()
    }

    pub fn is_empty(&self) -> bool {
        self.behavior_logprob.is_empty()
    }
}

pub fn gather_minibatch(
    batch: &RolloutBatch,
    est: &AdvantageEstimate,
    old_values: &[f64],
    idx: &[usize],
    rho_bar: f64,
    normalize_adv: bool,
) -> Minibatch {
    let pick = |xs: &[f64]| idx.iter().map(|&i| xs[i]).collect::<Vec<_>>();
    let mut advantages = pick(&est.advantages);
    if normalize_adv {
        normalize(&mut advantages);
    }
    Minibatch {
        observations: batch.observations_view().select(Axis(0), idx),
        actions: batch.actions_view().select(Axis(0), idx),
        behavior_logprob: pick(&batch.behavior_logprob),
        advantages,
        value_targets: pick(&est.value_targets),
        old_values: pick(old_values),
        clipped_ratios: idx.iter().map(|&i| est.ratios[i].min(rho_bar)).collect(),
    }
}

/// Mask and log-probabilities frozen at a reference point. Evaluating an
/// objective with an anchor treats masked points as constants taken from the
/// anchor, which is exactly the function whose gradient the detached loss
/// reports.
#[derive(Debug, Clone)]
pub struct Anchor {
    pub logp: Vec<f64>,
    pub mask: FilterMask,
}

#[derive(Debug, Clone)]
pub struct Objective {
    pub loss: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub grad: Vec<f64>,
    pub logp: Vec<f64>,
    pub tv: f64,
    pub mask: FilterMask,
    pub clip_fraction: f64,
}

/// Loss and full parameter gradient of one minibatch.
pub fn minibatch_objective(
    arch: &Architecture,
    params: &[f64],
    mb: &Minibatch,
    cfg: &TrainConfig,
    anchor: Option<&Anchor>,
) -> Result<Objective> {
    if mb.is_empty() {
        return Err(LabError::EmptyBatch);
    }
    let lc = &cfg.loss;
    let pf = arch.policy_forward(params, mb.observations.view())?;
    let vf = arch.value_forward(params, mb.observations.view())?;
    let logp = pf.logprobs(mb.actions.view());
    let ent = pf.entropies();
    let values = vf.values();
    let ratios = advantage::ratios(&logp, &mb.behavior_logprob)?;
    let tv = loss::tv_estimate(&ratios)?;
    let mask = match (anchor, lc.algorithm) {
        (Some(a), _) => a.mask.clone(),
        (None, Algorithm::Vaco) => loss::vaco_filter_mask(
            &ratios,
            &mb.advantages,
            &logp,
            lc.entropy_coeff,
            lc.delta,
            lc.filter_condition,
        )?,
        (None, _) => FilterMask::all(mb.len()),
    };
    let clip_fraction = ratios.iter().filter(|r| (*r - 1.0).abs() > lc.delta).count() as f64 / mb.len() as f64;

    let mut tape = Tape::new();
    let lp_leaves: Vec<_> = logp.iter().map(|&x| tape.leaf(x)).collect();
    let lp_nodes: Vec<_> = match anchor {
        Some(a) => (0..mb.len()).map(|i| if a.mask.keep[i] { lp_leaves[i] } else { tape.constant(a.logp[i]) }).collect(),
        None => lp_leaves.clone(),
    };
    let h_leaves: Vec<_> = ent.iter().map(|&x| tape.leaf(x)).collect();
    let v_leaves: Vec<_> = values.iter().map(|&x| tape.leaf(x)).collect();
    let r_nodes = loss::ratio_nodes(&mut tape, &lp_nodes, &mb.behavior_logprob);
    let adv = &mb.advantages;
    let mut policy = match lc.algorithm {
        Algorithm::Vaco => loss::vaco_policy_loss(&mut tape, &r_nodes, &lp_nodes, adv, &mask, lc.entropy_coeff),
        Algorithm::PpoClip => loss::ppo_clip_loss(&mut tape, &r_nodes, adv, lc.delta, lc.ppo_form),
        Algorithm::PpoKl => loss::kl_penalty_loss(&mut tape, &r_nodes, adv, lc.delta, lc.ppo_form, lc.kl_coeff),
        Algorithm::Spo => loss::spo_loss(&mut tape, &r_nodes, adv, lc.spo_coeff),
        Algorithm::Impala => loss::impala_policy_loss(&mut tape, &lp_nodes, &mb.clipped_ratios, adv),
    };
    if lc.algorithm != Algorithm::Vaco && lc.entropy_coeff > 0.0 {
        let bonus = loss::entropy_bonus(&mut tape, &h_leaves, lc.entropy_coeff);
        policy = tape.add(policy, bonus);
    }
    let clip = lc.clip_value_loss.then_some((mb.old_values.as_slice(), lc.delta));
    let vloss = loss::value_loss(&mut tape, &v_leaves, &mb.value_targets, clip);
    let wp = tape.scale(policy, lc.policy_coeff);
    let wv = tape.scale(vloss, lc.value_coeff);
    let total = tape.add(wp, wv);
    let total_value = tape.value(total);
    if !total_value.is_finite() {
        return Err(LabError::NonFiniteLoss);
    }

    let adj = tape.backward(total);
    let dlogp: Vec<f64> = lp_leaves.iter().map(|&v| adj.wrt(v)).collect();
    let dent: Vec<f64> = h_leaves.iter().map(|&v| adj.wrt(v)).collect();
    let dv: Vec<f64> = v_leaves.iter().map(|&v| adj.wrt(v)).collect();
    let mut grad = vec![0.0; arch.num_params()];
    arch.policy_backward(params, &pf, mb.actions.view(), &dlogp, &dent, &mut grad);
    arch.value_backward(params, &vf, &dv, &mut grad);
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(LabError::NonFiniteGradient);
    }
    Ok(Objective {
        loss: total_value,
        policy_loss: tape.value(policy),
        value_loss: tape.value(vloss),
        entropy: ent.iter().sum::<f64>() / ent.len() as f64,
        grad,
        logp,
        tv,
        mask,
        clip_fraction,
    })
}

/// Learner log-probabilities of the stored actions.
pub fn batch_logprobs(arch: &Architecture, params: &[f64], batch: &RolloutBatch) -> Result<Vec<f64>> {
    Ok(arch.policy_forward(params, batch.observations_view())?.logprobs(batch.actions_view()))
}

/// `(V(s_t), V(s_{t+1}))` over the batch.
pub fn batch_values(arch: &Architecture, params: &[f64], batch: &RolloutBatch) -> Result<(Vec<f64>, Vec<f64>)> {
    let v = arch.value_forward(params, batch.observations_view())?.values();
    let nv = arch.value_forward(params, batch.next_observations_view())?.values();
    Ok((v, nv))
}

/// GAE or V-trace advantages from given critic values and learner params.
pub fn estimate_advantages(
    arch: &Architecture,
    params: &[f64],
    batch: &RolloutBatch,
    values: &[f64],
    next_values: &[f64],
    cfg: &TrainConfig,
) -> Result<AdvantageEstimate> {
    let cuts: Vec<bool> = (0..batch.len()).map(|i| batch.cut(i)).collect();
    let traj = Trajectories { rewards: &batch.rewards, values, next_values, dones: &batch.dones, cuts: &cuts };
    if cfg.loss.algorithm.uses_vtrace() {
        let lp = batch_logprobs(arch, params, batch)?;
        advantage::vtrace_realign(traj, &lp, &batch.behavior_logprob, cfg.rho_bar, cfg.c_bar, cfg.gamma, cfg.lambda)
    } else {
        let mut est = advantage::gae(traj, cfg.gamma, cfg.lambda)?;
        est.ratios = advantage::ratios(&batch_logprobs(arch, params, batch)?, &batch.behavior_logprob)?;
        Ok(est)
    }
}

fn full_batch_ratios(arch: &Architecture, params: &[f64], batch: &RolloutBatch) -> Result<Vec<f64>> {
    advantage::ratios(&batch_logprobs(arch, params, batch)?, &batch.behavior_logprob)
}

/// Splits a shuffled index list into `m` near-equal chunks.
fn chunks(idx: &[usize], m: usize) -> Vec<&[usize]> {
    let n = idx.len();
    (0..m).map(|k| &idx[k * n / m..(k + 1) * n / m]).filter(|c| !c.is_empty()).collect()
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Runs the configured epochs of minibatch updates on one batch.
///
/// `est` is the advantage estimate computed once at iteration start; IMPALA
/// replaces it before every minibatch using the current parameters. On a
/// non-finite loss or gradient the parameters and optimizer state are restored
/// and the error is returned.
#[allow(clippy::too_many_arguments)]
pub fn train_epochs(
    arch: &Architecture,
    params: &mut [f64],
    opt: &mut OptimizerState,
    batch: &RolloutBatch,
    est: &AdvantageEstimate,
    old_values: &[f64],
    cfg: &TrainConfig,
    lr: f64,
    rng: &mut LabRng,
) -> Result<IterationStats> {
    let started = Instant::now();
    cfg.loss.validate()?;
    if batch.is_empty() {
        return Err(LabError::EmptyBatch);
    }
    let saved = (params.to_vec(), opt.clone());
    let fingerprint = est.fingerprint();
    let result = run_epochs(arch, params, opt, batch, est, old_values, cfg, lr, rng);
    match result {
        Ok(mut stats) => {
            debug_assert_eq!(fingerprint, est.fingerprint());
            stats.advantage_fingerprint = fingerprint;
            stats.learning_rate = lr;
            stats.wall_time = started.elapsed().as_secs_f64();
            Ok(stats)
        }
        Err(e) => {
            params.copy_from_slice(&saved.0);
            *opt = saved.1;
            Err(e)
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn run_epochs(
    arch: &Architecture,
    params: &mut [f64],
    opt: &mut OptimizerState,
    batch: &RolloutBatch,
    est: &AdvantageEstimate,
    old_values: &[f64],
    cfg: &TrainConfig,
    lr: f64,
    rng: &mut LabRng,
) -> Result<IterationStats> {
    let lc = &cfg.loss;
    let n = batch.len();
    let start_ratios = full_batch_ratios(arch, params, batch)?;
    let mut stats = IterationStats {
        tv_start: loss::tv_estimate(&start_ratios)?,
        max_ratio_dev_start: start_ratios.iter().map(|r| (r - 1.0).abs()).fold(0.0, f64::max),
        ..Default::default()
    };
    let mut idx: Vec<usize> = (0..n).collect();
    let (mut pl, mut vl, mut en, mut gn, mut masked, mut clipf) = (vec![], vec![], vec![], vec![], vec![], vec![]);
    let mut active_total = 0usize;
    let mut recomputed;
    for _epoch in 0..lc.epochs {
        idx.shuffle(rng);
        let mut tvs = vec![];
        let mut active = 0usize;
        let parts = chunks(&idx, lc.minibatches);
        for part in &parts {
            let mb = if lc.algorithm == Algorithm::Impala {
                let (v, nv) = batch_values(arch, params, batch)?;
                recomputed = estimate_advantages(arch, params, batch, &v, &nv, cfg)?;
                stats.vtrace_recomputations += 1;
                gather_minibatch(batch, &recomputed, old_values, part, cfg.rho_bar, cfg.normalize_advantages)
            } else {
                gather_minibatch(batch, est, old_values, part, cfg.rho_bar, cfg.normalize_advantages)
            };
            let obj = minibatch_objective(arch, params, &mb, cfg, None)?;
            let mut grad = obj.grad;
            gn.push(clip_grad_norm(&mut grad, cfg.max_grad_norm));
            adam_step(params, &grad, opt, lr)?;
            tvs.push(obj.tv);
            active += usize::from(obj.mask.active);
            masked.push(obj.mask.masked_fraction());
            clipf.push(obj.clip_fraction);
            pl.push(obj.policy_loss);
            vl.push(obj.value_loss);
            en.push(obj.entropy);
        }
        active_total += active;
        stats.epoch_tv.push(mean(&tvs));
        stats.epoch_filter_active.push(active as f64 / parts.len() as f64);
        if let Some(last) = parts.last() {
            let lp = arch.policy_forward(params, batch.observations_view().select(Axis(0), last).view())?;
            let acts = batch.actions_view().select(Axis(0), last);
            let behavior: Vec<f64> = last.iter().map(|&i| batch.behavior_logprob[i]).collect();
            stats.tv_final_minibatch = loss::tv_estimate(&advantage::ratios(&lp.logprobs(acts.view()), &behavior)?)?;
        }
    }
    stats.tv_end = loss::tv_estimate(&full_batch_ratios(arch, params, batch)?)?;
    stats.filter_active_fraction = active_total as f64 / gn.len() as f64;
    stats.masked_fraction = mean(&masked);
    stats.clip_fraction = mean(&clipf);
    stats.policy_loss = mean(&pl);
    stats.value_loss = mean(&vl);
    stats.entropy = mean(&en);
    stats.grad_norm = mean(&gn);
    Ok(stats)
}
