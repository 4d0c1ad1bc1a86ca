//! Minibatch loss expressions on the scalar tape.
//!
//! Every loss takes per-sample ratio (and log-probability) nodes so callers
//! decide what is a leaf. All returned nodes are losses to be minimized.

use crate::approx::tape::{sign, Tape, Var};
use crate::error::{LabError, Result};

use super::{FilterCondition, PpoForm};

/// `(1 / 2N) sum |ratio - 1|`.
pub fn tv_estimate(ratios: &[f64]) -> Result<f64> {
    if ratios.is_empty() {
        return Err(LabError::EmptyBatch);
    }
    Ok(ratios.iter().map(|r| (r - 1.0).abs()).sum::<f64>() / (2.0 * ratios.len() as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterMask {
    /// `true` keeps the gradient of a point.
    pub keep: Vec<bool>,
    pub active: bool,
}

impl FilterMask {
    pub fn all(n: usize) -> Self {
        Self { keep: vec![true; n], active: false }
    }

    pub fn masked_fraction(&self) -> f64 {
        if self.keep.is_empty() {
            return 0.0;
        }
        self.keep.iter().filter(|k| !**k).count() as f64 / self.keep.len() as f64
    }
}

/// Detaches points whose gradient would increase the TV estimate, but only
/// once the estimate exceeds `delta / 2`.
pub fn vaco_filter_mask(
    ratios: &[f64],
    advantages: &[f64],
    logprobs: &[f64],
    c_h: f64,
    delta: f64,
    condition: FilterCondition,
) -> Result<FilterMask> {
    if tv_estimate(ratios)? <= delta / 2.0 {
        return Ok(FilterMask::all(ratios.len()));
    }
    let keep = ratios
        .iter()
        .zip(advantages)
        .zip(logprobs)
        .map(|((r, a), lp)| {
            let coeff = match condition {
                FilterCondition::Alg1Literal => a - c_h,
                FilterCondition::LogprobCoefficient => a - c_h * lp,
            };
            coeff * sign(r - 1.0) <= 0.0
        })
        .collect();
    Ok(FilterMask { keep, active: true })
}

/// `exp(logp - behavior)` clamped to the ratio range.
pub fn ratio_nodes(tape: &mut Tape, logp: &[Var], behavior: &[f64]) -> Vec<Var> {
    logp.iter()
        .zip(behavior)
        .map(|(&lp, &b)| {
            let d = tape.add_const(lp, -b);
            let r = tape.exp(d);
            tape.clamp(r, crate::advantage::RATIO_MIN, crate::advantage::RATIO_MAX)
        })
        .collect()
}

/// `-(1/N) sum ratio_i (A_i - c_H logp_i)`, with masked terms detached.
pub fn vaco_policy_loss(
    tape: &mut Tape,
    ratios: &[Var],
    logp: &[Var],
    advantages: &[f64],
    mask: &FilterMask,
    c_h: f64,
) -> Var {
    let terms: Vec<Var> = (0..ratios.len())
        .map(|i| {
            let ent = tape.scale(logp[i], -c_h);
            let coeff = tape.add_const(ent, advantages[i]);
            let t = tape.mul(ratios[i], coeff);
            if mask.keep[i] {
                t
            } else {
                tape.detach(t)
            }
        })
        .collect();
    let m = tape.mean(&terms);
    tape.neg(m)
}

/// Clipped surrogate. `Min` is the pessimistic `min(rA, clip(r)A)`;
/// `LiteralClip` uses `clip(r)A` alone.
pub fn ppo_clip_loss(tape: &mut Tape, ratios: &[Var], advantages: &[f64], delta: f64, form: PpoForm) -> Var {
    let terms: Vec<Var> = ratios
        .iter()
        .zip(advantages)
        .map(|(&r, &a)| {
            let c = tape.clamp(r, 1.0 - delta, 1.0 + delta);
            let clipped = tape.scale(c, a);
            match form {
                PpoForm::Min => {
                    let plain = tape.scale(r, a);
                    tape.min(plain, clipped)
                }
                PpoForm::LiteralClip => clipped,
            }
        })
        .collect();
    let m = tape.mean(&terms);
    tape.neg(m)
}

/// `mean(r - 1 - ln r)`, an unbiased non-negative estimate of `KL(beta || pi)`
/// under behavior samples.
pub fn kl_estimate(tape: &mut Tape, ratios: &[Var]) -> Var {
    let terms: Vec<Var> = ratios
        .iter()
        .map(|&r| {
            let l = tape.ln(r);
            let d = tape.sub(r, l);
            tape.add_const(d, -1.0)
        })
        .collect();
    tape.mean(&terms)
}

/// Clipped surrogate plus `kl_coeff * KL`. With `kl_coeff == 0` the penalty
/// is not recorded, so the result equals [`ppo_clip_loss`] bit for bit.
pub fn kl_penalty_loss(
    tape: &mut Tape,
    ratios: &[Var],
    advantages: &[f64],
    delta: f64,
    form: PpoForm,
    kl_coeff: f64,
) -> Var {
    let clip = ppo_clip_loss(tape, ratios, advantages, delta, form);
    if kl_coeff == 0.0 {
        return clip;
    }
    let kl = kl_estimate(tape, ratios);
    let pen = tape.scale(kl, kl_coeff);
    tape.add(clip, pen)
}

/// `-mean(rA) + spo_coeff * mean((r - 1)^2)`.
pub fn spo_loss(tape: &mut Tape, ratios: &[Var], advantages: &[f64], spo_coeff: f64) -> Var {
    let gain: Vec<Var> = ratios.iter().zip(advantages).map(|(&r, &a)| tape.scale(r, a)).collect();
    let pen: Vec<Var> = ratios
        .iter()
        .map(|&r| {
            let d = tape.add_const(r, -1.0);
            tape.square(d)
        })
        .collect();
    let g = tape.mean(&gain);
    let p = tape.mean(&pen);
    let p = tape.scale(p, spo_coeff);
    tape.sub(p, g)
}

/// `-mean(coeff_i * logp_i * A_i)` with `coeff_i = min(rho_bar, r_i)` held
/// constant: the V-trace policy gradient.
pub fn impala_policy_loss(tape: &mut Tape, logp: &[Var], clipped_ratios: &[f64], advantages: &[f64]) -> Var {
    let terms: Vec<Var> =
        logp.iter().zip(clipped_ratios).zip(advantages).map(|((&lp, &c), &a)| tape.scale(lp, c * a)).collect();
    let m = tape.mean(&terms);
    tape.neg(m)
}

/// `(1/2N) sum (V_i - v_i)^2`, or the pessimistic clipped form around
/// `old_values` when `clip` is given.
pub fn value_loss(tape: &mut Tape, values: &[Var], targets: &[f64], clip: Option<(&[f64], f64)>) -> Var {
    let terms: Vec<Var> = values
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let e = tape.add_const(v, -targets[i]);
            let sq = tape.square(e);
            match clip {
                None => sq,
                Some((old, eps)) => {
                    let d = tape.add_const(v, -old[i]);
                    let d = tape.clamp(d, -eps, eps);
                    let e2 = tape.add_const(d, old[i] - targets[i]);
                    let sq2 = tape.square(e2);
                    tape.max(sq, sq2)
                }
            }
        })
        .collect();
    let m = tape.mean(&terms);
    tape.scale(m, 0.5)
}

/// `-c_H * mean(H_i)`.
pub fn entropy_bonus(tape: &mut Tape, entropies: &[Var], c_h: f64) -> Var {
    let m = tape.mean(entropies);
    tape.scale(m, -c_h)
}
