//! Exact evaluation of the performance-difference identity and the lower and
//! upper bounds built on it. Every expectation is an enumeration over
//! `S x A` weighted by an exact discounted state distribution.

use serde::Serialize;

use super::exact::{discounted_state_dist, exact_q_advantage, exact_return, kl_state, tv_state};
use super::mdp::{TabularMdp, TabularPolicy};
use crate::error::Result;

/// `E_{a~pi} A_base(s, a)` per state, evaluated as
/// `E_{a~pi} Q_base(s, a) - E_{a~base} Q_base(s, a)`. Both sums run in the
/// same order, so the result is exactly 0 wherever `pi` and `base` agree.
fn policy_advantage_by_state(pi: &TabularPolicy, base: &TabularPolicy, q_base: &[f64]) -> Vec<f64> {
    let na = pi.num_actions();
    let dot = |p: &TabularPolicy, s: usize| (0..na).map(|a| p.prob(s, a) * q_base[s * na + a]).sum::<f64>();
    (0..pi.num_states()).map(|s| dot(pi, s) - dot(base, s)).collect()
}

fn weighted(d: &[f64], by_state: &[f64]) -> f64 {
    d.iter().zip(by_state).map(|(w, x)| w * x).sum()
}

fn max_abs(by_state: &[f64]) -> f64 {
    by_state.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// `max_s | E_{a~pi} adv(s,a) |`.
pub fn epsilon(pi: &TabularPolicy, adv: &[f64]) -> f64 {
    let na = pi.num_actions();
    (0..pi.num_states())
        .map(|s| (0..na).map(|a| pi.prob(s, a) * adv[s * na + a]).sum::<f64>().abs())
        .fold(0.0, f64::max)
}

/// `E_{s~d} [ D_TV(p || q)[s] ]`.
pub fn expected_tv(d: &[f64], p: &TabularPolicy, q: &TabularPolicy) -> f64 {
    d.iter().enumerate().map(|(s, w)| w * tv_state(p, q, s)).sum()
}

/// Both sides of the performance difference identity
/// `J(new) - J(old) = 1/(1-g) E_{s~d^new, a~new} A_old(s,a)`.
pub fn perf_diff_exact(mdp: &TabularMdp, new: &TabularPolicy, old: &TabularPolicy) -> Result<(f64, f64)> {
    let lhs = exact_return(mdp, new)? - exact_return(mdp, old)?;
    let (q_old, _) = exact_q_advantage(mdp, old)?;
    let d_new = discounted_state_dist(mdp, new)?;
    let rhs = weighted(&d_new, &policy_advantage_by_state(new, old, &q_old)) / (1.0 - mdp.gamma());
    Ok((lhs, rhs))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SandwichBound {
    pub d_minus: f64,
    pub true_diff: f64,
    pub d_plus: f64,
    /// Surrogate `L_old(new) = 1/(1-g) E_{s~d^old, a~old}[new/old * A_old]`.
    pub surrogate: f64,
    pub epsilon: f64,
    pub expected_tv: f64,
}

/// Two-sided TV bound on `J(new) - J(old)`:
/// `L_old(new) -/+ 2 g eps / (1-g)^2 * E_{s~d^old} D_TV(new || old)[s]`.
///
/// `L_old(new)` already carries its `1/(1-g)` factor.
pub fn theorem1_bounds(mdp: &TabularMdp, new: &TabularPolicy, old: &TabularPolicy) -> Result<SandwichBound> {
    let g = mdp.gamma();
    let (q_old, _) = exact_q_advantage(mdp, old)?;
    let d_old = discounted_state_dist(mdp, old)?;
    // E_{a~old}[new/old * A] summed over actions is E_{a~new}[A]; no division needed.
    let by_state = policy_advantage_by_state(new, old, &q_old);
    let surrogate = weighted(&d_old, &by_state) / (1.0 - g);
    let eps = max_abs(&by_state);
    let etv = expected_tv(&d_old, new, old);
    let slack = 2.0 * g * eps / (1.0 - g).powi(2) * etv;
    let true_diff = exact_return(mdp, new)? - exact_return(mdp, old)?;
    Ok(SandwichBound {
        d_minus: surrogate - slack,
        true_diff,
        d_plus: surrogate + slack,
        surrogate,
        epsilon: eps,
        expected_tv: etv,
    })
}

/// Term decomposition of the lower bound under backward and forward lag.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Default)]
pub struct LagTerms {
    /// Importance-weighted advantage of the candidate policy.
    pub advantage: f64,
    /// Importance-weighted advantage of the initial learner (subtracted); zero
    /// when the advantage is taken with respect to the learner itself.
    pub backward_advantage: f64,
    /// TV penalty between behavior and candidate.
    pub forward_tv: f64,
    /// TV penalty between behavior and initial learner; zero for the realigned form.
    pub backward_tv: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LowerBound {
    pub bound: f64,
    pub true_diff: f64,
    pub terms: LagTerms,
}

impl LowerBound {
    pub fn margin(&self) -> f64 {
        self.true_diff - self.bound
    }
}

/// Lower bound on `J(pi) - J(pi_t)` from data of `beta`, using the behavior
/// advantage `A_beta` (four terms: advantage, backward advantage, forward TV,
/// backward TV).
pub fn lemma2_lower_bound(
    mdp: &TabularMdp,
    pi: &TabularPolicy,
    pi_t: &TabularPolicy,
    beta: &TabularPolicy,
) -> Result<LowerBound> {
    let g = mdp.gamma();
    let (q_beta, _) = exact_q_advantage(mdp, beta)?;
    let d_beta = discounted_state_dist(mdp, beta)?;
    let scale = 1.0 / (1.0 - g);
    let adv_pi = policy_advantage_by_state(pi, beta, &q_beta);
    let adv_t = policy_advantage_by_state(pi_t, beta, &q_beta);
    let (eps_pi, eps_t) = (max_abs(&adv_pi), max_abs(&adv_t));
    let terms = LagTerms {
        advantage: scale * weighted(&d_beta, &adv_pi),
        backward_advantage: -scale * weighted(&d_beta, &adv_t),
        forward_tv: -scale * 2.0 * g * eps_pi / (1.0 - g) * expected_tv(&d_beta, beta, pi),
        backward_tv: -scale * 2.0 * g * eps_t / (1.0 - g) * expected_tv(&d_beta, beta, pi_t),
    };
    let bound = terms.advantage + terms.backward_advantage + terms.forward_tv + terms.backward_tv;
    let true_diff = exact_return(mdp, pi)? - exact_return(mdp, pi_t)?;
    Ok(LowerBound { bound, true_diff, terms })
}

/// Lower bound on `J(pi) - J(pi_t)` from data of `beta` with the advantage
/// realigned to the learner, `A_{pi_t}`. At `pi = pi_t` both terms vanish.
pub fn lemma3_lower_bound(
    mdp: &TabularMdp,
    pi: &TabularPolicy,
    pi_t: &TabularPolicy,
    beta: &TabularPolicy,
) -> Result<LowerBound> {
    let g = mdp.gamma();
    let (q_t, _) = exact_q_advantage(mdp, pi_t)?;
    let d_beta = discounted_state_dist(mdp, beta)?;
    let scale = 1.0 / (1.0 - g);
    let adv_pi = policy_advantage_by_state(pi, pi_t, &q_t);
    let eps_pi = max_abs(&adv_pi);
    let terms = LagTerms {
        advantage: scale * weighted(&d_beta, &adv_pi),
        forward_tv: -scale * 2.0 * g * eps_pi / (1.0 - g) * expected_tv(&d_beta, beta, pi),
        ..LagTerms::default()
    };
    let true_diff = exact_return(mdp, pi)? - exact_return(mdp, pi_t)?;
    Ok(LowerBound { bound: terms.advantage + terms.forward_tv, true_diff, terms })
}

/// `(||d^new - d^old||_1, 2g/(1-g) E_{s~d^old} D_TV(new || old)[s])`; the first
/// never exceeds the second.
pub fn state_dist_tv_check(mdp: &TabularMdp, new: &TabularPolicy, old: &TabularPolicy) -> Result<(f64, f64)> {
    let g = mdp.gamma();
    let d_new = discounted_state_dist(mdp, new)?;
    let d_old = discounted_state_dist(mdp, old)?;
    let lhs = d_new.iter().zip(&d_old).map(|(a, b)| (a - b).abs()).sum();
    let rhs = 2.0 * g / (1.0 - g) * expected_tv(&d_old, new, old);
    Ok((lhs, rhs))
}

/// Expected-TV form of Pinsker's inequality over the discounted state
/// distribution of `p`: returns `(E[D_TV(p||q)]^2, E[D_KL(p||q)] / 2)`.
pub fn pinsker_check(p: &TabularPolicy, q: &TabularPolicy, mdp: &TabularMdp) -> Result<(f64, f64)> {
    let d = discounted_state_dist(mdp, p)?;
    let tv = expected_tv(&d, p, q);
    let kl: f64 = d
        .iter()
        .enumerate()
        .map(|(s, w)| if *w == 0.0 { 0.0 } else { w * kl_state(p, q, s) })
        .sum();
    Ok((tv * tv, kl / 2.0))
}
