//! Per-transition advantages and value targets.
//!
//! Arrays are flat and congruent with a [`RolloutBatch`](crate::env::RolloutBatch).
//! Two per-step flags drive the recursions: `done` zeroes the bootstrap value,
//! and `cut` stops the backward recursion (episode end, truncation, or the end
//! of an actor's slice). `next_values[t]` is `V(s_{t+1})` for the stored next
//! observation, which makes truncation bootstrapping automatic.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{LabError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Gae,
    Vtrace,
}

/// Which critic supplies `V` during realignment: the learner's current value
/// network or the one frozen inside each behavior snapshot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RealignCritic {
    #[default]
    Current,
    Frozen,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageEstimate {
    pub advantages: Vec<f64>,
    pub value_targets: Vec<f64>,
    /// `pi_T / beta_T` at the data points (all ones for GAE).
    pub ratios: Vec<f64>,
    pub method: Method,
}

impl AdvantageEstimate {
    /// Content hash of the arrays, used to check they stay frozen.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for xs in [&self.advantages, &self.value_targets, &self.ratios] {
            for x in xs.iter() {
                h.update(x.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Per-step inputs shared by both estimators.
#[derive(Debug, Clone, Copy)]
pub struct Trajectories<'a> {
    pub rewards: &'a [f64],
    pub values: &'a [f64],
    pub next_values: &'a [f64],
    pub dones: &'a [bool],
    pub cuts: &'a [bool],
}

impl Trajectories<'_> {
    fn check(&self) -> Result<usize> {
        let n = self.rewards.len();
        let lens = [self.values.len(), self.next_values.len(), self.dones.len(), self.cuts.len()];
        if lens.iter().any(|&l| l != n) {
            return Err(LabError::ShapeMismatch(format!("trajectory arrays: {n} rewards vs {lens:?}")));
        }
        if n > 0 && !self.cuts[n - 1] {
            return Err(LabError::ShapeMismatch("last step must end a segment".into()));
        }
        Ok(n)
    }

    fn delta(&self, t: usize, gamma: f64) -> f64 {
        let boot = if self.dones[t] { 0.0 } else { self.next_values[t] };
        self.rewards[t] + gamma * boot - self.values[t]
    }
}

fn check_discount(gamma: f64, lambda: f64) -> Result<()> {
    if (0.0..=1.0).contains(&gamma) && (0.0..=1.0).contains(&lambda) {
        Ok(())
    } else {
        Err(LabError::Config(format!("gamma {gamma} and lambda {lambda} must lie in [0,1]")))
    }
}

/// Generalized advantage estimation.
pub fn gae(traj: Trajectories<'_>, gamma: f64, lambda: f64) -> Result<AdvantageEstimate> {
    let n = traj.check()?;
    check_discount(gamma, lambda)?;
    let mut adv = vec![0.0; n];
    let mut next = 0.0;
    for t in (0..n).rev() {
        if traj.cuts[t] {
            next = 0.0;
        }
        adv[t] = traj.delta(t, gamma) + gamma * lambda * next;
        next = adv[t];
    }
    let value_targets = adv.iter().zip(traj.values).map(|(a, v)| a + v).collect();
    Ok(AdvantageEstimate { advantages: adv, value_targets, ratios: vec![1.0; n], method: Method::Gae })
}

pub const RATIO_MIN: f64 = 1e-8;
pub const RATIO_MAX: f64 = 1e8;

/// `exp(learner - behavior)` clamped to `[1e-8, 1e8]`.
pub fn ratios(learner_logprob: &[f64], behavior_logprob: &[f64]) -> Result<Vec<f64>> {
    if learner_logprob.len() != behavior_logprob.len() {
        return Err(LabError::ShapeMismatch("logprob arrays differ in length".into()));
    }
    learner_logprob
        .iter()
        .zip(behavior_logprob)
        .enumerate()
        .map(|(i, (l, b))| {
            let r = (l - b).exp();
            if r.is_nan() || l.is_nan() || b.is_nan() {
                Err(LabError::NonFiniteRatio(i))
            } else {
                Ok(r.clamp(RATIO_MIN, RATIO_MAX))
            }
        })
        .collect()
}

/// V-trace realignment of the learner advantage from behavior-generated data.
///
/// `v_t = V_t + rho_t delta_t + gamma lambda c_t (v_{t+1} - V_{t+1})` and
/// `A_t = r_t + gamma v_{t+1} - V_t`, where at a segment end `v_{t+1}` is the
/// bootstrap value (or zero when done).
pub fn vtrace_realign(
    traj: Trajectories<'_>,
    learner_logprob: &[f64],
    behavior_logprob: &[f64],
    rho_bar: f64,
    c_bar: f64,
    gamma: f64,
    lambda: f64,
) -> Result<AdvantageEstimate> {
    if !(c_bar > 0.0 && rho_bar >= c_bar) {
        return Err(LabError::PreconditionViolated(format!("need rho_bar >= c_bar > 0, got {rho_bar}, {c_bar}")));
    }
    let n = traj.check()?;
    check_discount(gamma, lambda)?;
    let r = ratios(learner_logprob, behavior_logprob)?;
    let mut vs = vec![0.0; n];
    let mut advantages = vec![0.0; n];
    // Holds v_{t+1} - V(s_{t+1}) for the step after t inside a segment.
    let mut next_corr = 0.0;
    for t in (0..n).rev() {
        if traj.cuts[t] {
            next_corr = 0.0;
        }
        let rho = r[t].min(rho_bar);
        let c = r[t].min(c_bar);
        let corr = rho * traj.delta(t, gamma) + gamma * lambda * c * next_corr;
        vs[t] = traj.values[t] + corr;
        let v_next = if traj.dones[t] { 0.0 } else { traj.next_values[t] + next_corr };
        advantages[t] = traj.rewards[t] + gamma * v_next - traj.values[t];
        next_corr = corr;
    }
    Ok(AdvantageEstimate { advantages, value_targets: vs, ratios: r, method: Method::Vtrace })
}

/// Standardizes to mean 0 and unit (population) standard deviation.
pub fn normalize(xs: &mut [f64]) {
    if xs.len() < 2 {
        return;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let scale = 1.0 / (var.sqrt() + 1e-8);
    for x in xs.iter_mut() {
        *x = (*x - mean) * scale;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[derive(Debug, Clone)]
    struct Owned {
        rewards: Vec<f64>,
        values: Vec<f64>,
        next_values: Vec<f64>,
        dones: Vec<bool>,
        cuts: Vec<bool>,
    }

    impl Owned {
        fn view(&self) -> Trajectories<'_> {
            Trajectories {
                rewards: &self.rewards,
                values: &self.values,
                next_values: &self.next_values,
                dones: &self.dones,
                cuts: &self.cuts,
            }
        }
    }

    /// One episode of `rewards.len()` steps; `values` has one extra entry for
    /// the state after the last step.
    fn episode(rewards: Vec<f64>, values: &[f64], done: bool) -> Owned {
        let n = rewards.len();
        let mut dones = vec![false; n];
        dones[n - 1] = done;
        let mut cuts = vec![false; n];
        cuts[n - 1] = true;
        Owned { rewards, values: values[..n].to_vec(), next_values: values[1..].to_vec(), dones, cuts }
    }

    fn direct_gae(o: &Owned, gamma: f64, lambda: f64) -> Vec<f64> {
        let n = o.rewards.len();
        let delta: Vec<f64> = (0..n).map(|t| o.view().delta(t, gamma)).collect();
        (0..n).map(|t| (t..n).map(|l| (gamma * lambda).powi((l - t) as i32) * delta[l]).sum()).collect()
    }

    fn direct_vtrace(o: &Owned, r: &[f64], rho_bar: f64, c_bar: f64, gamma: f64, lambda: f64) -> Vec<f64> {
        let n = o.rewards.len();
        (0..n)
            .map(|s| {
                let mut total = o.values[s];
                for t in s..n {
                    let trace: f64 = (s..t).map(|i| lambda * r[i].min(c_bar)).product();
                    total += gamma.powi((t - s) as i32) * trace * r[t].min(rho_bar) * o.view().delta(t, gamma);
                }
                total
            })
            .collect()
    }

    #[test]
    fn lambda_zero_is_td_error() {
        let o = episode(vec![1.0, 0.5, -2.0], &[0.3, -0.1, 0.7, 2.0], false);
        let est = gae(o.view(), 0.9, 0.0).unwrap();
        for t in 0..3 {
            assert_eq!(est.advantages[t], o.view().delta(t, 0.9));
        }
    }

    #[test]
    fn undiscounted_monte_carlo() {
        let o = episode(vec![1.0, 2.0, 3.0, 4.0], &[0.0; 5], true);
        let est = gae(o.view(), 1.0, 1.0).unwrap();
        assert_eq!(est.advantages, vec![10.0, 9.0, 7.0, 4.0]);
    }

    #[test]
    fn segments_do_not_leak() {
        let mut o = episode(vec![1.0, 1.0, 1.0, 1.0], &[0.0; 5], false);
        o.cuts[1] = true;
        o.dones[1] = true;
        let est = gae(o.view(), 1.0, 1.0).unwrap();
        assert_eq!(est.advantages, vec![2.0, 1.0, 2.0, 1.0]);
    }

    #[test]
    fn truncation_bootstraps_done_does_not() {
        let t = episode(vec![0.0], &[0.0, 5.0], false);
        let d = episode(vec![0.0], &[0.0, 5.0], true);
        assert_eq!(gae(t.view(), 0.5, 1.0).unwrap().advantages, vec![2.5]);
        assert_eq!(gae(d.view(), 0.5, 1.0).unwrap().advantages, vec![0.0]);
    }

    #[test]
    fn vtrace_on_policy_matches_gae() {
        let o = episode(vec![0.2, -1.0, 0.4, 1.5, 0.0], &[0.1, 0.5, -0.3, 0.9, 0.2, 0.6], false);
        let lp = vec![-0.7; 5];
        let g = gae(o.view(), 0.99, 0.95).unwrap();
        let v = vtrace_realign(o.view(), &lp, &lp, 1.0, 1.0, 0.99, 0.95).unwrap();
        for t in 0..5 {
            assert!((g.value_targets[t] - v.value_targets[t]).abs() < 1e-10);
        }
    }

    #[test]
    fn vtrace_hand_unroll_with_clipped_ratio() {
        // gamma 0.9, lambda 1, V = [1, 2, 3], bootstrap 4, ratios [1, 3, 0.5].
        let o = episode(vec![1.0, 1.0, 1.0], &[1.0, 2.0, 3.0, 4.0], false);
        let learner = [0.0, 3f64.ln(), 0.5f64.ln()];
        let est = vtrace_realign(o.view(), &learner, &[0.0; 3], 1.0, 1.0, 0.9, 1.0).unwrap();
        // delta = [1 + 1.8 - 1, 1 + 2.7 - 2, 1 + 3.6 - 3] = [1.8, 1.7, 1.6]
        let v2 = 3.0 + 0.5 * 1.6;
        let v1 = 2.0 + 1.0 * 1.7 + 0.9 * 1.0 * (v2 - 3.0);
        let v0 = 1.0 + 1.8 + 0.9 * 1.0 * (v1 - 2.0);
        let want = [v0, v1, v2];
        for t in 0..3 {
            assert!((est.value_targets[t] - want[t]).abs() < 1e-12, "{t}");
        }
        assert!((est.advantages[0] - (1.0 + 0.9 * v1 - 1.0)).abs() < 1e-12);
        assert!((est.advantages[2] - (1.0 + 0.9 * 4.0 - 3.0)).abs() < 1e-12);
        assert!((est.ratios[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn vtrace_requires_rho_bar_ge_c_bar() {
        let o = episode(vec![1.0], &[0.0, 0.0], true);
        assert!(matches!(
            vtrace_realign(o.view(), &[0.0], &[0.0], 0.5, 1.0, 0.9, 1.0),
            Err(LabError::PreconditionViolated(_))
        ));
    }

    #[test]
    fn ratio_cases() {
        let r = ratios(&[0.4f64.ln(), 0.0, -1e3, 1e3], &[0.2f64.ln(), 0.0, 0.0, 0.0]).unwrap();
        assert!((r[0] - 2.0).abs() < 1e-12);
        assert_eq!(r[1], 1.0);
        assert_eq!(r[2], RATIO_MIN);
        assert_eq!(r[3], RATIO_MAX);
        assert!(matches!(ratios(&[f64::NAN], &[0.0]), Err(LabError::NonFiniteRatio(0))));
    }

    #[test]
    fn normalize_standardizes() {
        let mut xs = vec![1.0, 2.0, 3.0, 4.0];
        normalize(&mut xs);
        let mean: f64 = xs.iter().sum::<f64>() / 4.0;
        let var: f64 = xs.iter().map(|x| x * x).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-6);
    }

    fn arb_episode() -> impl Strategy<Value = (Owned, Vec<f64>, bool)> {
        (1usize..=8).prop_flat_map(|n| {
            (
                prop::collection::vec(-1.0..1.0f64, n),
                prop::collection::vec(-1.0..1.0f64, n + 1),
                prop::collection::vec(0.2..3.0f64, n),
                any::<bool>(),
            )
                .prop_map(|(r, v, ratio, done)| (episode(r, &v, done), ratio, done))
        })
    }

    proptest! {
        #[test]
        fn gae_recursion_equals_summation((o, _, _) in arb_episode(), gamma in 0.0..1.0f64, lambda in 0.0..=1.0f64) {
            let est = gae(o.view(), gamma, lambda).unwrap();
            for (a, b) in est.advantages.iter().zip(direct_gae(&o, gamma, lambda)) {
                prop_assert!((a - b).abs() < 1e-10);
            }
        }

        #[test]
        fn vtrace_recursion_equals_summation(
            (o, r, _) in arb_episode(),
            gamma in 0.0..1.0f64,
            lambda in 0.0..=1.0f64,
            c_bar in 0.5..1.5f64,
        ) {
            let lp: Vec<f64> = r.iter().map(|x| x.ln()).collect();
            let rho_bar = c_bar + 0.5;
            let est = vtrace_realign(o.view(), &lp, &vec![0.0; r.len()], rho_bar, c_bar, gamma, lambda).unwrap();
            for (a, b) in est.value_targets.iter().zip(direct_vtrace(&o, &r, rho_bar, c_bar, gamma, lambda)) {
                prop_assert!((a - b).abs() < 1e-10);
            }
        }
    }
}
