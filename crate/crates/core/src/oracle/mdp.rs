use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Exp1};

use crate::error::{LabError, Result};

const ROW_TOL: f64 = 1e-12;

/// Dense finite MDP `(S, A, R, P, mu, gamma)`.
///
/// Rewards are stored per `(s, a, s')` so that the sampled environment can
/// emit the reward of the realised transition; [`TabularMdp::reward`] gives the
/// expected reward `R[s][a]` used by the exact solvers.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    num_states: usize,
    num_actions: usize,
    transitions: Vec<f64>,
    rewards_sas: Vec<f64>,
    rewards: Vec<f64>,
    initial: Vec<f64>,
    gamma: f64,
}

impl TabularMdp {
    pub fn new(
        num_states: usize,
        num_actions: usize,
        transitions: Vec<f64>,
        rewards_sas: Vec<f64>,
        initial: Vec<f64>,
        gamma: f64,
    ) -> Result<Self> {
        let (s, a) = (num_states, num_actions);
        if s == 0 || a == 0 {
            return Err(LabError::Config("MDP needs at least one state and one action".into()));
        }
        if transitions.len() != s * a * s || rewards_sas.len() != s * a * s || initial.len() != s {
            return Err(LabError::ShapeMismatch("MDP tensor sizes".into()));
        }
        if !(0.0..1.0).contains(&gamma) {
            return Err(LabError::Config(format!("gamma must be in [0,1), got {gamma}")));
        }
        for (row_idx, row) in transitions.chunks(s).enumerate() {
            check_distribution(row).map_err(|msg| {
                LabError::Config(format!("P[{}][{}]: {msg}", row_idx / a, row_idx % a))
            })?;
        }
        check_distribution(&initial).map_err(|msg| LabError::Config(format!("mu: {msg}")))?;
        if rewards_sas.iter().any(|r| !r.is_finite()) {
            return Err(LabError::Config("non-finite reward".into()));
        }
        let rewards = transitions
            .chunks(s)
            .zip(rewards_sas.chunks(s))
            .map(|(p, r)| p.iter().zip(r).map(|(p, r)| p * r).sum())
            .collect();
        Ok(Self { num_states, num_actions, transitions, rewards_sas, rewards, initial, gamma })
    }

    /// MDP whose reward depends only on `(s, a)`.
    pub fn with_sa_rewards(
        num_states: usize,
        num_actions: usize,
        transitions: Vec<f64>,
        rewards: &[f64],
        initial: Vec<f64>,
        gamma: f64,
    ) -> Result<Self> {
        if rewards.len() != num_states * num_actions {
            return Err(LabError::ShapeMismatch("reward matrix".into()));
        }
        let rewards_sas = rewards
            .iter()
            .flat_map(|&r| std::iter::repeat_n(r, num_states))
            .collect();
        Self::new(num_states, num_actions, transitions, rewards_sas, initial, gamma)
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }
    pub fn num_actions(&self) -> usize {
        self.num_actions
    }
    pub fn gamma(&self) -> f64 {
        self.gamma
    }
    pub fn initial(&self) -> &[f64] {
        &self.initial
    }

    /// Row `P(. | s, a)`.
    pub fn transition_row(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.num_actions + a) * self.num_states;
        &self.transitions[start..start + self.num_states]
    }

    /// Expected reward `R[s][a]`.
    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.rewards[s * self.num_actions + a]
    }

    pub fn reward_sas(&self, s: usize, a: usize, next: usize) -> f64 {
        self.rewards_sas[(s * self.num_actions + a) * self.num_states + next]
    }

    /// Same MDP with a different discount.
    pub fn with_gamma(&self, gamma: f64) -> Result<Self> {
        Self::new(
            self.num_states,
            self.num_actions,
            self.transitions.clone(),
            self.rewards_sas.clone(),
            self.initial.clone(),
            gamma,
        )
    }

    /// Parses the plain-text matrix format.
    ///
    /// ```text
    /// # comment
    /// states 3
    /// actions 2
    /// gamma 0.9          # optional, default 0.99
    /// init 0 1.0         # optional, repeatable; default point mass on state 0
    /// 0 1 2 0.5 1.0      # s a s' prob reward
    /// ```
    pub fn parse(text: &str) -> Result<Self> {
        let mut states = None;
        let mut actions = None;
        let mut gamma = 0.99;
        let mut init: Vec<(usize, f64)> = Vec::new();
        let mut rows: Vec<(usize, usize, usize, f64, f64, usize)> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let toks: Vec<&str> = line.split_whitespace().collect();
            let perr = |msg: String| LabError::Parse { line: line_no, msg };
            let num = |t: &str| t.parse::<f64>().map_err(|e| perr(format!("{t:?}: {e}")));
            let int = |t: &str| t.parse::<usize>().map_err(|e| perr(format!("{t:?}: {e}")));
            match toks[0] {
                "states" if toks.len() == 2 => states = Some(int(toks[1])?),
                "actions" if toks.len() == 2 => actions = Some(int(toks[1])?),
                "gamma" if toks.len() == 2 => gamma = num(toks[1])?,
                "init" if toks.len() == 3 => init.push((int(toks[1])?, num(toks[2])?)),
                _ if toks.len() == 5 => rows.push((
                    int(toks[0])?,
                    int(toks[1])?,
                    int(toks[2])?,
                    num(toks[3])?,
                    num(toks[4])?,
                    line_no,
                )),
                _ => return Err(perr(format!("unrecognised line {line:?}"))),
            }
        }
        let s = states.ok_or(LabError::Parse { line: 0, msg: "missing `states`".into() })?;
        let a = actions.ok_or(LabError::Parse { line: 0, msg: "missing `actions`".into() })?;
        let mut p = vec![0.0; s * a * s];
        let mut r = vec![0.0; s * a * s];
        let mut seen = vec![false; s * a * s];
        for (st, ac, nx, prob, rew, line) in rows {
            if st >= s || ac >= a || nx >= s {
                return Err(LabError::Parse { line, msg: "index out of range".into() });
            }
            let k = (st * a + ac) * s + nx;
            if seen[k] {
                return Err(LabError::Parse { line, msg: "duplicate (s, a, s') row".into() });
            }
            seen[k] = true;
            p[k] = prob;
            r[k] = rew;
        }
        let mut mu = vec![0.0; s];
        if init.is_empty() {
            mu[0] = 1.0;
        }
        for (st, w) in init {
            if st >= s {
                return Err(LabError::Parse { line: 0, msg: "init state out of range".into() });
            }
            mu[st] += w;
        }
        Self::new(s, a, p, r, mu, gamma)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Serialises to the text format read by [`TabularMdp::parse`]. Zero-probability
    /// rows are omitted.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "states {}", self.num_states);
        let _ = writeln!(out, "actions {}", self.num_actions);
        let _ = writeln!(out, "gamma {:?}", self.gamma);
        for (s, w) in self.initial.iter().enumerate() {
            if *w > 0.0 {
                let _ = writeln!(out, "init {s} {w:?}");
            }
        }
        for s in 0..self.num_states {
            for a in 0..self.num_actions {
                for (n, &p) in self.transition_row(s, a).iter().enumerate() {
                    if p > 0.0 {
                        let _ = writeln!(out, "{s} {a} {n} {p:?} {:?}", self.reward_sas(s, a, n));
                    }
                }
            }
        }
        out
    }
}

/// Stochastic policy table `pi[s][a]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    num_states: usize,
    num_actions: usize,
    probs: Vec<f64>,
}

impl TabularPolicy {
    pub fn new(num_states: usize, num_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != num_states * num_actions || num_actions == 0 {
            return Err(LabError::ShapeMismatch("policy table".into()));
        }
        for (s, row) in probs.chunks(num_actions).enumerate() {
            check_distribution(row).map_err(|m| LabError::Config(format!("pi[{s}]: {m}")))?;
        }
        Ok(Self { num_states, num_actions, probs })
    }

    pub fn uniform(num_states: usize, num_actions: usize) -> Self {
        let p = 1.0 / num_actions as f64;
        Self { num_states, num_actions, probs: vec![p; num_states * num_actions] }
    }

    /// Deterministic policy choosing `actions[s]`.
    pub fn deterministic(num_actions: usize, actions: &[usize]) -> Result<Self> {
        let mut probs = vec![0.0; actions.len() * num_actions];
        for (s, &a) in actions.iter().enumerate() {
            if a >= num_actions {
                return Err(LabError::OutOfBoundsAction { index: a, n: num_actions });
            }
            probs[s * num_actions + a] = 1.0;
        }
        Ok(Self { num_states: actions.len(), num_actions, probs })
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }
    pub fn num_actions(&self) -> usize {
        self.num_actions
    }
    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.num_actions + a]
    }
    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.num_actions..(s + 1) * self.num_actions]
    }

    /// `(1 - w) * self + w * other`, row by row.
    pub fn mix(&self, other: &TabularPolicy, w: f64) -> TabularPolicy {
        let probs = self.probs.iter().zip(&other.probs).map(|(p, q)| (1.0 - w) * p + w * q).collect();
        TabularPolicy { num_states: self.num_states, num_actions: self.num_actions, probs }
    }

    pub(crate) fn from_rows_unchecked(num_states: usize, num_actions: usize, probs: Vec<f64>) -> Self {
        Self { num_states, num_actions, probs }
    }
}

fn check_distribution(row: &[f64]) -> std::result::Result<(), String> {
    if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err("negative or non-finite probability".into());
    }
    let total: f64 = row.iter().sum();
    if (total - 1.0).abs() > ROW_TOL * (row.len() as f64).max(1.0) {
        return Err(format!("row sums to {total}, not 1"));
    }
    Ok(())
}

/// Dirichlet(1) draw of length `n` (normalised unit exponentials).
pub fn dirichlet_ones<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).collect();
    let total: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= total);
    v
}

/// Random instance: Dirichlet(1) transition rows and initial distribution,
/// `(s, a)` rewards uniform in `[-1, 1]`.
pub fn random_mdp<R: Rng + ?Sized>(rng: &mut R, states: usize, actions: usize, gamma: f64) -> TabularMdp {
    let transitions: Vec<f64> = (0..states * actions).flat_map(|_| dirichlet_ones(rng, states)).collect();
    let rewards: Vec<f64> = (0..states * actions).map(|_| rng.random_range(-1.0..=1.0)).collect();
    let initial = dirichlet_ones(rng, states);
    TabularMdp::with_sa_rewards(states, actions, transitions, &rewards, initial, gamma)
        .expect("generated MDP is valid")
}

/// Random policy with Dirichlet(1) rows.
pub fn random_policy<R: Rng + ?Sized>(rng: &mut R, states: usize, actions: usize) -> TabularPolicy {
    let probs = (0..states).flat_map(|_| dirichlet_ones(rng, actions)).collect();
    TabularPolicy::from_rows_unchecked(states, actions, probs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn text_format_roundtrip() {
        let mut r = rng::stream(3, 0);
        let mdp = random_mdp(&mut r, 4, 3, 0.9);
        let back = TabularMdp::parse(&mdp.to_text()).unwrap();
        assert_eq!(back, mdp);
    }

    #[test]
    fn parse_rejects_bad_rows() {
        let text = "states 2\nactions 1\n0 0 0 0.5 0\n0 0 1 0.4 0\n1 0 1 1.0 0\n";
        assert!(TabularMdp::parse(text).is_err());
        let dup = "states 1\nactions 1\n0 0 0 0.5 0\n0 0 0 0.5 0\n";
        assert!(matches!(TabularMdp::parse(dup), Err(LabError::Parse { line: 4, .. })));
        assert!(TabularMdp::parse("states 1\n0 0 0 1 0\n").is_err());
    }

    #[test]
    fn parse_defaults_and_expected_reward() {
        let text = "states 2\nactions 1\ngamma 0.5\n0 0 0 0.25 4.0\n0 0 1 0.75 0.0\n1 0 1 1.0 1.0\n";
        let mdp = TabularMdp::parse(text).unwrap();
        assert_eq!(mdp.initial(), &[1.0, 0.0]);
        assert_eq!(mdp.gamma(), 0.5);
        assert!((mdp.reward(0, 0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn random_policy_rows_normalised() {
        let mut r = rng::stream(9, 1);
        let pi = random_policy(&mut r, 5, 4);
        for s in 0..5 {
            assert!((pi.row(s).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
