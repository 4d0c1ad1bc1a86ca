use std::sync::Arc;

use rand::Rng;

use super::{check_action, Action, ActionSpace, EnvSpec, Environment, EpisodeClock, StepOutcome};
use crate::error::{LabError, Result};
use crate::oracle::TabularMdp;
use crate::rng::LabRng;

/// Sampled view of a [`TabularMdp`] with one-hot observations.
#[derive(Debug, Clone)]
pub struct TabularEnv {
    spec: EnvSpec,
    mdp: Arc<TabularMdp>,
    state: usize,
    clock: EpisodeClock,
}

fn sample_index<R: Rng + ?Sized>(rng: &mut R, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding slack: fall back to the last index with positive mass.
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(0)
}

impl TabularEnv {
    pub fn new(mdp: Arc<TabularMdp>, horizon: usize) -> Result<Self> {
        if mdp.num_actions() < 2 {
            return Err(LabError::Config("tabular env needs at least two actions".into()));
        }
        let spec = EnvSpec {
            id: "tabular".into(),
            observation_dim: mdp.num_states(),
            action_space: ActionSpace::Discrete(mdp.num_actions()),
            horizon,
            gamma_default: mdp.gamma(),
        };
        spec.validate()?;
        Ok(Self { spec, mdp, state: 0, clock: EpisodeClock::default() })
    }

    pub fn state(&self) -> usize {
        self.state
    }

    pub fn mdp(&self) -> &TabularMdp {
        &self.mdp
    }

    fn observe(&self) -> Vec<f64> {
        let mut o = vec![0.0; self.mdp.num_states()];
        o[self.state] = 1.0;
        o
    }
}

impl Environment for TabularEnv {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, rng: &mut LabRng) -> Vec<f64> {
        self.state = sample_index(rng, self.mdp.initial());
        self.clock.reset();
        self.observe()
    }

    fn step(&mut self, action: &Action, rng: &mut LabRng) -> Result<StepOutcome> {
        check_action(&self.spec.action_space, action)?;
        self.clock.check_running()?;
        let Action::Discrete(a) = *action else { unreachable!("checked above") };
        let next = sample_index(rng, self.mdp.transition_row(self.state, a));
        let reward = self.mdp.reward_sas(self.state, a, next);
        self.state = next;
        let truncated = self.clock.tick(false, self.spec.horizon);
        Ok(StepOutcome { observation: self.observe(), reward, done: false, truncated })
    }

    fn return_bounds(&self) -> (f64, f64) {
        let m = &self.mdp;
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for s in 0..m.num_states() {
            for a in 0..m.num_actions() {
                for (s2, p) in m.transition_row(s, a).iter().enumerate() {
                    if *p > 0.0 {
                        let r = m.reward_sas(s, a, s2);
                        lo = lo.min(r);
                        hi = hi.max(r);
                    }
                }
            }
        }
        let h = self.spec.horizon as f64;
        (lo * h, hi * h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::random_mdp;
    use crate::rng;

    #[test]
    fn point_mass_start() {
        let text = "states 3\nactions 2\n0 0 1 1 0\n0 1 2 1 0\n1 0 0 1 0\n1 1 1 1 0\n2 0 2 1 0\n2 1 2 1 0\n";
        let mut env = TabularEnv::new(Arc::new(TabularMdp::parse(text).unwrap()), 5).unwrap();
        env.reset(&mut rng::stream(0, 0));
        assert_eq!(env.state(), 0);
    }

    #[test]
    fn empirical_transitions_match_row() {
        let mdp = Arc::new(random_mdp(&mut rng::stream(1, 0), 4, 2, 0.9));
        let mut env = TabularEnv::new(mdp.clone(), 1).unwrap();
        let mut r = rng::stream(2, 0);
        let n = 100_000;
        let mut counts = [0usize; 4];
        let mut start = 0;
        while counts.iter().sum::<usize>() < n {
            env.reset(&mut r);
            if env.state() != 0 {
                continue;
            }
            start += 1;
            env.step(&Action::Discrete(1), &mut r).unwrap();
            counts[env.state()] += 1;
        }
        assert_eq!(start, n);
        for (s, c) in counts.iter().enumerate() {
            let p = mdp.transition_row(0, 1)[s];
            let sigma = (p * (1.0 - p) / n as f64).sqrt();
            assert!((*c as f64 / n as f64 - p).abs() <= 3.0 * sigma + 1e-12, "state {s}");
        }
    }
}
