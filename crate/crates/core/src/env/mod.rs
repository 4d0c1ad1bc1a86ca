//! Seedable desk-scale environments and synchronous multi-actor rollout.

mod grid;
mod pendulum;
mod rollout;
mod tabular;

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::oracle::TabularMdp;
use crate::rng::LabRng;

pub use grid::GridWorld;
pub use pendulum::Pendulum;
pub use rollout::{rollout_sync, Actor, BehaviorPolicy, RolloutBatch, Transition};
pub use tabular::TabularEnv;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionSpace {
    Discrete(usize),
    Continuous { low: Vec<f64>, high: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub id: String,
    pub observation_dim: usize,
    pub action_space: ActionSpace,
    pub horizon: usize,
    pub gamma_default: f64,
}

impl EnvSpec {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(LabError::Config(format!("env {}: {m}", self.id)));
        if self.horizon < 1 || self.observation_dim < 1 {
            return err("horizon and observation_dim must be >= 1");
        }
        if !(0.0..1.0).contains(&self.gamma_default) {
            return err("gamma_default must be in [0,1)");
        }
        match &self.action_space {
            ActionSpace::Discrete(n) if *n < 2 => err("discrete action spaces need n >= 2"),
            ActionSpace::Continuous { low, high }
                if low.is_empty() || low.len() != high.len() || low.iter().zip(high).any(|(l, h)| l >= h) =>
            {
                err("continuous bounds need dim >= 1 and low < high")
            }
            _ => Ok(()),
        }
    }

    pub fn is_continuous(&self) -> bool {
        matches!(self.action_space, ActionSpace::Continuous { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    Discrete(usize),
    Continuous(Vec<f64>),
}

impl Action {
    /// Flat numeric encoding (discrete index stored as a single float).
    pub fn write_to(&self, out: &mut Vec<f64>) {
        match self {
            Action::Discrete(a) => out.push(*a as f64),
            Action::Continuous(x) => out.extend_from_slice(x),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub observation: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    pub truncated: bool,
}

pub trait Environment: Send {
    fn spec(&self) -> &EnvSpec;

    /// Starts a new episode and returns its first observation.
    fn reset(&mut self, rng: &mut LabRng) -> Vec<f64>;

    /// Advances one step. `truncated` is set exactly when the horizon is
    /// reached without termination.
    fn step(&mut self, action: &Action, rng: &mut LabRng) -> Result<StepOutcome>;

    /// Range of attainable undiscounted episode returns, used to normalize
    /// scores.
    fn return_bounds(&self) -> (f64, f64);
}

/// Validates an action against a space.
pub fn check_action(space: &ActionSpace, action: &Action) -> Result<()> {
    match (space, action) {
        (ActionSpace::Discrete(n), Action::Discrete(a)) => {
            if a < n {
                Ok(())
            } else {
                Err(LabError::OutOfBoundsAction { index: *a, n: *n })
            }
        }
        (ActionSpace::Continuous { low, .. }, Action::Continuous(x)) => {
            if x.len() != low.len() {
                Err(LabError::ActionKindMismatch)
            } else if x.iter().any(|v| !v.is_finite()) {
                Err(LabError::NonFiniteAction)
            } else {
                Ok(())
            }
        }
        _ => Err(LabError::ActionKindMismatch),
    }
}

/// Step counter shared by all environments: enforces the horizon and refuses
/// to step a finished episode.
#[derive(Debug, Clone, Default)]
struct EpisodeClock {
    t: usize,
    finished: bool,
}

impl EpisodeClock {
    fn reset(&mut self) {
        self.t = 0;
        self.finished = false;
    }

    fn check_running(&self) -> Result<()> {
        if self.finished {
            Err(LabError::EpisodeTerminated)
        } else {
            Ok(())
        }
    }

    /// Records one step and returns `truncated`.
    fn tick(&mut self, done: bool, horizon: usize) -> bool {
        self.t += 1;
        let truncated = !done && self.t >= horizon;
        self.finished = done || truncated;
        truncated
    }
}

/// Builds an environment from its config id.
///
/// Ids: `chain`, `chain:<n>`, `grid`, `grid:<w>x<h>`, `pendulum`,
/// `tabular:<path>`. `horizon` overrides the built-in default.
pub fn make_env(id: &str, horizon: Option<usize>) -> Result<Box<dyn Environment>> {
    let (kind, arg) = id.split_once(':').map_or((id, None), |(k, a)| (k, Some(a)));
    let bad = |m: &str| LabError::Config(format!("env id {id:?}: {m}"));
    let env: Box<dyn Environment> = match kind {
        "chain" => {
            let n = arg.map(|a| a.parse::<usize>().map_err(|_| bad("bad length"))).transpose()?.unwrap_or(10);
            Box::new(GridWorld::chain(n, 0.1, horizon.unwrap_or(4 * n))?)
        }
        "grid" => {
            let (w, h) = match arg {
                Some(a) => {
                    let (w, h) = a.split_once('x').ok_or_else(|| bad("expected WxH"))?;
                    (w.parse().map_err(|_| bad("bad width"))?, h.parse().map_err(|_| bad("bad height"))?)
                }
                None => (4, 3),
            };
            Box::new(GridWorld::grid(w, h, 0.1, horizon.unwrap_or(4 * (w + h)))?)
        }
        "pendulum" => Box::new(Pendulum::new(horizon.unwrap_or(200))),
        "tabular" => {
            let path = arg.ok_or_else(|| bad("missing path"))?;
            let mdp = TabularMdp::load(Path::new(path))?;
            Box::new(TabularEnv::new(Arc::new(mdp), horizon.unwrap_or(100))?)
        }
        _ => return Err(bad("unknown environment")),
    };
    env.spec().validate()?;
    Ok(env)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_builds_known_ids() {
        for id in ["chain", "chain:7", "grid", "grid:3x5", "pendulum"] {
            let env = make_env(id, None).unwrap();
            env.spec().validate().unwrap();
        }
        assert_eq!(make_env("chain", Some(9)).unwrap().spec().horizon, 9);
        assert!(make_env("mujoco", None).is_err());
        assert!(make_env("tabular:/nonexistent/file", None).is_err());
    }

    #[test]
    fn spec_validation() {
        let mut spec = make_env("pendulum", None).unwrap().spec().clone();
        spec.action_space = ActionSpace::Continuous { low: vec![1.0], high: vec![1.0] };
        assert!(spec.validate().is_err());
        spec.action_space = ActionSpace::Discrete(1);
        assert!(spec.validate().is_err());
        spec.action_space = ActionSpace::Discrete(2);
        spec.horizon = 0;
        assert!(spec.validate().is_err());
    }
}
