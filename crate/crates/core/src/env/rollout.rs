use ndarray::ArrayView2;

use super::{Action, Environment};
use crate::error::{LabError, Result};
use crate::par::{map_mut, Exec};
use crate::rng::LabRng;

/// A frozen policy that actors can sample from.
pub trait BehaviorPolicy: Send + Sync {
    fn id(&self) -> u64;

    /// Draws an action and returns it with its log-probability.
    fn sample(&self, observation: &[f64], rng: &mut LabRng) -> Result<(Action, f64)>;
}

/// One actor: a private environment instance plus a private rng stream.
/// Environment state persists across rollouts, so an episode may span
/// several batches.
pub struct Actor {
    env: Box<dyn Environment>,
    rng: LabRng,
    observation: Vec<f64>,
    episode_return: f64,
}

impl Actor {
    pub fn new(mut env: Box<dyn Environment>, mut rng: LabRng) -> Self {
        let observation = env.reset(&mut rng);
        Self { env, rng, observation, episode_return: 0.0 }
    }

    pub fn env(&self) -> &dyn Environment {
        self.env.as_ref()
    }
}

/// A single transition, materialized from a [`RolloutBatch`].
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Action,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub done: bool,
    pub truncated: bool,
    pub behavior_logprob: f64,
    pub behavior_policy_id: u64,
}

/// Actor-major flat transition store: index `actor * num_steps + t`.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutBatch {
    pub num_actors: usize,
    pub num_steps: usize,
    pub obs_dim: usize,
    pub action_width: usize,
    pub discrete: bool,
    pub observations: Vec<f64>,
    pub next_observations: Vec<f64>,
    pub actions: Vec<f64>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    pub truncated: Vec<bool>,
    pub behavior_logprob: Vec<f64>,
    pub behavior_policy_id: Vec<u64>,
    pub iteration_index: usize,
    /// Undiscounted returns of episodes that finished inside this batch.
    pub completed_returns: Vec<f64>,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn observation(&self, i: usize) -> &[f64] {
        &self.observations[i * self.obs_dim..(i + 1) * self.obs_dim]
    }

    pub fn next_observation(&self, i: usize) -> &[f64] {
        &self.next_observations[i * self.obs_dim..(i + 1) * self.obs_dim]
    }

    pub fn action(&self, i: usize) -> Action {
        let row = &self.actions[i * self.action_width..(i + 1) * self.action_width];
        if self.discrete {
            Action::Discrete(row[0] as usize)
        } else {
            Action::Continuous(row.to_vec())
        }
    }

    /// Last step of an actor's slice of the batch.
    pub fn segment_end(&self, i: usize) -> bool {
        (i + 1).is_multiple_of(self.num_steps)
    }

    /// Whether a backward recursion must stop after index `i`.
    pub fn cut(&self, i: usize) -> bool {
        self.dones[i] || self.truncated[i] || self.segment_end(i)
    }

    pub fn observations_view(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.len(), self.obs_dim), &self.observations).expect("batch shape")
    }

    pub fn next_observations_view(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.len(), self.obs_dim), &self.next_observations).expect("batch shape")
    }

    pub fn actions_view(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.len(), self.action_width), &self.actions).expect("batch shape")
    }

    pub fn transition(&self, i: usize) -> Transition {
        Transition {
            state: self.observation(i).to_vec(),
            action: self.action(i),
            reward: self.rewards[i],
            next_state: self.next_observation(i).to_vec(),
            done: self.dones[i],
            truncated: self.truncated[i],
            behavior_logprob: self.behavior_logprob[i],
            behavior_policy_id: self.behavior_policy_id[i],
        }
    }
}

struct Segment {
    observations: Vec<f64>,
    next_observations: Vec<f64>,
    actions: Vec<f64>,
    rewards: Vec<f64>,
    dones: Vec<bool>,
    truncated: Vec<bool>,
    logprobs: Vec<f64>,
    completed: Vec<f64>,
}

fn run_actor(actor: &mut Actor, policy: &dyn BehaviorPolicy, num_steps: usize) -> Result<Segment> {
    let mut seg = Segment {
        observations: Vec::new(),
        next_observations: Vec::new(),
        actions: Vec::new(),
        rewards: Vec::with_capacity(num_steps),
        dones: Vec::with_capacity(num_steps),
        truncated: Vec::with_capacity(num_steps),
        logprobs: Vec::with_capacity(num_steps),
        completed: Vec::new(),
    };
    for _ in 0..num_steps {
        let (action, logprob) = policy.sample(&actor.observation, &mut actor.rng)?;
        if !logprob.is_finite() {
            return Err(LabError::NonFiniteOutput);
        }
        let out = actor.env.step(&action, &mut actor.rng)?;
        seg.observations.extend_from_slice(&actor.observation);
        seg.next_observations.extend_from_slice(&out.observation);
        action.write_to(&mut seg.actions);
        seg.rewards.push(out.reward);
        seg.dones.push(out.done);
        seg.truncated.push(out.truncated);
        seg.logprobs.push(logprob);
        actor.episode_return += out.reward;
        if out.done || out.truncated {
            seg.completed.push(actor.episode_return);
            actor.episode_return = 0.0;
            actor.observation = actor.env.reset(&mut actor.rng);
        } else {
            actor.observation = out.observation;
        }
    }
    Ok(seg)
}

/// Runs every actor for `num_steps` under its assigned policy and assembles
/// the results in actor order.
pub fn rollout_sync(
    actors: &mut [Actor],
    policies: &[&dyn BehaviorPolicy],
    num_steps: usize,
    iteration_index: usize,
    exec: Exec,
) -> Result<RolloutBatch> {
    if actors.is_empty() || num_steps == 0 {
        return Err(LabError::Config("rollout needs at least one actor and one step".into()));
    }
    if actors.len() != policies.len() {
        return Err(LabError::Config(format!("{} actors but {} policies", actors.len(), policies.len())));
    }
    let spec = actors[0].env.spec().clone();
    if actors.iter().any(|a| *a.env.spec() != spec) {
        return Err(LabError::Config("all actors must share one environment spec".into()));
    }
    let segments = map_mut(exec, actors, |i, actor| run_actor(actor, policies[i], num_steps));
    let n = actors.len() * num_steps;
    let action_width = match &spec.action_space {
        super::ActionSpace::Discrete(_) => 1,
        super::ActionSpace::Continuous { low, .. } => low.len(),
    };
    let mut batch = RolloutBatch {
        num_actors: actors.len(),
        num_steps,
        obs_dim: spec.observation_dim,
        action_width,
        discrete: !spec.is_continuous(),
        observations: Vec::with_capacity(n * spec.observation_dim),
        next_observations: Vec::with_capacity(n * spec.observation_dim),
        actions: Vec::with_capacity(n * action_width),
        rewards: Vec::with_capacity(n),
        dones: Vec::with_capacity(n),
        truncated: Vec::with_capacity(n),
        behavior_logprob: Vec::with_capacity(n),
        behavior_policy_id: Vec::with_capacity(n),
        iteration_index,
        completed_returns: Vec::new(),
    };
    for (seg, policy) in segments.into_iter().zip(policies) {
        let seg = seg?;
        batch.observations.extend(seg.observations);
        batch.next_observations.extend(seg.next_observations);
        batch.actions.extend(seg.actions);
        batch.rewards.extend(seg.rewards);
        batch.dones.extend(seg.dones);
        batch.truncated.extend(seg.truncated);
        batch.behavior_logprob.extend(seg.logprobs);
        batch.behavior_policy_id.extend(std::iter::repeat_n(policy.id(), num_steps));
        batch.completed_returns.extend(seg.completed);
    }
    Ok(batch)
}
