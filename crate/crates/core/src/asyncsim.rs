//! Simulated asynchronous actor-learner harness.
//!
//! Each iteration pushes the current policy into a fixed-capacity FIFO
//! buffer, gives every actor a snapshot drawn uniformly from the buffer, and
//! collects one synchronous batch. Older snapshots in the buffer are the
//! source of backward policy lag.

use std::collections::VecDeque;
use std::sync::Arc;

use ndarray::Axis;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::advantage::RealignCritic;
use crate::approx::{policy_mode, policy_sample, Architecture, HeadKind, OptimizerState};
use crate::config::ExperimentConfig;
use crate::env::{make_env, rollout_sync, Action, ActionSpace, Actor, BehaviorPolicy, Environment, RolloutBatch};
use crate::error::{LabError, Result};
use crate::par::Exec;
use crate::policyopt::{batch_values, estimate_advantages, train_epochs, IterationStats, TrainConfig};
use crate::rng::{self, ids, LabRng};

/// Frozen copy of the learner's parameters (policy and value).
#[derive(Debug)]
pub struct PolicySnapshot {
    pub arch: Arc<Architecture>,
    pub params: Arc<[f64]>,
    pub iteration: usize,
    pub id: u64,
}

impl BehaviorPolicy for PolicySnapshot {
    fn id(&self) -> u64 {
        self.id
    }

    fn sample(&self, observation: &[f64], rng: &mut LabRng) -> Result<(Action, f64)> {
        policy_sample(&self.arch, &self.params, observation, rng)
    }
}

/// FIFO of snapshots, newest last.
#[derive(Debug)]
pub struct PolicyBuffer {
    capacity: usize,
    snapshots: VecDeque<Arc<PolicySnapshot>>,
    next_id: u64,
}

impl PolicyBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity < 1 {
            return Err(LabError::Config("buffer capacity must be >= 1".into()));
        }
        Ok(Self { capacity, snapshots: VecDeque::with_capacity(capacity), next_id: 0 })
    }

    /// Freezes `params` as a new snapshot, evicting the oldest when full.
    pub fn push(&mut self, arch: &Arc<Architecture>, params: &[f64], iteration: usize) -> Arc<PolicySnapshot> {
        let snap = Arc::new(PolicySnapshot { arch: arch.clone(), params: params.into(), iteration, id: self.next_id });
        self.next_id += 1;
        if self.snapshots.len() == self.capacity {
            self.snapshots.pop_front();
        }
        self.snapshots.push_back(snap.clone());
        snap
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn ids(&self) -> Vec<u64> {
        self.snapshots.iter().map(|s| s.id).collect()
    }

    pub fn get(&self, id: u64) -> Option<&Arc<PolicySnapshot>> {
        self.snapshots.iter().find(|s| s.id == id)
    }

    pub fn newest(&self) -> Option<&Arc<PolicySnapshot>> {
        self.snapshots.back()
    }
}

/// Snapshot drawn for each actor in one iteration.
#[derive(Debug, Clone)]
pub struct ActorAssignment {
    pub snapshots: Vec<Arc<PolicySnapshot>>,
}

impl ActorAssignment {
    pub fn ids(&self) -> Vec<u64> {
        self.snapshots.iter().map(|s| s.id).collect()
    }
}

/// Each actor independently draws a snapshot uniformly from the buffer.
pub fn assign_actors(buffer: &PolicyBuffer, num_actors: usize, rng: &mut LabRng) -> Result<ActorAssignment> {
    if buffer.is_empty() {
        return Err(LabError::EmptyBuffer);
    }
    let n = buffer.len();
    let snapshots = (0..num_actors).map(|_| buffer.snapshots[rng.random_range(0..n)].clone()).collect();
    Ok(ActorAssignment { snapshots })
}

/// Mean undiscounted return of the deterministic policy (argmax or mean
/// action) over `episodes` episodes.
pub fn evaluate_policy(
    arch: &Architecture,
    params: &[f64],
    env: &mut dyn Environment,
    episodes: usize,
    rng: &mut LabRng,
) -> Result<f64> {
    if episodes == 0 {
        return Err(LabError::Config("evaluation needs at least one episode".into()));
    }
    let mut total = 0.0;
    for _ in 0..episodes {
        let mut obs = env.reset(rng);
        loop {
            let out = env.step(&policy_mode(arch, params, &obs)?, rng)?;
            total += out.reward;
            if out.done || out.truncated {
                break;
            }
            obs = out.observation;
        }
    }
    Ok(total / episodes as f64)
}

pub fn head_for(space: &ActionSpace) -> HeadKind {
    match space {
        ActionSpace::Discrete(n) => HeadKind::Categorical(*n),
        ActionSpace::Continuous { low, .. } => HeadKind::DiagGaussian(low.len()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub iteration: usize,
    pub env_steps: u64,
    pub mean_return: f64,
}

/// Everything a run produces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub stats: Vec<IterationStats>,
    pub eval_curve: Vec<EvalPoint>,
    pub final_return: f64,
}

impl RunRecord {
    /// Content hash that ignores wall-clock timings.
    pub fn hash(&self) -> String {
        let mut copy = self.clone();
        for s in &mut copy.stats {
            s.wall_time = 0.0;
        }
        hex::encode(Sha256::digest(serde_json::to_vec(&copy).expect("record serializes")))
    }
}

/// Harness state for one seed.
pub struct Harness {
    pub config: ExperimentConfig,
    pub train: TrainConfig,
    pub arch: Arc<Architecture>,
    pub params: Vec<f64>,
    pub opt: OptimizerState,
    pub buffer: PolicyBuffer,
    pub actors: Vec<Actor>,
    pub iteration: usize,
    pub env_steps: u64,
    seed: u64,
    assign_rng: LabRng,
    shuffle_rng: LabRng,
    eval_env: Box<dyn Environment>,
    /// Data of the most recent iteration, kept for inspection.
    pub last_batch: Option<RolloutBatch>,
    pub last_assignment: Option<ActorAssignment>,
}

impl Harness {
    pub fn new(config: &ExperimentConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let actors = (0..config.num_actors)
            .map(|i| Ok(Actor::new(make_env(&config.env, config.horizon)?, rng::stream(seed, ids::ACTOR_BASE + i as u64))))
            .collect::<Result<Vec<_>>>()?;
        let spec = actors[0].env().spec().clone();
        let arch = Architecture::new(spec.observation_dim, &config.hidden, head_for(&spec.action_space));
        let params = arch.init_params(&mut rng::stream(seed, ids::INIT));
        let opt = OptimizerState::new(params.len(), config.optim.learning_rate, config.optim.anneal);
        Ok(Self {
            train: config.train_config(&spec),
            config: config.clone(),
            arch,
            params,
            opt,
            buffer: PolicyBuffer::new(config.buffer_capacity)?,
            actors,
            iteration: 0,
            env_steps: 0,
            seed,
            assign_rng: rng::stream(seed, ids::ASSIGN),
            shuffle_rng: rng::stream(seed, ids::SHUFFLE),
            eval_env: make_env(&config.env, config.horizon)?,
            last_batch: None,
            last_assignment: None,
        })
    }

    fn exec(&self) -> Exec {
        if self.config.parallel {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }

    /// Critic values used for realignment.
    fn realign_values(&self, batch: &RolloutBatch) -> Result<(Vec<f64>, Vec<f64>)> {
        match self.config.advantage.realign_critic {
            RealignCritic::Current => batch_values(&self.arch, &self.params, batch),
            RealignCritic::Frozen => {
                let (mut v, mut nv) = (vec![0.0; batch.len()], vec![0.0; batch.len()]);
                for a in 0..batch.num_actors {
                    let rows: Vec<usize> = (a * batch.num_steps..(a + 1) * batch.num_steps).collect();
                    let id = batch.behavior_policy_id[rows[0]];
                    let snap = self.buffer.get(id).ok_or(LabError::EmptyBuffer)?;
                    let obs = batch.observations_view().select(Axis(0), &rows);
                    let next = batch.next_observations_view().select(Axis(0), &rows);
                    let vs = self.arch.value_forward(&snap.params, obs.view())?.values();
                    let nvs = self.arch.value_forward(&snap.params, next.view())?.values();
                    v[rows[0]..=rows[rows.len() - 1]].copy_from_slice(&vs);
                    nv[rows[0]..=rows[rows.len() - 1]].copy_from_slice(&nvs);
                }
                Ok((v, nv))
            }
        }
    }

    /// One outer iteration: snapshot, assign, collect, realign once, train.
    pub fn run_iteration(&mut self) -> Result<IterationStats> {
        let t = self.iteration;
        self.buffer.push(&self.arch, &self.params, t);
        let assignment = assign_actors(&self.buffer, self.config.num_actors, &mut self.assign_rng)?;
        let policies: Vec<&dyn BehaviorPolicy> = assignment.snapshots.iter().map(|s| s.as_ref() as _).collect();
        let exec = self.exec();
        let batch = rollout_sync(&mut self.actors, &policies, self.config.num_steps, t, exec)?;
        self.env_steps += batch.len() as u64;

        let (values, next_values) = self.realign_values(&batch)?;
        let est = estimate_advantages(&self.arch, &self.params, &batch, &values, &next_values, &self.train)?;
        let lr = self.opt.lr_at(t, self.config.iterations);
        let mut stats = match train_epochs(
            &self.arch,
            &mut self.params,
            &mut self.opt,
            &batch,
            &est,
            &values,
            &self.train,
            lr,
            &mut self.shuffle_rng,
        ) {
            Ok(s) => s,
            Err(e @ (LabError::NonFiniteLoss | LabError::NonFiniteGradient | LabError::NonFiniteOutput)) => {
                log::warn!("seed {} iteration {t}: {e}; update skipped", self.seed);
                IterationStats { skipped: true, learning_rate: lr, ..Default::default() }
            }
            Err(e) => return Err(e),
        };
        stats.iteration = t;
        stats.env_steps = self.env_steps;
        stats.episodes_completed = batch.completed_returns.len();
        stats.episode_return_mean = (!batch.completed_returns.is_empty())
            .then(|| batch.completed_returns.iter().sum::<f64>() / batch.completed_returns.len() as f64);
        self.iteration += 1;
        self.last_batch = Some(batch);
        self.last_assignment = Some(assignment);
        Ok(stats)
    }

    /// Deterministic-mode evaluation of the current parameters. Each call
    /// uses a stream derived from the iteration count.
    pub fn evaluate(&mut self) -> Result<f64> {
        let mut rng = rng::stream(self.seed, ids::EVAL + ((self.iteration as u64) << 8));
        evaluate_policy(&self.arch, &self.params, self.eval_env.as_mut(), self.config.eval_episodes, &mut rng)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

/// Runs a full experiment for one seed. `on_iteration` sees every stats
/// record as soon as it is produced, for incremental flushing.
pub fn run_experiment(
    config: &ExperimentConfig,
    seed: u64,
    mut on_iteration: impl FnMut(&IterationStats) -> Result<()>,
) -> Result<RunRecord> {
    let mut h = Harness::new(config, seed)?;
    let mut stats = Vec::with_capacity(config.iterations);
    let mut eval_curve = Vec::new();
    for it in 0..config.iterations {
        let mut s = h.run_iteration()?;
        let last = it + 1 == config.iterations;
        if config.eval_every > 0 && ((it + 1) % config.eval_every == 0 || last) || last {
            let r = h.evaluate()?;
            s.eval_return = Some(r);
            eval_curve.push(EvalPoint { iteration: it, env_steps: s.env_steps, mean_return: r });
        }
        on_iteration(&s)?;
        stats.push(s);
    }
    let final_return = eval_curve.last().map(|p| p.mean_return).unwrap_or(0.0);
    Ok(RunRecord { config: config.clone(), seed, stats, eval_curve, final_return })
}
