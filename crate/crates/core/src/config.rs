//! Declarative experiment configuration (TOML) with dotted-key overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::advantage::RealignCritic;
use crate::env::EnvSpec;
use crate::error::{LabError, Result};
use crate::policyopt::{LossConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdvantageConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub rho_bar: f64,
    pub c_bar: f64,
    /// Per-minibatch standardization. Unset means on for continuous action
    /// spaces and off for discrete ones.
    pub normalize: Option<bool>,
    pub realign_critic: RealignCritic,
}

impl Default for AdvantageConfig {
    fn default() -> Self {
        Self { gamma: 0.99, lambda: 0.95, rho_bar: 1.0, c_bar: 1.0, normalize: None, realign_critic: RealignCritic::Current }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub anneal: bool,
    pub max_grad_norm: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { learning_rate: 3e-4, anneal: true, max_grad_norm: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: String,
    /// Overrides the environment's built-in horizon.
    pub horizon: Option<usize>,
    pub buffer_capacity: usize,
    pub num_actors: usize,
    pub num_steps: usize,
    pub iterations: usize,
    pub seeds: Vec<u64>,
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub hidden: Vec<usize>,
    pub parallel: bool,
    pub out: String,
    pub loss: LossConfig,
    pub advantage: AdvantageConfig,
    pub optim: OptimConfig,
}

impl Default for ExperimentConfig {
    /// The desk-scale profile: 16 actors x 256 steps x 200 iterations.
    fn default() -> Self {
        Self {
            env: "chain".into(),
            horizon: None,
            buffer_capacity: 1,
            num_actors: 16,
            num_steps: 256,
            iterations: 200,
            seeds: vec![0],
            eval_every: 10,
            eval_episodes: 10,
            hidden: vec![64, 64],
            parallel: true,
            out: "runs".into(),
            loss: LossConfig::default(),
            advantage: AdvantageConfig::default(),
            optim: OptimConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Full-scale collection: 500 actors x 1000 steps.
    pub fn paper_scale() -> Self {
        Self { num_actors: 500, num_steps: 1000, ..Self::default() }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| LabError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LabError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies `key=value` overrides with dotted keys (`loss.delta=0.1`).
    /// Values are parsed as TOML literals, falling back to bare strings.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut tree = toml::Table::try_from(self).map_err(|e| LabError::Config(e.to_string()))?;
        for ov in overrides {
            let ov = ov.as_ref();
            let (key, raw) =
                ov.split_once('=').ok_or_else(|| LabError::Config(format!("override {ov:?} is not key=value")))?;
            let value = parse_value(raw.trim());
            let path: Vec<&str> = key.trim().split('.').collect();
            let mut node = &mut tree;
            for part in &path[..path.len() - 1] {
                node = node
                    .entry(part.to_string())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                    .as_table_mut()
                    .ok_or_else(|| LabError::Config(format!("override {key}: {part} is not a table")))?;
            }
            node.insert(path[path.len() - 1].to_string(), value);
        }
        let cfg: Self = tree.try_into().map_err(|e: toml::de::Error| LabError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(LabError::Config(m.to_string()));
        if self.buffer_capacity < 1 {
            return bad("buffer_capacity must be >= 1");
        }
        if self.num_actors < 1 || self.num_steps < 1 || self.iterations < 1 {
            return bad("num_actors, num_steps and iterations must be >= 1");
        }
        if self.seeds.is_empty() {
            return bad("seed list must be non-empty");
        }
        if self.eval_episodes < 1 {
            return bad("eval_episodes must be >= 1");
        }
        if self.hidden.contains(&0) {
            return bad("hidden layer sizes must be >= 1");
        }
        let a = &self.advantage;
        if !(0.0..1.0).contains(&a.gamma) || !(0.0..=1.0).contains(&a.lambda) {
            return bad("need gamma in [0,1) and lambda in [0,1]");
        }
        if !(a.c_bar > 0.0 && a.rho_bar >= a.c_bar) {
            return bad("need rho_bar >= c_bar > 0");
        }
        if !(self.optim.learning_rate > 0.0 && self.optim.max_grad_norm > 0.0) {
            return bad("learning_rate and max_grad_norm must be > 0");
        }
        if self.loss.minibatches > self.num_actors * self.num_steps {
            return bad("more minibatches than transitions");
        }
        self.loss.validate()
    }

    pub fn train_config(&self, spec: &EnvSpec) -> TrainConfig {
        TrainConfig {
            loss: self.loss.clone(),
            gamma: self.advantage.gamma,
            lambda: self.advantage.lambda,
            rho_bar: self.advantage.rho_bar,
            c_bar: self.advantage.c_bar,
            normalize_advantages: self.advantage.normalize.unwrap_or(spec.is_continuous()),
            max_grad_norm: self.optim.max_grad_norm,
        }
    }

    /// SHA-256 over the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

fn parse_value(raw: &str) -> toml::Value {
    #[derive(Deserialize)]
    struct Probe {
        v: toml::Value,
    }
    toml::from_str::<Probe>(&format!("v = {raw}")).map(|p| p.v).unwrap_or_else(|_| toml::Value::String(raw.to_string()))
}
