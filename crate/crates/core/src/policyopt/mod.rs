//! Minibatch losses and the per-iteration epoch loop for VACO and the
//! baselines.

pub mod loss;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

pub use loss::{
    entropy_bonus, impala_policy_loss, kl_estimate, kl_penalty_loss, ppo_clip_loss, ratio_nodes, spo_loss,
    tv_estimate, vaco_filter_mask, vaco_policy_loss, value_loss, FilterMask,
};
pub use train::{
    batch_logprobs, batch_values, estimate_advantages, gather_minibatch, minibatch_objective, train_epochs, Anchor,
    IterationStats, Minibatch, Objective, TrainConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Vaco,
    PpoClip,
    PpoKl,
    Spo,
    Impala,
}

impl Algorithm {
    pub const ALL: [Algorithm; 5] = [Self::Vaco, Self::PpoClip, Self::PpoKl, Self::Spo, Self::Impala];

    pub fn name(self) -> &'static str {
        match self {
            Self::Vaco => "vaco",
            Self::PpoClip => "ppo_clip",
            Self::PpoKl => "ppo_kl",
            Self::Spo => "spo",
            Self::Impala => "impala",
        }
    }

    /// Whether advantages come from V-trace rather than GAE.
    pub fn uses_vtrace(self) -> bool {
        matches!(self, Self::Vaco | Self::Impala)
    }
}

impl std::str::FromStr for Algorithm {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| LabError::Config(format!("unknown algorithm {s:?}")))
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterCondition {
    /// Coefficient `A - c_H`.
    #[default]
    Alg1Literal,
    /// Coefficient `A - c_H log pi(a|s)`.
    LogprobCoefficient,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PpoForm {
    #[default]
    Min,
    LiteralClip,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub algorithm: Algorithm,
    /// TV threshold for VACO, clip ratio for PPO.
    pub delta: f64,
    pub kl_coeff: f64,
    pub spo_coeff: f64,
    pub entropy_coeff: f64,
    pub value_coeff: f64,
    pub policy_coeff: f64,
    pub epochs: usize,
    pub minibatches: usize,
    pub filter_condition: FilterCondition,
    pub ppo_form: PpoForm,
    pub clip_value_loss: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Vaco,
            delta: 0.2,
            kl_coeff: 1.0,
            spo_coeff: 2.5,
            entropy_coeff: 0.0,
            value_coeff: 0.5,
            policy_coeff: 1.0,
            epochs: 10,
            minibatches: 32,
            filter_condition: FilterCondition::default(),
            ppo_form: PpoForm::default(),
            clip_value_loss: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(LabError::Config(m));
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            return bad(format!("delta {} outside (0,1]", self.delta));
        }
        if self.algorithm != Algorithm::Vaco && self.delta >= 1.0 {
            return bad("clip ratio must be < 1".into());
        }
        for (name, v) in [("kl_coeff", self.kl_coeff), ("spo_coeff", self.spo_coeff), ("entropy_coeff", self.entropy_coeff)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and >= 0"));
            }
        }
        if !(self.value_coeff > 0.0 && self.policy_coeff > 0.0) {
            return bad("value_coeff and policy_coeff must be > 0".into());
        }
        if self.epochs < 1 || self.minibatches < 1 {
            return bad("epochs and minibatches must be >= 1".into());
        }
        Ok(())
    }
}
