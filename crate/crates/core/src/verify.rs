//! Property sweeps over the oracle, the V-trace estimator and the loss
//! gradients. Shared by the `verify` command and the test suites.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::advantage::{self, Trajectories};
use crate::approx::{policy_sample, Architecture, HeadKind};
use crate::error::{LabError, Result};
use crate::oracle::{self, bounds::expected_tv, random_mdp, random_policy, TabularMdp};
use crate::par::{map_range, Exec};
use crate::policyopt::{minibatch_objective, Algorithm, Anchor, FilterCondition, Minibatch, TrainConfig};
use crate::rng::{self, LabRng};

/// Deliberate corruption of one checked quantity, for testing that the
/// suites actually fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Fault {
    #[default]
    None,
    /// Shifts the backward-lag lower bound upwards.
    Lemma2,
    /// Inflates the measured V-trace contraction ratio.
    Contraction,
    /// Scales every analytic gradient by 1.01.
    Gradient,
}

impl FromStr for Fault {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "lemma2" => Ok(Self::Lemma2),
            "contraction" => Ok(Self::Contraction),
            "gradient" => Ok(Self::Gradient),
            _ => Err(LabError::Config(format!("unknown fault {s:?}"))),
        }
    }
}

/// Outcome of one property over a sweep. Margins are signed so that
/// negative means violated.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub instances: usize,
    pub violations: usize,
    pub worst_margin: f64,
}

impl Check {
    fn from_margins(name: &str, margins: impl IntoIterator<Item = f64>) -> Self {
        let mut c = Check { name: name.into(), instances: 0, violations: 0, worst_margin: f64::INFINITY };
        for m in margins {
            c.instances += 1;
            // NaN counts as a violation.
            if m.is_nan() || m < 0.0 {
                c.violations += 1;
            }
            c.worst_margin = if m.is_nan() { f64::NAN } else { c.worst_margin.min(m) };
        }
        c
    }

    pub fn passed(&self) -> bool {
        self.violations == 0 && self.instances > 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub suite: String,
    pub checks: Vec<Check>,
    pub seconds: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(Check::passed)
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "suite {} ({:.2}s)", self.suite, self.seconds)?;
        writeln!(f, "  {:<34} {:>9} {:>10} {:>14}  status", "check", "instances", "violations", "worst margin")?;
        for c in &self.checks {
            writeln!(
                f,
                "  {:<34} {:>9} {:>10} {:>14.6e}  {}",
                c.name,
                c.instances,
                c.violations,
                c.worst_margin,
                if c.passed() { "PASS" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

/// Random instance with `S, A` in `2..=8` and `gamma` in `{0.9, 0.99}`.
pub fn random_instance(rng: &mut LabRng) -> TabularMdp {
    let s = rng.random_range(2..=8);
    let a = rng.random_range(2..=8);
    let gamma = if rng.random::<bool>() { 0.9 } else { 0.99 };
    random_mdp(rng, s, a, gamma)
}

struct LemmaMargins {
    lemma1: f64,
    theorem1: f64,
    lemma2: f64,
    lemma3: f64,
    lemma5: f64,
    pinsker: f64,
}

fn lemma_instance(seed: u64, i: usize, fault: Fault) -> Result<LemmaMargins> {
    let mut rng = rng::stream(seed, i as u64);
    let mdp = random_instance(&mut rng);
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    let pi = random_policy(&mut rng, ns, na);
    let pi_t = random_policy(&mut rng, ns, na);
    let beta = random_policy(&mut rng, ns, na);
    let (lhs, rhs) = oracle::perf_diff_exact(&mdp, &pi, &pi_t)?;
    let t1 = oracle::theorem1_bounds(&mdp, &pi, &pi_t)?;
    let mut l2 = oracle::lemma2_lower_bound(&mdp, &pi, &pi_t, &beta)?;
    if fault == Fault::Lemma2 {
        l2.bound = l2.true_diff + 0.1;
    }
    let l3 = oracle::lemma3_lower_bound(&mdp, &pi, &pi_t, &beta)?;
    let (dl, dr) = oracle::state_dist_tv_check(&mdp, &pi, &pi_t)?;
    let (tv_sq, kl_half) = oracle::pinsker_check(&pi, &pi_t, &mdp)?;
    Ok(LemmaMargins {
        lemma1: 1e-9 - (lhs - rhs).abs(),
        theorem1: 1e-10 + (t1.true_diff - t1.d_minus).min(t1.d_plus - t1.true_diff),
        lemma2: 1e-10 + l2.margin(),
        lemma3: 1e-10 + l3.margin(),
        lemma5: 1e-10 + dr - dl,
        pinsker: 1e-12 + kl_half - tv_sq,
    })
}

/// Performance-difference identity and the lower/upper bounds on random
/// instances. Margins include the tolerances.
pub fn lemma_suite(seed: u64, instances: usize, fault: Fault, exec: Exec) -> Result<SuiteReport> {
    let start = Instant::now();
    let rows = map_range(exec, instances, |i| lemma_instance(seed, i, fault)).into_iter().collect::<Result<Vec<_>>>()?;
    let col = |f: fn(&LemmaMargins) -> f64| rows.iter().map(f).collect::<Vec<_>>();
    Ok(SuiteReport {
        suite: "lemmas".into(),
        checks: vec![
            Check::from_margins("perf_diff_identity (1e-9)", col(|m| m.lemma1)),
            Check::from_margins("theorem1_sandwich", col(|m| m.theorem1)),
            Check::from_margins("lemma2_lower_bound", col(|m| m.lemma2)),
            Check::from_margins("lemma3_lower_bound", col(|m| m.lemma3)),
            Check::from_margins("state_dist_tv_bound", col(|m| m.lemma5)),
            Check::from_margins("pinsker_expectation", col(|m| m.pinsker)),
        ],
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// With `pi = pi_T != beta_T`: the realigned bound is exactly 0 and the
/// behavior-advantage bound is strictly negative once the behavior differs.
pub fn zero_backward_lag_suite(seed: u64, instances: usize, fault: Fault, exec: Exec) -> Result<SuiteReport> {
    let start = Instant::now();
    let rows = map_range(exec, instances, |i| -> Result<(f64, Option<f64>, f64)> {
        let mut rng = rng::stream(seed ^ 0x5eed, i as u64);
        let mdp = random_instance(&mut rng);
        let (ns, na) = (mdp.num_states(), mdp.num_actions());
        let pi_t = random_policy(&mut rng, ns, na);
        let beta = random_policy(&mut rng, ns, na);
        let l3 = oracle::lemma3_lower_bound(&mdp, &pi_t, &pi_t, &beta)?;
        let mut l2 = oracle::lemma2_lower_bound(&mdp, &pi_t, &pi_t, &beta)?;
        if fault == Fault::Lemma2 {
            l2.bound = 0.0;
        }
        let d_beta = oracle::discounted_state_dist(&mdp, &beta)?;
        let lag = expected_tv(&d_beta, &beta, &pi_t);
        let l2_margin = (lag >= 1e-3).then_some(-1e-6 - l2.bound);
        Ok((1e-10 - l3.bound.abs(), l2_margin, l3.bound - l2.bound))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(SuiteReport {
        suite: "zero_backward_lag".into(),
        checks: vec![
            Check::from_margins("lemma3_bound_is_zero (1e-10)", rows.iter().map(|r| r.0)),
            Check::from_margins("lemma2_bound_below_-1e-6", rows.iter().filter_map(|r| r.1)),
            Check::from_margins("lemma3_exceeds_lemma2", rows.iter().map(|r| r.2)),
        ],
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn random_values(rng: &mut LabRng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.random_range(-1.0..1.0)).collect()
}

fn vtrace_instance(seed: u64, i: usize, fault: Fault) -> Result<(f64, f64, f64)> {
    let mut rng = rng::stream(seed ^ 0x7ace, i as u64);
    let mdp = random_instance(&mut rng);
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    let target = random_policy(&mut rng, ns, na);
    let behavior = random_policy(&mut rng, ns, na);
    let (rho_bar, c_bar) = if i.is_multiple_of(2) { (1.0, 1.0) } else { (2.0, 1.0) };

    let fixed = oracle::vtrace_fixed_point(&mdp, &target, &behavior, rho_bar, c_bar)?;
    let clipped = oracle::pi_rho_bar(&target, &behavior, rho_bar)?;
    let exact = oracle::exact_value(&mdp, &clipped)?;
    let err = fixed.iter().zip(&exact).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    let scale = 1.0 / (1.0 - mdp.gamma());
    let v1 = random_values(&mut rng, ns, scale);
    let v2 = random_values(&mut rng, ns, scale);
    let mut ratio = oracle::contraction_ratio(&mdp, &v1, &v2, &target, &behavior, rho_bar, c_bar)?;
    if fault == Fault::Contraction {
        ratio *= 2.0;
    }
    let eta = oracle::contraction_bound(mdp.gamma(), oracle::min_expected_rho(&target, &behavior, rho_bar));

    // On-policy reduction on a random multi-episode trajectory.
    let n = rng.random_range(2..=24);
    let rewards = random_values(&mut rng, n, 1.0);
    let values = random_values(&mut rng, n, 2.0);
    let mut next_values: Vec<f64> = values[1..].to_vec();
    next_values.push(rng.random_range(-2.0..2.0));
    let dones: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < 0.15).collect();
    let cuts: Vec<bool> = (0..n).map(|t| t + 1 == n || dones[t] || rng.random::<f64>() < 0.1).collect();
    for t in 0..n - 1 {
        if cuts[t] && !dones[t] {
            next_values[t] = rng.random_range(-2.0..2.0);
        }
    }
    let traj = Trajectories { rewards: &rewards, values: &values, next_values: &next_values, dones: &dones, cuts: &cuts };
    let lambda = rng.random_range(0.0..=1.0);
    let lp: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..0.0)).collect();
    let g = advantage::gae(traj, mdp.gamma(), lambda)?;
    let v = advantage::vtrace_realign(traj, &lp, &lp, rho_bar, c_bar, mdp.gamma(), lambda)?;
    let reduce = g.value_targets.iter().zip(&v.value_targets).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    Ok((1e-8 - err, eta + 1e-12 - ratio, 1e-10 - reduce))
}

/// V-trace fixed point, contraction modulus and on-policy reduction.
pub fn vtrace_suite(seed: u64, instances: usize, fault: Fault, exec: Exec) -> Result<SuiteReport> {
    let start = Instant::now();
    let rows = map_range(exec, instances, |i| vtrace_instance(seed, i, fault)).into_iter().collect::<Result<Vec<_>>>()?;
    Ok(SuiteReport {
        suite: "vtrace".into(),
        checks: vec![
            Check::from_margins("fixed_point_is_V_pi_rho (1e-8)", rows.iter().map(|r| r.0)),
            Check::from_margins("contraction_le_eta", rows.iter().map(|r| r.1)),
            Check::from_margins("on_policy_equals_gae (1e-10)", rows.iter().map(|r| r.2)),
        ],
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// A named loss configuration for the gradient suite.
#[derive(Debug, Clone)]
pub struct GradientCase {
    pub name: &'static str,
    pub config: TrainConfig,
    /// Zero the advantages so only the value loss carries gradient.
    pub value_only: bool,
}

pub fn gradient_cases() -> Vec<GradientCase> {
    let with = |alg: Algorithm, f: &dyn Fn(&mut TrainConfig)| {
        let mut c = TrainConfig::default();
        c.loss.algorithm = alg;
        f(&mut c);
        c
    };
    vec![
        GradientCase { name: "vaco", config: with(Algorithm::Vaco, &|_| {}), value_only: false },
        GradientCase { name: "ppo_clip", config: with(Algorithm::PpoClip, &|_| {}), value_only: false },
        GradientCase { name: "ppo_kl", config: with(Algorithm::PpoKl, &|c| c.loss.kl_coeff = 1.0), value_only: false },
        GradientCase { name: "spo", config: with(Algorithm::Spo, &|_| {}), value_only: false },
        GradientCase { name: "impala", config: with(Algorithm::Impala, &|_| {}), value_only: false },
        GradientCase { name: "value", config: with(Algorithm::Vaco, &|_| {}), value_only: true },
        GradientCase {
            name: "value_clipped",
            config: with(Algorithm::Vaco, &|c| c.loss.clip_value_loss = true),
            value_only: true,
        },
        GradientCase {
            name: "vaco_entropy",
            config: with(Algorithm::Vaco, &|c| {
                c.loss.entropy_coeff = 0.05;
                c.loss.filter_condition = FilterCondition::LogprobCoefficient;
            }),
            value_only: false,
        },
        GradientCase {
            name: "ppo_clip_entropy",
            config: with(Algorithm::PpoClip, &|c| c.loss.entropy_coeff = 0.05),
            value_only: false,
        },
    ]
}

fn normal(rng: &mut LabRng) -> f64 {
    StandardNormal.sample(rng)
}

/// Random network, parameters, and an off-policy minibatch drawn from a
/// perturbed behavior copy of the parameters.
pub fn random_minibatch(rng: &mut LabRng, discrete: bool, size: usize) -> Result<(std::sync::Arc<Architecture>, Vec<f64>, Minibatch)> {
    let obs_dim = 4;
    let head = if discrete { HeadKind::Categorical(3) } else { HeadKind::DiagGaussian(2) };
    let arch = Architecture::new(obs_dim, &[8, 8], head);
    let mut params = arch.init_params(rng);
    for p in params.iter_mut() {
        *p += 0.3 * normal(rng);
    }
    let mut behavior = params.clone();
    for p in behavior[arch.policy_range()].iter_mut() {
        *p += 0.15 * normal(rng);
    }
    let observations = Array2::from_shape_fn((size, obs_dim), |_| normal(rng));
    let width = head.action_width();
    let mut actions = Array2::zeros((size, width));
    let mut behavior_logprob = Vec::with_capacity(size);
    for i in 0..size {
        let (a, lp) = policy_sample(&arch, &behavior, observations.row(i).as_slice().expect("row"), rng)?;
        let mut flat = Vec::new();
        a.write_to(&mut flat);
        for (j, x) in flat.into_iter().enumerate() {
            actions[[i, j]] = x;
        }
        behavior_logprob.push(lp);
    }
    let current = arch.policy_forward(&params, observations.view())?.logprobs(actions.view());
    let values = arch.value_forward(&params, observations.view())?.values();
    let clipped_ratios = advantage::ratios(&current, &behavior_logprob)?.iter().map(|r| r.min(1.0)).collect();
    let mb = Minibatch {
        observations,
        actions,
        behavior_logprob,
        advantages: (0..size).map(|_| normal(rng)).collect(),
        value_targets: (0..size).map(|_| normal(rng)).collect(),
        old_values: values.iter().map(|v| v + 0.1 * normal(rng)).collect(),
        clipped_ratios,
    };
    Ok((arch, params, mb))
}

/// Fraction of coordinates whose analytic gradient matches a central
/// difference with step `1e-5` (relative error <= 1e-4 or absolute <= 1e-8).
pub fn gradient_agreement(
    arch: &Architecture,
    params: &[f64],
    mb: &Minibatch,
    cfg: &TrainConfig,
    fault: Fault,
) -> Result<f64> {
    const H: f64 = 1e-5;
    let base = minibatch_objective(arch, params, mb, cfg, None)?;
    let anchor = Anchor { logp: base.logp.clone(), mask: base.mask.clone() };
    let scale = if fault == Fault::Gradient { 1.01 } else { 1.0 };
    let mut p = params.to_vec();
    let mut ok = 0usize;
    for j in 0..params.len() {
        p[j] = params[j] + H;
        let up = minibatch_objective(arch, &p, mb, cfg, Some(&anchor))?.loss;
        p[j] = params[j] - H;
        let down = minibatch_objective(arch, &p, mb, cfg, Some(&anchor))?.loss;
        p[j] = params[j];
        let fd = (up - down) / (2.0 * H);
        let an = scale * base.grad[j];
        let diff = (an - fd).abs();
        if diff <= 1e-8 || diff <= 1e-4 * an.abs().max(fd.abs()) {
            ok += 1;
        }
    }
    Ok(ok as f64 / params.len() as f64)
}

/// Finite-difference gradient checks: every case on `minibatches` random
/// minibatches (alternating discrete and gaussian heads), requiring 99% of
/// coordinates to agree.
pub fn gradient_suite(seed: u64, minibatches: usize, fault: Fault, exec: Exec) -> Result<SuiteReport> {
    let start = Instant::now();
    let mut checks = Vec::new();
    for (k, case) in gradient_cases().into_iter().enumerate() {
        let rates = map_range(exec, minibatches, |i| -> Result<f64> {
            let mut rng = rng::stream(seed ^ 0x97ad, ((k as u64) << 32) | i as u64);
            let (arch, params, mut mb) = random_minibatch(&mut rng, i % 2 == 0, 32)?;
            if case.value_only {
                mb.advantages.iter_mut().for_each(|a| *a = 0.0);
            }
            gradient_agreement(&arch, &params, &mb, &case.config, fault)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        checks.push(Check::from_margins(case.name, rates.into_iter().map(|r| r - 0.99)));
    }
    Ok(SuiteReport { suite: "gradients".into(), checks, seconds: start.elapsed().as_secs_f64() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suites_pass() {
        assert!(lemma_suite(0, 20, Fault::None, Exec::Sequential).unwrap().passed());
        assert!(zero_backward_lag_suite(0, 20, Fault::None, Exec::Sequential).unwrap().passed());
        assert!(vtrace_suite(0, 20, Fault::None, Exec::Sequential).unwrap().passed());
        assert!(gradient_suite(0, 2, Fault::None, Exec::Sequential).unwrap().passed());
    }

    #[test]
    fn faults_are_caught() {
        assert!(!lemma_suite(0, 5, Fault::Lemma2, Exec::Sequential).unwrap().passed());
        assert!(!vtrace_suite(0, 5, Fault::Contraction, Exec::Sequential).unwrap().passed());
        assert!(!gradient_suite(0, 1, Fault::Gradient, Exec::Sequential).unwrap().passed());
        assert_eq!("gradient".parse::<Fault>().unwrap(), Fault::Gradient);
        assert!("bogus".parse::<Fault>().is_err());
    }

    #[test]
    fn report_formats_margins() {
        let r = lemma_suite(1, 3, Fault::None, Exec::Sequential).unwrap();
        let text = r.to_string();
        assert!(text.contains("perf_diff_identity") && text.contains("PASS"));
    }
}
