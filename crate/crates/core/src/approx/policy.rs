//! Single-state policy and value queries used by actors and evaluation.

use ndarray::ArrayView2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::net::{gaussian_logprob, log_softmax, Architecture, HeadKind};
use crate::env::Action;
use crate::error::{LabError, Result};

fn row(state: &[f64]) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((1, state.len()), state).expect("row view")
}

fn head_output(arch: &Architecture, params: &[f64], state: &[f64]) -> Result<Vec<f64>> {
    let fwd = arch.policy_forward(params, row(state))?;
    Ok(fwd.output().row(0).to_vec())
}

fn check_action(head: HeadKind, action: &Action) -> Result<()> {
    match (head, action) {
        (HeadKind::Categorical(n), Action::Discrete(a)) if *a >= n => {
            Err(LabError::OutOfBoundsAction { index: *a, n })
        }
        (HeadKind::Categorical(_), Action::Discrete(_)) => Ok(()),
        (HeadKind::DiagGaussian(d), Action::Continuous(x)) if x.len() == d => {
            if x.iter().all(|v| v.is_finite()) {
                Ok(())
            } else {
                Err(LabError::NonFiniteAction)
            }
        }
        _ => Err(LabError::ActionKindMismatch),
    }
}

/// `log pi(a|s)`.
pub fn policy_logprob(arch: &Architecture, params: &[f64], state: &[f64], action: &Action) -> Result<f64> {
    check_action(arch.head(), action)?;
    let out = head_output(arch, params, state)?;
    let lp = match action {
        Action::Discrete(a) => log_softmax(&out)[*a],
        Action::Continuous(x) => gaussian_logprob(&out, arch.log_std(params).expect("gaussian"), x),
    };
    if lp.is_finite() {
        Ok(lp)
    } else {
        Err(LabError::NonFiniteOutput)
    }
}

/// Draws `a ~ pi(.|s)` and returns it with its log-probability.
pub fn policy_sample<R: Rng + ?Sized>(
    arch: &Architecture,
    params: &[f64],
    state: &[f64],
    rng: &mut R,
) -> Result<(Action, f64)> {
    let out = head_output(arch, params, state)?;
    let (action, lp) = match arch.head() {
        HeadKind::Categorical(n) => {
            let lp = log_softmax(&out);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (a, l) in lp.iter().enumerate() {
                acc += l.exp();
                if u < acc {
                    pick = a;
                    break;
                }
            }
            (Action::Discrete(pick), lp[pick])
        }
        HeadKind::DiagGaussian(_) => {
            let log_std = arch.log_std(params).expect("gaussian");
            let x: Vec<f64> = out
                .iter()
                .zip(log_std)
                .map(|(m, ls)| {
                    let z: f64 = StandardNormal.sample(rng);
                    m + ls.exp() * z
                })
                .collect();
            let lp = gaussian_logprob(&out, log_std, &x);
            (Action::Continuous(x), lp)
        }
    };
    if lp.is_finite() {
        Ok((action, lp))
    } else {
        Err(LabError::NonFiniteOutput)
    }
}

/// Argmax (categorical) or mean (gaussian) action.
pub fn policy_mode(arch: &Architecture, params: &[f64], state: &[f64]) -> Result<Action> {
    let out = head_output(arch, params, state)?;
    Ok(match arch.head() {
        HeadKind::Categorical(_) => {
            Action::Discrete((0..out.len()).fold(0, |best, a| if out[a] > out[best] { a } else { best }))
        }
        HeadKind::DiagGaussian(_) => Action::Continuous(out),
    })
}

/// Action probabilities of a categorical head.
pub fn policy_probs(arch: &Architecture, params: &[f64], state: &[f64]) -> Result<Vec<f64>> {
    match arch.head() {
        HeadKind::Categorical(_) => Ok(log_softmax(&head_output(arch, params, state)?).iter().map(|l| l.exp()).collect()),
        HeadKind::DiagGaussian(_) => Err(LabError::ActionKindMismatch),
    }
}

/// `V(s)`.
pub fn value(arch: &Architecture, params: &[f64], state: &[f64]) -> Result<f64> {
    Ok(arch.value_forward(params, row(state))?.values()[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn uniform_logits_give_log_quarter() {
        let arch = Architecture::new(3, &[5], HeadKind::Categorical(4));
        let p = vec![0.0; arch.num_params()];
        for a in 0..4 {
            let lp = policy_logprob(&arch, &p, &[0.3, -1.0, 2.0], &Action::Discrete(a)).unwrap();
            assert!((lp - 0.25f64.ln()).abs() < 1e-15);
        }
        assert!(matches!(
            policy_logprob(&arch, &p, &[0.0; 3], &Action::Discrete(4)),
            Err(LabError::OutOfBoundsAction { index: 4, n: 4 })
        ));
    }

    #[test]
    fn gaussian_logprob_at_mean() {
        let arch = Architecture::new(2, &[4], HeadKind::DiagGaussian(3));
        let mut p = arch.init_params(&mut rng::stream(2, 0));
        let ls = [0.1, -0.5, 0.7];
        let off = arch.policy_range().end - 3;
        p[off..off + 3].copy_from_slice(&ls);
        let s = [0.4, -0.2];
        let Action::Continuous(mean) = policy_mode(&arch, &p, &s).unwrap() else { panic!() };
        let lp = policy_logprob(&arch, &p, &s, &Action::Continuous(mean)).unwrap();
        let expect = -ls.iter().sum::<f64>() - 1.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((lp - expect).abs() < 1e-12);
    }

    #[test]
    fn categorical_normalises_for_random_params() {
        let arch = Architecture::new(4, &[16, 16], HeadKind::Categorical(5));
        let mut r = rng::stream(3, 0);
        for k in 0..20 {
            let mut p = arch.init_params(&mut r);
            p.iter_mut().for_each(|x| *x *= 1.0 + k as f64);
            let s: Vec<f64> = (0..4).map(|_| r.random_range(-3.0..3.0)).collect();
            let total: f64 = (0..5).map(|a| policy_logprob(&arch, &p, &s, &Action::Discrete(a)).unwrap().exp()).sum();
            assert!((total - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn sample_logprob_matches_recomputation_and_seed() {
        let arch = Architecture::new(3, &[8], HeadKind::DiagGaussian(2));
        let p = arch.init_params(&mut rng::stream(4, 0));
        let s = [0.1, 0.2, 0.3];
        let (a1, lp1) = policy_sample(&arch, &p, &s, &mut rng::stream(9, 9)).unwrap();
        let (a2, _) = policy_sample(&arch, &p, &s, &mut rng::stream(9, 9)).unwrap();
        assert_eq!(a1, a2);
        assert!((policy_logprob(&arch, &p, &s, &a1).unwrap() - lp1).abs() < 1e-12);
    }

    #[test]
    fn tiny_std_samples_the_mean() {
        let arch = Architecture::new(2, &[4], HeadKind::DiagGaussian(1));
        let mut p = arch.init_params(&mut rng::stream(5, 0));
        let off = arch.policy_range().end - 1;
        p[off] = -20.0;
        let s = [1.0, -1.0];
        let Action::Continuous(mean) = policy_mode(&arch, &p, &s).unwrap() else { panic!() };
        let (Action::Continuous(x), _) = policy_sample(&arch, &p, &s, &mut rng::stream(6, 0)).unwrap() else { panic!() };
        assert!((x[0] - mean[0]).abs() < 1e-6);
    }

    #[test]
    fn categorical_sampling_frequency() {
        // Linear head with logits [ln 0.7, ln 0.3] from the bias only.
        let arch = Architecture::new(1, &[], HeadKind::Categorical(2));
        let mut p = vec![0.0; arch.num_params()];
        p[2] = 0.7f64.ln();
        p[3] = 0.3f64.ln();
        let mut r = rng::stream(7, 0);
        let n = 100_000;
        let hits = (0..n)
            .filter(|_| matches!(policy_sample(&arch, &p, &[0.0], &mut r).unwrap().0, Action::Discrete(0)))
            .count();
        let sigma = (0.7f64 * 0.3 / n as f64).sqrt();
        assert!((hits as f64 / n as f64 - 0.7).abs() < 3.0 * sigma);
    }

    #[test]
    fn zero_value_net_outputs_zero() {
        let arch = Architecture::new(3, &[8], HeadKind::Categorical(2));
        let p = vec![0.0; arch.num_params()];
        assert_eq!(value(&arch, &p, &[1.0, 2.0, 3.0]).unwrap(), 0.0);
    }
}
