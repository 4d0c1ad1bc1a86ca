//! Exact policy evaluation by direct linear solves.

use nalgebra::{DMatrix, DVector};

use super::mdp::{TabularMdp, TabularPolicy};
use crate::error::{LabError, Result};

/// State-to-state kernel `P_pi[s][s'] = sum_a pi(a|s) P(s'|s,a)`.
pub fn policy_kernel(mdp: &TabularMdp, pi: &TabularPolicy) -> DMatrix<f64> {
    let n = mdp.num_states();
    let mut k = DMatrix::zeros(n, n);
    for s in 0..n {
        for a in 0..mdp.num_actions() {
            let w = pi.prob(s, a);
            if w == 0.0 {
                continue;
            }
            for (next, p) in mdp.transition_row(s, a).iter().enumerate() {
                k[(s, next)] += w * p;
            }
        }
    }
    k
}

/// Expected one-step reward `r_pi[s]`.
pub fn policy_reward(mdp: &TabularMdp, pi: &TabularPolicy) -> DVector<f64> {
    DVector::from_fn(mdp.num_states(), |s, _| {
        (0..mdp.num_actions()).map(|a| pi.prob(s, a) * mdp.reward(s, a)).sum()
    })
}

fn solve(m: DMatrix<f64>, rhs: DVector<f64>) -> Result<DVector<f64>> {
    m.lu().solve(&rhs).ok_or(LabError::SingularSystem)
}

/// `V_pi` from `(I - gamma P_pi) V = r_pi`.
pub fn exact_value(mdp: &TabularMdp, pi: &TabularPolicy) -> Result<Vec<f64>> {
    let n = mdp.num_states();
    let m = DMatrix::identity(n, n) - policy_kernel(mdp, pi) * mdp.gamma();
    Ok(solve(m, policy_reward(mdp, pi))?.iter().copied().collect())
}

/// `Q = R + gamma P V` and `A = Q - V`, both flattened `[s][a]`.
///
/// `V(s)` in the advantage is taken as `sum_a pi(a|s) Q(s,a)`, equal to the
/// solved value up to the linear-solve residual, so that `E_pi[A] = 0` holds
/// to rounding rather than to solver accuracy.
pub fn exact_q_advantage(mdp: &TabularMdp, pi: &TabularPolicy) -> Result<(Vec<f64>, Vec<f64>)> {
    let v = exact_value(mdp, pi)?;
    let (q, mut adv) = q_and_advantage_from_value(mdp, &v);
    let na = mdp.num_actions();
    for s in 0..mdp.num_states() {
        let row = &q[s * na..(s + 1) * na];
        let centre: f64 = (0..na).map(|a| pi.prob(s, a) * row[a]).sum();
        for a in 0..na {
            adv[s * na + a] = row[a] - centre;
        }
    }
    Ok((q, adv))
}

pub(crate) fn q_and_advantage_from_value(mdp: &TabularMdp, v: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    let mut q = vec![0.0; ns * na];
    let mut adv = vec![0.0; ns * na];
    for s in 0..ns {
        for a in 0..na {
            let next: f64 = mdp.transition_row(s, a).iter().zip(v).map(|(p, v)| p * v).sum();
            q[s * na + a] = mdp.reward(s, a) + mdp.gamma() * next;
            adv[s * na + a] = q[s * na + a] - v[s];
        }
    }
    (q, adv)
}

/// Expected discounted return `J = sum_s mu(s) V(s)`.
pub fn exact_return(mdp: &TabularMdp, pi: &TabularPolicy) -> Result<f64> {
    let v = exact_value(mdp, pi)?;
    Ok(mdp.initial().iter().zip(&v).map(|(m, v)| m * v).sum())
}

/// Discounted state distribution `d = (1 - gamma) mu^T (I - gamma P_pi)^{-1}`.
pub fn discounted_state_dist(mdp: &TabularMdp, pi: &TabularPolicy) -> Result<Vec<f64>> {
    let n = mdp.num_states();
    let m = (DMatrix::identity(n, n) - policy_kernel(mdp, pi) * mdp.gamma()).transpose();
    let x = solve(m, DVector::from_column_slice(mdp.initial()))?;
    Ok(x.iter().map(|x| (1.0 - mdp.gamma()) * x).collect())
}

/// Expected undiscounted return over the first `horizon` steps.
pub fn finite_horizon_return(mdp: &TabularMdp, pi: &TabularPolicy, horizon: usize) -> f64 {
    let kernel = policy_kernel(mdp, pi).transpose();
    let r = policy_reward(mdp, pi);
    let mut dist = DVector::from_column_slice(mdp.initial());
    let mut total = 0.0;
    for _ in 0..horizon {
        total += dist.dot(&r);
        dist = &kernel * dist;
    }
    total
}

/// Total variation `(1/2) sum_a |p(a|s) - q(a|s)|` at state `s`.
pub fn tv_state(p: &TabularPolicy, q: &TabularPolicy, s: usize) -> f64 {
    0.5 * p.row(s).iter().zip(q.row(s)).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// `KL(p(.|s) || q(.|s))`; infinite when `p` puts mass where `q` has none.
pub fn kl_state(p: &TabularPolicy, q: &TabularPolicy, s: usize) -> f64 {
    p.row(s)
        .iter()
        .zip(q.row(s))
        .map(|(&a, &b)| {
            if a == 0.0 {
                0.0
            } else if b == 0.0 {
                f64::INFINITY
            } else {
                a * (a / b).ln()
            }
        })
        .sum()
}

/// A greedy policy with respect to the optimal action values (value iteration).
pub fn optimal_policy(mdp: &TabularMdp, tol: f64) -> TabularPolicy {
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    let mut v = vec![0.0; ns];
    loop {
        let (q, _) = q_and_advantage_from_value(mdp, &v);
        let next: Vec<f64> =
            (0..ns).map(|s| q[s * na..(s + 1) * na].iter().copied().fold(f64::NEG_INFINITY, f64::max)).collect();
        let delta = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = next;
        if delta < tol {
            break;
        }
    }
    let (q, _) = q_and_advantage_from_value(mdp, &v);
    let actions: Vec<usize> = (0..ns)
        .map(|s| {
            let row = &q[s * na..(s + 1) * na];
            (0..na).fold(0, |best, a| if row[a] > row[best] { a } else { best })
        })
        .collect();
    TabularPolicy::deterministic(na, &actions).expect("greedy actions in range")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::mdp::{random_mdp, random_policy};
    use crate::rng;

    fn value_iteration(mdp: &TabularMdp, pi: &TabularPolicy, sweeps: usize) -> Vec<f64> {
        let (ns, na) = (mdp.num_states(), mdp.num_actions());
        let mut v = vec![0.0; ns];
        for _ in 0..sweeps {
            v = (0..ns)
                .map(|s| {
                    (0..na)
                        .map(|a| {
                            let next: f64 =
                                mdp.transition_row(s, a).iter().zip(&v).map(|(p, v)| p * v).sum();
                            pi.prob(s, a) * (mdp.reward(s, a) + mdp.gamma() * next)
                        })
                        .sum()
                })
                .collect();
        }
        v
    }

    fn self_loop(reward: f64, gamma: f64) -> TabularMdp {
        TabularMdp::with_sa_rewards(1, 1, vec![1.0], &[reward], vec![1.0], gamma).unwrap()
    }

    #[test]
    fn zero_rewards_give_zero_value() {
        let mut r = rng::stream(1, 0);
        let mdp = random_mdp(&mut r, 5, 3, 0.9);
        let zero = TabularMdp::with_sa_rewards(
            5,
            3,
            (0..15).flat_map(|i| mdp.transition_row(i / 3, i % 3).to_vec()).collect(),
            &[0.0; 15],
            mdp.initial().to_vec(),
            0.9,
        )
        .unwrap();
        let v = exact_value(&zero, &TabularPolicy::uniform(5, 3)).unwrap();
        assert!(v.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn self_loop_is_geometric_series() {
        let mdp = self_loop(1.0, 0.9);
        let v = exact_value(&mdp, &TabularPolicy::uniform(1, 1)).unwrap();
        assert!((v[0] - 10.0).abs() < 1e-12);
        assert_eq!(discounted_state_dist(&mdp, &TabularPolicy::uniform(1, 1)).unwrap(), vec![1.0]);
    }

    #[test]
    fn matches_value_iteration() {
        let mut r = rng::stream(2, 0);
        let mdp = random_mdp(&mut r, 6, 3, 0.9);
        let pi = random_policy(&mut r, 6, 3);
        let direct = exact_value(&mdp, &pi).unwrap();
        let iterated = value_iteration(&mdp, &pi, 400);
        for (a, b) in direct.iter().zip(&iterated) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn advantage_has_zero_mean_under_policy() {
        let mut r = rng::stream(3, 0);
        let mdp = random_mdp(&mut r, 7, 4, 0.99);
        let pi = random_policy(&mut r, 7, 4);
        let (_, adv) = exact_q_advantage(&mdp, &pi).unwrap();
        for s in 0..7 {
            let m: f64 = (0..4).map(|a| pi.prob(s, a) * adv[s * 4 + a]).sum();
            assert!(m.abs() < 1e-12, "state {s}: {m}");
        }
    }

    #[test]
    fn optimal_policy_has_nonpositive_advantage() {
        let mut r = rng::stream(4, 0);
        let mdp = random_mdp(&mut r, 6, 3, 0.9);
        let pi = optimal_policy(&mdp, 1e-14);
        let (_, adv) = exact_q_advantage(&mdp, &pi).unwrap();
        assert!(adv.iter().all(|a| *a <= 1e-12), "{adv:?}");
    }

    #[test]
    fn deterministic_chain_by_hand() {
        // 0 -> 1 -> 2 -> 2, reward 1 only when leaving state 1, gamma 0.5.
        let p = vec![0., 1., 0., 0., 0., 1., 0., 0., 1.];
        let mdp = TabularMdp::with_sa_rewards(3, 1, p, &[0.0, 1.0, 0.0], vec![1.0, 0.0, 0.0], 0.5).unwrap();
        let pi = TabularPolicy::uniform(3, 1);
        let (q, adv) = exact_q_advantage(&mdp, &pi).unwrap();
        assert_eq!(exact_value(&mdp, &pi).unwrap(), vec![0.5, 1.0, 0.0]);
        assert_eq!(q, vec![0.5, 1.0, 0.0]);
        assert!(adv.iter().all(|a| a.abs() < 1e-15));
        let d = discounted_state_dist(&mdp, &pi).unwrap();
        assert!((d[0] - 0.5).abs() < 1e-15 && (d[1] - 0.25).abs() < 1e-15 && (d[2] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn state_dist_matches_power_series() {
        let mut r = rng::stream(5, 0);
        let mdp = random_mdp(&mut r, 5, 2, 0.9);
        let pi = random_policy(&mut r, 5, 2);
        let d = discounted_state_dist(&mdp, &pi).unwrap();
        assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        let kernel = policy_kernel(&mdp, &pi).transpose();
        let mut p = DVector::from_column_slice(mdp.initial());
        let mut series = DVector::zeros(5);
        let mut w = 1.0 - mdp.gamma();
        for _ in 0..200 {
            series += &p * w;
            p = &kernel * p;
            w *= mdp.gamma();
        }
        for s in 0..5 {
            assert!((series[s] - d[s]).abs() < 1e-8);
        }
    }

    #[test]
    fn gamma_zero_state_dist_is_initial() {
        let mut r = rng::stream(6, 0);
        let mdp = random_mdp(&mut r, 4, 2, 0.9).with_gamma(0.0).unwrap();
        let pi = random_policy(&mut r, 4, 2);
        let d = discounted_state_dist(&mdp, &pi).unwrap();
        for (a, b) in d.iter().zip(mdp.initial()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn tv_identities() {
        let mut r = rng::stream(7, 0);
        let p = random_policy(&mut r, 3, 4);
        let q = random_policy(&mut r, 3, 4);
        assert_eq!(tv_state(&p, &p, 0), 0.0);
        let d0 = TabularPolicy::deterministic(2, &[0]).unwrap();
        let d1 = TabularPolicy::deterministic(2, &[1]).unwrap();
        assert_eq!(tv_state(&d0, &d1, 0), 1.0);
        // Sampled-estimator identity: (1/2) E_{a~q} |p/q - 1| enumerated exactly.
        for s in 0..3 {
            let est: f64 = 0.5 * (0..4).map(|a| q.prob(s, a) * (p.prob(s, a) / q.prob(s, a) - 1.0).abs()).sum::<f64>();
            assert!((est - tv_state(&p, &q, s)).abs() < 1e-14);
        }
    }
}
