//! Expectation form of the V-trace operator on a tabular MDP.
//!
//! `R V(s) = V(s) + E_beta[ sum_t g^t (c_0..c_{t-1}) rho_t (r_t + g V(s_{t+1}) - V(s_t)) | s_0 = s ]`
//!
//! The trace sum `W` satisfies `W = b + g M W` with
//! `b(s) = sum_a beta rho (R + g P V - V)` and `M(s, s') = sum_a beta c P(s'|s,a)`,
//! which is solved directly instead of truncating the series.

use nalgebra::{DMatrix, DVector};

use super::mdp::{TabularMdp, TabularPolicy};
use crate::error::{LabError, Result};

fn check_clips(rho_bar: f64, c_bar: f64) -> Result<()> {
    if !(c_bar > 0.0 && rho_bar >= c_bar) {
        return Err(LabError::PreconditionViolated(format!(
            "need rho_bar >= c_bar > 0, got rho_bar={rho_bar}, c_bar={c_bar}"
        )));
    }
    Ok(())
}

fn clipped_ratio(target: f64, behavior: f64, clip: f64) -> f64 {
    if behavior == 0.0 {
        0.0
    } else {
        (target / behavior).min(clip)
    }
}

/// One application of the V-trace operator to `v_in`.
pub fn vtrace_operator(
    mdp: &TabularMdp,
    v_in: &[f64],
    target: &TabularPolicy,
    behavior: &TabularPolicy,
    rho_bar: f64,
    c_bar: f64,
) -> Result<Vec<f64>> {
    check_clips(rho_bar, c_bar)?;
    let (ns, na, g) = (mdp.num_states(), mdp.num_actions(), mdp.gamma());
    if v_in.len() != ns {
        return Err(LabError::ShapeMismatch("value vector".into()));
    }
    let mut b = DVector::<f64>::zeros(ns);
    let mut m = DMatrix::<f64>::identity(ns, ns);
    for s in 0..ns {
        for a in 0..na {
            let beta = behavior.prob(s, a);
            if beta == 0.0 {
                continue;
            }
            let rho = clipped_ratio(target.prob(s, a), beta, rho_bar);
            let c = clipped_ratio(target.prob(s, a), beta, c_bar);
            let row = mdp.transition_row(s, a);
            let next: f64 = row.iter().zip(v_in).map(|(p, v)| p * v).sum();
            b[s] += beta * rho * (mdp.reward(s, a) + g * next - v_in[s]);
            for (s2, p) in row.iter().enumerate() {
                m[(s, s2)] -= g * beta * c * p;
            }
        }
    }
    let w = m.lu().solve(&b).ok_or(LabError::SingularSystem)?;
    Ok(v_in.iter().zip(w.iter()).map(|(v, w)| v + w).collect())
}

/// Fixed point of the (affine) operator, found by extracting its matrix form
/// from `S + 1` applications and solving `(I - A) V = k`.
pub fn vtrace_fixed_point(
    mdp: &TabularMdp,
    target: &TabularPolicy,
    behavior: &TabularPolicy,
    rho_bar: f64,
    c_bar: f64,
) -> Result<Vec<f64>> {
    let ns = mdp.num_states();
    let k = vtrace_operator(mdp, &vec![0.0; ns], target, behavior, rho_bar, c_bar)?;
    let mut lhs = DMatrix::<f64>::identity(ns, ns);
    for j in 0..ns {
        let mut e = vec![0.0; ns];
        e[j] = 1.0;
        let col = vtrace_operator(mdp, &e, target, behavior, rho_bar, c_bar)?;
        for i in 0..ns {
            lhs[(i, j)] -= col[i] - k[i];
        }
    }
    let v = lhs.lu().solve(&DVector::from_vec(k)).ok_or(LabError::SingularSystem)?;
    Ok(v.iter().copied().collect())
}

/// `pi_rho(a|s) = min(rho_bar beta(a|s), pi(a|s)) / sum_b min(rho_bar beta(b|s), pi(b|s))`.
pub fn pi_rho_bar(target: &TabularPolicy, behavior: &TabularPolicy, rho_bar: f64) -> Result<TabularPolicy> {
    let (ns, na) = (target.num_states(), target.num_actions());
    let mut probs = Vec::with_capacity(ns * na);
    for s in 0..ns {
        let row: Vec<f64> = (0..na).map(|a| (rho_bar * behavior.prob(s, a)).min(target.prob(s, a))).collect();
        let total: f64 = row.iter().sum();
        if total <= 0.0 {
            return Err(LabError::PreconditionViolated(format!("target and behavior disjoint at state {s}")));
        }
        probs.extend(row.iter().map(|x| x / total));
    }
    Ok(TabularPolicy::from_rows_unchecked(ns, na, probs))
}

/// `alpha = min_s E_{a~beta}[rho_0]`.
pub fn min_expected_rho(target: &TabularPolicy, behavior: &TabularPolicy, rho_bar: f64) -> f64 {
    (0..target.num_states())
        .map(|s| {
            (0..target.num_actions())
                .map(|a| (rho_bar * behavior.prob(s, a)).min(target.prob(s, a)))
                .sum::<f64>()
        })
        .fold(f64::INFINITY, f64::min)
}

/// Sup-norm contraction modulus bound `1 - (1 - g) alpha`.
pub fn contraction_bound(gamma: f64, alpha: f64) -> f64 {
    1.0 - (1.0 - gamma) * alpha
}

/// Empirical contraction ratio `||R V1 - R V2||_inf / ||V1 - V2||_inf`.
pub fn contraction_ratio(
    mdp: &TabularMdp,
    v1: &[f64],
    v2: &[f64],
    target: &TabularPolicy,
    behavior: &TabularPolicy,
    rho_bar: f64,
    c_bar: f64,
) -> Result<f64> {
    let r1 = vtrace_operator(mdp, v1, target, behavior, rho_bar, c_bar)?;
    let r2 = vtrace_operator(mdp, v2, target, behavior, rho_bar, c_bar)?;
    let sup = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    Ok(sup(&r1, &r2) / sup(v1, v2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::exact::exact_value;
    use crate::oracle::mdp::{random_mdp, random_policy};
    use crate::rng;

    #[test]
    fn on_policy_value_is_fixed() {
        let mut r = rng::stream(21, 0);
        let mdp = random_mdp(&mut r, 6, 3, 0.9);
        let pi = random_policy(&mut r, 6, 3);
        let v = exact_value(&mdp, &pi).unwrap();
        let out = vtrace_operator(&mdp, &v, &pi, &pi, 1e6, 1e6).unwrap();
        for (a, b) in v.iter().zip(&out) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn iteration_converges_to_clipped_policy_value() {
        let mut r = rng::stream(22, 0);
        let mdp = random_mdp(&mut r, 5, 3, 0.9);
        let pi = random_policy(&mut r, 5, 3);
        let beta = random_policy(&mut r, 5, 3);
        let target = exact_value(&mdp, &pi_rho_bar(&pi, &beta, 1.0).unwrap()).unwrap();
        let mut v = vec![0.0; 5];
        for _ in 0..500 {
            v = vtrace_operator(&mdp, &v, &pi, &beta, 1.0, 1.0).unwrap();
        }
        for (a, b) in v.iter().zip(&target) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
        let fixed = vtrace_fixed_point(&mdp, &pi, &beta, 1.0, 1.0).unwrap();
        for (a, b) in fixed.iter().zip(&target) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn pi_rho_bar_limits() {
        let mut r = rng::stream(23, 0);
        let pi = random_policy(&mut r, 3, 4);
        let beta = random_policy(&mut r, 3, 4);
        let unclipped = pi_rho_bar(&pi, &beta, 1e9).unwrap();
        let full = pi_rho_bar(&pi, &beta, 1e-12).unwrap();
        for s in 0..3 {
            for a in 0..4 {
                assert!((unclipped.prob(s, a) - pi.prob(s, a)).abs() < 1e-12);
                assert!((full.prob(s, a) - beta.prob(s, a)).abs() < 1e-6);
            }
        }
        // pi = [0.8, 0.2], beta = [0.5, 0.5], rho_bar = 1 -> [0.5, 0.2] / 0.7.
        let p = TabularPolicy::new(1, 2, vec![0.8, 0.2]).unwrap();
        let b = TabularPolicy::new(1, 2, vec![0.5, 0.5]).unwrap();
        let c = pi_rho_bar(&p, &b, 1.0).unwrap();
        assert!((c.prob(0, 0) - 5.0 / 7.0).abs() < 1e-15 && (c.prob(0, 1) - 2.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_rho_below_c() {
        let mdp = random_mdp(&mut rng::stream(24, 0), 2, 2, 0.9);
        let pi = TabularPolicy::uniform(2, 2);
        assert!(vtrace_operator(&mdp, &[0.0, 0.0], &pi, &pi, 0.5, 1.0).is_err());
    }
}
