//! Exact tabular-MDP machinery: values, advantages, discounted state
//! distributions, the performance-difference identity and its bounds, and
//! the V-trace operator.

pub mod bounds;
pub mod exact;
pub mod mdp;
pub mod vtrace;

pub use bounds::{
    lemma2_lower_bound, lemma3_lower_bound, perf_diff_exact, pinsker_check, state_dist_tv_check,
    theorem1_bounds, LagTerms, LowerBound, SandwichBound,
};
pub use exact::{
    discounted_state_dist, exact_q_advantage, exact_return, exact_value, finite_horizon_return,
    optimal_policy, tv_state,
};
pub use mdp::{random_mdp, random_policy, TabularMdp, TabularPolicy};
pub use vtrace::{contraction_bound, contraction_ratio, min_expected_rho, pi_rho_bar, vtrace_fixed_point, vtrace_operator};
