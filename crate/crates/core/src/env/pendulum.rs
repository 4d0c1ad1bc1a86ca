use std::f64::consts::PI;

use rand::Rng;

use super::{check_action, Action, ActionSpace, EnvSpec, Environment, EpisodeClock, StepOutcome};
use crate::error::Result;
use crate::rng::LabRng;

const MAX_SPEED: f64 = 8.0;
const MAX_TORQUE: f64 = 2.0;
const DT: f64 = 0.05;
const G: f64 = 10.0;

/// Torque-limited pendulum swing-up with a dense quadratic cost.
///
/// State is `(angle, angular velocity)`; observations are
/// `(cos angle, sin angle, angular velocity)`. Actions are clipped to the
/// torque bounds before integration. Episodes never terminate; they are
/// truncated at the horizon.
#[derive(Debug, Clone)]
pub struct Pendulum {
    spec: EnvSpec,
    theta: f64,
    theta_dot: f64,
    clock: EpisodeClock,
}

impl Pendulum {
    pub fn new(horizon: usize) -> Self {
        let spec = EnvSpec {
            id: "pendulum".into(),
            observation_dim: 3,
            action_space: ActionSpace::Continuous { low: vec![-MAX_TORQUE], high: vec![MAX_TORQUE] },
            horizon,
            gamma_default: 0.99,
        };
        Self { spec, theta: 0.0, theta_dot: 0.0, clock: EpisodeClock::default() }
    }

    pub fn state(&self) -> (f64, f64) {
        (self.theta, self.theta_dot)
    }

    fn observe(&self) -> Vec<f64> {
        vec![self.theta.cos(), self.theta.sin(), self.theta_dot]
    }
}

fn angle_normalize(x: f64) -> f64 {
    (x + PI).rem_euclid(2.0 * PI) - PI
}

impl Environment for Pendulum {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, rng: &mut LabRng) -> Vec<f64> {
        self.theta = rng.random_range(-PI..PI);
        self.theta_dot = rng.random_range(-1.0..1.0);
        self.clock.reset();
        self.observe()
    }

    fn step(&mut self, action: &Action, _rng: &mut LabRng) -> Result<StepOutcome> {
        check_action(&self.spec.action_space, action)?;
        self.clock.check_running()?;
        let Action::Continuous(u) = action else { unreachable!("checked above") };
        let u = u[0].clamp(-MAX_TORQUE, MAX_TORQUE);
        let th = angle_normalize(self.theta);
        let cost = th * th + 0.1 * self.theta_dot * self.theta_dot + 0.001 * u * u;
        let new_dot = (self.theta_dot + (1.5 * G * self.theta.sin() + 3.0 * u) * DT).clamp(-MAX_SPEED, MAX_SPEED);
        self.theta += new_dot * DT;
        self.theta_dot = new_dot;
        let truncated = self.clock.tick(false, self.spec.horizon);
        Ok(StepOutcome { observation: self.observe(), reward: -cost, done: false, truncated })
    }

    fn return_bounds(&self) -> (f64, f64) {
        let worst = PI * PI + 0.1 * MAX_SPEED * MAX_SPEED + 0.001 * MAX_TORQUE * MAX_TORQUE;
        (-worst * self.spec.horizon as f64, 0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::LabError;
    use crate::rng;

    #[test]
    fn reset_is_seed_deterministic() {
        let mut a = Pendulum::new(10);
        let mut b = Pendulum::new(10);
        assert_eq!(a.reset(&mut rng::stream(5, 0)), b.reset(&mut rng::stream(5, 0)));
        assert_ne!(a.reset(&mut rng::stream(5, 0)), b.reset(&mut rng::stream(6, 0)));
    }

    #[test]
    fn upright_at_rest_costs_only_torque() {
        let mut p = Pendulum::new(10);
        p.reset(&mut rng::stream(0, 0));
        p.theta = 0.0;
        p.theta_dot = 0.0;
        let out = p.step(&Action::Continuous(vec![5.0]), &mut rng::stream(0, 0)).unwrap();
        // Torque clipped to 2.
        assert!((out.reward + 0.004).abs() < 1e-15);
        assert!((p.theta_dot - 0.3).abs() < 1e-15);
    }

    #[test]
    fn rejects_non_finite_and_truncates() {
        let mut p = Pendulum::new(2);
        let mut r = rng::stream(0, 0);
        p.reset(&mut r);
        assert!(matches!(p.step(&Action::Continuous(vec![f64::NAN]), &mut r), Err(LabError::NonFiniteAction)));
        assert!(!p.step(&Action::Continuous(vec![0.0]), &mut r).unwrap().truncated);
        assert!(p.step(&Action::Continuous(vec![0.0]), &mut r).unwrap().truncated);
    }
}
