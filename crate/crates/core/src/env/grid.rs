use rand::Rng;

use super::{check_action, Action, ActionSpace, EnvSpec, Environment, EpisodeClock, StepOutcome};
use crate::error::{LabError, Result};
use crate::rng::LabRng;

/// Deterministic-layout gridworld with slippery moves.
///
/// The agent starts in cell 0 (top-left) and the episode terminates with
/// reward `goal_reward` on entering the last cell. With probability `slip` the
/// chosen move is replaced by a uniformly random move. Moving into a wall
/// leaves the agent in place. Observations are one-hot cell indicators.
#[derive(Debug, Clone)]
pub struct GridWorld {
    spec: EnvSpec,
    width: usize,
    height: usize,
    moves: Vec<(i64, i64)>,
    slip: f64,
    step_reward: f64,
    goal_reward: f64,
    cell: usize,
    clock: EpisodeClock,
}

impl GridWorld {
    pub fn new(
        id: &str,
        width: usize,
        height: usize,
        moves: Vec<(i64, i64)>,
        slip: f64,
        horizon: usize,
    ) -> Result<Self> {
        let cells = width * height;
        if !(2..=64).contains(&cells) || !(0.0..=1.0).contains(&slip) {
            return Err(LabError::Config(format!("gridworld {width}x{height}, slip {slip}")));
        }
        let spec = EnvSpec {
            id: id.to_string(),
            observation_dim: cells,
            action_space: ActionSpace::Discrete(moves.len()),
            horizon,
            gamma_default: 0.99,
        };
        spec.validate()?;
        Ok(Self { spec, width, height, moves, slip, step_reward: 0.0, goal_reward: 1.0, cell: 0, clock: EpisodeClock::default() })
    }

    /// Length-`n` corridor with left/right moves.
    pub fn chain(n: usize, slip: f64, horizon: usize) -> Result<Self> {
        Self::new(&format!("chain:{n}"), n, 1, vec![(-1, 0), (1, 0)], slip, horizon)
    }

    /// `w x h` grid with up/down/left/right moves.
    pub fn grid(w: usize, h: usize, slip: f64, horizon: usize) -> Result<Self> {
        Self::new(&format!("grid:{w}x{h}"), w, h, vec![(0, -1), (0, 1), (-1, 0), (1, 0)], slip, horizon)
    }

    pub fn with_rewards(mut self, step_reward: f64, goal_reward: f64) -> Self {
        self.step_reward = step_reward;
        self.goal_reward = goal_reward;
        self
    }

    pub fn cell(&self) -> usize {
        self.cell
    }

    pub fn set_cell(&mut self, cell: usize) {
        self.cell = cell;
    }

    pub fn num_cells(&self) -> usize {
        self.width * self.height
    }

    fn goal(&self) -> usize {
        self.num_cells() - 1
    }

    fn observe(&self) -> Vec<f64> {
        let mut o = vec![0.0; self.num_cells()];
        o[self.cell] = 1.0;
        o
    }

    /// Cell reached by applying `mv` from `cell`, staying put at walls.
    pub fn target_cell(&self, cell: usize, mv: usize) -> usize {
        let (x, y) = ((cell % self.width) as i64, (cell / self.width) as i64);
        let (dx, dy) = self.moves[mv];
        let (nx, ny) = (x + dx, y + dy);
        if nx < 0 || ny < 0 || nx >= self.width as i64 || ny >= self.height as i64 {
            cell
        } else {
            (ny as usize) * self.width + nx as usize
        }
    }

    pub fn slip(&self) -> f64 {
        self.slip
    }
}

impl Environment for GridWorld {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, _rng: &mut LabRng) -> Vec<f64> {
        self.cell = 0;
        self.clock.reset();
        self.observe()
    }

    fn step(&mut self, action: &Action, rng: &mut LabRng) -> Result<StepOutcome> {
        check_action(&self.spec.action_space, action)?;
        self.clock.check_running()?;
        let Action::Discrete(mut mv) = *action else { unreachable!("checked above") };
        if self.slip > 0.0 && rng.random::<f64>() < self.slip {
            mv = rng.random_range(0..self.moves.len());
        }
        self.cell = self.target_cell(self.cell, mv);
        let done = self.cell == self.goal();
        let reward = if done { self.goal_reward } else { self.step_reward };
        let truncated = self.clock.tick(done, self.spec.horizon);
        Ok(StepOutcome { observation: self.observe(), reward, done, truncated })
    }

    fn return_bounds(&self) -> (f64, f64) {
        // Either the goal is reached after k <= h steps, or never.
        let (h, step, goal) = (self.spec.horizon as f64, self.step_reward, self.goal_reward);
        let lo = (h * step).min(goal + (h - 1.0) * step.min(0.0));
        let hi = (h * step).max(goal + (h - 1.0) * step.max(0.0));
        (lo, hi)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn wall_keeps_agent_in_corner() {
        let mut g = GridWorld::grid(4, 3, 0.0, 50).unwrap();
        let mut r = rng::stream(0, 0);
        g.reset(&mut r);
        for mv in [0, 2] {
            let out = g.step(&Action::Discrete(mv), &mut r).unwrap();
            assert_eq!(g.cell(), 0);
            assert_eq!(out.reward, 0.0);
            assert!(!out.done);
        }
    }

    #[test]
    fn reaching_goal_terminates() {
        let mut g = GridWorld::chain(3, 0.0, 10).unwrap();
        let mut r = rng::stream(0, 0);
        assert_eq!(g.reset(&mut r), vec![1.0, 0.0, 0.0]);
        g.step(&Action::Discrete(1), &mut r).unwrap();
        let out = g.step(&Action::Discrete(1), &mut r).unwrap();
        assert!(out.done && !out.truncated && out.reward == 1.0);
        assert!(matches!(g.step(&Action::Discrete(1), &mut r), Err(LabError::EpisodeTerminated)));
    }

    #[test]
    fn horizon_truncates() {
        let mut g = GridWorld::chain(5, 0.0, 3).unwrap();
        let mut r = rng::stream(0, 0);
        g.reset(&mut r);
        let flags: Vec<bool> = (0..3).map(|_| g.step(&Action::Discrete(0), &mut r).unwrap().truncated).collect();
        assert_eq!(flags, vec![false, false, true]);
    }

    #[test]
    fn errors_on_bad_action() {
        let mut g = GridWorld::chain(5, 0.0, 3).unwrap();
        let mut r = rng::stream(0, 0);
        g.reset(&mut r);
        assert!(matches!(g.step(&Action::Discrete(2), &mut r), Err(LabError::OutOfBoundsAction { index: 2, n: 2 })));
        assert!(g.step(&Action::Continuous(vec![0.0]), &mut r).is_err());
    }
}
