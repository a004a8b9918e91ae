//! The 2-D point-mass environment and its goal-reaching tasks.
//!
//! The agent is a point in the plane; an action `(a_x, a_y)` moves it to
//! `(s_x + a_x, s_y + a_y)` after clamping each component to `[-1, 1]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const STATE_DIM: usize = 2;
pub const ACTION_DIM: usize = 2;
pub const ACTION_LIMIT: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PointState {
    pub position: [f64; 2],
}

impl PointState {
    pub const ORIGIN: PointState = PointState { position: [0.0, 0.0] };

    pub fn new(x: f64, y: f64) -> Self {
        Self { position: [x, y] }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.position
    }

    pub fn distance(&self, other: &[f64; 2]) -> f64 {
        let dx = self.position[0] - other[0];
        let dy = self.position[1] - other[1];
        (dx * dx + dy * dy).sqrt()
    }
}

/// Uniform initial state in `[-h, h]²`; exactly the origin when `h == 0`.
pub fn point_reset<R: Rng + ?Sized>(init_box_halfwidth: f64, rng: &mut R) -> Result<PointState> {
    if !(init_box_halfwidth >= 0.0) || !init_box_halfwidth.is_finite() {
        return Err(Error::Contract(format!(
            "initial box half-width must be finite and non-negative, got {init_box_halfwidth}"
        )));
    }
    if init_box_halfwidth == 0.0 {
        return Ok(PointState::ORIGIN);
    }
    let h = init_box_halfwidth;
    Ok(PointState::new(
        rng.random_range(-h..=h),
        rng.random_range(-h..=h),
    ))
}

pub fn clamp_action(action: [f64; 2]) -> [f64; 2] {
    action.map(|a| a.clamp(-ACTION_LIMIT, ACTION_LIMIT))
}

pub fn point_step(state: PointState, action: [f64; 2]) -> Result<PointState> {
    if action.iter().any(|a| !a.is_finite()) {
        return Err(Error::Contract(format!("non-finite action {action:?}")));
    }
    let a = clamp_action(action);
    Ok(PointState::new(
        state.position[0] + a[0],
        state.position[1] + a[1],
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    /// One absolute goal; the episode ends when it is reached.
    SingleGoal,
    /// A sequence of goals, each relative to where the agent stands.
    MultiGoal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GoalTaskConfig {
    pub kind: TaskKind,
    /// Half-width of the goal sampling box.
    pub goal_range: f64,
    pub reach_radius: f64,
    pub episode_budget: usize,
    /// Steps allowed per goal before a new one is drawn (multi-goal only).
    pub per_goal_budget: usize,
    /// Goals presented per episode (multi-goal only).
    pub max_goals: usize,
    pub init_halfwidth: f64,
}

impl GoalTaskConfig {
    pub fn point_goal(goal_range: f64) -> Self {
        Self {
            kind: TaskKind::SingleGoal,
            goal_range,
            reach_radius: 0.5,
            episode_budget: 100,
            per_goal_budget: 100,
            max_goals: 1,
            init_halfwidth: 0.0,
        }
    }

    pub fn point_multi_goals(goal_range: f64) -> Self {
        Self {
            kind: TaskKind::MultiGoal,
            goal_range,
            reach_radius: 0.5,
            episode_budget: 400,
            per_goal_budget: 100,
            max_goals: 4,
            init_halfwidth: 0.0,
        }
    }

    pub fn label(&self) -> String {
        match self.kind {
            TaskKind::SingleGoal => format!("PointGoal(g_s={})", self.goal_range),
            TaskKind::MultiGoal => format!("PointMultiGoals(g_m={})", self.goal_range),
        }
    }
}

/// Reward and termination for one goal-task step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GoalStep {
    pub reward: f64,
    pub done: bool,
    pub goal_changed: bool,
}

#[derive(Debug, Clone)]
pub struct GoalTaskState {
    pub agent: PointState,
    pub current_goal: [f64; 2],
    pub goals_reached: usize,
    /// Goals drawn so far, including the current one.
    pub goals_presented: usize,
    pub steps_elapsed: usize,
    pub steps_on_current_goal: usize,
    pub done: bool,
    pub config: GoalTaskConfig,
    rng: ChaCha8Rng,
}

impl GoalTaskState {
    /// Starts an episode; all randomness (start, goals) derives from `seed`.
    pub fn reset(config: GoalTaskConfig, seed: u64) -> Result<Self> {
        if !(config.goal_range >= 0.0) || config.reach_radius < 0.0 || config.episode_budget == 0 {
            return Err(Error::Contract(format!("invalid goal task {config:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let agent = point_reset(config.init_halfwidth, &mut rng)?;
        let mut task = Self {
            agent,
            current_goal: [0.0, 0.0],
            goals_reached: 0,
            goals_presented: 0,
            steps_elapsed: 0,
            steps_on_current_goal: 0,
            done: false,
            config,
            rng,
        };
        task.current_goal = task.sample_goal();
        task.goals_presented = 1;
        Ok(task)
    }

    /// Single-goal: uniform in `[-g, g]²`. Multi-goal: uniform in the same
    /// box centred on the agent.
    pub fn sample_goal(&mut self) -> [f64; 2] {
        let g = self.config.goal_range;
        let mut draw = || if g > 0.0 { self.rng.random_range(-g..=g) } else { 0.0 };
        let offset = [draw(), draw()];
        match self.config.kind {
            TaskKind::SingleGoal => offset,
            TaskKind::MultiGoal => [
                self.agent.position[0] + offset[0],
                self.agent.position[1] + offset[1],
            ],
        }
    }

    pub fn goal_task_step(&mut self, action: [f64; 2]) -> Result<GoalStep> {
        if self.done {
            return Err(Error::Contract("stepping a finished goal episode".into()));
        }
        self.agent = point_step(self.agent, action)?;
        self.steps_elapsed += 1;
        self.steps_on_current_goal += 1;

        let mut reward = 0.0;
        let mut goal_changed = false;
        let reached = self.agent.distance(&self.current_goal) <= self.config.reach_radius;
        if reached {
            reward = 1.0;
            self.goals_reached += 1;
        }
        match self.config.kind {
            TaskKind::SingleGoal => {
                self.done = reached;
            }
            TaskKind::MultiGoal => {
                let timed_out = self.steps_on_current_goal >= self.config.per_goal_budget;
                if reached || timed_out {
                    if self.goals_presented >= self.config.max_goals {
                        self.done = true;
                    } else {
                        self.current_goal = self.sample_goal();
                        self.goals_presented += 1;
                        self.steps_on_current_goal = 0;
                        goal_changed = true;
                    }
                }
            }
        }
        if self.steps_elapsed >= self.config.episode_budget {
            self.done = true;
        }
        Ok(GoalStep {
            reward,
            done: self.done,
            goal_changed,
        })
    }
}

/// Per-dimension affine whitening of states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateNormalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

const MIN_STD: f64 = 1e-6;

impl StateNormalizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn normalize_state(&self, s: &[f64]) -> Result<Vec<f64>> {
        if s.len() != self.mean.len() {
            return Err(Error::shape("normalize_state", self.mean.len(), s.len()));
        }
        Ok(s.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(x, (m, sd))| (x - m) / sd)
            .collect())
    }

    /// Moments of the given states (population variance). Dimensions with
    /// zero spread get a floored standard deviation.
    pub fn fit_normalizer(states: &[Vec<f64>]) -> Result<Self> {
        let Some(first) = states.first() else {
            return Err(Error::Contract("cannot fit a normalizer on zero states".into()));
        };
        let dim = first.len();
        let n = states.len() as f64;
        let mut mean = vec![0.0; dim];
        for s in states {
            if s.len() != dim {
                return Err(Error::shape("fit_normalizer", dim, s.len()));
            }
            mean.iter_mut().zip(s).for_each(|(m, x)| *m += x / n);
        }
        let mut var = vec![0.0; dim];
        for s in states {
            var.iter_mut()
                .zip(s.iter().zip(&mean))
                .for_each(|(v, (x, m))| *v += (x - m) * (x - m) / n);
        }
        let std = var
            .into_iter()
            .enumerate()
            .map(|(i, v)| {
                let sd = v.sqrt();
                if sd < MIN_STD {
                    log::warn!("state dimension {i} has no spread; flooring std at {MIN_STD}");
                    MIN_STD
                } else {
                    sd
                }
            })
            .collect();
        Ok(Self { mean, std })
    }
}
