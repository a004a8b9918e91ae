//! Goal following without further training: pick a skill from the learned
//! representation and let the skill policy act.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{GoalTaskConfig, GoalTaskState, StateNormalizer};
use crate::error::{Error, Result};
use crate::nn::NetworkParameters;
use crate::reward::RepresentationArg;
use crate::sac::{ActMode, SacAgent};
use crate::skill::{expected_skill_norm, SkillLatent};
use crate::trainer::RunState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ZeroShotScheme {
    /// Unit direction from `φ(s)` to `φ(g)`, rescaled; recomputed every step.
    LsdDirectional,
    /// Discriminator mean at the goal; fixed until the goal changes.
    DiaynDiscriminator,
}

impl fmt::Display for ZeroShotScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ZeroShotScheme::LsdDirectional => "lsd-directional",
            ZeroShotScheme::DiaynDiscriminator => "diayn-discriminator",
        })
    }
}

/// Skill chosen for one step, with a flag for the degenerate at-goal case.
#[derive(Debug, Clone, PartialEq)]
pub struct SkillChoice {
    pub skill: SkillLatent,
    pub at_goal: bool,
}

/// `α (φ(g) − φ(s)) / ‖φ(g) − φ(s)‖`. When the two embeddings coincide the
/// zero skill is returned and `at_goal` is set.
pub fn lsd_zero_shot_skill(phi_s: &[f64], phi_g: &[f64], alpha: f64) -> Result<SkillChoice> {
    if phi_s.len() != phi_g.len() {
        return Err(Error::shape("lsd_zero_shot_skill", phi_s.len(), phi_g.len()));
    }
    if !(alpha > 0.0) {
        return Err(Error::Contract(format!("skill scale must be positive, got {alpha}")));
    }
    let diff: Vec<f64> = phi_g.iter().zip(phi_s).map(|(g, s)| g - s).collect();
    let norm = diff.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Ok(SkillChoice {
            skill: SkillLatent::continuous(vec![0.0; diff.len()]),
            at_goal: true,
        });
    }
    Ok(SkillChoice {
        skill: SkillLatent::continuous(diff.iter().map(|x| alpha * x / norm).collect()),
        at_goal: false,
    })
}

/// The discriminator's mean prediction at the goal.
pub fn diayn_zero_shot_skill(discriminator: &NetworkParameters, goal: &[f64]) -> Result<SkillLatent> {
    Ok(SkillLatent::continuous(discriminator.forward_vec(goal)?))
}

/// A trained representation and skill policy, read-only.
#[derive(Debug, Clone, Copy)]
pub struct ZeroShotPolicy<'a> {
    pub scheme: ZeroShotScheme,
    pub representation: &'a NetworkParameters,
    pub low_level_policy: &'a SacAgent,
    pub normalizer: Option<&'a StateNormalizer>,
    pub alpha: f64,
}

impl<'a> ZeroShotPolicy<'a> {
    /// Chooses the scheme matching the run's reward: differences of
    /// embeddings get the directional scheme, everything else the
    /// discriminator scheme. `alpha` defaults to the prior's expected norm.
    pub fn for_run(run: &'a RunState, alpha: Option<f64>) -> Result<Self> {
        let scheme = match run.variant().arg {
            RepresentationArg::Difference => ZeroShotScheme::LsdDirectional,
            _ => ZeroShotScheme::DiaynDiscriminator,
        };
        let alpha = match alpha {
            Some(a) => a,
            None => expected_skill_norm(run.config.skill_prior().dim())?,
        };
        if scheme == ZeroShotScheme::LsdDirectional && !(alpha > 0.0) {
            return Err(Error::Contract(format!("skill scale must be positive, got {alpha}")));
        }
        Ok(Self {
            scheme,
            representation: &run.phi,
            low_level_policy: &run.agent,
            normalizer: run.normalizer.as_ref(),
            alpha,
        })
    }

    fn view(&self, p: &[f64; 2]) -> Result<Vec<f64>> {
        match self.normalizer {
            Some(n) => n.normalize_state(p),
            None => Ok(p.to_vec()),
        }
    }

    pub fn select_skill(&self, state: &[f64; 2], goal: &[f64; 2]) -> Result<SkillChoice> {
        let g = self.view(goal)?;
        match self.scheme {
            ZeroShotScheme::LsdDirectional => {
                let phi_s = self.representation.forward_vec(&self.view(state)?)?;
                let phi_g = self.representation.forward_vec(&g)?;
                lsd_zero_shot_skill(&phi_s, &phi_g, self.alpha)
            }
            ZeroShotScheme::DiaynDiscriminator => Ok(SkillChoice {
                skill: diayn_zero_shot_skill(self.representation, &g)?,
                at_goal: false,
            }),
        }
    }
}

/// Outcome of one goal-task episode.
#[derive(Debug, Clone, PartialEq)]
pub struct GoalEpisode {
    pub total_return: f64,
    pub positions: Vec<[f64; 2]>,
    /// Norm of every skill handed to the policy.
    pub skill_norms: Vec<f64>,
}

/// Plays one episode, acting deterministically.
pub fn run_goal_episode(
    controller: &ZeroShotPolicy<'_>,
    task: GoalTaskConfig,
    seed: u64,
) -> Result<GoalEpisode> {
    let mut env = GoalTaskState::reset(task, seed)?;
    let mut unused = ChaCha8Rng::seed_from_u64(seed);
    let mut positions = vec![env.agent.position];
    let mut skill_norms = Vec::new();
    let mut total_return = 0.0;
    let mut held: Option<SkillLatent> = None;
    while !env.done {
        let skill = match (controller.scheme, &held) {
            (ZeroShotScheme::DiaynDiscriminator, Some(z)) => z.clone(),
            _ => {
                let z = controller.select_skill(&env.agent.position, &env.current_goal)?.skill;
                if controller.scheme == ZeroShotScheme::DiaynDiscriminator {
                    held = Some(z.clone());
                }
                z
            }
        };
        skill_norms.push(skill.norm());
        let state = controller.view(&env.agent.position)?;
        let a = controller.low_level_policy.policy_act(
            &state,
            &skill.vector,
            ActMode::Deterministic,
            &mut unused,
        )?;
        let step = env.goal_task_step([a[0], a[1]])?;
        total_return += step.reward;
        positions.push(env.agent.position);
        if step.goal_changed {
            held = None;
        }
    }
    Ok(GoalEpisode {
        total_return,
        positions,
        skill_norms,
    })
}

/// Aggregate over evaluation episodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotResult {
    pub scheme: ZeroShotScheme,
    pub task: String,
    pub goal_range: f64,
    pub seed: u64,
    pub mean_return: f64,
    pub std_error: f64,
    pub episodes: usize,
    pub mean_skill_norm: f64,
}

/// Runs `episodes` episodes with goal seeds derived from `seed`.
pub fn evaluate_zero_shot(
    controller: &ZeroShotPolicy<'_>,
    task: GoalTaskConfig,
    episodes: usize,
    seed: u64,
) -> Result<ZeroShotResult> {
    if episodes == 0 {
        return Err(Error::Contract("evaluation needs at least one episode".into()));
    }
    let mut returns = Vec::with_capacity(episodes);
    let mut norm_sum = 0.0;
    let mut norm_count = 0usize;
    for i in 0..episodes as u64 {
        let ep = run_goal_episode(controller, task, seed.wrapping_mul(1_000_003).wrapping_add(i))?;
        returns.push(ep.total_return);
        norm_sum += ep.skill_norms.iter().sum::<f64>();
        norm_count += ep.skill_norms.len();
    }
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let var = if returns.len() > 1 {
        returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Ok(ZeroShotResult {
        scheme: controller.scheme,
        task: task.label(),
        goal_range: task.goal_range,
        seed,
        mean_return: mean,
        std_error: (var / n).sqrt(),
        episodes,
        mean_skill_norm: if norm_count > 0 { norm_sum / norm_count as f64 } else { 0.0 },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ExperimentConfig;
    use crate::nn::Activation;
    use ndarray::array;

    #[test]
    fn directional_skill_example() {
        let c = lsd_zero_shot_skill(&[0.0, 0.0], &[3.0, 4.0], 1.2533).unwrap();
        assert!((c.skill.vector[0] - 0.75198).abs() < 1e-4);
        assert!((c.skill.vector[1] - 1.00264).abs() < 1e-4);
        assert!((c.skill.norm() - 1.2533).abs() < 1e-12);
        assert!(!c.at_goal);
    }

    #[test]
    fn degenerate_direction_gives_zero_skill() {
        let c = lsd_zero_shot_skill(&[1.0, 2.0], &[1.0, 2.0], 1.0).unwrap();
        assert!(c.at_goal);
        assert_eq!(c.skill.vector, vec![0.0, 0.0]);
        assert!(lsd_zero_shot_skill(&[0.0], &[1.0], 0.0).is_err());
    }

    #[test]
    fn scaling_embeddings_leaves_skill_unchanged() {
        let s = [0.3, -1.7];
        let g = [4.1, 2.2];
        let base = lsd_zero_shot_skill(&s, &g, 1.25).unwrap().skill.vector;
        for c in [0.01, 0.5, 3.0, 1e4] {
            let cs: Vec<f64> = s.iter().map(|x| c * x).collect();
            let cg: Vec<f64> = g.iter().map(|x| c * x).collect();
            let z = lsd_zero_shot_skill(&cs, &cg, 1.25).unwrap().skill.vector;
            for (a, b) in z.iter().zip(&base) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn discriminator_skill_is_mean_head() {
        let net = NetworkParameters::from_layers(
            vec![array![[0.0, 0.0], [0.0, 0.0]]],
            vec![array![1.0, 2.0]],
            Activation::Relu,
            false,
        )
        .unwrap();
        let z = diayn_zero_shot_skill(&net, &[5.0, -3.0]).unwrap();
        assert_eq!(z.vector, vec![1.0, 2.0]);
    }

    #[test]
    fn multi_goal_return_is_bounded() {
        let cfg = ExperimentConfig::pointenv_lsd()
            .with_overrides(&["network.hidden_width=8"])
            .unwrap();
        let run = RunState::new(cfg).unwrap();
        let ctl = ZeroShotPolicy::for_run(&run, None).unwrap();
        assert_eq!(ctl.scheme, ZeroShotScheme::LsdDirectional);
        let r = evaluate_zero_shot(&ctl, GoalTaskConfig::point_multi_goals(10.0), 5, 1).unwrap();
        assert!(r.mean_return <= 4.0);
        assert!((r.mean_skill_norm - ctl.alpha).abs() < 1e-9);
    }
}
