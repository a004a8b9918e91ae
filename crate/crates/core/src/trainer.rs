//! The skill-discovery loop: collect episodes with a fixed skill each, label
//! transitions with the intrinsic reward, update `φ`, then update the
//! skill policy with SAC.

use std::ops::Range;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, SacData};
use crate::env::{point_reset, point_step, StateNormalizer, ACTION_DIM, STATE_DIM};
use crate::error::{Error, Result};
use crate::nn::{Activation, NetworkParameters, OptimizerState};
use crate::replay::{ReplayBuffer, Transition};
use crate::reward::{label_rewards, representation_loss, RewardVariant, TransitionBatch};
use crate::sac::{ActMode, LossReport, SacAgent, SacBatch};
use crate::skill::{SkillLatent, SkillPrior};

/// One episode under a single skill.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub skill: SkillLatent,
    /// States as the networks see them (normalized when enabled).
    pub transitions: Vec<Transition>,
    /// Raw positions `s_0 … s_T`.
    pub positions: Vec<[f64; 2]>,
    pub episode_index: u64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn initial_position(&self) -> [f64; 2] {
        self.positions[0]
    }

    pub fn final_position(&self) -> [f64; 2] {
        *self.positions.last().expect("trajectory has a start state")
    }
}

/// Where rollouts start and how long they last.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolloutSpec {
    pub init_halfwidth: f64,
    pub episode_length: usize,
    pub mode: ActMode,
}

/// Per-episode generator: reproducible from `(seed, episode index)` alone.
pub fn episode_rng(seed: u64, episode_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(episode_index);
    rng
}

struct Live {
    rng: ChaCha8Rng,
    skill: SkillLatent,
    position: [f64; 2],
    traj: Trajectory,
}

/// Rolls out one episode per index in `episodes`, each with a freshly drawn
/// skill held fixed throughout. Episodes are stepped in lockstep so the
/// policy runs batched.
pub fn collect_rollouts(
    spec: &RolloutSpec,
    agent: &SacAgent,
    prior: &SkillPrior,
    normalizer: Option<&StateNormalizer>,
    seed: u64,
    episodes: Range<u64>,
) -> Result<Vec<Trajectory>> {
    if episodes.is_empty() {
        return Err(Error::Contract("collect_rollouts needs at least one episode".into()));
    }
    let view = |p: &[f64; 2]| -> Result<Vec<f64>> {
        match normalizer {
            Some(n) => n.normalize_state(p),
            None => Ok(p.to_vec()),
        }
    };
    let mut live = Vec::with_capacity((episodes.end - episodes.start) as usize);
    for idx in episodes {
        let mut rng = episode_rng(seed, idx);
        let skill = prior.sample(&mut rng)?;
        let start = point_reset(spec.init_halfwidth, &mut rng)?;
        live.push(Live {
            traj: Trajectory {
                skill: skill.clone(),
                transitions: Vec::with_capacity(spec.episode_length),
                positions: vec![start.position],
                episode_index: idx,
            },
            rng,
            skill,
            position: start.position,
        });
    }
    let skill_dim = prior.dim();
    let obs_dim = STATE_DIM + skill_dim;
    let n = live.len();
    for _ in 0..spec.episode_length {
        let mut obs = Vec::with_capacity(n * obs_dim);
        let mut states = Vec::with_capacity(n);
        for ep in &live {
            let s = view(&ep.position)?;
            obs.extend_from_slice(&s);
            obs.extend_from_slice(&ep.skill.vector);
            states.push(s);
        }
        let noise = match spec.mode {
            ActMode::Stochastic => {
                let mut buf = Vec::with_capacity(n * ACTION_DIM);
                for ep in live.iter_mut() {
                    for _ in 0..ACTION_DIM {
                        buf.push(StandardNormal.sample(&mut ep.rng));
                    }
                }
                Some(Array2::from_shape_vec((n, ACTION_DIM), buf).expect("sized above"))
            }
            ActMode::Deterministic => None,
        };
        let obs = ArrayView2::from_shape((n, obs_dim), &obs).expect("sized above");
        let actions = agent.act_batch(obs, spec.mode, noise.as_ref())?;
        for ((ep, state), a) in live.iter_mut().zip(states).zip(actions.rows()) {
            let action = [a[0], a[1]];
            let next = point_step(crate::env::PointState { position: ep.position }, action)?;
            ep.position = next.position;
            ep.traj.positions.push(next.position);
            ep.traj.transitions.push(Transition {
                state,
                action: action.to_vec(),
                next_state: view(&next.position)?,
                skill: ep.skill.vector.clone(),
                intrinsic_reward: 0.0,
                done: false,
            });
        }
    }
    Ok(live.into_iter().map(|ep| ep.traj).collect())
}

/// Same as [`collect_rollouts`] but split across `workers` threads holding
/// the same read-only snapshot. Output order and content do not depend on
/// the worker count.
pub fn collect_rollouts_parallel(
    spec: &RolloutSpec,
    agent: &SacAgent,
    prior: &SkillPrior,
    normalizer: Option<&StateNormalizer>,
    seed: u64,
    episodes: Range<u64>,
    workers: usize,
) -> Result<Vec<Trajectory>> {
    let total = episodes.end.saturating_sub(episodes.start);
    if workers <= 1 || total < 2 {
        return collect_rollouts(spec, agent, prior, normalizer, seed, episodes);
    }
    let chunk = total.div_ceil(workers as u64);
    let ranges: Vec<Range<u64>> = (0..workers as u64)
        .map(|w| {
            let lo = episodes.start + w * chunk;
            lo.min(episodes.end)..(lo + chunk).min(episodes.end)
        })
        .filter(|r| !r.is_empty())
        .collect();
    let parts: Vec<Result<Vec<Trajectory>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = ranges
            .into_iter()
            .map(|r| scope.spawn(move || collect_rollouts(spec, agent, prior, normalizer, seed, r)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("rollout worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(total as usize);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Scalars logged once per epoch.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: u64,
    pub mean_intrinsic_reward: f64,
    pub phi_loss: f64,
    pub critic_loss: f64,
    pub policy_loss: f64,
    pub entropy_coeff: f64,
    pub mean_final_distance: f64,
}

impl EpochMetrics {
    pub const CSV_HEADER: [&'static str; 7] = [
        "epoch",
        "mean_intrinsic_reward",
        "phi_loss",
        "critic_loss",
        "policy_loss",
        "entropy_coeff",
        "mean_final_distance",
    ];

    fn check_finite(&self) -> Result<()> {
        let vals = [
            self.mean_intrinsic_reward,
            self.phi_loss,
            self.critic_loss,
            self.policy_loss,
            self.entropy_coeff,
            self.mean_final_distance,
        ];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::Training(format!("non-finite epoch metric: {self:?}")));
        }
        Ok(())
    }
}

/// Everything that evolves during training.
#[derive(Debug, Clone)]
pub struct RunState {
    pub config: ExperimentConfig,
    pub phi: NetworkParameters,
    pub phi_opt: OptimizerState,
    pub agent: SacAgent,
    pub normalizer: Option<StateNormalizer>,
    pub epoch: u64,
    pub rng: ChaCha8Rng,
    pub replay: Option<ReplayBuffer>,
    pub workers: usize,
}

/// Seed stream for per-episode generators, kept apart from the trainer's own.
const ROLLOUT_SEED_SALT: u64 = 0x5EED_0F_E915_0DE5;

impl RunState {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let skill_dim = config.skill_prior().dim();
        let mut sizes = vec![STATE_DIM];
        sizes.extend(config.hidden_sizes());
        sizes.push(skill_dim);
        let phi = NetworkParameters::new(&sizes, Activation::Relu, config.reward.sn, &mut rng)?;
        let agent = SacAgent::new(
            STATE_DIM,
            skill_dim,
            ACTION_DIM,
            &config.hidden_sizes(),
            &config.sac,
            &mut rng,
        )?;
        let normalizer = if config.env.normalize_states {
            Some(fit_random_normalizer(&config, &mut rng)?)
        } else {
            None
        };
        let replay = match config.schedule.sac_data {
            SacData::Replay => Some(ReplayBuffer::new(config.schedule.replay_capacity)?),
            SacData::OnPolicy => None,
        };
        Ok(Self {
            phi_opt: OptimizerState::for_network(&phi, config.phi_lr),
            phi,
            agent,
            normalizer,
            epoch: 0,
            rng,
            replay,
            workers: 1,
            config,
        })
    }

    pub fn variant(&self) -> RewardVariant {
        self.config.reward_variant()
    }

    pub fn rollout_seed(&self) -> u64 {
        self.config.seed ^ ROLLOUT_SEED_SALT
    }

    /// Discovery-time rollouts for the current epoch.
    pub fn collect_epoch_rollouts(&self) -> Result<Vec<Trajectory>> {
        let per = self.config.schedule.episodes_per_epoch as u64;
        let start = self.epoch * per;
        let spec = RolloutSpec {
            init_halfwidth: self.config.env.init_halfwidth,
            episode_length: self.config.env.episode_length,
            mode: ActMode::Stochastic,
        };
        collect_rollouts_parallel(
            &spec,
            &self.agent,
            &self.config.skill_prior(),
            self.normalizer.as_ref(),
            self.rollout_seed(),
            start..start + per,
            self.workers,
        )
    }

    /// One full iteration of the discovery loop.
    pub fn train_epoch(&mut self) -> Result<EpochMetrics> {
        let trajectories = self.collect_epoch_rollouts()?;
        let mut transitions: Vec<Transition> = trajectories
            .iter()
            .flat_map(|t| t.transitions.iter().cloned())
            .collect();
        let mean_final_distance = crate::metrics::traveled_distance(&trajectories)?;

        // Labels come from φ as it stands before this epoch's updates.
        let variant = self.variant();
        let all = batch_of(&transitions.iter().collect::<Vec<_>>());
        let labels = label_rewards(&variant, &self.phi, &all)?;
        for (t, r) in transitions.iter_mut().zip(labels.iter()) {
            t.intrinsic_reward = *r;
        }
        let mean_intrinsic_reward = labels.mean().unwrap_or(0.0);

        let m = self.config.schedule.minibatch_size;
        let mut phi_loss = 0.0;
        let phi_steps = self.config.schedule.phi_minibatches;
        for _ in 0..phi_steps {
            let picked = draw_without_replacement(&transitions, m, &mut self.rng);
            self.phi.spectral_step(1)?;
            let loss = representation_loss(&variant, &self.phi, &batch_of(&picked))?;
            self.phi_opt.adam_step(&mut self.phi, &loss.gradients)?;
            phi_loss += loss.loss / phi_steps.max(1) as f64;
        }

        if let Some(replay) = self.replay.as_mut() {
            for t in &transitions {
                replay.push(t.clone());
            }
        }
        let sac_steps = self.config.schedule.sac_minibatches;
        let mut sum = LossReport::default();
        for _ in 0..sac_steps {
            let picked = match &self.replay {
                Some(replay) => replay.sample(m, &mut self.rng)?,
                None => draw_without_replacement(&transitions, m, &mut self.rng),
            };
            let batch = SacBatch::from_transitions(&picked)?;
            let r = self.agent.sac_update(&batch, &mut self.rng)?;
            sum.q1_loss += r.q1_loss;
            sum.q2_loss += r.q2_loss;
            sum.policy_loss += r.policy_loss;
        }
        let k = sac_steps.max(1) as f64;
        self.epoch += 1;
        let metrics = EpochMetrics {
            epoch: self.epoch,
            mean_intrinsic_reward,
            phi_loss,
            critic_loss: 0.5 * (sum.q1_loss + sum.q2_loss) / k,
            policy_loss: sum.policy_loss / k,
            entropy_coeff: self.agent.entropy_coeff(),
            mean_final_distance,
        };
        metrics.check_finite()?;
        Ok(metrics)
    }

    /// Zeroes every learning rate (used by tests and dry runs).
    pub fn freeze(&mut self) {
        self.phi_opt.learning_rate = 0.0;
        self.agent.set_learning_rates(0.0, 0.0, 0.0);
    }

    /// Evaluation rollouts with skills from the prior, starting from the
    /// evaluation box.
    pub fn evaluation_rollouts(&self, episodes: usize, seed: u64) -> Result<Vec<Trajectory>> {
        let spec = RolloutSpec {
            init_halfwidth: self.config.eval.init_halfwidth,
            episode_length: self.config.env.episode_length,
            mode: self.config.eval.action_mode,
        };
        collect_rollouts_parallel(
            &spec,
            &self.agent,
            &self.config.skill_prior(),
            self.normalizer.as_ref(),
            seed,
            0..episodes as u64,
            self.workers,
        )
    }
}

fn fit_random_normalizer(config: &ExperimentConfig, rng: &mut ChaCha8Rng) -> Result<StateNormalizer> {
    use rand::Rng;
    let mut states = Vec::new();
    for _ in 0..config.schedule.episodes_per_epoch.max(1) * 20 {
        let mut s = point_reset(config.env.init_halfwidth, rng)?;
        states.push(s.position.to_vec());
        for _ in 0..config.env.episode_length {
            let a = [rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)];
            s = point_step(s, a)?;
            states.push(s.position.to_vec());
        }
    }
    StateNormalizer::fit_normalizer(&states)
}

fn draw_without_replacement<'a>(
    pool: &'a [Transition],
    m: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<&'a Transition> {
    let mut idx: Vec<usize> = (0..pool.len()).collect();
    idx.shuffle(rng);
    idx.truncate(m.min(pool.len()));
    idx.into_iter().map(|i| &pool[i]).collect()
}

fn batch_of(ts: &[&Transition]) -> TransitionBatch {
    let n = ts.len();
    let sd = ts.first().map_or(0, |t| t.state.len());
    let zd = ts.first().map_or(0, |t| t.skill.len());
    let mut s = Vec::with_capacity(n * sd);
    let mut sn = Vec::with_capacity(n * sd);
    let mut z = Vec::with_capacity(n * zd);
    for t in ts {
        s.extend_from_slice(&t.state);
        sn.extend_from_slice(&t.next_state);
        z.extend_from_slice(&t.skill);
    }
    TransitionBatch {
        states: Array2::from_shape_vec((n, sd), s).expect("uniform rows"),
        next_states: Array2::from_shape_vec((n, sd), sn).expect("uniform rows"),
        skills: Array2::from_shape_vec((n, zd), z).expect("uniform rows"),
    }
}

/// Builds a reward batch from transitions.
pub fn transition_batch(ts: &[&Transition]) -> TransitionBatch {
    batch_of(ts)
}
