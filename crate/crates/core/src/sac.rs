//! Soft actor-critic over `(state, skill)` observations.
//!
//! The policy outputs the mean and log-std of a Gaussian that is squashed by
//! `tanh`. Two critics regress onto a target built from the smaller of two
//! Polyak-averaged target critics, and the entropy coefficient is learned in
//! log space against a target entropy.

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, NetworkParameters, OptimizerState, Tape};
use crate::replay::Transition;

pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;

/// The usual `-|A|` heuristic.
pub fn entropy_target_default(action_dim: usize) -> f64 {
    -(action_dim as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SacConfig {
    pub gamma: f64,
    pub tau: f64,
    pub policy_lr: f64,
    pub critic_lr: f64,
    pub entropy_lr: f64,
    pub initial_entropy_coeff: f64,
    /// Defaults to `-action_dim` when absent.
    #[serde(default)]
    pub target_entropy: Option<f64>,
}

impl Default for SacConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            tau: 0.005,
            policy_lr: 3e-4,
            critic_lr: 3e-4,
            entropy_lr: 3e-4,
            initial_entropy_coeff: 1.0,
            target_entropy: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActMode {
    Stochastic,
    Deterministic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SacAgent {
    pub policy: NetworkParameters,
    pub q1: NetworkParameters,
    pub q2: NetworkParameters,
    pub q1_target: NetworkParameters,
    pub q2_target: NetworkParameters,
    pub log_entropy_coeff: f64,
    pub target_entropy: f64,
    pub gamma: f64,
    pub tau: f64,
    pub policy_opt: OptimizerState,
    pub q1_opt: OptimizerState,
    pub q2_opt: OptimizerState,
    pub entropy_opt: OptimizerState,
    pub obs_dim: usize,
    pub action_dim: usize,
}

/// Averages reported by one [`SacAgent::sac_update`].
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub q1_loss: f64,
    pub q2_loss: f64,
    pub policy_loss: f64,
    pub entropy_coeff: f64,
    pub mean_q: f64,
    pub mean_log_prob: f64,
}

impl LossReport {
    pub fn critic_loss(&self) -> f64 {
        0.5 * (self.q1_loss + self.q2_loss)
    }
}

/// Column-stacked training batch.
#[derive(Debug, Clone)]
pub struct SacBatch {
    /// `[state, skill]` rows.
    pub obs: Array2<f64>,
    pub actions: Array2<f64>,
    pub rewards: Array1<f64>,
    pub next_obs: Array2<f64>,
    pub dones: Array1<f64>,
}

impl SacBatch {
    pub fn from_transitions(batch: &[&Transition]) -> Result<Self> {
        let Some(first) = batch.first() else {
            return Err(Error::Contract("empty SAC batch".into()));
        };
        let obs_dim = first.state.len() + first.skill.len();
        let act_dim = first.action.len();
        let n = batch.len();
        let mut obs = Vec::with_capacity(n * obs_dim);
        let mut next_obs = Vec::with_capacity(n * obs_dim);
        let mut actions = Vec::with_capacity(n * act_dim);
        for t in batch {
            if t.state.len() + t.skill.len() != obs_dim || t.action.len() != act_dim {
                return Err(Error::shape("SAC batch row", obs_dim, t.state.len() + t.skill.len()));
            }
            obs.extend_from_slice(&t.state);
            obs.extend_from_slice(&t.skill);
            next_obs.extend_from_slice(&t.next_state);
            next_obs.extend_from_slice(&t.skill);
            actions.extend_from_slice(&t.action);
        }
        let shape = |v: Vec<f64>, w| Array2::from_shape_vec((n, w), v).expect("sized above");
        Ok(Self {
            obs: shape(obs, obs_dim),
            actions: shape(actions, act_dim),
            rewards: batch.iter().map(|t| t.intrinsic_reward).collect(),
            next_obs: shape(next_obs, obs_dim),
            dones: batch.iter().map(|t| if t.done { 1.0 } else { 0.0 }).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

struct PolicySample {
    tape: Tape,
    actions: Array2<f64>,
    log_probs: Array1<f64>,
    std: Array2<f64>,
    noise: Array2<f64>,
    /// 1 where the raw log-std was inside the clamp range.
    log_std_live: Array2<f64>,
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `log(1 − tanh²u)` without cancellation.
fn log_tanh_jacobian(u: f64) -> f64 {
    2.0 * (std::f64::consts::LN_2 - u - softplus(-2.0 * u))
}

const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_8;

impl SacAgent {
    /// Builds policy and critics with hidden widths `hidden`, ReLU
    /// activations, and no spectral normalization.
    pub fn new<R: Rng + ?Sized>(
        state_dim: usize,
        skill_dim: usize,
        action_dim: usize,
        hidden: &[usize],
        config: &SacConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let obs_dim = state_dim + skill_dim;
        let mut sizes = vec![obs_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(2 * action_dim);
        let policy = NetworkParameters::new(&sizes, Activation::Relu, false, rng)?;
        let mut qsizes = vec![obs_dim + action_dim];
        qsizes.extend_from_slice(hidden);
        qsizes.push(1);
        let q1 = NetworkParameters::new(&qsizes, Activation::Relu, false, rng)?;
        let q2 = NetworkParameters::new(&qsizes, Activation::Relu, false, rng)?;
        if !(config.initial_entropy_coeff > 0.0) {
            return Err(Error::config(
                "sac.initial_entropy_coeff",
                "entropy coefficient must be positive",
            ));
        }
        Ok(Self {
            policy_opt: OptimizerState::for_network(&policy, config.policy_lr),
            q1_opt: OptimizerState::for_network(&q1, config.critic_lr),
            q2_opt: OptimizerState::for_network(&q2, config.critic_lr),
            entropy_opt: OptimizerState::new(&[1], config.entropy_lr),
            q1_target: q1.clone(),
            q2_target: q2.clone(),
            policy,
            q1,
            q2,
            log_entropy_coeff: config.initial_entropy_coeff.ln(),
            target_entropy: config
                .target_entropy
                .unwrap_or_else(|| entropy_target_default(action_dim)),
            gamma: config.gamma,
            tau: config.tau,
            obs_dim,
            action_dim,
        })
    }

    pub fn entropy_coeff(&self) -> f64 {
        self.log_entropy_coeff.exp()
    }

    /// Actions for a batch of observations. In stochastic mode `noise` must
    /// hold one standard-normal draw per action component; it is ignored in
    /// deterministic mode.
    pub fn act_batch(
        &self,
        obs: ArrayView2<'_, f64>,
        mode: ActMode,
        noise: Option<&Array2<f64>>,
    ) -> Result<Array2<f64>> {
        let out = self.policy.forward(obs)?;
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Training("policy produced a non-finite output".into()));
        }
        let ad = self.action_dim;
        let mean = out.slice(s![.., ..ad]);
        match mode {
            ActMode::Deterministic => Ok(mean.mapv(f64::tanh)),
            ActMode::Stochastic => {
                let noise = noise.ok_or_else(|| {
                    Error::Contract("stochastic action requires a noise sample".into())
                })?;
                if noise.dim() != mean.dim() {
                    return Err(Error::shape(
                        "action noise",
                        format!("{:?}", mean.dim()),
                        format!("{:?}", noise.dim()),
                    ));
                }
                let std = out
                    .slice(s![.., ad..])
                    .mapv(|l| l.clamp(LOG_STD_MIN, LOG_STD_MAX).exp());
                Ok((&mean + &(&std * noise)).mapv(f64::tanh))
            }
        }
    }

    /// Action for a single state/skill pair.
    pub fn policy_act<R: Rng + ?Sized>(
        &self,
        state: &[f64],
        skill: &[f64],
        mode: ActMode,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        let mut obs = Vec::with_capacity(state.len() + skill.len());
        obs.extend_from_slice(state);
        obs.extend_from_slice(skill);
        let obs = ArrayView2::from_shape((1, obs.len()), &obs)
            .map_err(|_| Error::shape("policy_act", self.obs_dim, state.len() + skill.len()))?;
        let noise = match mode {
            ActMode::Stochastic => Some(Array2::from_shape_fn((1, self.action_dim), |_| {
                StandardNormal.sample(rng)
            })),
            ActMode::Deterministic => None,
        };
        Ok(self
            .act_batch(obs, mode, noise.as_ref())?
            .into_raw_vec_and_offset()
            .0)
    }

    fn sample_policy<R: Rng + ?Sized>(&self, obs: ArrayView2<'_, f64>, rng: &mut R) -> Result<PolicySample> {
        let tape = self.policy.forward_recorded(obs)?;
        let out = tape.output();
        let n = out.nrows();
        let ad = self.action_dim;
        let mean = out.slice(s![.., ..ad]);
        let raw_log_std = out.slice(s![.., ad..]);
        let log_std = raw_log_std.mapv(|l| l.clamp(LOG_STD_MIN, LOG_STD_MAX));
        let log_std_live =
            raw_log_std.mapv(|l| if (LOG_STD_MIN..=LOG_STD_MAX).contains(&l) { 1.0 } else { 0.0 });
        let std = log_std.mapv(f64::exp);
        let noise = Array2::from_shape_fn((n, ad), |_| StandardNormal.sample(rng));
        let pre = &mean + &(&std * &noise);
        let actions = pre.mapv(f64::tanh);
        let mut log_probs = Array1::zeros(n);
        for i in 0..n {
            let mut lp = 0.0;
            for k in 0..ad {
                let e = noise[[i, k]];
                lp += -0.5 * e * e - log_std[[i, k]] - HALF_LOG_2PI - log_tanh_jacobian(pre[[i, k]]);
            }
            log_probs[i] = lp;
        }
        if log_probs.iter().any(|v: &f64| !v.is_finite()) {
            return Err(Error::Training("non-finite policy log-probability".into()));
        }
        Ok(PolicySample {
            tape,
            actions,
            log_probs,
            std,
            noise,
            log_std_live,
        })
    }

    /// One soft actor-critic step on `batch`: both critics, then the policy,
    /// then the entropy coefficient, then the target networks.
    pub fn sac_update<R: Rng + ?Sized>(&mut self, batch: &SacBatch, rng: &mut R) -> Result<LossReport> {
        if batch.is_empty() {
            return Err(Error::Contract("empty SAC batch".into()));
        }
        if batch.obs.ncols() != self.obs_dim || batch.actions.ncols() != self.action_dim {
            return Err(Error::shape("SAC batch", self.obs_dim, batch.obs.ncols()));
        }
        let n = batch.len() as f64;
        let alpha = self.entropy_coeff();

        // Critic targets.
        let next = self.sample_policy(batch.next_obs.view(), rng)?;
        let next_in = concatenate![Axis(1), batch.next_obs, next.actions];
        let tq1 = self.q1_target.forward(next_in.view())?;
        let tq2 = self.q2_target.forward(next_in.view())?;
        let targets: Array1<f64> = (0..batch.len())
            .map(|i| {
                let soft = tq1[[i, 0]].min(tq2[[i, 0]]) - alpha * next.log_probs[i];
                batch.rewards[i] + self.gamma * (1.0 - batch.dones[i]) * soft
            })
            .collect();

        let critic_in = concatenate![Axis(1), batch.obs, batch.actions];
        let mut critic_losses = [0.0; 2];
        let mut mean_q = 0.0;
        for (idx, (q, opt)) in [(&mut self.q1, &mut self.q1_opt), (&mut self.q2, &mut self.q2_opt)]
            .into_iter()
            .enumerate()
        {
            let tape = q.forward_recorded(critic_in.view())?;
            let pred = tape.output().column(0).to_owned();
            let err = &pred - &targets;
            critic_losses[idx] = err.mapv(|e| e * e).sum() / n;
            if idx == 0 {
                mean_q = pred.sum() / n;
            }
            let upstream = err.mapv(|e| 2.0 * e / n).insert_axis(Axis(1));
            let grads = q.backward(&tape, &upstream)?;
            opt.adam_step(q, &grads)?;
        }

        // Policy.
        let cur = self.sample_policy(batch.obs.view(), rng)?;
        let pol_in = concatenate![Axis(1), batch.obs, cur.actions];
        let t1 = self.q1.forward_recorded(pol_in.view())?;
        let t2 = self.q2.forward_recorded(pol_in.view())?;
        let rows = batch.len();
        let mut up1 = Array2::zeros((rows, 1));
        let mut up2 = Array2::zeros((rows, 1));
        let mut policy_loss = 0.0;
        for i in 0..rows {
            let (a, b) = (t1.output()[[i, 0]], t2.output()[[i, 0]]);
            if a <= b {
                up1[[i, 0]] = -1.0 / n;
            } else {
                up2[[i, 0]] = -1.0 / n;
            }
            policy_loss += (alpha * cur.log_probs[i] - a.min(b)) / n;
        }
        let od = self.obs_dim;
        let ad = self.action_dim;
        let ga = &self.q1.input_gradient(&t1, &up1)?.slice(s![.., od..]).to_owned()
            + &self.q2.input_gradient(&t2, &up2)?.slice(s![.., od..]);
        let mut upstream = Array2::zeros((rows, 2 * ad));
        for i in 0..rows {
            for k in 0..ad {
                let a = cur.actions[[i, k]];
                let d_pre = ga[[i, k]] * (1.0 - a * a) + alpha * 2.0 * a / n;
                upstream[[i, k]] = d_pre;
                upstream[[i, ad + k]] = cur.log_std_live[[i, k]]
                    * (d_pre * cur.std[[i, k]] * cur.noise[[i, k]] - alpha / n);
            }
        }
        let grads = self.policy.backward(&cur.tape, &upstream)?;
        self.policy_opt.adam_step(&mut self.policy, &grads)?;

        // Entropy coefficient.
        let mean_log_prob = cur.log_probs.sum() / n;
        let alpha_grad = -(mean_log_prob + self.target_entropy);
        let mut la = [self.log_entropy_coeff];
        self.entropy_opt.step(&mut [&mut la[..]], &[&[alpha_grad]])?;
        self.log_entropy_coeff = la[0];

        self.q1_target.polyak_from(&self.q1, self.tau)?;
        self.q2_target.polyak_from(&self.q2, self.tau)?;

        let report = LossReport {
            q1_loss: critic_losses[0],
            q2_loss: critic_losses[1],
            policy_loss,
            entropy_coeff: alpha,
            mean_q,
            mean_log_prob,
        };
        if [report.q1_loss, report.q2_loss, report.policy_loss, report.mean_q]
            .iter()
            .any(|v| !v.is_finite())
        {
            return Err(Error::Training(format!("non-finite SAC losses: {report:?}")));
        }
        Ok(report)
    }

    /// Sets every learning rate, including the entropy coefficient's.
    pub fn set_learning_rates(&mut self, policy: f64, critic: f64, entropy: f64) {
        self.policy_opt.learning_rate = policy;
        self.q1_opt.learning_rate = critic;
        self.q2_opt.learning_rate = critic;
        self.entropy_opt.learning_rate = entropy;
    }

    pub fn networks(&self) -> [&NetworkParameters; 5] {
        [&self.policy, &self.q1, &self.q2, &self.q1_target, &self.q2_target]
    }

    pub fn networks_mut(&mut self) -> [&mut NetworkParameters; 5] {
        [
            &mut self.policy,
            &mut self.q1,
            &mut self.q2,
            &mut self.q1_target,
            &mut self.q2_target,
        ]
    }

    pub fn optimizers(&self) -> [&OptimizerState; 4] {
        [&self.policy_opt, &self.q1_opt, &self.q2_opt, &self.entropy_opt]
    }

    pub fn optimizers_mut(&mut self) -> [&mut OptimizerState; 4] {
        [
            &mut self.policy_opt,
            &mut self.q1_opt,
            &mut self.q2_opt,
            &mut self.entropy_opt,
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn agent(seed: u64) -> SacAgent {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SacAgent::new(2, 2, 2, &[16, 16], &SacConfig::default(), &mut rng).unwrap()
    }

    #[test]
    fn entropy_target_is_negative_dim() {
        assert_eq!(entropy_target_default(2), -2.0);
        assert_eq!(entropy_target_default(1), -1.0);
        assert_eq!(agent(0).target_entropy, -2.0);
    }

    #[test]
    fn zero_mean_deterministic_action_is_zero() {
        let mut a = agent(1);
        let last = a.policy.num_layers() - 1;
        a.policy.layer_weights[last].fill(0.0);
        a.policy.layer_biases[last].fill(0.0);
        let act = a
            .policy_act(&[3.0, -2.0], &[0.1, 0.2], ActMode::Deterministic, &mut rand::rng())
            .unwrap();
        assert_eq!(act, vec![0.0, 0.0]);
    }

    #[test]
    fn actions_are_squashed() {
        let mut a = agent(2);
        let last = a.policy.num_layers() - 1;
        a.policy.layer_biases[last].fill(50.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for mode in [ActMode::Deterministic, ActMode::Stochastic] {
            let act = a.policy_act(&[100.0, 100.0], &[1.0, -1.0], mode, &mut rng).unwrap();
            assert!(act.iter().all(|x| *x <= 1.0 && *x > -1.0 - 1e-300), "{act:?}");
        }
        let a = agent(3);
        for _ in 0..200 {
            let act = a.policy_act(&[1.0, 1.0], &[0.5, 0.5], ActMode::Stochastic, &mut rng).unwrap();
            assert!(act.iter().all(|x| x.abs() < 1.0));
        }
    }

    #[test]
    fn stochastic_actions_are_reproducible() {
        let a = agent(4);
        let x = a
            .policy_act(&[1.0, 2.0], &[0.3, -0.3], ActMode::Stochastic, &mut ChaCha8Rng::seed_from_u64(9))
            .unwrap();
        let y = a
            .policy_act(&[1.0, 2.0], &[0.3, -0.3], ActMode::Stochastic, &mut ChaCha8Rng::seed_from_u64(9))
            .unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn log_tanh_jacobian_matches_naive_form() {
        for u in [-3.0, -0.5, 0.0, 0.2, 1.7] {
            let naive = (1.0 - f64::tanh(u).powi(2)).ln();
            assert!((log_tanh_jacobian(u) - naive).abs() < 1e-12);
        }
        assert!(log_tanh_jacobian(40.0).is_finite());
    }
}
