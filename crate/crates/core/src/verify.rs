//! Self-checks of the numerical core, shared by the `verify` command and the
//! test suite.

use std::time::{SystemTime, UNIX_EPOCH};

use nalgebra::DMatrix;
use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::nn::{empirical_lipschitz, Activation, NetworkParameters};
use crate::replay::Transition;
use crate::reward::{
    discrete_lsd_reward, lsd_reward, representation_loss, RewardForm, RewardVariant, TransitionBatch,
};
use crate::sac::{ActMode, SacAgent, SacBatch, SacConfig};
use crate::trainer::RunState;
use crate::zeroshot::lsd_zero_shot_skill;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn outcome(name: &'static str, passed: bool, detail: String) -> CheckOutcome {
    CheckOutcome { name, passed, detail }
}

type Check = fn() -> Result<CheckOutcome>;

pub const CHECKS: [(&str, Check); 10] = [
    ("telescoping", check_telescoping),
    ("decomposition", check_decomposition),
    ("discrete-zero-mean", check_discrete_zero_mean),
    ("spectral-norm", check_spectral_norm),
    ("lipschitz", check_lipschitz),
    ("gradients", check_gradients),
    ("zero-shot-scale", check_zero_shot_scale),
    ("checkpoint", check_checkpoint),
    ("sac-bandit", check_sac_bandit),
    ("determinism", check_determinism),
];

/// Runs every check. An error inside a check counts as a failure.
pub fn run_all() -> Vec<CheckOutcome> {
    CHECKS
        .iter()
        .map(|(name, f)| f().unwrap_or_else(|e| outcome(name, false, format!("error: {e}"))))
        .collect()
}

fn random_net(sizes: &[usize], act: Activation, sn: bool, seed: u64) -> Result<NetworkParameters> {
    NetworkParameters::new(sizes, act, sn, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn normal_vec(n: usize, scale: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Summed per-step rewards equal the end-to-end embedding change along `z`.
pub fn check_telescoping() -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for trial in 0..50 {
        let phi = random_net(&[2, 64, 64, 3], Activation::Relu, trial % 2 == 0, trial)?;
        let z = normal_vec(3, 1.0, &mut rng);
        let mut s = normal_vec(2, 5.0, &mut rng);
        let start = s.clone();
        let mut total = 0.0;
        for _ in 0..10 {
            let next: Vec<f64> = s.iter().map(|x| x + rng.random_range(-1.0..=1.0)).collect();
            total += lsd_reward(&phi, &s, &next, &z)?;
            s = next;
        }
        let end_to_end = lsd_reward(&phi, &start, &s, &z)?;
        worst = worst.max((total - end_to_end).abs());
    }
    Ok(outcome("telescoping", worst <= 1e-9, format!("max |Σr − Δφᵀz| = {worst:.3e} (tol 1e-9)")))
}

/// `−½‖z − a‖² = aᵀz − ½‖a‖² − ½‖z‖²` through the reward forms.
pub fn check_decomposition() -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let d = rng.random_range(1..6);
        let a = normal_vec(d, 3.0, &mut rng);
        let z = normal_vec(d, 1.0, &mut rng);
        let sq = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
        let lhs = RewardForm::SquaredDistance.evaluate(&a, &z);
        let rhs = RewardForm::InnerProduct.evaluate(&a, &z) - 0.5 * sq(&a) - 0.5 * sq(&z);
        worst = worst.max((lhs - rhs).abs());
    }
    Ok(outcome("decomposition", worst <= 1e-9, format!("max deviation {worst:.3e} (tol 1e-9)")))
}

/// Discrete rewards summed over all skills vanish for any transition.
pub fn check_discrete_zero_mean() -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for n in [2usize, 3, 5, 8, 16] {
        let phi = random_net(&[2, 32, 32, n], Activation::Relu, true, n as u64)?;
        for _ in 0..200 {
            let s = normal_vec(2, 5.0, &mut rng);
            let next: Vec<f64> = s.iter().map(|x| x + rng.random_range(-1.0..=1.0)).collect();
            let mut total = 0.0;
            for k in 1..=n {
                total += discrete_lsd_reward(&phi, &s, &next, k, n)?;
            }
            worst = worst.max(total.abs());
        }
    }
    Ok(outcome("discrete-zero-mean", worst <= 1e-12, format!("max |Σ_k r_k| = {worst:.3e} (tol 1e-12)")))
}

fn top_singular_value(w: &Array2<f64>) -> f64 {
    let m = DMatrix::from_row_iterator(w.nrows(), w.ncols(), w.iter().copied());
    m.singular_values().max()
}

/// Every normalized layer has largest singular value 1 once the power
/// iteration has settled.
pub fn check_spectral_norm() -> Result<CheckOutcome> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for seed in 0..5 {
        let mut phi = random_net(&[2, 128, 128, 2], Activation::Relu, true, 100 + seed)?;
        phi.spectral_step(500)?;
        for w in phi.effective_weights() {
            let s = top_singular_value(&w);
            lo = lo.min(s);
            hi = hi.max(s);
        }
    }
    let ok = lo >= 1.0 - 1e-3 && hi <= 1.0 + 1e-3;
    Ok(outcome("spectral-norm", ok, format!("singular values in [{lo:.6}, {hi:.6}] (tol [0.999, 1.001])")))
}

/// A normalized network is 1-Lipschitz on sampled pairs.
pub fn check_lipschitz() -> Result<CheckOutcome> {
    let mut phi = random_net(&[2, 128, 128, 2], Activation::Relu, true, 7)?;
    phi.spectral_step(500)?;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = (0..100_000)
        .map(|i| {
            let x = normal_vec(2, 10.0, &mut rng);
            // Half the pairs are close together to probe local slopes.
            let scale = if i % 2 == 0 { 10.0 } else { 1e-2 };
            let y: Vec<f64> = x.iter().map(|v| v + scale * rng.sample::<f64, _>(StandardNormal)).collect();
            (x, y)
        })
        .collect();
    let est = empirical_lipschitz(&phi, &pairs)?;
    Ok(outcome(
        "lipschitz",
        est.max_ratio <= 1.0 + 1e-2,
        format!("max ratio {:.6} over {} pairs (tol 1.01)", est.max_ratio, est.pairs_used),
    ))
}

fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

fn fd_gradient<F: Fn(&NetworkParameters) -> Result<f64>>(net: &NetworkParameters, loss: F) -> Result<Vec<f64>> {
    let h = 1e-6;
    let mut probe = net.clone();
    let mut out = Vec::new();
    let lens: Vec<usize> = probe.trainable_slices_mut().iter().map(|s| s.len()).collect();
    for (a, len) in lens.into_iter().enumerate() {
        for i in 0..len {
            let orig = probe.trainable_slices_mut()[a][i];
            probe.trainable_slices_mut()[a][i] = orig + h;
            let up = loss(&probe)?;
            probe.trainable_slices_mut()[a][i] = orig - h;
            let down = loss(&probe)?;
            probe.trainable_slices_mut()[a][i] = orig;
            out.push((up - down) / (2.0 * h));
        }
    }
    Ok(out)
}

/// Reverse-mode gradients agree with central differences, for plain and
/// normalized networks and for the representation loss.
pub fn check_gradients() -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst: f64 = 0.0;
    let mut count = 0usize;
    for (k, sn) in [false, true].into_iter().enumerate() {
        let net = random_net(&[3, 6, 5, 2], Activation::Tanh, sn, 20 + k as u64)?;
        let x = Array2::from_shape_vec((4, 3), normal_vec(12, 1.0, &mut rng)).expect("4x3");
        let c = Array2::from_shape_vec((4, 2), normal_vec(8, 1.0, &mut rng)).expect("4x2");
        let loss = |p: &NetworkParameters| -> Result<f64> { Ok((p.forward(x.view())? * &c).sum()) };
        let tape = net.forward_recorded(x.view())?;
        let analytic: Vec<f64> = net.backward(&tape, &c)?.slices().concat();
        let numeric = fd_gradient(&net, loss)?;
        for (a, n) in analytic.iter().zip(&numeric) {
            worst = worst.max(relative_error(*a, *n));
            count += 1;
        }
    }
    // The LSD representation objective, through a normalized ReLU network.
    let phi = random_net(&[2, 16, 16, 2], Activation::Relu, true, 30)?;
    let n = 32;
    let states = Array2::from_shape_vec((n, 2), normal_vec(2 * n, 5.0, &mut rng)).expect("n x 2");
    let steps = Array2::from_shape_fn((n, 2), |_| rng.random_range(-1.0..=1.0));
    let batch = TransitionBatch {
        next_states: &states + &steps,
        states,
        skills: Array2::from_shape_vec((n, 2), normal_vec(2 * n, 1.0, &mut rng)).expect("n x 2"),
    };
    let analytic: Vec<f64> = representation_loss(&RewardVariant::LSD, &phi, &batch)?
        .gradients
        .slices()
        .concat();
    let numeric = fd_gradient(&phi, |p| Ok(representation_loss(&RewardVariant::LSD, p, &batch)?.loss))?;
    for (a, n) in analytic.iter().zip(&numeric) {
        worst = worst.max(relative_error(*a, *n));
        count += 1;
    }
    Ok(outcome(
        "gradients",
        worst < 1e-4,
        format!("max relative error {worst:.3e} over {count} parameters (tol 1e-4)"),
    ))
}

/// Scaling the representation leaves the chosen skill unchanged.
pub fn check_zero_shot_scale() -> Result<CheckOutcome> {
    let phi = random_net(&[2, 32, 32, 2], Activation::Relu, false, 40)?;
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut worst: f64 = 0.0;
    for c in [1e-3, 0.5, 2.0, 37.0, 1e3] {
        let mut scaled = phi.clone();
        let last = scaled.num_layers() - 1;
        scaled.layer_weights[last] *= c;
        scaled.layer_biases[last] *= c;
        for _ in 0..500 {
            let s = normal_vec(2, 10.0, &mut rng);
            let g = normal_vec(2, 10.0, &mut rng);
            let base = lsd_zero_shot_skill(&phi.forward_vec(&s)?, &phi.forward_vec(&g)?, 1.25)?;
            let other = lsd_zero_shot_skill(&scaled.forward_vec(&s)?, &scaled.forward_vec(&g)?, 1.25)?;
            for (a, b) in base.skill.vector.iter().zip(&other.skill.vector) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    Ok(outcome("zero-shot-scale", worst <= 1e-9, format!("max skill deviation {worst:.3e} (tol 1e-9)")))
}

fn tiny_config() -> Result<ExperimentConfig> {
    ExperimentConfig::pointenv_lsd().with_overrides(&[
        "network.hidden_width=16",
        "schedule.episodes_per_epoch=8",
        "schedule.minibatch_size=40",
        "schedule.epochs=3",
    ])
}

/// Save then load reproduces every array, counter and generator state, and
/// the reloaded run continues identically.
pub fn check_checkpoint() -> Result<CheckOutcome> {
    let nanos = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_nanos());
    let dir = std::env::temp_dir().join(format!("lsd-verify-{}-{nanos}", std::process::id()));
    let path = dir.join("roundtrip.ckpt");
    let result = (|| -> Result<CheckOutcome> {
        let mut run = RunState::new(tiny_config()?)?;
        run.train_epoch()?;
        run.train_epoch()?;
        save_checkpoint(&run, &path)?;
        let mut back = load_checkpoint(&path, Some(&run.config))?;
        let same_arrays = |a: &RunState, b: &RunState| {
            let bits = |r: &RunState| -> Vec<u64> {
                let mut v: Vec<u64> = r.phi.arrays().concat().iter().map(|x| x.to_bits()).collect();
                v.extend(r.phi_opt.arrays().concat().iter().map(|x| x.to_bits()));
                for n in r.agent.networks() {
                    v.extend(n.arrays().concat().iter().map(|x| x.to_bits()));
                }
                for o in r.agent.optimizers() {
                    v.extend(o.arrays().concat().iter().map(|x| x.to_bits()));
                    v.push(o.step);
                }
                v.push(r.agent.log_entropy_coeff.to_bits());
                v
            };
            bits(a) == bits(b) && a.rng == b.rng && a.epoch == b.epoch
        };
        let identical = same_arrays(&run, &back);
        let next_same = run.train_epoch()? == back.train_epoch()? && same_arrays(&run, &back);
        Ok(outcome(
            "checkpoint",
            identical && next_same,
            format!("bit-exact arrays/state: {identical}; identical next epoch: {next_same}"),
        ))
    })();
    let _ = std::fs::remove_dir_all(&dir);
    result
}

/// Single-step bandit with reward `−‖a − a*‖²`: the deterministic action
/// must come within 0.1 of the optimal reward for every seed.
pub fn check_sac_bandit() -> Result<CheckOutcome> {
    let target = [0.5, -0.3];
    let reward = |a: &[f64]| -((a[0] - target[0]).powi(2) + (a[1] - target[1]).powi(2));
    let batch = 64;
    let mut gaps = Vec::new();
    for seed in 0..8u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let mut agent = SacAgent::new(1, 1, 2, &[32, 32], &SacConfig::default(), &mut rng)?;
        let obs = Array2::<f64>::zeros((batch, 2));
        for _ in 0..5000 {
            let noise = Array2::from_shape_fn((batch, 2), |_| rng.sample::<f64, _>(StandardNormal));
            let actions = agent.act_batch(obs.view(), ActMode::Stochastic, Some(&noise))?;
            let transitions: Vec<Transition> = actions
                .rows()
                .into_iter()
                .map(|a| Transition {
                    state: vec![0.0],
                    action: a.to_vec(),
                    next_state: vec![0.0],
                    skill: vec![0.0],
                    intrinsic_reward: reward(a.as_slice().expect("row")),
                    done: true,
                })
                .collect();
            let refs: Vec<&Transition> = transitions.iter().collect();
            agent.sac_update(&SacBatch::from_transitions(&refs)?, &mut rng)?;
        }
        let a = agent.act_batch(ArrayView2::from_shape((1, 2), &[0.0, 0.0]).expect("1x2"), ActMode::Deterministic, None)?;
        gaps.push(-reward(a.row(0).as_slice().expect("row")));
    }
    let worst = gaps.iter().cloned().fold(0.0, f64::max);
    let passed = gaps.iter().filter(|g| **g <= 0.1).count();
    Ok(outcome(
        "sac-bandit",
        passed == gaps.len(),
        format!("{passed}/8 seeds within 0.1 of optimum (worst gap {worst:.4})"),
    ))
}

/// Same seed and config give identical metric streams, and worker count
/// does not change the collected episodes.
pub fn check_determinism() -> Result<CheckOutcome> {
    let mut a = RunState::new(tiny_config()?)?;
    let mut b = RunState::new(tiny_config()?)?;
    b.workers = 3;
    let mut same = true;
    for _ in 0..2 {
        same &= a.train_epoch()? == b.train_epoch()?;
    }
    Ok(outcome("determinism", same, format!("identical metric streams across worker counts: {same}")))
}
