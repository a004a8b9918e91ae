//! Intrinsic rewards and the representation-learning loss.
//!
//! Every reward compares a representation argument `a` (built from `φ`) with
//! the skill `z` in one of three forms:
//!
//! | form               | reward                 |
//! |--------------------|------------------------|
//! | `squared-distance` | `-½‖a − z‖²`           |
//! | `vmf`              | `aᵀz / (‖a‖‖z‖)`       |
//! | `inner-product`    | `aᵀz`                  |
//!
//! with `a` one of `φ(s)`, `φ(s')`, `φ(s'−s)` or `φ(s')−φ(s)`. The
//! inner-product form on `φ(s')−φ(s)` with a spectrally normalized `φ` is
//! LSD; squared distance on `φ(s')` without normalization is DIAYN; vMF on
//! `φ(s)` without normalization is VISR.

use std::fmt;

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Gradients, NetworkParameters};
use crate::skill::SkillKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RewardForm {
    #[serde(rename = "squared-distance")]
    SquaredDistance,
    #[serde(rename = "vmf")]
    Vmf,
    #[serde(rename = "inner-product")]
    InnerProduct,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RepresentationArg {
    #[serde(rename = "phi(s)")]
    Current,
    #[serde(rename = "phi(s')")]
    Next,
    #[serde(rename = "phi(s'-s)")]
    OfDifference,
    #[serde(rename = "phi(s')-phi(s)")]
    Difference,
}

impl RewardForm {
    pub const ALL: [RewardForm; 3] = [
        RewardForm::SquaredDistance,
        RewardForm::Vmf,
        RewardForm::InnerProduct,
    ];

    pub fn label(self) -> &'static str {
        match self {
            RewardForm::SquaredDistance => "squared-distance",
            RewardForm::Vmf => "vmf",
            RewardForm::InnerProduct => "inner-product",
        }
    }

    /// Reward for one argument/skill pair.
    pub fn evaluate(self, a: &[f64], z: &[f64]) -> f64 {
        match self {
            RewardForm::SquaredDistance => {
                -0.5 * a.iter().zip(z).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()
            }
            RewardForm::InnerProduct => dot(a, z),
            RewardForm::Vmf => {
                let (na, nz) = (norm(a), norm(z));
                if na == 0.0 || nz == 0.0 {
                    log::warn!("vMF reward on a zero vector; returning 0");
                    return 0.0;
                }
                dot(a, z) / (na * nz)
            }
        }
    }

    /// ∂reward/∂a, written into `out`.
    fn gradient(self, a: &[f64], z: &[f64], out: &mut [f64]) {
        match self {
            RewardForm::SquaredDistance => {
                for k in 0..a.len() {
                    out[k] = z[k] - a[k];
                }
            }
            RewardForm::InnerProduct => out.copy_from_slice(z),
            RewardForm::Vmf => {
                let (na, nz) = (norm(a), norm(z));
                if na == 0.0 || nz == 0.0 {
                    out.iter_mut().for_each(|g| *g = 0.0);
                    return;
                }
                let cos = dot(a, z) / (na * nz);
                for k in 0..a.len() {
                    out[k] = (z[k] / nz - cos * a[k] / na) / na;
                }
            }
        }
    }
}

impl RepresentationArg {
    pub const ALL: [RepresentationArg; 4] = [
        RepresentationArg::Current,
        RepresentationArg::Next,
        RepresentationArg::OfDifference,
        RepresentationArg::Difference,
    ];

    pub fn label(self) -> &'static str {
        match self {
            RepresentationArg::Current => "phi(s)",
            RepresentationArg::Next => "phi(s')",
            RepresentationArg::OfDifference => "phi(s'-s)",
            RepresentationArg::Difference => "phi(s')-phi(s)",
        }
    }
}

/// One cell of the reward grid: form × representation argument × spectral
/// normalization, plus the skill kind it is used with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RewardVariant {
    pub form: RewardForm,
    pub arg: RepresentationArg,
    pub sn: bool,
    pub skill_kind: SkillKind,
}

impl RewardVariant {
    pub const LSD: RewardVariant = RewardVariant {
        form: RewardForm::InnerProduct,
        arg: RepresentationArg::Difference,
        sn: true,
        skill_kind: SkillKind::Continuous,
    };
    pub const DISCRETE_LSD: RewardVariant = RewardVariant {
        skill_kind: SkillKind::Discrete,
        ..Self::LSD
    };
    pub const DIAYN: RewardVariant = RewardVariant {
        form: RewardForm::SquaredDistance,
        arg: RepresentationArg::Next,
        sn: false,
        skill_kind: SkillKind::Continuous,
    };
    pub const VISR: RewardVariant = RewardVariant {
        form: RewardForm::Vmf,
        arg: RepresentationArg::Current,
        sn: false,
        skill_kind: SkillKind::Continuous,
    };

    /// All 24 continuous-skill combinations, form-major.
    pub fn grid() -> Vec<RewardVariant> {
        let mut out = Vec::with_capacity(24);
        for form in RewardForm::ALL {
            for arg in RepresentationArg::ALL {
                for sn in [true, false] {
                    out.push(RewardVariant {
                        form,
                        arg,
                        sn,
                        skill_kind: SkillKind::Continuous,
                    });
                }
            }
        }
        out
    }

    /// Parses `form/arg/sn-on|sn-off`, e.g. `inner-product/phi(s')-phi(s)/sn-on`.
    pub fn parse(label: &str) -> Result<Self> {
        let parts: Vec<&str> = label.split('/').collect();
        let bad = || Error::config("reward", format!("unrecognized reward variant `{label}`"));
        let [form, arg, sn] = parts.as_slice() else {
            return Err(bad());
        };
        let form = RewardForm::ALL
            .into_iter()
            .find(|f| f.label() == *form)
            .ok_or_else(bad)?;
        let arg = RepresentationArg::ALL
            .into_iter()
            .find(|a| a.label() == *arg)
            .ok_or_else(bad)?;
        let sn = match *sn {
            "sn-on" => true,
            "sn-off" => false,
            _ => return Err(bad()),
        };
        Ok(RewardVariant {
            form,
            arg,
            sn,
            skill_kind: SkillKind::Continuous,
        })
    }

    pub fn is_lsd(&self) -> bool {
        self.form == RewardForm::InnerProduct && self.arg == RepresentationArg::Difference && self.sn
    }
}

impl fmt::Display for RewardVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}/{}/{}",
            self.form.label(),
            self.arg.label(),
            if self.sn { "sn-on" } else { "sn-off" }
        )
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn check_skill(phi: &NetworkParameters, z: &[f64]) -> Result<()> {
    if z.len() != phi.output_dim() {
        return Err(Error::shape("skill vs representation", phi.output_dim(), z.len()));
    }
    Ok(())
}

fn phi_of(phi: &NetworkParameters, s: &[f64]) -> Result<Vec<f64>> {
    phi.forward_vec(s)
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// `(φ(s') − φ(s))ᵀz`.
pub fn lsd_reward(phi: &NetworkParameters, s: &[f64], s_next: &[f64], z: &[f64]) -> Result<f64> {
    check_skill(phi, z)?;
    let delta = sub(&phi_of(phi, s_next)?, &phi_of(phi, s)?);
    Ok(dot(&delta, z))
}

/// `Δφ_k − (1/(N−1)) Σ_{i≠k} Δφ_i` for the 1-based skill index `k`.
pub fn discrete_lsd_reward(
    phi: &NetworkParameters,
    s: &[f64],
    s_next: &[f64],
    k: usize,
    n: usize,
) -> Result<f64> {
    if phi.output_dim() != n {
        return Err(Error::shape("discrete representation width", n, phi.output_dim()));
    }
    if k == 0 || k > n {
        return Err(Error::Contract(format!("skill index {k} outside 1..={n}")));
    }
    let delta = sub(&phi_of(phi, s_next)?, &phi_of(phi, s)?);
    Ok(discrete_reward_from_delta(&delta, k))
}

pub fn discrete_reward_from_delta(delta: &[f64], k: usize) -> f64 {
    let n = delta.len() as f64;
    let total: f64 = delta.iter().sum();
    let own = delta[k - 1];
    own - (total - own) / (n - 1.0)
}

/// `-½‖φ(s') − z‖²`.
pub fn diayn_reward(phi: &NetworkParameters, s_next: &[f64], z: &[f64]) -> Result<f64> {
    check_skill(phi, z)?;
    Ok(RewardForm::SquaredDistance.evaluate(&phi_of(phi, s_next)?, z))
}

/// Cosine between `φ(s)` and `z`; zero (with a warning) if either vanishes.
pub fn visr_reward(phi: &NetworkParameters, s: &[f64], z: &[f64]) -> Result<f64> {
    check_skill(phi, z)?;
    Ok(RewardForm::Vmf.evaluate(&phi_of(phi, s)?, z))
}

pub fn ablation_reward(
    variant: &RewardVariant,
    phi: &NetworkParameters,
    s: &[f64],
    s_next: &[f64],
    z: &[f64],
) -> Result<f64> {
    check_skill(phi, z)?;
    if s.len() != s_next.len() {
        return Err(Error::shape("transition states", s.len(), s_next.len()));
    }
    let a = match variant.arg {
        RepresentationArg::Current => phi_of(phi, s)?,
        RepresentationArg::Next => phi_of(phi, s_next)?,
        RepresentationArg::OfDifference => phi_of(phi, &sub(s_next, s))?,
        RepresentationArg::Difference => sub(&phi_of(phi, s_next)?, &phi_of(phi, s)?),
    };
    Ok(variant.form.evaluate(&a, z))
}

/// A batch of `(s, s', z)` rows.
#[derive(Debug, Clone)]
pub struct TransitionBatch {
    pub states: Array2<f64>,
    pub next_states: Array2<f64>,
    pub skills: Array2<f64>,
}

impl TransitionBatch {
    pub fn len(&self) -> usize {
        self.states.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn validate(&self, phi: &NetworkParameters) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Contract("empty transition batch".into()));
        }
        let n = self.len();
        if self.next_states.nrows() != n || self.skills.nrows() != n {
            return Err(Error::shape("batch rows", n, self.next_states.nrows().min(self.skills.nrows())));
        }
        if self.skills.ncols() != phi.output_dim() {
            return Err(Error::shape("skill vs representation", phi.output_dim(), self.skills.ncols()));
        }
        Ok(())
    }
}

/// Stacks the network inputs the argument needs; for `φ(s')−φ(s)` the
/// next states come first, then the current states.
fn argument_inputs(arg: RepresentationArg, batch: &TransitionBatch) -> Array2<f64> {
    match arg {
        RepresentationArg::Current => batch.states.clone(),
        RepresentationArg::Next => batch.next_states.clone(),
        RepresentationArg::OfDifference => &batch.next_states - &batch.states,
        RepresentationArg::Difference => {
            concatenate![Axis(0), batch.next_states, batch.states]
        }
    }
}

fn argument_from_output(arg: RepresentationArg, out: ArrayView2<'_, f64>, n: usize) -> Array2<f64> {
    match arg {
        RepresentationArg::Difference => &out.slice(s![..n, ..]) - &out.slice(s![n.., ..]),
        _ => out.to_owned(),
    }
}

/// Rewards for every row of the batch under `φ` (singular vectors held fixed).
pub fn label_rewards(
    variant: &RewardVariant,
    phi: &NetworkParameters,
    batch: &TransitionBatch,
) -> Result<Array1<f64>> {
    batch.validate(phi)?;
    let n = batch.len();
    let out = phi.forward(argument_inputs(variant.arg, batch).view())?;
    let args = argument_from_output(variant.arg, out.view(), n);
    Ok(args
        .rows()
        .into_iter()
        .zip(batch.skills.rows())
        .map(|(a, z)| {
            variant
                .form
                .evaluate(a.as_slice().expect("row-major"), z.as_slice().expect("row-major"))
        })
        .collect())
}

/// Loss (negated mean reward) and its gradient with respect to `φ`.
#[derive(Debug, Clone)]
pub struct RepresentationLoss {
    pub loss: f64,
    pub gradients: Gradients,
}

pub fn representation_loss(
    variant: &RewardVariant,
    phi: &NetworkParameters,
    batch: &TransitionBatch,
) -> Result<RepresentationLoss> {
    batch.validate(phi)?;
    let n = batch.len();
    let tape = phi.forward_recorded(argument_inputs(variant.arg, batch).view())?;
    let args = argument_from_output(variant.arg, tape.output().view(), n);
    let width = args.ncols();

    let mut total = 0.0;
    let mut grad_args = Array2::<f64>::zeros((n, width));
    let mut buf = vec![0.0; width];
    for ((a, z), mut g) in args
        .rows()
        .into_iter()
        .zip(batch.skills.rows())
        .zip(grad_args.rows_mut())
    {
        let (a, z) = (a.as_slice().expect("row-major"), z.as_slice().expect("row-major"));
        total += variant.form.evaluate(a, z);
        variant.form.gradient(a, z, &mut buf);
        g.iter_mut().zip(&buf).for_each(|(dst, v)| *dst = -v / n as f64);
    }
    let upstream = match variant.arg {
        RepresentationArg::Difference => concatenate![Axis(0), grad_args, -&grad_args],
        _ => grad_args,
    };
    let gradients = phi.backward(&tape, &upstream)?;
    Ok(RepresentationLoss {
        loss: -total / n as f64,
        gradients,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn identity_phi() -> NetworkParameters {
        NetworkParameters::from_layers(
            vec![Array2::eye(2)],
            vec![Array1::zeros(2)],
            Activation::Relu,
            false,
        )
        .unwrap()
    }

    fn random_phi(seed: u64, out: usize, sn: bool) -> NetworkParameters {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = NetworkParameters::new(&[2, 16, 16, out], Activation::Relu, sn, &mut rng).unwrap();
        net.spectral_step(20).unwrap();
        net
    }

    #[test]
    fn inner_product_examples() {
        assert_eq!(RewardForm::InnerProduct.evaluate(&[1.0, 0.0], &[2.0, 0.0]), 2.0);
        assert_eq!(RewardForm::InnerProduct.evaluate(&[1.0, 1.0], &[1.0, -1.0]), 0.0);
        let phi = identity_phi();
        assert_eq!(lsd_reward(&phi, &[0.0, 0.0], &[1.0, 0.0], &[2.0, 0.0]).unwrap(), 2.0);
    }

    #[test]
    fn discrete_examples() {
        assert_eq!(discrete_reward_from_delta(&[1.0, 0.0, 0.0], 1), 1.0);
        assert_eq!(discrete_reward_from_delta(&[0.0, 1.0, 1.0], 1), -1.0);
        for c in [-3.0, 0.0, 2.5] {
            assert_eq!(discrete_reward_from_delta(&[c, c, c, c], 2), 0.0);
        }
    }

    #[test]
    fn discrete_reward_checks_width() {
        let phi = identity_phi();
        assert!(discrete_lsd_reward(&phi, &[0.0, 0.0], &[1.0, 1.0], 1, 3).is_err());
        assert!(discrete_lsd_reward(&phi, &[0.0, 0.0], &[1.0, 1.0], 1, 2).is_ok());
    }

    #[test]
    fn diayn_examples() {
        assert_eq!(RewardForm::SquaredDistance.evaluate(&[0.3, 0.4], &[0.3, 0.4]), 0.0);
        assert_eq!(RewardForm::SquaredDistance.evaluate(&[1.0, 0.0], &[0.0, 0.0]), -0.5);
        let mut last = 0.0;
        for k in 1..20 {
            let r = RewardForm::SquaredDistance.evaluate(&[k as f64 * 0.1, 0.0], &[0.0, 0.0]);
            assert!(r < last);
            last = r;
        }
    }

    #[test]
    fn visr_examples() {
        assert!((RewardForm::Vmf.evaluate(&[3.0, 4.0], &[0.0, 2.0]) - 0.8).abs() < 1e-15);
        assert!((RewardForm::Vmf.evaluate(&[1.5, -3.0], &[0.5, -1.0]) - 1.0).abs() < 1e-15);
        assert_eq!(RewardForm::Vmf.evaluate(&[0.0, 0.0], &[1.0, 0.0]), 0.0);
    }

    #[test]
    fn grid_has_24_cells_and_round_trips_labels() {
        let grid = RewardVariant::grid();
        assert_eq!(grid.len(), 24);
        for v in &grid {
            assert_eq!(RewardVariant::parse(&v.to_string()).unwrap(), *v);
        }
        assert!(RewardVariant::parse("inner-product/phi(q)/sn-on").is_err());
    }

    #[test]
    fn variant_serde_spelling() {
        let json = serde_json::to_string(&RewardVariant::LSD).unwrap();
        assert!(json.contains("\"inner-product\"") && json.contains("\"phi(s')-phi(s)\""), "{json}");
    }

    #[test]
    fn ablation_aliases_match_named_rewards() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let lsd_phi = random_phi(1, 2, true);
        let plain_phi = random_phi(2, 2, false);
        for _ in 0..1000 {
            let s: Vec<f64> = (0..2).map(|_| rng.random_range(-20.0..20.0)).collect();
            let sn: Vec<f64> = (0..2).map(|_| rng.random_range(-20.0..20.0)).collect();
            let z: Vec<f64> = (0..2).map(|_| rng.random_range(-2.0..2.0)).collect();
            assert_eq!(
                ablation_reward(&RewardVariant::LSD, &lsd_phi, &s, &sn, &z).unwrap(),
                lsd_reward(&lsd_phi, &s, &sn, &z).unwrap()
            );
            assert_eq!(
                ablation_reward(&RewardVariant::DIAYN, &plain_phi, &s, &sn, &z).unwrap(),
                diayn_reward(&plain_phi, &sn, &z).unwrap()
            );
            assert_eq!(
                ablation_reward(&RewardVariant::VISR, &plain_phi, &s, &sn, &z).unwrap(),
                visr_reward(&plain_phi, &s, &z).unwrap()
            );
        }
    }

    #[test]
    fn batch_labels_match_single_rewards() {
        let phi = random_phi(3, 2, true);
        let batch = TransitionBatch {
            states: array![[0.0, 1.0], [3.0, -2.0], [5.0, 5.0]],
            next_states: array![[1.0, 1.0], [2.5, -1.0], [5.0, 4.0]],
            skills: array![[1.0, 0.5], [-0.3, 2.0], [0.0, -1.0]],
        };
        for v in RewardVariant::grid() {
            let labels = label_rewards(&v, &phi, &batch).unwrap();
            for i in 0..3 {
                let single = ablation_reward(
                    &v,
                    &phi,
                    batch.states.row(i).as_slice().unwrap(),
                    batch.next_states.row(i).as_slice().unwrap(),
                    batch.skills.row(i).as_slice().unwrap(),
                )
                .unwrap();
                assert!((labels[i] - single).abs() < 1e-12, "{v}");
            }
        }
    }

    #[test]
    fn loss_of_identical_rows_is_negated_reward() {
        let phi = random_phi(4, 2, true);
        let batch = TransitionBatch {
            states: array![[1.0, 2.0], [1.0, 2.0]],
            next_states: array![[1.5, 1.0], [1.5, 1.0]],
            skills: array![[0.7, -0.2], [0.7, -0.2]],
        };
        let r = lsd_reward(&phi, &[1.0, 2.0], &[1.5, 1.0], &[0.7, -0.2]).unwrap();
        let l = representation_loss(&RewardVariant::LSD, &phi, &batch).unwrap();
        assert!((l.loss + r).abs() < 1e-14);

        let flipped = TransitionBatch {
            skills: -&batch.skills,
            ..batch.clone()
        };
        let lf = representation_loss(&RewardVariant::LSD, &phi, &flipped).unwrap();
        assert!((lf.loss + l.loss).abs() < 1e-14);
    }

    #[test]
    fn empty_batch_is_rejected() {
        let phi = identity_phi();
        let batch = TransitionBatch {
            states: Array2::zeros((0, 2)),
            next_states: Array2::zeros((0, 2)),
            skills: Array2::zeros((0, 2)),
        };
        assert!(matches!(
            representation_loss(&RewardVariant::LSD, &phi, &batch),
            Err(Error::Contract(_))
        ));
    }
}
