//! Skill latents: standard-normal continuous skills and zero-centred one-hot
//! discrete skills.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SkillKind {
    Continuous,
    Discrete,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillLatent {
    pub vector: Vec<f64>,
    pub kind: SkillKind,
    /// 1-based index for discrete skills.
    pub discrete_index: Option<usize>,
}

impl SkillLatent {
    pub fn continuous(vector: Vec<f64>) -> Self {
        Self {
            vector,
            kind: SkillKind::Continuous,
            discrete_index: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn norm(&self) -> f64 {
        self.vector.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

pub fn sample_continuous_skill<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Result<SkillLatent> {
    if d == 0 {
        return Err(Error::Contract("skill dimension must be at least 1".into()));
    }
    Ok(SkillLatent::continuous(
        (0..d).map(|_| StandardNormal.sample(rng)).collect(),
    ))
}

/// The `k`-th (1-based) of `n` encodings: 1 at position `k`, `-1/(n-1)`
/// elsewhere.
pub fn discrete_skill_encoding(n: usize, k: usize) -> Result<SkillLatent> {
    if n < 2 {
        return Err(Error::Contract(format!("need at least 2 discrete skills, got {n}")));
    }
    if k == 0 || k > n {
        return Err(Error::Contract(format!("skill index {k} outside 1..={n}")));
    }
    let off = -1.0 / (n as f64 - 1.0);
    let vector = (1..=n).map(|i| if i == k { 1.0 } else { off }).collect();
    Ok(SkillLatent {
        vector,
        kind: SkillKind::Discrete,
        discrete_index: Some(k),
    })
}

pub fn sample_discrete_skill<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<SkillLatent> {
    if n < 2 {
        return Err(Error::Contract(format!("need at least 2 discrete skills, got {n}")));
    }
    discrete_skill_encoding(n, rng.random_range(1..=n))
}

/// `E‖z‖` for `z ~ N(0, I_d)`: `√2 Γ((d+1)/2) / Γ(d/2)`.
pub fn expected_skill_norm(d: usize) -> Result<f64> {
    if d == 0 {
        return Err(Error::Contract("skill dimension must be at least 1".into()));
    }
    let d = d as f64;
    Ok(2f64.sqrt() * (ln_gamma((d + 1.0) / 2.0) - ln_gamma(d / 2.0)).exp())
}

/// Skill prior used during discovery.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SkillPrior {
    StandardNormal { dim: usize },
    UniformDiscrete { count: usize },
}

impl SkillPrior {
    pub fn dim(&self) -> usize {
        match *self {
            SkillPrior::StandardNormal { dim } => dim,
            SkillPrior::UniformDiscrete { count } => count,
        }
    }

    pub fn kind(&self) -> SkillKind {
        match self {
            SkillPrior::StandardNormal { .. } => SkillKind::Continuous,
            SkillPrior::UniformDiscrete { .. } => SkillKind::Discrete,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<SkillLatent> {
        match *self {
            SkillPrior::StandardNormal { dim } => sample_continuous_skill(dim, rng),
            SkillPrior::UniformDiscrete { count } => sample_discrete_skill(count, rng),
        }
    }
}
