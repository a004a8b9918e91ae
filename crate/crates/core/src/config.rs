//! Declarative experiment description, JSON presets, and dotted-key
//! overrides.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::env::GoalTaskConfig;
use crate::error::{Error, Result};
use crate::reward::{RepresentationArg, RewardForm, RewardVariant};
use crate::sac::{ActMode, SacConfig};
use crate::skill::{SkillKind, SkillPrior};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub env: EnvConfig,
    pub skill: SkillConfig,
    pub reward: RewardConfig,
    pub network: NetworkConfig,
    pub phi_lr: f64,
    pub sac: SacConfig,
    pub schedule: ScheduleConfig,
    pub eval: EvalConfig,
    /// Save a checkpoint every this many epochs; 0 saves only the final one.
    pub checkpoint_every: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    /// Half-width of the uniform initial-state box during discovery.
    pub init_halfwidth: f64,
    pub episode_length: usize,
    pub normalize_states: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SkillConfig {
    pub kind: SkillKind,
    /// Latent dimension for continuous skills.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    /// Number of skills for discrete skills.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub count: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardConfig {
    pub form: RewardForm,
    pub arg: RepresentationArg,
    pub sn: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub hidden_width: usize,
    pub hidden_layers: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SacData {
    /// Train on the epoch's freshly collected transitions only.
    OnPolicy,
    /// Train on minibatches drawn from a FIFO replay buffer.
    Replay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub epochs: u64,
    pub episodes_per_epoch: usize,
    pub phi_minibatches: usize,
    pub sac_minibatches: usize,
    pub minibatch_size: usize,
    pub sac_data: SacData,
    pub replay_capacity: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Run the coverage/distance evaluation every this many epochs (0 = never).
    pub every_epochs: u64,
    pub episodes: usize,
    pub init_halfwidth: f64,
    pub action_mode: ActMode,
    pub coverage_trajectories: usize,
    pub coverage_bin: f64,
    pub reach_radius: f64,
    pub goal_ranges: Vec<f64>,
    pub multi_goal_ranges: Vec<f64>,
    pub episodes_per_task: usize,
    pub goal_episode_budget: usize,
    pub multi_goal_episode_budget: usize,
    pub per_goal_budget: usize,
    pub max_goals: usize,
}

pub const PRESET_NAMES: [&str; 3] = ["pointenv-lsd", "pointenv-diayn", "pointenv-discrete-lsd"];

impl ExperimentConfig {
    /// Reference PointEnv LSD setup: 10-step episodes from `[-10, 10]²`,
    /// 2-D Gaussian skills, 128×2 networks, 5000 epochs of 50 episodes.
    pub fn pointenv_lsd() -> Self {
        Self {
            name: "pointenv-lsd".into(),
            seed: 0,
            env: EnvConfig {
                init_halfwidth: 10.0,
                episode_length: 10,
                normalize_states: false,
            },
            skill: SkillConfig {
                kind: SkillKind::Continuous,
                dim: Some(2),
                count: None,
            },
            reward: RewardConfig {
                form: RewardForm::InnerProduct,
                arg: RepresentationArg::Difference,
                sn: true,
            },
            network: NetworkConfig {
                hidden_width: 128,
                hidden_layers: 2,
            },
            phi_lr: 3e-4,
            sac: SacConfig::default(),
            schedule: ScheduleConfig {
                epochs: 5000,
                episodes_per_epoch: 50,
                phi_minibatches: 4,
                sac_minibatches: 4,
                minibatch_size: 500,
                sac_data: SacData::OnPolicy,
                replay_capacity: 100_000,
            },
            eval: EvalConfig {
                every_epochs: 100,
                episodes: 50,
                init_halfwidth: 0.0,
                action_mode: ActMode::Deterministic,
                coverage_trajectories: 200,
                coverage_bin: 1.0,
                reach_radius: 0.5,
                goal_ranges: vec![10.0, 20.0, 40.0, 80.0],
                multi_goal_ranges: vec![10.0, 20.0, 40.0],
                episodes_per_task: 100,
                goal_episode_budget: 100,
                multi_goal_episode_budget: 400,
                per_goal_budget: 100,
                max_goals: 4,
            },
            checkpoint_every: 1000,
        }
    }

    pub fn pointenv_diayn() -> Self {
        let mut c = Self::pointenv_lsd();
        c.name = "pointenv-diayn".into();
        c.reward = RewardConfig {
            form: RewardForm::SquaredDistance,
            arg: RepresentationArg::Next,
            sn: false,
        };
        c
    }

    pub fn pointenv_discrete_lsd() -> Self {
        let mut c = Self::pointenv_lsd();
        c.name = "pointenv-discrete-lsd".into();
        c.skill = SkillConfig {
            kind: SkillKind::Discrete,
            dim: None,
            count: Some(8),
        };
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "pointenv-lsd" => Ok(Self::pointenv_lsd()),
            "pointenv-diayn" => Ok(Self::pointenv_diayn()),
            "pointenv-discrete-lsd" => Ok(Self::pointenv_discrete_lsd()),
            other => Err(Error::config(
                "preset",
                format!("unknown preset `{other}` (known: {})", PRESET_NAMES.join(", ")),
            )),
        }
    }

    pub fn reward_variant(&self) -> RewardVariant {
        RewardVariant {
            form: self.reward.form,
            arg: self.reward.arg,
            sn: self.reward.sn,
            skill_kind: self.skill.kind,
        }
    }

    pub fn with_variant(mut self, variant: RewardVariant) -> Self {
        self.reward = RewardConfig {
            form: variant.form,
            arg: variant.arg,
            sn: variant.sn,
        };
        self
    }

    pub fn skill_prior(&self) -> SkillPrior {
        match self.skill.kind {
            SkillKind::Continuous => SkillPrior::StandardNormal {
                dim: self.skill.dim.unwrap_or(0),
            },
            SkillKind::Discrete => SkillPrior::UniformDiscrete {
                count: self.skill.count.unwrap_or(0),
            },
        }
    }

    pub fn hidden_sizes(&self) -> Vec<usize> {
        vec![self.network.hidden_width; self.network.hidden_layers]
    }

    pub fn goal_task(&self, range: f64) -> GoalTaskConfig {
        GoalTaskConfig {
            reach_radius: self.eval.reach_radius,
            episode_budget: self.eval.goal_episode_budget,
            init_halfwidth: 0.0,
            ..GoalTaskConfig::point_goal(range)
        }
    }

    pub fn multi_goal_task(&self, range: f64) -> GoalTaskConfig {
        GoalTaskConfig {
            reach_radius: self.eval.reach_radius,
            episode_budget: self.eval.multi_goal_episode_budget,
            per_goal_budget: self.eval.per_goal_budget,
            max_goals: self.eval.max_goals,
            init_halfwidth: 0.0,
            ..GoalTaskConfig::point_multi_goals(range)
        }
    }

    /// Checks counts, ranges, and skill/reward consistency.
    pub fn validate(&self) -> Result<()> {
        match self.skill.kind {
            SkillKind::Continuous => {
                if self.skill.count.is_some() {
                    return Err(Error::config(
                        "skill.count",
                        "continuous skills take `skill.dim`, not `skill.count`",
                    ));
                }
                match self.skill.dim {
                    Some(d) if d >= 1 => {}
                    _ => return Err(Error::config("skill.dim", "continuous skills need `dim` ≥ 1")),
                }
            }
            SkillKind::Discrete => {
                if self.skill.dim.is_some() {
                    return Err(Error::config(
                        "skill.dim",
                        "discrete skills take `skill.count`, not `skill.dim`",
                    ));
                }
                match self.skill.count {
                    Some(n) if n >= 2 => {}
                    _ => return Err(Error::config("skill.count", "discrete skills need `count` ≥ 2")),
                }
                if !self.reward_variant().is_lsd() {
                    return Err(Error::config(
                        "reward",
                        "discrete skills are only supported with the LSD reward",
                    ));
                }
            }
        }
        let positive = [
            ("env.episode_length", self.env.episode_length as u64),
            ("network.hidden_width", self.network.hidden_width as u64),
            ("schedule.epochs", self.schedule.epochs),
            ("schedule.episodes_per_epoch", self.schedule.episodes_per_epoch as u64),
            ("schedule.minibatch_size", self.schedule.minibatch_size as u64),
            ("schedule.replay_capacity", self.schedule.replay_capacity as u64),
            ("eval.episodes", self.eval.episodes as u64),
            ("eval.episodes_per_task", self.eval.episodes_per_task as u64),
            ("eval.goal_episode_budget", self.eval.goal_episode_budget as u64),
            ("eval.multi_goal_episode_budget", self.eval.multi_goal_episode_budget as u64),
            ("eval.per_goal_budget", self.eval.per_goal_budget as u64),
            ("eval.max_goals", self.eval.max_goals as u64),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        let epoch_size = self.env.episode_length * self.schedule.episodes_per_epoch;
        if self.schedule.sac_data == SacData::OnPolicy && self.schedule.minibatch_size > epoch_size {
            return Err(Error::config(
                "schedule.minibatch_size",
                format!("exceeds the {epoch_size} transitions collected per epoch"),
            ));
        }
        let nonneg = [
            ("env.init_halfwidth", self.env.init_halfwidth),
            ("phi_lr", self.phi_lr),
            ("sac.policy_lr", self.sac.policy_lr),
            ("sac.critic_lr", self.sac.critic_lr),
            ("sac.entropy_lr", self.sac.entropy_lr),
            ("eval.init_halfwidth", self.eval.init_halfwidth),
            ("eval.reach_radius", self.eval.reach_radius),
        ];
        for (key, v) in nonneg {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(key, "must be finite and non-negative"));
            }
        }
        if !(0.0..=1.0).contains(&self.sac.gamma) {
            return Err(Error::config("sac.gamma", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.sac.tau) {
            return Err(Error::config("sac.tau", "must lie in [0, 1]"));
        }
        if !(self.sac.initial_entropy_coeff > 0.0) {
            return Err(Error::config("sac.initial_entropy_coeff", "must be positive"));
        }
        if !(self.eval.coverage_bin > 0.0) {
            return Err(Error::config("eval.coverage_bin", "must be positive"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding, hex encoded.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Applies `key=value` overrides. Values parse as JSON when they can
    /// and fall back to plain strings.
    pub fn with_overrides<S: AsRef<str>>(self, overrides: &[S]) -> Result<Self> {
        let mut value = serde_json::to_value(&self).expect("config serializes");
        let mut touched = Vec::new();
        for raw in overrides {
            let raw = raw.as_ref();
            let (key, val) = raw
                .split_once('=')
                .ok_or_else(|| Error::config(raw, "override must look like key=value"))?;
            let key = key.trim();
            let parsed: Value =
                serde_json::from_str(val).unwrap_or_else(|_| Value::String(val.to_string()));
            set_dotted(&mut value, key, parsed)?;
            touched.push(key.to_string());
        }
        from_value(value, &touched)
    }
}

fn set_dotted(root: &mut Value, key: &str, new: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::config(key, "is not a config section"))?;
        if i + 1 == parts.len() {
            // optional skill fields are omitted when unset
            let optional = matches!(key, "skill.dim" | "skill.count" | "sac.target_entropy");
            if !obj.contains_key(*part) && !optional {
                return Err(Error::config(key, "unknown config key"));
            }
            obj.insert(part.to_string(), new);
            return Ok(());
        }
        cur = obj
            .get_mut(*part)
            .ok_or_else(|| Error::config(key, "unknown config key"))?;
    }
    Ok(())
}

fn from_value(value: Value, touched: &[String]) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = serde_json::from_value(value).map_err(|e| {
        let msg = e.to_string();
        let key = touched
            .iter()
            .rev()
            .find(|k| msg.contains(k.rsplit('.').next().unwrap_or(k)))
            .cloned()
            .or_else(|| touched.last().cloned())
            .unwrap_or_else(|| "<config>".into());
        Error::config(key, msg)
    })?;
    cfg.validate()?;
    Ok(cfg)
}

/// Loads a config file, or a preset when `path` names one, then applies
/// overrides and validates.
pub fn parse_config<S: AsRef<str>>(path: &str, overrides: &[S]) -> Result<ExperimentConfig> {
    let base = if PRESET_NAMES.contains(&path) {
        ExperimentConfig::preset(path)?
    } else {
        let text = std::fs::read_to_string(Path::new(path)).map_err(|e| Error::io(path, e))?;
        let value: Value = serde_json::from_str(&text)
            .map_err(|e| Error::config("<file>", format!("{path}: {e}")))?;
        if let Value::Object(map) = &value {
            let known: Vec<String> = serde_json::to_value(ExperimentConfig::pointenv_lsd())
                .ok()
                .and_then(|v| v.as_object().map(|m| m.keys().cloned().collect()))
                .unwrap_or_default();
            if let Some(k) = map.keys().find(|k| !known.contains(k)) {
                return Err(Error::config(k.as_str(), "unknown config key"));
            }
        }
        serde_json::from_value::<ExperimentConfig>(value)
            .map_err(|e| Error::config(error_key(&e.to_string()), e.to_string()))?
    };
    base.validate()?;
    base.with_overrides(overrides)
}

fn error_key(msg: &str) -> String {
    // serde names the offending field in backticks
    msg.split('`').nth(1).unwrap_or("<config>").to_string()
}

/// Dotted keys whose values differ between two configs.
pub fn differing_fields(a: &ExperimentConfig, b: &ExperimentConfig) -> Vec<String> {
    let (fa, fb) = (
        flatten(&serde_json::to_value(a).expect("config serializes")),
        flatten(&serde_json::to_value(b).expect("config serializes")),
    );
    let mut keys: Vec<&String> = fa.keys().chain(fb.keys()).collect();
    keys.sort();
    keys.dedup();
    keys.into_iter()
        .filter(|k| fa.get(*k) != fb.get(*k))
        .cloned()
        .collect()
}

fn flatten(v: &Value) -> BTreeMap<String, Value> {
    fn walk(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
        match v {
            Value::Object(map) => {
                for (k, child) in map {
                    let key = if prefix.is_empty() {
                        k.clone()
                    } else {
                        format!("{prefix}.{k}")
                    };
                    walk(&key, child, out);
                }
            }
            other => {
                out.insert(prefix.to_string(), other.clone());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk("", v, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_has_reference_values() {
        let c = parse_config::<&str>("pointenv-lsd", &[]).unwrap();
        assert_eq!(c.env.episode_length, 10);
        assert_eq!(c.skill.dim, Some(2));
        assert_eq!(c.hidden_sizes(), vec![128, 128]);
        assert_eq!(c.schedule.epochs, 5000);
        assert_eq!(c.schedule.episodes_per_epoch, 50);
        assert_eq!(c.env.init_halfwidth, 10.0);
        assert!(c.reward_variant().is_lsd());
    }

    #[test]
    fn override_changes_only_that_key() {
        let base = ExperimentConfig::pointenv_lsd();
        let c = base.clone().with_overrides(&["schedule.epochs=10"]).unwrap();
        assert_eq!(c.schedule.epochs, 10);
        assert_eq!(differing_fields(&base, &c), vec!["schedule.epochs".to_string()]);
    }

    #[test]
    fn discrete_with_dim_is_rejected() {
        let err = ExperimentConfig::pointenv_lsd()
            .with_overrides(&["skill.kind=discrete"])
            .unwrap_err();
        match err {
            Error::Config { key, .. } => assert_eq!(key, "skill.dim"),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn unknown_key_and_bad_type_name_the_key() {
        let err = ExperimentConfig::pointenv_lsd()
            .with_overrides(&["schedule.epoch=10"])
            .unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "schedule.epoch"), "{err}");
        let err = ExperimentConfig::pointenv_lsd()
            .with_overrides(&["schedule.epochs=lots"])
            .unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "schedule.epochs"), "{err}");
    }

    #[test]
    fn string_overrides_reach_enums() {
        let c = ExperimentConfig::pointenv_lsd()
            .with_overrides(&["reward.form=squared-distance", "reward.arg=phi(s')", "reward.sn=false"])
            .unwrap();
        assert_eq!(c.reward_variant(), RewardVariant::DIAYN);
    }

    #[test]
    fn digest_tracks_content() {
        let a = ExperimentConfig::pointenv_lsd();
        let mut b = a.clone();
        assert_eq!(a.digest(), b.digest());
        b.seed = 1;
        assert_ne!(a.digest(), b.digest());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        let c = ExperimentConfig::pointenv_discrete_lsd();
        std::fs::write(&p, c.to_json_pretty()).unwrap();
        let back = parse_config::<&str>(p.to_str().unwrap(), &[]).unwrap();
        assert_eq!(back, c);
    }
}
