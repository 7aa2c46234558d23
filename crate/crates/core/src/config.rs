//! Run configuration.
//!
//! A TOML file with one table per concern:
//!
//! ```toml
//! [env]
//! kind = "gridworld"
//! size = 6
//!
//! [agent]
//! kind = "rem"
//! architecture = "mlp"
//! heads = 4
//!
//! [optimizer]
//! lr = 0.001
//!
//! [train]
//! iterations = 100
//!
//! [eval]
//! episodes = 30
//! ```
//!
//! Every key is optional; omitted keys take the defaults below. Unknown keys
//! are rejected.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{EnvKind, EnvParams, ObsEncoding, DEFAULT_EPISODE_CAP};
use crate::qfunc::{Activation, Architecture, Topology, MAX_HEADS};

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Read(String),
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("bad override `{key}`: {reason}")]
    Override { key: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AgentKind {
    Dqn,
    EnsembleDqn,
    AveragedEnsembleDqn,
    Rem,
    QrDqn,
}

impl AgentKind {
    pub const ALL: [AgentKind; 5] =
        [AgentKind::Dqn, AgentKind::EnsembleDqn, AgentKind::AveragedEnsembleDqn, AgentKind::Rem, AgentKind::QrDqn];

    pub fn as_str(self) -> &'static str {
        match self {
            AgentKind::Dqn => "dqn",
            AgentKind::EnsembleDqn => "ensemble-dqn",
            AgentKind::AveragedEnsembleDqn => "averaged-ensemble-dqn",
            AgentKind::Rem => "rem",
            AgentKind::QrDqn => "qr-dqn",
        }
    }
}

impl fmt::Display for AgentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AgentKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AgentKind::ALL.into_iter().find(|k| k.as_str() == s).ok_or_else(|| format!("unknown agent `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvSection {
    pub kind: EnvKind,
    pub size: usize,
    /// Seed of the environment construction (pit layout, random tables).
    pub seed: u64,
    pub discount: Option<f64>,
    pub slip: Option<f64>,
    pub reward_noise: f64,
    pub noise_clip: Option<f64>,
    pub actions: Option<usize>,
    pub sticky_prob: f64,
    pub episode_cap: usize,
    pub encoding: ObsEncoding,
}

impl Default for EnvSection {
    fn default() -> Self {
        EnvSection {
            kind: EnvKind::Gridworld,
            size: 6,
            seed: 0,
            discount: None,
            slip: None,
            reward_noise: 0.0,
            noise_clip: None,
            actions: None,
            sticky_prob: 0.25,
            episode_cap: DEFAULT_EPISODE_CAP,
            encoding: ObsEncoding::OneHot,
        }
    }
}

impl EnvSection {
    pub fn params(&self) -> EnvParams {
        EnvParams {
            discount: self.discount,
            slip: self.slip,
            reward_noise: self.reward_noise,
            noise_clip: self.noise_clip,
            actions: self.actions,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentSection {
    pub kind: AgentKind,
    pub architecture: Architecture,
    pub topology: Topology,
    /// Head count; quantile count for qr-dqn; forced to 1 for dqn.
    pub heads: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Tabular entries start uniform in `[-init_scale, init_scale]`.
    pub init_scale: f64,
    /// Huber threshold λ (κ for qr-dqn).
    pub huber: f64,
    /// Draw a REM mixture per transition instead of per mini-batch.
    pub rem_per_sample: bool,
    pub reward_clip: bool,
}

impl Default for AgentSection {
    fn default() -> Self {
        AgentSection {
            kind: AgentKind::Dqn,
            architecture: Architecture::Mlp,
            topology: Topology::MultiHead,
            heads: 4,
            hidden: vec![64, 64],
            activation: Activation::Relu,
            init_scale: 0.0,
            huber: 1.0,
            rem_per_sample: false,
            reward_clip: false,
        }
    }
}

impl AgentSection {
    pub fn effective_heads(&self) -> usize {
        match self.kind {
            AgentKind::Dqn => 1,
            _ => self.heads,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSection {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        OptimizerSection { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 0.01 / 32.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    /// Seed of every training stream (agent, init, sampling, evaluation).
    pub seed: u64,
    /// Discount used by the losses; the environment's when unset.
    pub discount: Option<f64>,
    pub batch_size: usize,
    /// Target sync period C in gradient updates.
    pub target_update_period: u64,
    pub updates_per_iteration: u64,
    pub iterations: u64,
    /// Environment steps per gradient update (online only).
    pub update_period: u64,
    pub min_replay: usize,
    pub replay_capacity: usize,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub epsilon_decay_steps: u64,
    /// Offline gradient budget relative to the collection budget.
    pub offline_multiplier: u64,
    /// Any |parameter| above this counts as divergence.
    pub max_abs_param: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            seed: 0,
            discount: None,
            batch_size: 32,
            target_update_period: 200,
            updates_per_iteration: 1000,
            iterations: 100,
            update_period: 4,
            min_replay: 500,
            replay_capacity: 100_000,
            epsilon_start: 1.0,
            epsilon_end: 0.01,
            epsilon_decay_steps: 4000,
            offline_multiplier: 1,
            max_abs_param: 1e6,
        }
    }
}

impl TrainSection {
    /// Linear decay from `epsilon_start` to `epsilon_end`, then constant.
    pub fn epsilon(&self, step: u64) -> f64 {
        let frac = if self.epsilon_decay_steps == 0 {
            0.0
        } else {
            (1.0 - step as f64 / self.epsilon_decay_steps as f64).max(0.0)
        };
        self.epsilon_end + (self.epsilon_start - self.epsilon_end) * frac
    }

    /// Environment steps in one online iteration.
    pub fn env_steps_per_iteration(&self) -> u64 {
        self.updates_per_iteration * self.update_period
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub epsilon: f64,
    pub episodes: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { epsilon: 0.001, episodes: 30 }
    }
}

/// Complete run configuration.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub env: EnvSection,
    pub agent: AgentSection,
    pub optimizer: OptimizerSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

fn prob(name: &str, p: f64) -> Result<(), ConfigError> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(ConfigError::Invalid(format!("{name} = {p} is not in [0, 1]")))
    }
}

fn positive<T: PartialOrd + Default + fmt::Display>(name: &str, v: T) -> Result<(), ConfigError> {
    if v > T::default() {
        Ok(())
    } else {
        Err(ConfigError::Invalid(format!("{name} must be positive, got {v}")))
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let (e, a, o, t, v) = (&self.env, &self.agent, &self.optimizer, &self.train, &self.eval);
        let (lo, hi) = e.kind.size_bounds();
        if e.size < lo || e.size > hi {
            return Err(ConfigError::Invalid(format!("env.size {} outside {lo}..={hi} for {}", e.size, e.kind)));
        }
        prob("env.sticky_prob", e.sticky_prob)?;
        if let Some(s) = e.slip {
            prob("env.slip", s)?;
        }
        for (name, d) in [("env.discount", e.discount), ("train.discount", t.discount)] {
            if let Some(d) = d {
                if !(0.0..1.0).contains(&d) {
                    return Err(ConfigError::Invalid(format!("{name} = {d} is not in [0, 1)")));
                }
            }
        }
        if !(e.reward_noise >= 0.0 && e.reward_noise.is_finite()) {
            return Err(ConfigError::Invalid("env.reward_noise must be finite and >= 0".into()));
        }
        positive("env.episode_cap", e.episode_cap)?;
        if a.heads == 0 || a.heads > MAX_HEADS {
            return Err(ConfigError::Invalid(format!("agent.heads must be in 1..={MAX_HEADS}")));
        }
        if a.architecture == Architecture::Mlp && a.hidden.is_empty() {
            return Err(ConfigError::Invalid("agent.hidden must be non-empty for mlp".into()));
        }
        if a.hidden.contains(&0) {
            return Err(ConfigError::Invalid("agent.hidden widths must be positive".into()));
        }
        if !(a.init_scale >= 0.0 && a.init_scale.is_finite()) {
            return Err(ConfigError::Invalid("agent.init_scale must be finite and >= 0".into()));
        }
        if !(a.huber > 0.0 && a.huber.is_finite()) {
            return Err(ConfigError::Invalid("agent.huber must be positive".into()));
        }
        if !(o.lr > 0.0 && o.lr.is_finite()) || !(o.eps > 0.0) {
            return Err(ConfigError::Invalid("optimizer.lr and optimizer.eps must be positive".into()));
        }
        for (name, b) in [("optimizer.beta1", o.beta1), ("optimizer.beta2", o.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(ConfigError::Invalid(format!("{name} = {b} is not in [0, 1)")));
            }
        }
        positive("train.batch_size", t.batch_size)?;
        positive("train.target_update_period", t.target_update_period)?;
        positive("train.updates_per_iteration", t.updates_per_iteration)?;
        positive("train.iterations", t.iterations)?;
        positive("train.update_period", t.update_period)?;
        positive("train.replay_capacity", t.replay_capacity)?;
        positive("train.offline_multiplier", t.offline_multiplier)?;
        positive("train.max_abs_param", t.max_abs_param)?;
        prob("train.epsilon_start", t.epsilon_start)?;
        prob("train.epsilon_end", t.epsilon_end)?;
        prob("eval.epsilon", v.epsilon)?;
        positive("eval.episodes", v.episodes)?;
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path.as_ref())
            .map_err(|e| ConfigError::Read(format!("{}: {e}", path.as_ref().display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        fs::write(path, self.to_toml_string())
    }

    /// Applies `section.key=value` overrides; the value is parsed as a TOML
    /// value, falling back to a plain string.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<(), ConfigError> {
        let mut doc: toml::Table =
            toml::from_str(&self.to_toml_string()).map_err(|e| ConfigError::Parse(e.to_string()))?;
        for raw in overrides {
            let raw = raw.as_ref();
            let fail = |reason: &str| ConfigError::Override { key: raw.to_string(), reason: reason.to_string() };
            let (key, value) = raw.split_once('=').ok_or_else(|| fail("expected section.key=value"))?;
            let (section, field) = key.trim().split_once('.').ok_or_else(|| fail("expected section.key"))?;
            let value = value.trim();
            let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(value.to_string()));
            let table = doc
                .entry(section.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                .as_table_mut()
                .ok_or_else(|| fail("not a section"))?;
            table.insert(field.to_string(), parsed);
        }
        let text = toml::to_string(&doc).map_err(|e| ConfigError::Parse(e.to_string()))?;
        *self = Self::from_toml_str(&text)?;
        Ok(())
    }
}
