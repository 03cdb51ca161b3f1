use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffusion::PolicyConfig;
use crate::sim::{TaskId, TaskSpec};
use crate::tensor::AdamWConfig;

use super::ablate::{default_variants, Variant};

/// Sampling rates accepted for the F/T stream.
pub const FT_RATES: [u32; 4] = [30, 60, 120, 200];
pub const MIN_EVAL_EPISODES: usize = 20;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {msg}")]
    Read { path: String, msg: String },
    #[error("invalid config: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationFlags {
    pub no_freq_embed: bool,
    pub no_modality_embed: bool,
    pub no_cross_attention: bool,
    /// Visual tokens only; the F/T stream is never read.
    pub rgb_only: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    /// Cosine decay of the learning rate to zero over the run.
    pub cosine_lr: bool,
    /// Per-step decay of the weight average used at inference; 0 disables it.
    pub ema_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 50, batch_size: 64, optimizer: AdamWConfig { lr: 1e-3, ..AdamWConfig::default() }, cosine_lr: false, ema_decay: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    pub tasks: Vec<TaskId>,
    pub variants: Vec<Variant>,
    /// Training seeds per cell.
    pub seeds: Vec<u64>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self { tasks: vec![TaskId::PegInsert, TaskId::LatchSpike], variants: default_variants(), seeds: vec![0, 1, 2] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub task: TaskId,
    /// Environment parameters; defaults to the task's standard spec.
    pub env: Option<TaskSpec>,
    pub policy: PolicyConfig,
    pub ft_rate: u32,
    pub ablation: AblationFlags,
    pub demos: usize,
    pub eval_episodes: usize,
    /// Base seed for collection, training and evaluation.
    pub seed: u64,
    /// Actions executed per predicted chunk.
    pub n_exec: usize,
    pub train: TrainConfig,
    pub ablate: AblateConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            task: TaskId::PegInsert,
            env: None,
            policy: PolicyConfig::default(),
            ft_rate: 200,
            ablation: AblationFlags::default(),
            demos: 100,
            eval_episodes: MIN_EVAL_EPISODES,
            seed: 0,
            n_exec: 2,
            train: TrainConfig::default(),
            ablate: AblateConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Read { path: path.display().to_string(), msg: e.to_string() })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if !FT_RATES.contains(&self.ft_rate) {
            return bad(format!("ft_rate must be one of {FT_RATES:?}, got {}", self.ft_rate));
        }
        if self.eval_episodes < MIN_EVAL_EPISODES {
            return bad(format!("eval_episodes must be >= {MIN_EVAL_EPISODES}, got {}", self.eval_episodes));
        }
        if self.demos == 0 {
            return bad("demos must be >= 1".into());
        }
        if self.n_exec == 0 || self.n_exec > self.policy.head.horizon {
            return bad(format!("n_exec must be in 1..={}, got {}", self.policy.head.horizon, self.n_exec));
        }
        if self.train.batch_size == 0 {
            return bad("train.batch_size must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.train.ema_decay) {
            return bad(format!("train.ema_decay must be in [0, 1), got {}", self.train.ema_decay));
        }
        if !(self.train.optimizer.lr > 0.0 && self.train.optimizer.lr.is_finite()) {
            return bad(format!("train.optimizer.lr must be positive, got {}", self.train.optimizer.lr));
        }
        if self.policy.head.action_dim != 3 {
            return bad(format!("policy.head.action_dim must be 3 (x, z, yaw), got {}", self.policy.head.action_dim));
        }
        if let Some(env) = &self.env {
            if env.task != self.task {
                return bad(format!("env.task {:?} does not match task {:?}", env.task, self.task));
            }
            env.validate().map_err(ConfigError::Invalid)?;
        }
        let fmt = &self.policy.fmt;
        fmt.validate().map_err(ConfigError::Invalid)?;
        if fmt.ft_raw_len % fmt.t_img != 0 {
            return bad(format!("policy.fmt.ft_raw_len {} must be a multiple of t_img {}", fmt.ft_raw_len, fmt.t_img));
        }
        if self.ablate.seeds.is_empty() {
            return bad("ablate.seeds must not be empty".into());
        }
        for v in &self.ablate.variants {
            if let Some(r) = v.ft_rate {
                if !FT_RATES.contains(&r) {
                    return bad(format!("variant {}: ft_rate {r} not in {FT_RATES:?}", v.name));
                }
            }
        }
        Ok(())
    }

    pub fn task_spec(&self) -> TaskSpec {
        self.env.clone().unwrap_or_else(|| TaskSpec::for_task(self.task))
    }

    /// Policy configuration with the ablation flags applied.
    pub fn policy_config(&self) -> PolicyConfig {
        let mut p = self.policy.clone();
        let a = &self.ablation;
        p.fmt.freq_embed &= !a.no_freq_embed;
        p.fmt.modality_embed &= !a.no_modality_embed;
        p.fmt.cross_attention &= !a.no_cross_attention;
        p.fmt.use_ft &= !a.rgb_only;
        p
    }

    /// Copy retargeted to `task`, keeping environment overrides only when
    /// they belong to that task.
    pub fn for_task(&self, task: TaskId) -> Self {
        let env = self.env.clone().filter(|e| e.task == task);
        Self { task, env, ..self.clone() }
    }
}
