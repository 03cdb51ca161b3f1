//! Experiment harness: configuration, episode store, demonstration
//! collection, training, evaluation rollouts and the ablation grid.

mod ablate;
mod collect;
mod config;
mod dataset;
mod eval;
mod probe;
mod store;
mod train;

pub use ablate::{ablate, default_variants, CellOutcome, CellResult, GridReport, Variant, VariantSummary, REFERENCE_VALUES};
pub use collect::{collect, demo_seed, eval_seed, recompensate, record_episode};
pub use config::{AblationFlags, AblateConfig, ConfigError, ExperimentConfig, TrainConfig, FT_RATES, MIN_EVAL_EPISODES};
pub use dataset::{action_between, build_dataset, Dataset, EpisodeStreams, ObsBuilder, Sample, ACTION_DIMS, FT_SCALE};
pub use eval::{eval_expert, eval_policy, rollout_threads, EpisodeResult, EvalReport, THREADS_ENV};
pub use probe::{auc, spike_probe, ProbeReport};
pub use store::{EpisodeMeta, EpisodeStore, StoreManifest, StreamData, StreamDesc, StreamDtype, StreamValues, SCHEMA_VERSION};
pub use train::{train, train_on, TrainReport, TrainedPolicy};

use std::path::{Path, PathBuf};

use crate::sim::SimError;
use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: malformed store: {msg}")]
    Store { path: PathBuf, msg: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("training diverged at epoch {epoch}, step {step}: {diagnostics}")]
    NonFiniteLoss { epoch: usize, step: usize, diagnostics: String },
    #[error("{0}")]
    Runtime(String),
}

impl HarnessError {
    pub fn is_config(&self) -> bool {
        matches!(self, HarnessError::Config(_))
    }
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io { path: path.to_path_buf(), source }
}

/// Fixed 6-decimal formatting used by every CSV the harness writes.
pub fn fmt6(v: f64) -> String {
    format!("{v:.6}")
}
