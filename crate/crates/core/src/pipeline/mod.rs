//! Two-phase training, evaluation and experiment configuration.

pub mod config;
pub mod eval;
pub mod stages;
pub mod train;

use std::path::PathBuf;

use thiserror::Error;

use crate::model::ModelError;
use crate::sim::SimError;
use crate::tasks::TaskError;
use crate::tensor::TensorError;

pub use config::{PretrainMode, TrainConfig};
pub use eval::{evaluate, run_episode, Agent, EpisodeLog, EvalConfig, EvalReport, TaskResult};
pub use train::{curve_tsv, finetune_samples, pretrain_samples, run_finetune, run_pretrain, CurvePoint, TrainOutcome};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("missing data: {0}")]
    MissingData(String),
    #[error("manifest mismatch: {0}")]
    ManifestMismatch(String),
    #[error("non-finite {what} in {phase} at step {step}; state dumped to {dump:?}")]
    NonFinite {
        phase: String,
        step: u64,
        what: String,
        dump: Option<PathBuf>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;
