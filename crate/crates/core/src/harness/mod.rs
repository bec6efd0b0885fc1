//! Desk-scale training harness: synthetic modalities, a shared trunk with
//! grid-MoE blocks and per-task heads, ratio-controlled batches, and the loop
//! that feeds per-task losses to the governor and applies its learning-rate
//! multipliers per parameter group.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod model;
pub mod sampler;
pub mod sweep;
pub mod train;

pub use config::RunConfig;
pub use data::{Modality, ModalitySpec, Sample, Target, TaskKind, TaskSpec};
pub use model::{forward_model, ModelForward, ModelParams, ModelSpec};
pub use sampler::{sample_batch, BatchStream, SamplerConfig};
pub use sweep::{ablation_sweep, parse_grid, SweepAxis, SweepRow};
pub use train::{train, train_from, EvalSummary, TrainOutcome};

use crate::dso::DsoError;
use crate::moe::MoeError;
use crate::tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid configuration: {field}: {message}")]
    Field { field: String, message: String },
    #[error("task {0} has no samples in the batch")]
    EmptyTask(usize),
    #[error("non-finite loss {value} for task {task} at iteration {iteration}")]
    NonFiniteLoss {
        iteration: u64,
        task: usize,
        value: f64,
        /// Loss and governor logs of the last iterations before the abort.
        dump: String,
    },
    #[error("checkpoint does not match the model: {0}")]
    ShapeMismatch(String),
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Moe(#[from] MoeError),
    #[error(transparent)]
    Dso(#[from] DsoError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl HarnessError {
    pub fn field(field: impl Into<String>, message: impl ToString) -> Self {
        Self::Field {
            field: field.into(),
            message: message.to_string(),
        }
    }

    /// True for errors caused by the configuration rather than the run.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Self::Config(_)
                | Self::Field { .. }
                | Self::ShapeMismatch(_)
                | Self::Moe(MoeError::Config(_))
                | Self::Dso(DsoError::Config(_))
        )
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;
