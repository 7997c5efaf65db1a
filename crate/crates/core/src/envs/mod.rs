//! Pixel gridworlds with known tabular ground truth, replay, the training
//! loop and its evaluations.

pub mod config;
pub mod eval;
pub mod grid;
pub mod replay;
pub mod stats;
pub mod train;

pub use config::RunConfig;
pub use eval::{
    compare_alignment, evaluate_distractor_invariance, evaluate_metric_alignment, exact_metric,
    median_pairwise_distance, AlignmentComparison, AlignmentReport, InvarianceReport,
};
pub use grid::{Distractor, EnvSpec, PixelGridEnv};
pub use replay::{collect, ReplayBuffer, Transition};
pub use train::{
    checkpoint_params, initial_models, latent_erank, models_from_checkpoint, read_metrics, train,
    MetricsRow, TrainOutcome,
};

use thiserror::Error;

use crate::autodiff::TensorError;
use crate::mdp::MdpError;
use crate::metric::MetricError;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("non-finite loss or gradient at step {step}")]
    NonFinite { step: usize, diagnostic: String },
}
