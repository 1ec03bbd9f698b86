//! Learned off-grid refiner: a residual CNN that maps a physics prior
//! (normally `Aᴴy`) to a sparse nonnegative image, trained with a
//! hard-example-mining loss.

mod dataset;
mod loss;
mod model;
pub mod nn;
mod train;

pub use dataset::{
    compute_prior, generate_sample, make_dataset, normalization_scale, normalize, split_complex, Dataset,
    DatasetSpec, PriorKind, Setup, TrainSample,
};
pub use loss::{ohem_loss, ohem_loss_and_grad, total_loss, total_loss_and_grad};
pub use model::{ModelInput, RefinerConfig, RefinerModel, Tape, DEFAULT_BLOCK_WIDTHS};
pub use train::{
    evaluate, infer, init_model, predict, split_indices, train, EpochRecord, Evaluation, TrainConfig, TrainOutcome,
};

use thiserror::Error;

use crate::channel::ChannelError;
use crate::imaging::ImagingError;
use crate::scene::SceneError;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LearningError {
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error("{what}: expected length {expected}, got {got}")]
    ShapeMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid hyper-parameter: {0}")]
    InvalidHyperParameter(&'static str),
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(&'static str),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("training diverged at epoch {epoch}, step {step} (batch loss {loss})")]
    Diverged { epoch: usize, step: usize, loss: f64 },
}
