//! Tiny two-stream transformer denoiser with reference conditioning by
//! sequence concatenation, its training objective and an Adam loop.

mod checkpoint;
mod data;
mod gradcheck;
mod model;
mod schedule;
pub mod tape;
mod train;

use thiserror::Error;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointInfo};
pub use data::{
    depth_condition, image_to_latent, make_sample, make_samples, render_object_sets, Dropout,
    ObjectSet,
};
pub use gradcheck::{gradient_check, relative_error, GradCheckReport};
pub use model::{
    denoiser_forward, embed_caption, forward_detailed, forward_set, loss_and_gradients, stack_bias,
    training_loss, Conditioning, DenoiserParams, ForwardOutput, ModelConfig, ReferenceMode,
    SetOutput, TrainSample,
};
pub use schedule::{noise_sample, regression_target, NoiseSchedule, ScheduleMode};
pub use train::{batch_gradients, mean_loss, train_step, Adam, TrainState};

use crate::container::ContainerError;
use crate::geometry::GeometryError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum DenoiserError {
    #[error("time {t} outside [0, {max}]")]
    TimeRange { t: f64, max: f64 },
    #[error(transparent)]
    Shape(#[from] TensorError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("training diverged at step {step} (loss {loss})")]
    Divergence {
        step: u64,
        loss: f64,
        snapshot: Box<TrainState>,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}
