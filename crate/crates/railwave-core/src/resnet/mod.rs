//! Residual-network classifier over 64x64 scalogram images: block and
//! model assembly, seeded initialization, epoch training with momentum
//! SGD, evaluation, and a checksummed checkpoint format.

mod blocks;
mod checkpoint;
mod model;
mod spec;
mod train;

pub use blocks::{BasicBlock, BottleneckBlock, BlockCache, ConvBn, ResidualBlock};
pub use checkpoint::{load_checkpoint, save_checkpoint, TrainerState};
pub use model::{build_model, ForwardCache, Model, ParamKind};
pub use spec::{BlockKind, ResNetSpec};
pub use train::{
    evaluate, predict, train_epoch, EpochStats, LabeledImages, LrSchedule, SgdBuffers,
    TrainOptions,
};

use crate::nn::NnError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ResNetError {
    #[error("bad network spec: {0}")]
    BadSpec(String),
    #[error("split contains no samples")]
    EmptySplit,
    #[error("loss diverged to a non-finite value at batch {batch}")]
    DivergedLoss { batch: usize },
    #[error("bad image batch: {0}")]
    BadImages(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("checkpoint io on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint version {found}, this build reads {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    CorruptBlob(String),
    #[error("checkpoint is missing parameter {0}")]
    MissingParam(String),
}
