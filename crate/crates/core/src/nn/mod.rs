//! Minimal deterministic CNN engine: tensors, the fixed layer set with exact
//! backpropagation, the two convolutional branches and the fusion head,
//! Adam, and a training loop with early stopping.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod model;
pub mod split;
pub mod tensor;
pub mod train;

use thiserror::Error;

pub use adam::AdamState;
pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointMeta};
pub use loss::{rmse_loss, LossKind};
pub use model::{input_tensor, BranchConfig, FusionConfig, Model, ModelConfig, Sample, StreamMode};
pub use split::{split_dataset, DatasetSplit};
pub use tensor::{Real, Tensor};
pub use train::{
    predict_recording, train, train_with_progress, EarlyStopping, EpochRecord, History, TrainConfig,
};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("spatial size {height}x{width} is too small to pool")]
    ShapeTooSmall { height: usize, width: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("no chunks to aggregate")]
    NoChunks,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("training diverged at epoch {0} (non-finite loss)")]
    Diverged(usize),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
