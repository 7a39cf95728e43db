//! The four-stage experiment pipeline: prepare (speaker extraction, voicing,
//! phoneme streams), build (split, augmentation, spectrogram chunks), train,
//! and evaluate, plus single-recording prediction and the gradient check.
//!
//! Work directory layout:
//!
//! ```text
//! <work_dir>/prepare/<id>/key                  cache key of the stored result
//! <work_dir>/prepare/<id>/clips.bin            vowel and consonant clips
//! <work_dir>/prepare/<id>/stats.toml           clip and word counts
//! <work_dir>/prepare/<id>/spans.tsv            phone spans
//! <work_dir>/prepare/<id>/voicing.tsv          per-frame voicing track
//! <work_dir>/prepare/report.toml               per-recording outcome summary
//! <work_dir>/build/split.tsv                   recording id to split
//! <work_dir>/build/index.tsv                   one row per chunk tensor
//! <work_dir>/build/chunks.f32                  tensor data, little-endian f32
//! <work_dir>/build/summary.toml                chunk counts per split
//! <work_dir>/models/<mode>.ckpt                checkpoint
//! <work_dir>/models/<mode>.history.tsv         per-epoch training curve
//! <work_dir>/reports/<mode>-<split>.toml       evaluation report
//! <work_dir>/reports/<mode>-<split>.*.tsv      confusion matrix, predictions
//! ```

pub mod build;
pub mod config;
pub mod evaluate;
pub mod prepare;
pub mod train;

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

pub use build::{
    cmd_build, load_chunk_store, BuildSummary, ChunkRecord, ChunkStore, Split, Stream,
};
pub use config::{PipelineConfig, Task};
pub use evaluate::{cmd_evaluate, cmd_predict, EvaluationReport, Prediction};
pub use prepare::{cmd_prepare, PrepareSummary};
pub use train::{cmd_gradcheck, cmd_train, TrainOutcome};

use crate::audio::AudioError;
use crate::augment::AugmentError;
use crate::metrics::MetricError;
use crate::nn::NnError;
use crate::phoneme::PhonemeError;
use crate::spectrogram::SpectrogramError;
use crate::voicing::VoicingError;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Voicing(#[from] VoicingError),
    #[error(transparent)]
    Phoneme(#[from] PhonemeError),
    #[error(transparent)]
    Spectrogram(#[from] SpectrogramError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("no speech to analyse: {0}")]
    EmptySpeech(String),
    #[error("no chunks: {0}")]
    NoChunks(String),
    #[error("all {0} recordings failed to prepare")]
    AllRecordingsFailed(usize),
    #[error("split `{0}` has no usable chunks")]
    EmptySplit(String),
    #[error("checkpoint does not match the configuration: {0}")]
    IncompatibleCheckpoint(String),
    #[error("leakage guard violated: {0}")]
    Leakage(String),
    #[error("{0} has not been run (missing {1})")]
    MissingStage(&'static str, PathBuf),
    #[error("corrupt store {path}: {reason}")]
    CorruptStore { path: PathBuf, reason: String },
}

pub type Result<T> = std::result::Result<T, PipelineError>;

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(io_err(path))
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(io_err(path))
}

pub(crate) fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    std::fs::write(path, bytes).map_err(io_err(path))
}

/// A seed for one recording, independent of processing order.
pub(crate) fn recording_seed(seed: u64, id: &str) -> u64 {
    let digest = Sha256::new()
        .chain_update(seed.to_le_bytes())
        .chain_update(id.as_bytes())
        .finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Runs `f` on a pool of `workers` threads (0 means one per core).
pub fn with_workers<R: Send>(workers: usize, f: impl FnOnce() -> R + Send) -> Result<R> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| PipelineError::Config(format!("worker pool: {e}")))?;
    Ok(pool.install(f))
}
