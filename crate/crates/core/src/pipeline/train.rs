use std::path::PathBuf;

use log::info;

use super::build::{load_chunk_store, Split};
use super::config::PipelineConfig;
use super::{with_workers, write_file, PipelineError, Result};
use crate::nn::gradcheck::{run_suite, GradCheckConfig, GradReport};
use crate::nn::{
    train_with_progress, write_checkpoint, CheckpointMeta, History, Model, Sample, StreamMode,
};

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub mode: StreamMode,
    pub checkpoint: PathBuf,
    pub history: History,
    pub train_samples: usize,
    pub val_samples: usize,
}

/// Training samples (augmented copies included) and validation samples
/// (originals only) for `mode`.
pub fn training_sets(
    cfg: &PipelineConfig,
    mode: StreamMode,
) -> Result<(Vec<Sample<f32>>, Vec<Sample<f32>>)> {
    let store = load_chunk_store(cfg)?;
    store.check_guards()?;
    let flatten = |split: Split, originals_only: bool| -> Result<Vec<Sample<f32>>> {
        let recs = store.recordings(split, mode, cfg.task, originals_only)?;
        let samples: Vec<Sample<f32>> = recs.into_iter().flat_map(|r| r.samples).collect();
        if samples.is_empty() {
            return Err(PipelineError::EmptySplit(format!(
                "{} ({} mode)",
                split.as_str(),
                mode.as_str()
            )));
        }
        Ok(samples)
    };
    Ok((flatten(Split::Train, false)?, flatten(Split::Val, true)?))
}

/// Trains one model on the built chunk store and writes its checkpoint and
/// training curve.
pub fn cmd_train(cfg: &PipelineConfig, mode: StreamMode) -> Result<TrainOutcome> {
    let (train_set, val_set) = training_sets(cfg, mode)?;
    info!(
        "training {} model on {} samples, validating on {}",
        mode.as_str(),
        train_set.len(),
        val_set.len()
    );
    let model = Model::<f32>::new(cfg.model_config(mode), cfg.train.seed)?;
    let (best, history) = with_workers(cfg.workers, || {
        train_with_progress(model, &train_set, &val_set, &cfg.train, |r| {
            info!(
                "epoch {:>4}  train loss {:.6}  val loss {:.6}  val acc {:.4}",
                r.epoch, r.train_loss, r.val_loss, r.val_acc
            );
        })
    })??;
    let best_record = history.best().cloned();
    let meta = CheckpointMeta {
        epoch: history.best_epoch,
        metrics: best_record
            .map(|r| {
                vec![
                    ("val_loss".to_string(), r.val_loss),
                    ("val_acc".to_string(), r.val_acc),
                ]
            })
            .unwrap_or_default(),
    };
    let checkpoint = cfg.checkpoint_path(mode);
    write_file(&checkpoint, [])?;
    write_checkpoint(&checkpoint, &best, &meta)?;
    write_file(
        &cfg.models_dir()
            .join(format!("{}.history.tsv", mode.as_str())),
        history.to_tsv(),
    )?;
    info!(
        "best epoch {} of {}{}",
        history.best_epoch,
        history.epochs.len(),
        if history.stopped_early {
            " (stopped early)"
        } else {
            ""
        }
    );
    Ok(TrainOutcome {
        mode,
        checkpoint,
        history,
        train_samples: train_set.len(),
        val_samples: val_set.len(),
    })
}

/// Finite-difference check of every layer and of the whole network in f64.
pub fn cmd_gradcheck(seed: u64, corrupt: bool) -> Result<GradReport> {
    Ok(run_suite(&GradCheckConfig {
        seed,
        corrupt,
        ..GradCheckConfig::default()
    })?)
}
