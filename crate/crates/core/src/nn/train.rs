use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::adam::AdamState;
use super::loss::LossKind;
use super::model::{argmax, Model, Sample};
use super::tensor::{Real, Tensor};
use super::NnError;

/// Samples per gradient group. Groups are reduced in order, so results do
/// not depend on the number of worker threads.
const GROUP: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub loss: LossKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            decay: 1e-6,
            batch_size: 120,
            max_epochs: 500,
            patience: 10,
            seed: 0,
            loss: LossKind::Rmse,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        if !(self.learning_rate > 0.0) || self.decay < 0.0 || !self.decay.is_finite() {
            return Err(NnError::InvalidConfig(
                "learning_rate must be positive and decay non-negative".into(),
            ));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(NnError::InvalidConfig(
                "batch_size, max_epochs and patience must be positive".into(),
            ));
        }
        if self.patience >= self.max_epochs {
            return Err(NnError::InvalidConfig(format!(
                "patience {} must be below max_epochs {}",
                self.patience, self.max_epochs
            )));
        }
        Ok(())
    }
}

/// Stops once the monitored loss has not strictly improved for `patience`
/// consecutive epochs.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            stale: 0,
        }
    }

    /// Records one epoch's loss; returns true when training should stop.
    pub fn observe(&mut self, epoch: usize, loss: f64) -> bool {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = epoch;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        self.stale >= self.patience
    }

    pub fn improved_at(&self, epoch: usize) -> bool {
        self.best_epoch == epoch
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl History {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("epoch\ttrain_loss\tval_loss\ttrain_acc\tval_acc\n");
        for r in &self.epochs {
            out.push_str(&format!(
                "{}\t{:.9}\t{:.9}\t{:.6}\t{:.6}\n",
                r.epoch, r.train_loss, r.val_loss, r.train_acc, r.val_acc
            ));
        }
        out
    }

    pub fn best(&self) -> Option<&EpochRecord> {
        self.epochs.iter().find(|r| r.epoch == self.best_epoch)
    }
}

/// Mean loss and accuracy over `data`.
pub fn evaluate<T: Real>(
    model: &Model<T>,
    data: &[Sample<T>],
    loss: LossKind,
) -> Result<(f64, f64), NnError> {
    if data.is_empty() {
        return Err(NnError::EmptyDataset);
    }
    let results = data
        .par_iter()
        .map(|s| model.loss(s, loss).map(|(l, p)| (l, argmax(&p) == s.label)))
        .collect::<Result<Vec<_>, _>>()?;
    let n = results.len() as f64;
    let total: f64 = results.iter().map(|r| r.0).sum();
    let correct = results.iter().filter(|r| r.1).count() as f64;
    Ok((total / n, correct / n))
}

/// Summed gradients, loss and correct-count for one minibatch.
fn batch_gradient<T: Real>(
    model: &Model<T>,
    batch: &[&Sample<T>],
    loss: LossKind,
) -> Result<(Vec<Tensor<T>>, f64, usize), NnError> {
    let groups = batch
        .par_chunks(GROUP)
        .map(|group| {
            let mut grads = model.zero_grads();
            let mut total = 0.0;
            let mut correct = 0;
            for s in group {
                let (l, p) = model.loss_and_grad(s, loss, &mut grads)?;
                total += l;
                correct += usize::from(argmax(&p) == s.label);
            }
            Ok((grads, total, correct))
        })
        .collect::<Result<Vec<_>, NnError>>()?;
    let mut iter = groups.into_iter();
    let (mut grads, mut total, mut correct) = iter.next().expect("non-empty batch");
    for (g, l, c) in iter {
        for (acc, t) in grads.iter_mut().zip(&g) {
            for (a, &b) in acc.data_mut().iter_mut().zip(t.data()) {
                *a += b;
            }
        }
        total += l;
        correct += c;
    }
    Ok((grads, total, correct))
}

/// Minibatch Adam with a seeded shuffle each epoch. Returns the parameters
/// from the epoch with the lowest validation loss.
pub fn train<T: Real>(
    model: Model<T>,
    train_set: &[Sample<T>],
    val_set: &[Sample<T>],
    cfg: &TrainConfig,
) -> Result<(Model<T>, History), NnError> {
    train_with_progress(model, train_set, val_set, cfg, |_| {})
}

/// As `train`, calling `progress` after every epoch.
pub fn train_with_progress<T: Real>(
    mut model: Model<T>,
    train_set: &[Sample<T>],
    val_set: &[Sample<T>],
    cfg: &TrainConfig,
    mut progress: impl FnMut(&EpochRecord),
) -> Result<(Model<T>, History), NnError> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(NnError::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(&model.params());
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = model.clone();
    let mut history = History::default();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut correct = 0;
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample<T>> = idx.iter().map(|&i| &train_set[i]).collect();
            let (mut grads, l, c) = batch_gradient(&model, &batch, cfg.loss)?;
            let scale = T::from_f64(1.0 / batch.len() as f64);
            for g in &mut grads {
                g.data_mut().iter_mut().for_each(|v| *v = *v * scale);
            }
            adam.step(
                &mut model.params_mut(),
                &grads,
                cfg.learning_rate,
                cfg.decay,
            )?;
            total += l;
            correct += c;
        }
        let (val_loss, val_acc) = evaluate(&model, val_set, cfg.loss)?;
        let record = EpochRecord {
            epoch,
            train_loss: total / train_set.len() as f64,
            val_loss,
            train_acc: correct as f64 / train_set.len() as f64,
            val_acc,
        };
        if !record.train_loss.is_finite() || !val_loss.is_finite() {
            return Err(NnError::Diverged(epoch));
        }
        progress(&record);
        history.epochs.push(record);
        let stop = stopper.observe(epoch, val_loss);
        if stopper.improved_at(epoch) {
            best = model.clone();
        }
        if stop {
            history.stopped_early = epoch < cfg.max_epochs;
            break;
        }
    }
    history.best_epoch = stopper.best_epoch();
    Ok((best, history))
}

/// Mean chunk probabilities and their argmax (lowest index on ties).
pub fn predict_recording<T: Real>(
    model: &Model<T>,
    chunks: &[Sample<T>],
) -> Result<(usize, Vec<f64>), NnError> {
    if chunks.is_empty() {
        return Err(NnError::NoChunks);
    }
    let probs = chunks
        .par_iter()
        .map(|s| model.forward(s))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(mean_prediction(&probs))
}

/// Averages probability vectors; summation runs in a canonical order so the
/// result does not depend on chunk order.
pub fn mean_prediction(probs: &[Vec<f64>]) -> (usize, Vec<f64>) {
    let k = probs[0].len();
    let n = probs.len() as f64;
    let mean: Vec<f64> = (0..k)
        .map(|j| {
            let mut col: Vec<f64> = probs.iter().map(|p| p[j]).collect();
            col.sort_by(f64::total_cmp);
            col.iter().sum::<f64>() / n
        })
        .collect();
    (argmax(&mean), mean)
}
