use std::path::Path;

use log::{info, warn};
use serde::Serialize;

use super::build::{load_chunk_store, stream_chunks, Split};
use super::config::{PipelineConfig, Task};
use super::prepare::process_recording;
use super::{read_bytes, read_text, with_workers, write_file, PipelineError, Result};
use crate::audio::{parse_transcript, read_wav_from};
use crate::metrics::{
    auc, ccc, confusion, macro_f1, pearson_cc, precision_recall_f1, rmse, rmse_normalized,
    weighted_f1, ClassScores, ConfusionMatrix,
};
use crate::nn::{input_tensor, predict_recording, read_checkpoint, Model, Sample, StreamMode};
use crate::phoneme::parse_lexicon;
use crate::spectrogram::InputTensor;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecordingPrediction {
    pub recording: String,
    pub truth: usize,
    pub predicted: usize,
    pub chunks: usize,
    pub probabilities: Vec<f64>,
}

/// Recording-level evaluation. Correlation metrics compare predicted and
/// true labels; a metric that is undefined on the data is omitted.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvaluationReport {
    pub mode: String,
    pub split: String,
    pub task: String,
    pub recordings: usize,
    /// Recordings in the split without a single usable chunk.
    pub skipped: Vec<String>,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub weighted_f1: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ccc: Option<f64>,
    pub rmse: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rmse_normalized: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auc: Option<f64>,
    pub classes: Vec<ClassScores>,
    pub confusion: ConfusionMatrix,
    pub predictions: Vec<RecordingPrediction>,
}

impl EvaluationReport {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("report serializes")
    }

    pub fn predictions_tsv(&self) -> String {
        let mut out = String::from("recording\ttruth\tpredicted\tchunks\tprobabilities\n");
        for p in &self.predictions {
            let probs: Vec<String> = p.probabilities.iter().map(|v| format!("{v:.9}")).collect();
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                p.recording,
                p.truth,
                p.predicted,
                p.chunks,
                probs.join(",")
            ));
        }
        out
    }
}

/// Loads a checkpoint and checks it against the configured architecture.
pub fn load_model(cfg: &PipelineConfig, checkpoint: &Path) -> Result<Model<f32>> {
    let (model, _) = read_checkpoint::<f32>(checkpoint)?;
    let expect = cfg.model_config(model.config().mode);
    if model.config() != &expect {
        return Err(PipelineError::IncompatibleCheckpoint(format!(
            "checkpoint has branch {:?} and head {:?}, configuration has branch {:?} and head {:?}",
            model.config().branch,
            model.config().fusion,
            expect.branch,
            expect.fusion
        )));
    }
    Ok(model)
}

/// Metrics from recording-level predictions.
pub fn summarize(
    mode: StreamMode,
    split: Split,
    task: Task,
    predictions: Vec<RecordingPrediction>,
    skipped: Vec<String>,
) -> Result<EvaluationReport> {
    if predictions.is_empty() {
        return Err(PipelineError::EmptySplit(split.as_str().into()));
    }
    let k = task.n_classes();
    let preds: Vec<usize> = predictions.iter().map(|p| p.predicted).collect();
    let truths: Vec<usize> = predictions.iter().map(|p| p.truth).collect();
    let cm = confusion(&preds, &truths, k)?;
    let classes = precision_recall_f1(&cm);
    let t: Vec<f64> = truths.iter().map(|&v| v as f64).collect();
    let p: Vec<f64> = preds.iter().map(|&v| v as f64).collect();
    let auc = match task {
        Task::Binary => {
            let scores: Vec<f64> = predictions.iter().map(|p| p.probabilities[1]).collect();
            let labels: Vec<bool> = truths.iter().map(|&t| t == 1).collect();
            auc(&scores, &labels).ok()
        }
        Task::Severity => None,
    };
    Ok(EvaluationReport {
        mode: mode.as_str().into(),
        split: split.as_str().into(),
        task: task.as_str().into(),
        recordings: predictions.len(),
        skipped,
        accuracy: cm.accuracy(),
        macro_f1: macro_f1(&classes),
        weighted_f1: weighted_f1(&classes),
        cc: pearson_cc(&t, &p).ok(),
        ccc: ccc(&t, &p).ok(),
        rmse: rmse(&t, &p)?,
        rmse_normalized: (task == Task::Severity)
            .then(|| rmse_normalized(&t, &p))
            .transpose()?,
        auc,
        classes,
        confusion: cm,
        predictions,
    })
}

/// Evaluates a checkpoint on one split, writing the report, confusion matrix
/// and per-recording predictions under the reports directory.
pub fn cmd_evaluate(
    cfg: &PipelineConfig,
    checkpoint: &Path,
    split: Split,
) -> Result<EvaluationReport> {
    let model = load_model(cfg, checkpoint)?;
    let mode = model.config().mode;
    let store = load_chunk_store(cfg)?;
    store.check_guards()?;
    let recs = store.recordings(split, mode, cfg.task, true)?;
    let mut predictions = Vec::new();
    with_workers(cfg.workers, || -> Result<()> {
        for r in &recs {
            let (predicted, probabilities) = predict_recording(&model, &r.samples)?;
            predictions.push(RecordingPrediction {
                recording: r.id.clone(),
                truth: match cfg.task {
                    Task::Binary => r.binary as usize,
                    Task::Severity => r.score as usize,
                },
                predicted,
                chunks: r.samples.len(),
                probabilities,
            });
        }
        Ok(())
    })??;
    let skipped: Vec<String> = store
        .split_ids(split)
        .into_iter()
        .filter(|id| !recs.iter().any(|r| r.id == *id))
        .map(String::from)
        .collect();
    for id in &skipped {
        warn!(
            "recording {id} has no usable chunks in {} mode",
            mode.as_str()
        );
    }
    let report = summarize(mode, split, cfg.task, predictions, skipped)?;
    let stem = format!("{}-{}", mode.as_str(), split.as_str());
    let dir = cfg.reports_dir();
    write_file(&dir.join(format!("{stem}.toml")), report.to_toml())?;
    write_file(
        &dir.join(format!("{stem}.confusion.tsv")),
        report.confusion.to_tsv(),
    )?;
    write_file(
        &dir.join(format!("{stem}.predictions.tsv")),
        report.predictions_tsv(),
    )?;
    info!(
        "{stem}: accuracy {:.4}, macro F1 {:.4} over {} recordings",
        report.accuracy, report.macro_f1, report.recordings
    );
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prediction {
    pub class: usize,
    pub probabilities: Vec<f64>,
    pub chunks: usize,
}

/// Model inputs for one recording's streams, originals only, in the shape
/// expected by `mode`.
pub fn recording_samples(
    vowel: &[InputTensor],
    consonant: &[InputTensor],
    mode: StreamMode,
) -> Vec<Sample<f32>> {
    match mode {
        StreamMode::Fusion => vowel
            .iter()
            .zip(consonant)
            .map(|(v, c)| Sample {
                vowel: Some(input_tensor(v)),
                consonant: Some(input_tensor(c)),
                label: 0,
            })
            .collect(),
        StreamMode::Vowel => vowel
            .iter()
            .map(|v| Sample {
                vowel: Some(input_tensor(v)),
                consonant: None,
                label: 0,
            })
            .collect(),
        StreamMode::Consonant => consonant
            .iter()
            .map(|c| Sample {
                vowel: None,
                consonant: Some(input_tensor(c)),
                label: 0,
            })
            .collect(),
    }
}

/// Runs the whole front end on one recording and predicts its class.
pub fn cmd_predict(
    cfg: &PipelineConfig,
    checkpoint: &Path,
    audio: &Path,
    transcript: &Path,
) -> Result<Prediction> {
    let model = load_model(cfg, checkpoint)?;
    let lexicon = parse_lexicon(&read_text(&cfg.paths.lexicon)?)?;
    let audio = read_wav_from(std::io::Cursor::new(read_bytes(audio)?))?;
    let transcript = parse_transcript(&read_text(transcript)?)?;
    let processed = process_recording(&audio, &transcript, &lexicon, cfg)?;
    let chunks = |clips| -> Result<Vec<InputTensor>> {
        let mut groups = stream_chunks(clips, None, &cfg.spectrogram, cfg.sample_rate)?;
        Ok(groups.pop().map(|g| g.1).unwrap_or_default())
    };
    let vowel = chunks(&processed.streams.vowel_clips)?;
    let consonant = chunks(&processed.streams.consonant_clips)?;
    let samples = recording_samples(&vowel, &consonant, model.config().mode);
    if samples.is_empty() {
        return Err(PipelineError::NoChunks(format!(
            "{} vowel and {} consonant chunks, not enough for {} mode",
            vowel.len(),
            consonant.len(),
            model.config().mode.as_str()
        )));
    }
    let (class, probabilities) =
        with_workers(cfg.workers, || predict_recording(&model, &samples))??;
    Ok(Prediction {
        class,
        probabilities,
        chunks: samples.len(),
    })
}
