use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{read_text, PipelineError, Result};
use crate::augment::AugmentConfig;
use crate::nn::{BranchConfig, FusionConfig, ModelConfig, StreamMode, TrainConfig};
use crate::spectrogram::SpectrogramConfig;
use crate::voicing::VoicingConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    #[default]
    Binary,
    Severity,
}

impl Task {
    pub fn n_classes(self) -> usize {
        match self {
            Task::Binary => 2,
            Task::Severity => 24,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Binary => "binary",
            Task::Severity => "severity",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub manifest: PathBuf,
    pub lexicon: PathBuf,
    pub work_dir: PathBuf,
}

/// Everything a pipeline run depends on. Relative paths are resolved
/// against the directory of the configuration file; so are the audio and
/// transcript paths inside the manifest, against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: Paths,
    #[serde(default)]
    pub task: Task,
    #[serde(default = "default_speaker")]
    pub speaker: String,
    #[serde(default = "default_sample_rate")]
    pub sample_rate: u32,
    /// Seeds the split and model initialization.
    #[serde(default)]
    pub seed: u64,
    /// Worker threads for per-recording stages; 0 uses one per core.
    #[serde(default)]
    pub workers: usize,
    #[serde(default)]
    pub voicing: VoicingConfig,
    #[serde(default)]
    pub augment: AugmentConfig,
    #[serde(default)]
    pub spectrogram: SpectrogramConfig,
    #[serde(default)]
    pub branch: BranchConfig,
    #[serde(default)]
    pub fusion: FusionConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

fn default_speaker() -> String {
    "Participant".into()
}

fn default_sample_rate() -> u32 {
    16000
}

impl PipelineConfig {
    /// Parses `text`, resolving relative paths against `base_dir`.
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: PipelineConfig =
            toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        for p in [
            &mut cfg.paths.manifest,
            &mut cfg.paths.lexicon,
            &mut cfg.paths.work_dir,
        ] {
            if p.is_relative() {
                *p = base_dir.join(&*p);
            }
        }
        cfg.fusion.n_classes = cfg.task.n_classes();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = read_text(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Replaces the split, augmentation and training seeds at once.
    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.augment.seed = seed;
        self.train.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PipelineError::Config(m));
        self.voicing.validate()?;
        self.augment.validate()?;
        self.spectrogram.validate()?;
        self.train.validate()?;
        self.model_config(StreamMode::Fusion).validate()?;
        if self.sample_rate == 0 {
            return bad("sample_rate must be positive".into());
        }
        if self.fusion.n_classes != self.task.n_classes() {
            return bad(format!(
                "task {} needs {} classes, fusion.n_classes is {}",
                self.task.as_str(),
                self.task.n_classes(),
                self.fusion.n_classes
            ));
        }
        if (self.branch.input_rows, self.branch.input_cols)
            != (self.spectrogram.kept_bins, self.spectrogram.chunk_frames)
        {
            return bad(format!(
                "branch input {}x{} must equal spectrogram kept_bins x chunk_frames {}x{}",
                self.branch.input_rows,
                self.branch.input_cols,
                self.spectrogram.kept_bins,
                self.spectrogram.chunk_frames
            ));
        }
        Ok(())
    }

    pub fn model_config(&self, mode: StreamMode) -> ModelConfig {
        ModelConfig {
            branch: self.branch.clone(),
            fusion: self.fusion.clone(),
            mode,
        }
    }

    pub fn prepare_dir(&self) -> PathBuf {
        self.paths.work_dir.join("prepare")
    }

    pub fn build_dir(&self) -> PathBuf {
        self.paths.work_dir.join("build")
    }

    pub fn models_dir(&self) -> PathBuf {
        self.paths.work_dir.join("models")
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.paths.work_dir.join("reports")
    }

    pub fn checkpoint_path(&self, mode: StreamMode) -> PathBuf {
        self.models_dir().join(format!("{}.ckpt", mode.as_str()))
    }
}
