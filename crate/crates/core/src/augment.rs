//! Training-set augmentation: additive uniform noise and pitch lowering.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::AudioBuffer;
use crate::spectrogram::hann;

#[derive(Debug, Error, PartialEq)]
pub enum AugmentError {
    #[error("clip of {len} samples is shorter than the {window}-sample analysis window")]
    ClipTooShort { len: usize, window: usize },
    #[error("invalid augmentation configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub noise_alphas: Vec<f64>,
    pub pitch_semitones_down: Vec<f64>,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            noise_alphas: vec![0.01, 0.02, 0.03],
            pitch_semitones_down: vec![0.5, 2.0, 2.5],
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<(), AugmentError> {
        if self.noise_alphas.iter().any(|a| !(*a >= 0.0)) {
            return Err(AugmentError::InvalidConfig(
                "noise alphas must be >= 0".into(),
            ));
        }
        if self
            .pitch_semitones_down
            .iter()
            .any(|s| !(*s >= 0.0) || !s.is_finite())
        {
            return Err(AugmentError::InvalidConfig(
                "semitone offsets must be >= 0".into(),
            ));
        }
        Ok(())
    }

    /// Output clips per input clip.
    pub fn multiplier(&self) -> usize {
        1 + self.noise_alphas.len() + self.pitch_semitones_down.len()
    }
}

/// `x[n] = y[n] - alpha * u[n]` with `u` i.i.d. uniform on [0, 1), clamped
/// into [-1, 1].
pub fn inject_noise<R: Rng + ?Sized>(clip: &AudioBuffer, alpha: f64, rng: &mut R) -> AudioBuffer {
    let noisy: Vec<f64> = clip
        .samples()
        .iter()
        .map(|&y| y as f64 - alpha * rng.gen::<f64>())
        .collect();
    AudioBuffer::from_clamped(clip.sample_rate(), noisy)
}

pub const VOCODER_WINDOW: usize = 1024;
pub const VOCODER_HOP: usize = 256;

/// Phase-vocoder time stretch with Hann analysis and synthesis windows.
/// Returns roughly `len * syn_hop / ana_hop` samples.
pub struct PhaseVocoder {
    window: Vec<f64>,
    fft: std::sync::Arc<dyn rustfft::Fft<f64>>,
    ifft: std::sync::Arc<dyn rustfft::Fft<f64>>,
}

impl PhaseVocoder {
    pub fn new(window_len: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            window: hann(window_len).expect("vocoder window must be at least 2 samples"),
            fft: planner.plan_fft_forward(window_len),
            ifft: planner.plan_fft_inverse(window_len),
        }
    }

    pub fn window_len(&self) -> usize {
        self.window.len()
    }

    pub fn time_stretch(&self, x: &[f64], ana_hop: usize, syn_hop: usize) -> Vec<f64> {
        let n = self.window.len();
        let half = n / 2 + 1;
        // Zero padding so every input sample gets full window coverage.
        let mut padded = vec![0.0; n];
        padded.extend_from_slice(x);
        padded.extend(std::iter::repeat(0.0).take(n + ana_hop));
        let frames = (padded.len() - n) / ana_hop + 1;
        let out_len = (frames - 1) * syn_hop + n;
        let mut acc = vec![0.0; out_len];
        let mut norm = vec![0.0; out_len];

        let mut prev_phase = vec![0.0; half];
        let mut synth_phase = vec![0.0; half];
        let mut buf = vec![Complex::new(0.0, 0.0); n];
        let ratio = syn_hop as f64 / ana_hop as f64;
        for f in 0..frames {
            let pos = f * ana_hop;
            for (i, b) in buf.iter_mut().enumerate() {
                *b = Complex::new(padded[pos + i] * self.window[i], 0.0);
            }
            self.fft.process(&mut buf);
            for k in 0..half {
                let phase = buf[k].arg();
                if f == 0 {
                    synth_phase[k] = phase;
                } else {
                    let expected = 2.0 * PI * k as f64 * ana_hop as f64 / n as f64;
                    let mut dp = phase - prev_phase[k] - expected;
                    dp -= (dp / (2.0 * PI)).round() * 2.0 * PI;
                    synth_phase[k] += (expected + dp) * ratio;
                }
                prev_phase[k] = phase;
                let mag = buf[k].norm();
                buf[k] = Complex::from_polar(mag, synth_phase[k]);
            }
            for k in half..n {
                buf[k] = buf[n - k].conj();
            }
            self.ifft.process(&mut buf);
            let out_pos = f * syn_hop;
            for i in 0..n {
                let w = self.window[i];
                acc[out_pos + i] += buf[i].re / n as f64 * w;
                norm[out_pos + i] += w * w;
            }
        }
        let y: Vec<f64> = acc
            .iter()
            .zip(&norm)
            .map(|(&a, &w)| if w > 1e-6 { a / w } else { 0.0 })
            .collect();
        let start = ((n as f64) * ratio).round() as usize;
        let len = ((x.len() as f64) * ratio).round() as usize;
        y[start.min(y.len())..(start + len).min(y.len())].to_vec()
    }
}

/// Linear-interpolation resampling of `x` onto `out_len` points spanning
/// the same duration.
pub fn resample_linear(x: &[f64], out_len: usize) -> Vec<f64> {
    if x.is_empty() || out_len == 0 {
        return vec![0.0; out_len];
    }
    let step = x.len() as f64 / out_len as f64;
    (0..out_len)
        .map(|i| {
            let pos = i as f64 * step;
            let j = pos.floor() as usize;
            let frac = pos - j as f64;
            let a = x[j.min(x.len() - 1)];
            let b = x[(j + 1).min(x.len() - 1)];
            a + (b - a) * frac
        })
        .collect()
}

/// Lowers pitch by `semitones_down`: time-stretch by `2^(-s/12)` then
/// resample back to the input length.
pub fn shift_pitch(clip: &AudioBuffer, semitones_down: f64) -> Result<AudioBuffer, AugmentError> {
    shift_pitch_with(&PhaseVocoder::new(VOCODER_WINDOW), clip, semitones_down)
}

fn shift_pitch_with(
    vocoder: &PhaseVocoder,
    clip: &AudioBuffer,
    semitones_down: f64,
) -> Result<AudioBuffer, AugmentError> {
    let window = vocoder.window_len();
    if clip.len() < window {
        return Err(AugmentError::ClipTooShort {
            len: clip.len(),
            window,
        });
    }
    let factor = 2f64.powf(-semitones_down / 12.0);
    let ana_hop = ((VOCODER_HOP as f64 / factor).round() as usize).max(1);
    let x: Vec<f64> = clip.samples().iter().map(|&v| v as f64).collect();
    let stretched = vocoder.time_stretch(&x, ana_hop, VOCODER_HOP);
    let out = resample_linear(&stretched, x.len());
    Ok(AudioBuffer::from_clamped(clip.sample_rate(), out))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Origin {
    Original,
    Noise(f64),
    Pitch(f64),
}

impl Origin {
    pub fn is_original(&self) -> bool {
        matches!(self, Origin::Original)
    }

    /// Stable text tag, e.g. `original`, `noise:0.01`, `pitch:2`.
    pub fn tag(&self) -> String {
        match self {
            Origin::Original => "original".into(),
            Origin::Noise(a) => format!("noise:{a}"),
            Origin::Pitch(s) => format!("pitch:{s}"),
        }
    }

    pub fn parse(tag: &str) -> Option<Origin> {
        match tag.split_once(':') {
            None if tag == "original" => Some(Origin::Original),
            Some(("noise", v)) => v.parse().ok().map(Origin::Noise),
            Some(("pitch", v)) => v.parse().ok().map(Origin::Pitch),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledClip<L> {
    pub clip: AudioBuffer,
    pub label: L,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedClip<L> {
    pub clip: AudioBuffer,
    pub label: L,
    pub origin: Origin,
    /// Index of the source clip in the input list.
    pub source: usize,
}

/// Random stream for noise on one clip; independent of processing order.
pub fn clip_rng(seed: u64, clip_index: usize, alpha_index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((clip_index as u64) << 16) | alpha_index as u64);
    rng
}

/// Originals, then one noisy copy per alpha, then one pitch-lowered copy per
/// offset. Clips shorter than the vocoder window are zero-padded for the
/// pitch shift and cut back to their length.
pub fn augment_set<L: Clone>(
    clips: &[LabeledClip<L>],
    cfg: &AugmentConfig,
) -> Vec<AugmentedClip<L>> {
    let vocoder = PhaseVocoder::new(VOCODER_WINDOW);
    let mut out = Vec::with_capacity(clips.len() * cfg.multiplier());
    out.extend(clips.iter().enumerate().map(|(i, c)| AugmentedClip {
        clip: c.clip.clone(),
        label: c.label.clone(),
        origin: Origin::Original,
        source: i,
    }));
    for (j, &alpha) in cfg.noise_alphas.iter().enumerate() {
        for (i, c) in clips.iter().enumerate() {
            let mut rng = clip_rng(cfg.seed, i, j);
            out.push(AugmentedClip {
                clip: inject_noise(&c.clip, alpha, &mut rng),
                label: c.label.clone(),
                origin: Origin::Noise(alpha),
                source: i,
            });
        }
    }
    for &s in &cfg.pitch_semitones_down {
        for (i, c) in clips.iter().enumerate() {
            let shifted = if c.clip.len() >= VOCODER_WINDOW {
                shift_pitch_with(&vocoder, &c.clip, s).expect("length checked")
            } else {
                let mut padded = c.clip.samples().to_vec();
                padded.resize(VOCODER_WINDOW, 0.0);
                let long = AudioBuffer::new(c.clip.sample_rate(), padded).expect("valid samples");
                let s = shift_pitch_with(&vocoder, &long, s).expect("padded to window");
                s.slice(0, c.clip.len())
            };
            out.push(AugmentedClip {
                clip: shifted,
                label: c.label.clone(),
                origin: Origin::Pitch(s),
                source: i,
            });
        }
    }
    out
}

/// Frequency of the strongest spectral peak, refined by parabolic
/// interpolation on the log magnitude of a Hann-windowed FFT.
pub fn dominant_frequency(clip: &AudioBuffer) -> f64 {
    let n = clip.len();
    let w = hann(n.max(2)).unwrap();
    let mut buf: Vec<Complex<f64>> = clip
        .samples()
        .iter()
        .zip(&w)
        .map(|(&s, &wv)| Complex::new(s as f64 * wv, 0.0))
        .collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let mags: Vec<f64> = buf[..n / 2].iter().map(|c| c.norm()).collect();
    let k = (1..mags.len())
        .max_by(|&a, &b| mags[a].total_cmp(&mags[b]))
        .unwrap_or(0);
    let mut bin = k as f64;
    if k > 0 && k + 1 < mags.len() {
        let (a, b, c) = (mags[k - 1].ln(), mags[k].ln(), mags[k + 1].ln());
        let d = a - 2.0 * b + c;
        if d < 0.0 {
            bin += 0.5 * (a - c) / d;
        }
    }
    bin * clip.sample_rate() as f64 / n as f64
}
