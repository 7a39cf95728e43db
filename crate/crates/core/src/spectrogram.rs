//! Hann-windowed STFT power spectrograms and fixed-size model inputs.

use std::io::{BufRead, Read, Write};

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::AudioBuffer;

#[derive(Debug, Error)]
pub enum SpectrogramError {
    #[error("window of {0} samples is too short (need at least 2)")]
    WindowTooShort(usize),
    #[error("signal of {len} samples is shorter than the {window}-sample window")]
    SignalTooShort { len: usize, window: usize },
    #[error("invalid spectrogram configuration: {0}")]
    InvalidConfig(String),
    #[error("malformed spectrogram dump: {0}")]
    MalformedDump(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpectrogramConfig {
    pub window_len: usize,
    pub hop: usize,
    pub kept_bins: usize,
    pub chunk_frames: usize,
    pub log_epsilon: f64,
}

impl Default for SpectrogramConfig {
    fn default() -> Self {
        Self {
            window_len: 512,
            hop: 256,
            kept_bins: 128,
            chunk_frames: 128,
            log_epsilon: 1e-10,
        }
    }
}

impl SpectrogramConfig {
    pub fn validate(&self) -> Result<(), SpectrogramError> {
        let bad = |m: &str| Err(SpectrogramError::InvalidConfig(m.into()));
        if self.window_len < 2 {
            return Err(SpectrogramError::WindowTooShort(self.window_len));
        }
        if self.hop == 0 || self.hop > self.window_len {
            return bad("need 0 < hop <= window_len");
        }
        if self.kept_bins == 0 || self.kept_bins > self.window_len / 2 + 1 {
            return bad("need 0 < kept_bins <= window_len / 2 + 1");
        }
        if self.chunk_frames == 0 {
            return bad("chunk_frames must be at least 1");
        }
        if !(self.log_epsilon > 0.0) {
            return bad("log_epsilon must be positive");
        }
        Ok(())
    }

    /// Samples of audio consumed by one model input chunk.
    pub fn samples_per_chunk(&self) -> usize {
        (self.chunk_frames - 1) * self.hop + self.window_len
    }
}

/// Symmetric Hann window, `w(n) = 0.5 (1 - cos(2πn / (N-1)))`.
pub fn hann(n: usize) -> Result<Vec<f64>, SpectrogramError> {
    if n < 2 {
        return Err(SpectrogramError::WindowTooShort(n));
    }
    let d = (n - 1) as f64;
    Ok((0..n)
        .map(|i| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / d).cos()))
        .collect())
}

pub fn frame_count(len: usize, window: usize, hop: usize) -> usize {
    if len < window {
        0
    } else {
        (len - window) / hop + 1
    }
}

/// Unnormalized DFT of each windowed frame; every frame holds all N bins.
pub fn stft(
    signal: &AudioBuffer,
    cfg: &SpectrogramConfig,
) -> Result<Vec<Vec<Complex<f64>>>, SpectrogramError> {
    cfg.validate()?;
    let n = cfg.window_len;
    let x = signal.samples();
    if x.len() < n {
        return Err(SpectrogramError::SignalTooShort {
            len: x.len(),
            window: n,
        });
    }
    let w = hann(n)?;
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n);
    let frames = frame_count(x.len(), n, cfg.hop);
    let mut out = Vec::with_capacity(frames);
    for f in 0..frames {
        let start = f * cfg.hop;
        let mut buf: Vec<Complex<f64>> = x[start..start + n]
            .iter()
            .zip(&w)
            .map(|(&s, &wv)| Complex::new(s as f64 * wv, 0.0))
            .collect();
        fft.process(&mut buf);
        out.push(buf);
    }
    Ok(out)
}

/// Power matrix, bins × frames, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    values: Vec<f64>,
    bins: usize,
    frames: usize,
    pub bin_hz: f64,
    pub frame_hop_s: f64,
}

impl Spectrogram {
    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn get(&self, bin: usize, frame: usize) -> f64 {
        self.values[bin * self.frames + frame]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Writes `rows cols bin_hz hop_s` on one text line followed by the
    /// matrix as little-endian f64, row-major.
    pub fn write_dump(&self, mut w: impl Write) -> Result<(), SpectrogramError> {
        writeln!(
            w,
            "{} {} {} {}",
            self.bins, self.frames, self.bin_hz, self.frame_hop_s
        )?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_dump(r: impl Read) -> Result<Self, SpectrogramError> {
        let mut r = std::io::BufReader::new(r);
        let mut header = String::new();
        r.read_line(&mut header)?;
        let bad = |m: &str| SpectrogramError::MalformedDump(m.into());
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(bad("header needs rows, cols, bin_hz, hop_s"));
        }
        let bins: usize = fields[0].parse().map_err(|_| bad("rows"))?;
        let frames: usize = fields[1].parse().map_err(|_| bad("cols"))?;
        let bin_hz: f64 = fields[2].parse().map_err(|_| bad("bin_hz"))?;
        let frame_hop_s: f64 = fields[3].parse().map_err(|_| bad("hop_s"))?;
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() != bins * frames * 8 {
            return Err(bad("payload size does not match header"));
        }
        let values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self {
            values,
            bins,
            frames,
            bin_hz,
            frame_hop_s,
        })
    }
}

/// `|STFT|²` truncated to the `kept_bins` lowest bins.
pub fn power_spectrogram(
    signal: &AudioBuffer,
    cfg: &SpectrogramConfig,
) -> Result<Spectrogram, SpectrogramError> {
    let frames = stft(signal, cfg)?;
    let n_frames = frames.len();
    let bins = cfg.kept_bins;
    let mut values = vec![0.0; bins * n_frames];
    for (f, frame) in frames.iter().enumerate() {
        for (k, c) in frame[..bins].iter().enumerate() {
            values[k * n_frames + f] = c.norm_sqr();
        }
    }
    let sr = signal.sample_rate() as f64;
    Ok(Spectrogram {
        values,
        bins,
        frames: n_frames,
        bin_hz: sr / cfg.window_len as f64,
        frame_hop_s: cfg.hop as f64 / sr,
    })
}

/// A model input: bins × frames, values in [0, 1], row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct InputTensor {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f32>,
}

/// Log-compresses, cuts the frame axis into non-overlapping chunks of
/// `chunk_frames` (remainder dropped) and min-max normalizes each chunk.
pub fn to_model_inputs(spec: &Spectrogram, cfg: &SpectrogramConfig) -> Vec<InputTensor> {
    let rows = spec.bins;
    let cols = cfg.chunk_frames;
    let chunks = spec.frames / cols;
    let mut out = Vec::with_capacity(chunks);
    for c in 0..chunks {
        let mut vals = Vec::with_capacity(rows * cols);
        for b in 0..rows {
            let row = &spec.values[b * spec.frames + c * cols..b * spec.frames + (c + 1) * cols];
            vals.extend(row.iter().map(|&v| (v + cfg.log_epsilon).ln()));
        }
        let (lo, hi) = vals
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        let span = hi - lo;
        let values = if span > 0.0 {
            vals.iter()
                .map(|&v| (((v - lo) / span) as f32).clamp(0.0, 1.0))
                .collect()
        } else {
            vec![0.0; vals.len()]
        };
        out.push(InputTensor { rows, cols, values });
    }
    out
}
