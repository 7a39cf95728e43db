//! Audio decoding, interview transcripts, dataset manifests and
//! participant speech extraction.

use std::collections::HashSet;
use std::path::Path;

use serde::Deserialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("malformed audio file: {0}")]
    MalformedFile(String),
    #[error("unsupported channel count {0}; only mono input is accepted")]
    UnsupportedChannels(u16),
    #[error("unsupported sample encoding: {0}")]
    UnsupportedEncoding(String),
    #[error("invalid audio buffer: {0}")]
    InvalidBuffer(String),
    #[error("line {line}: malformed row: {reason}")]
    MalformedRow { line: usize, reason: String },
    #[error("overlapping turns for speaker {speaker:?} at {start}s")]
    NonMonotonicTimes { speaker: String, start: f64 },
    #[error("line {line}: PHQ-8 score {score} outside [0, 23]")]
    ScoreOutOfRange { line: usize, score: i64 },
    #[error("no turns for speaker {0:?}")]
    EmptySpeech(String),
    #[error("turn [{start}, {stop}]s exceeds audio duration {duration}s")]
    TurnOutOfRange {
        start: f64,
        stop: f64,
        duration: f64,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, AudioError>;

/// Mono PCM audio with samples in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    sample_rate: u32,
    samples: Vec<f32>,
}

impl AudioBuffer {
    pub fn new(sample_rate: u32, samples: Vec<f32>) -> Result<Self> {
        if sample_rate == 0 {
            return Err(AudioError::InvalidBuffer(
                "sample rate must be positive".into(),
            ));
        }
        if let Some((i, v)) = samples
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || v.abs() > 1.0)
        {
            return Err(AudioError::InvalidBuffer(format!(
                "sample {i} = {v} is not a finite value in [-1, 1]"
            )));
        }
        Ok(Self {
            sample_rate,
            samples,
        })
    }

    /// Builds a buffer from arbitrary values, clamping each into [-1, 1].
    /// Non-finite values become 0.
    pub fn from_clamped(sample_rate: u32, samples: impl IntoIterator<Item = f64>) -> Self {
        assert!(sample_rate > 0, "sample rate must be positive");
        let samples = samples
            .into_iter()
            .map(|v| {
                if v.is_finite() {
                    v.clamp(-1.0, 1.0) as f32
                } else {
                    0.0
                }
            })
            .collect();
        Self {
            sample_rate,
            samples,
        }
    }

    pub fn silence(sample_rate: u32, len: usize) -> Self {
        Self::from_clamped(sample_rate, std::iter::repeat(0.0).take(len))
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f32 {
        self.samples.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    /// Copies `[start, end)` (sample indices) into a new buffer.
    pub fn slice(&self, start: usize, end: usize) -> AudioBuffer {
        AudioBuffer {
            sample_rate: self.sample_rate,
            samples: self.samples[start..end].to_vec(),
        }
    }

    /// Concatenates buffers that share one sample rate.
    pub fn concat<'a>(
        sample_rate: u32,
        parts: impl IntoIterator<Item = &'a AudioBuffer>,
    ) -> AudioBuffer {
        let mut samples = Vec::new();
        for p in parts {
            assert_eq!(p.sample_rate, sample_rate, "sample rate mismatch in concat");
            samples.extend_from_slice(&p.samples);
        }
        AudioBuffer {
            sample_rate,
            samples,
        }
    }

    pub fn into_samples(self) -> Vec<f32> {
        self.samples
    }
}

/// Reads a mono integer-PCM WAV file. Integer samples are divided by
/// 2^(bits-1), so 16-bit audio is scaled by 1/32768.
pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioBuffer> {
    let reader = hound::WavReader::open(path.as_ref()).map_err(map_hound)?;
    decode_wav(reader)
}

/// Same as [`read_wav`] over any byte source.
pub fn read_wav_from<R: std::io::Read>(source: R) -> Result<AudioBuffer> {
    let reader = hound::WavReader::new(source).map_err(map_hound)?;
    decode_wav(reader)
}

fn decode_wav<R: std::io::Read>(mut reader: hound::WavReader<R>) -> Result<AudioBuffer> {
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(AudioError::UnsupportedChannels(spec.channels));
    }
    if spec.sample_format != hound::SampleFormat::Int {
        return Err(AudioError::UnsupportedEncoding(format!(
            "{}-bit floating point",
            spec.bits_per_sample
        )));
    }
    if spec.bits_per_sample == 0 || spec.bits_per_sample > 32 {
        return Err(AudioError::UnsupportedEncoding(format!(
            "{}-bit integer",
            spec.bits_per_sample
        )));
    }
    let declared = reader.len() as usize;
    let scale = 1.0 / (1u64 << (spec.bits_per_sample - 1)) as f64;
    let mut samples = Vec::with_capacity(declared);
    for s in reader.samples::<i32>() {
        let s = s.map_err(map_hound)?;
        samples.push((s as f64 * scale) as f32);
    }
    if samples.len() != declared {
        return Err(AudioError::MalformedFile(format!(
            "header declares {declared} samples, payload holds {}",
            samples.len()
        )));
    }
    AudioBuffer::new(spec.sample_rate, samples)
}

fn map_hound(e: hound::Error) -> AudioError {
    match e {
        // hound reports a short payload as a custom `Other` error.
        hound::Error::IoError(io)
            if io.kind() == std::io::ErrorKind::UnexpectedEof
                || (io.kind() == std::io::ErrorKind::Other
                    && io.to_string().contains("enough bytes")) =>
        {
            AudioError::MalformedFile("unexpected end of file".into())
        }
        hound::Error::IoError(io) => AudioError::Io(io),
        hound::Error::Unsupported => {
            AudioError::UnsupportedEncoding("unsupported WAV format".into())
        }
        other => AudioError::MalformedFile(other.to_string()),
    }
}

/// Writes a mono integer-PCM WAV file with the given bit depth (8–32).
pub fn write_wav(path: impl AsRef<Path>, audio: &AudioBuffer, bits: u16) -> Result<()> {
    if !(8..=32).contains(&bits) {
        return Err(AudioError::UnsupportedEncoding(format!(
            "{bits}-bit integer"
        )));
    }
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: audio.sample_rate,
        bits_per_sample: bits,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path.as_ref(), spec).map_err(map_hound)?;
    let full = (1i64 << (bits - 1)) as f64;
    let (lo, hi) = (-full, full - 1.0);
    for &s in &audio.samples {
        let q = (s as f64 * full).round().clamp(lo, hi) as i32;
        writer.write_sample(q).map_err(map_hound)?;
    }
    writer.finalize().map_err(map_hound)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Turn {
    pub start: f64,
    pub stop: f64,
    pub speaker: String,
    pub words: Vec<String>,
}

impl Turn {
    pub fn duration(&self) -> f64 {
        self.stop - self.start
    }
}

/// Interview turns sorted by start time.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TranscriptTable {
    turns: Vec<Turn>,
}

impl TranscriptTable {
    pub fn turns(&self) -> &[Turn] {
        &self.turns
    }

    pub fn is_empty(&self) -> bool {
        self.turns.is_empty()
    }
}

/// Parses tab-separated `start, stop, speaker, text` rows. A leading header
/// row (first field `start_time` or similar non-numeric label) is skipped.
pub fn parse_transcript(text: &str) -> Result<TranscriptTable> {
    let mut turns = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let row = raw.trim_end_matches('\r');
        if row.trim().is_empty() {
            continue;
        }
        let mut fields = row.splitn(4, '\t');
        let start_field = fields.next().unwrap_or("").trim();
        if turns.is_empty() && line_is_header(start_field) {
            continue;
        }
        let malformed = |reason: String| AudioError::MalformedRow { line, reason };
        let stop_field = fields
            .next()
            .ok_or_else(|| malformed("missing stop time".into()))?
            .trim();
        let speaker = fields
            .next()
            .ok_or_else(|| malformed("missing speaker".into()))?
            .trim();
        let text = fields.next().unwrap_or("");
        let start: f64 = start_field
            .parse()
            .map_err(|_| malformed(format!("bad start time {start_field:?}")))?;
        let stop: f64 = stop_field
            .parse()
            .map_err(|_| malformed(format!("bad stop time {stop_field:?}")))?;
        if !start.is_finite() || !stop.is_finite() || start < 0.0 {
            return Err(malformed("times must be finite and non-negative".into()));
        }
        if stop <= start {
            return Err(malformed(format!("stop {stop} is not after start {start}")));
        }
        if speaker.is_empty() {
            return Err(malformed("empty speaker label".into()));
        }
        turns.push(Turn {
            start,
            stop,
            speaker: speaker.to_string(),
            words: text.split_whitespace().map(str::to_string).collect(),
        });
    }
    turns.sort_by(|a, b| {
        a.start
            .total_cmp(&b.start)
            .then(a.stop.total_cmp(&b.stop))
            .then_with(|| a.speaker.cmp(&b.speaker))
            .then_with(|| a.words.cmp(&b.words))
    });
    let mut last_stop: std::collections::HashMap<&str, f64> = Default::default();
    for t in &turns {
        if let Some(&prev) = last_stop.get(t.speaker.as_str()) {
            if t.start < prev {
                return Err(AudioError::NonMonotonicTimes {
                    speaker: t.speaker.clone(),
                    start: t.start,
                });
            }
        }
        last_stop.insert(&t.speaker, t.stop);
    }
    Ok(TranscriptTable { turns })
}

fn line_is_header(first_field: &str) -> bool {
    first_field.parse::<f64>().is_err() && first_field.to_ascii_lowercase().contains("start")
}

/// A kept turn and where its audio landed in the concatenated output.
#[derive(Debug, Clone, PartialEq)]
pub struct PlacedTurn {
    pub words: Vec<String>,
    /// Offset of the turn in the concatenated buffer, seconds.
    pub offset: f64,
    pub duration: f64,
}

#[derive(Debug, Clone)]
pub struct SpeakerSpeech {
    pub audio: AudioBuffer,
    pub turns: Vec<PlacedTurn>,
}

/// Tolerated overrun of a turn past the end of the audio before it is an error.
pub const TURN_OVERRUN_TOLERANCE_S: f64 = 0.010;

/// Concatenates, in temporal order, the audio of every turn whose speaker
/// exactly matches `speaker`. Boundaries round to the nearest sample.
pub fn extract_speaker(
    audio: &AudioBuffer,
    transcript: &TranscriptTable,
    speaker: &str,
) -> Result<AudioBuffer> {
    extract_speaker_turns(audio, transcript, speaker).map(|s| s.audio)
}

/// Like [`extract_speaker`] but also reports each kept turn's placement in
/// the output, which is what word-level alignment needs.
pub fn extract_speaker_turns(
    audio: &AudioBuffer,
    transcript: &TranscriptTable,
    speaker: &str,
) -> Result<SpeakerSpeech> {
    let sr = audio.sample_rate as f64;
    let len = audio.len();
    let tolerance = (TURN_OVERRUN_TOLERANCE_S * sr).round() as usize;
    let mut out = Vec::new();
    let mut placed = Vec::new();
    let mut matched = false;
    for t in transcript.turns.iter().filter(|t| t.speaker == speaker) {
        matched = true;
        let start = (t.start * sr).round() as usize;
        let mut end = (t.stop * sr).round() as usize;
        if end > len {
            if end - len > tolerance {
                return Err(AudioError::TurnOutOfRange {
                    start: t.start,
                    stop: t.stop,
                    duration: audio.duration(),
                });
            }
            end = len;
        }
        if start >= end {
            continue;
        }
        placed.push(PlacedTurn {
            words: t.words.clone(),
            offset: out.len() as f64 / sr,
            duration: (end - start) as f64 / sr,
        });
        out.extend_from_slice(&audio.samples[start..end]);
    }
    if !matched {
        return Err(AudioError::EmptySpeech(speaker.to_string()));
    }
    Ok(SpeakerSpeech {
        audio: AudioBuffer {
            sample_rate: audio.sample_rate,
            samples: out,
        },
        turns: placed,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, Deserialize)]
pub struct RecordingEntry {
    pub id: String,
    pub audio_path: String,
    pub transcript_path: String,
    pub phq8_score: u8,
    pub phq8_binary: u8,
}

#[derive(Deserialize)]
struct RawEntry {
    id: String,
    audio_path: String,
    transcript_path: String,
    phq8_score: String,
    phq8_binary: String,
}

/// Parses the comma-separated recording manifest
/// (`id,audio_path,transcript_path,phq8_score,phq8_binary`).
pub fn parse_manifest(text: &str) -> Result<Vec<RecordingEntry>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut seen = HashSet::new();
    let mut entries = Vec::new();
    for record in reader.deserialize::<RawEntry>() {
        let record = record.map_err(|e| AudioError::MalformedRow {
            line: e.position().map(|p| p.line() as usize).unwrap_or(0),
            reason: e.to_string(),
        })?;
        // Header is line 1; data rows follow in order.
        let line = entries.len() + 2;
        let malformed = |reason: String| AudioError::MalformedRow { line, reason };
        if record.id.is_empty() {
            return Err(malformed("empty id".into()));
        }
        let score: i64 = record
            .phq8_score
            .parse()
            .map_err(|_| malformed(format!("bad phq8_score {:?}", record.phq8_score)))?;
        if !(0..=23).contains(&score) {
            return Err(AudioError::ScoreOutOfRange { line, score });
        }
        let binary = match record.phq8_binary.as_str() {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(malformed(format!(
                    "phq8_binary must be 0 or 1, got {other:?}"
                )))
            }
        };
        if !seen.insert(record.id.clone()) {
            return Err(malformed(format!("duplicate id {:?}", record.id)));
        }
        entries.push(RecordingEntry {
            id: record.id,
            audio_path: record.audio_path,
            transcript_path: record.transcript_path,
            phq8_score: score as u8,
            phq8_binary: binary,
        });
    }
    Ok(entries)
}
