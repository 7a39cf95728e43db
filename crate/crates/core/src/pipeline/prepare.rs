use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::PipelineConfig;
use super::{io_err, read_bytes, read_text, with_workers, write_file, PipelineError, Result};
use crate::audio::{
    extract_speaker_turns, parse_manifest, parse_transcript, read_wav_from, AudioBuffer,
    RecordingEntry, TranscriptTable,
};
use crate::phoneme::{
    align_turns, parse_lexicon, spans_to_tsv, split_streams, Lexicon, PhonemeSpan, StreamPair,
    UniformAligner,
};
use crate::voicing::{analyze, track_to_tsv, FrameFeatures, VoicingTrack};

const CLIPS_MAGIC: &str = "vowelcons-clips 1";

/// Result of running the front end on one recording.
#[derive(Debug, Clone)]
pub struct Processed {
    pub streams: StreamPair,
    pub spans: Vec<PhonemeSpan>,
    pub track: VoicingTrack,
    pub features: Vec<FrameFeatures>,
    pub words: usize,
    pub out_of_vocabulary: usize,
}

/// Speaker extraction, voicing, alignment and stream separation.
pub fn process_recording(
    audio: &AudioBuffer,
    transcript: &TranscriptTable,
    lexicon: &Lexicon,
    cfg: &PipelineConfig,
) -> Result<Processed> {
    if audio.sample_rate() != cfg.sample_rate {
        return Err(PipelineError::Config(format!(
            "audio is {} Hz, configuration expects {} Hz",
            audio.sample_rate(),
            cfg.sample_rate
        )));
    }
    let speech = extract_speaker_turns(audio, transcript, &cfg.speaker)?;
    if speech.audio.is_empty() {
        return Err(PipelineError::EmptySpeech(format!(
            "{} turns contain no audio",
            cfg.speaker
        )));
    }
    let (track, features) = analyze(&speech.audio, &cfg.voicing)?;
    if track.voiced_count() == 0 {
        return Err(PipelineError::EmptySpeech(format!(
            "none of the {} frames of {} speech is voiced",
            track.labels.len(),
            cfg.speaker
        )));
    }
    let aligner = UniformAligner::new(&track);
    let alignment = align_turns(&speech.turns, lexicon, &aligner)?;
    let streams = split_streams(&speech.audio, &alignment.spans)?;
    Ok(Processed {
        streams,
        spans: alignment.spans,
        track,
        features,
        words: alignment.words,
        out_of_vocabulary: alignment.out_of_vocabulary,
    })
}

pub fn encode_clips(streams: &StreamPair, sample_rate: u32) -> Vec<u8> {
    let mut out = format!(
        "{CLIPS_MAGIC}\n{sample_rate} {} {}\n",
        streams.vowel_clips.len(),
        streams.consonant_clips.len()
    )
    .into_bytes();
    for clip in streams.vowel_clips.iter().chain(&streams.consonant_clips) {
        out.extend_from_slice(&(clip.len() as u64).to_le_bytes());
        for s in clip.samples() {
            out.extend_from_slice(&s.to_le_bytes());
        }
    }
    out
}

pub fn decode_clips(bytes: &[u8], path: &Path) -> Result<StreamPair> {
    let corrupt = |reason: &str| PipelineError::CorruptStore {
        path: path.to_path_buf(),
        reason: reason.into(),
    };
    let mut lines = bytes.splitn(3, |&b| b == b'\n');
    if lines.next() != Some(CLIPS_MAGIC.as_bytes()) {
        return Err(corrupt("bad magic"));
    }
    let header = std::str::from_utf8(lines.next().ok_or_else(|| corrupt("missing header"))?)
        .map_err(|_| corrupt("header is not text"))?;
    let nums: Vec<u64> = header
        .split_whitespace()
        .map(|s| s.parse().map_err(|_| corrupt("bad header number")))
        .collect::<Result<_>>()?;
    let [sr, nv, nc] = nums[..] else {
        return Err(corrupt("header needs three numbers"));
    };
    let mut body = lines.next().unwrap_or(&[]);
    let mut take = |n: usize| -> Result<&[u8]> {
        if body.len() < n {
            return Err(corrupt("truncated"));
        }
        let (head, rest) = body.split_at(n);
        body = rest;
        Ok(head)
    };
    let mut clips = Vec::with_capacity((nv + nc) as usize);
    for _ in 0..nv + nc {
        let len = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
        let raw = take(
            len.checked_mul(4)
                .ok_or_else(|| corrupt("length overflow"))?,
        )?;
        let samples = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        clips.push(AudioBuffer::new(sr as u32, samples).map_err(|e| corrupt(&e.to_string()))?);
    }
    if !body.is_empty() {
        return Err(corrupt("trailing bytes"));
    }
    let consonant_clips = clips.split_off(nv as usize);
    Ok(StreamPair {
        vowel_clips: clips,
        consonant_clips,
    })
}

/// Content hash of everything the prepare stage reads for one recording.
pub fn cache_key(cfg: &PipelineConfig, lexicon: &[u8], audio: &[u8], transcript: &[u8]) -> String {
    let voicing = toml::to_string(&cfg.voicing).expect("voicing config serializes");
    let mut h = Sha256::new();
    for part in [
        b"prepare 1".as_slice(),
        voicing.as_bytes(),
        cfg.speaker.as_bytes(),
        &cfg.sample_rate.to_le_bytes(),
        lexicon,
        audio,
        transcript,
    ] {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part);
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreparedEntry {
    pub id: String,
    pub key: String,
    pub vowel_clips: usize,
    pub consonant_clips: usize,
    pub words: usize,
    pub out_of_vocabulary: usize,
    pub cached: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PrepareSummary {
    pub recordings: usize,
    pub cache_hits: usize,
    pub prepared: Vec<PreparedEntry>,
    pub failures: Vec<Failure>,
}

impl PrepareSummary {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("summary serializes")
    }
}

pub(crate) fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_relative() {
        base.join(p)
    } else {
        p.to_path_buf()
    }
}

pub(crate) fn load_manifest(cfg: &PipelineConfig) -> Result<(Vec<RecordingEntry>, PathBuf)> {
    let text = read_text(&cfg.paths.manifest)?;
    let entries = parse_manifest(&text)?;
    for e in &entries {
        if e.id.is_empty()
            || !e
                .id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
            || e.id.starts_with('.')
        {
            return Err(PipelineError::Config(format!(
                "recording id {:?} must be non-empty ASCII letters, digits, '-', '_' or '.'",
                e.id
            )));
        }
    }
    let base = cfg
        .paths
        .manifest
        .parent()
        .unwrap_or(Path::new("."))
        .to_path_buf();
    Ok((entries, base))
}

pub(crate) fn recording_dir(cfg: &PipelineConfig, id: &str) -> PathBuf {
    cfg.prepare_dir().join(id)
}

pub(crate) fn recording_key(
    cfg: &PipelineConfig,
    lexicon: &[u8],
    base: &Path,
    e: &RecordingEntry,
) -> Result<String> {
    let audio = read_bytes(&resolve(base, &e.audio_path))?;
    let transcript = read_bytes(&resolve(base, &e.transcript_path))?;
    Ok(cache_key(cfg, lexicon, &audio, &transcript))
}

fn prepare_one(
    cfg: &PipelineConfig,
    lexicon_bytes: &[u8],
    lexicon: &Lexicon,
    base: &Path,
    e: &RecordingEntry,
) -> Result<PreparedEntry> {
    let audio_bytes = read_bytes(&resolve(base, &e.audio_path))?;
    let transcript_bytes = read_bytes(&resolve(base, &e.transcript_path))?;
    let key = cache_key(cfg, lexicon_bytes, &audio_bytes, &transcript_bytes);
    let dir = recording_dir(cfg, &e.id);
    let key_path = dir.join("key");
    let clips_path = dir.join("clips.bin");
    if std::fs::read_to_string(&key_path).ok().as_deref() == Some(key.as_str())
        && clips_path.is_file()
    {
        let streams = decode_clips(&read_bytes(&clips_path)?, &clips_path)?;
        let stats = read_text(&dir.join("stats.toml"))?;
        let mut entry: PreparedEntry =
            toml::from_str(&stats).map_err(|e| PipelineError::CorruptStore {
                path: dir.join("stats.toml"),
                reason: e.to_string(),
            })?;
        if (entry.vowel_clips, entry.consonant_clips)
            != (streams.vowel_clips.len(), streams.consonant_clips.len())
        {
            return Err(PipelineError::CorruptStore {
                path: clips_path,
                reason: "clip counts disagree with stats".into(),
            });
        }
        entry.cached = true;
        return Ok(entry);
    }
    let audio = read_wav_from(std::io::Cursor::new(&audio_bytes))?;
    let transcript_text = String::from_utf8(transcript_bytes)
        .map_err(|_| PipelineError::Config(format!("transcript of {} is not UTF-8", e.id)))?;
    let transcript = parse_transcript(&transcript_text)?;
    let p = process_recording(&audio, &transcript, lexicon, cfg)?;
    let entry = PreparedEntry {
        id: e.id.clone(),
        key: key.clone(),
        vowel_clips: p.streams.vowel_clips.len(),
        consonant_clips: p.streams.consonant_clips.len(),
        words: p.words,
        out_of_vocabulary: p.out_of_vocabulary,
        cached: false,
    };
    // The key is written last so an interrupted run never looks cached.
    let _ = std::fs::remove_file(&key_path);
    write_file(&dir.join("spans.tsv"), spans_to_tsv(&p.spans))?;
    write_file(
        &dir.join("voicing.tsv"),
        track_to_tsv(&p.track, &p.features),
    )?;
    write_file(&clips_path, encode_clips(&p.streams, audio.sample_rate()))?;
    write_file(
        &dir.join("stats.toml"),
        toml::to_string(&entry).expect("entry serializes"),
    )?;
    write_file(&key_path, &key)?;
    Ok(entry)
}

/// Runs the front end on every manifest recording, reusing stored results
/// whose cache key still matches. Fails only when every recording fails.
pub fn cmd_prepare(cfg: &PipelineConfig) -> Result<PrepareSummary> {
    let (entries, base) = load_manifest(cfg)?;
    let lexicon_bytes = read_bytes(&cfg.paths.lexicon)?;
    let lexicon_text = String::from_utf8(lexicon_bytes.clone())
        .map_err(|_| PipelineError::Config("lexicon is not UTF-8".into()))?;
    let lexicon = parse_lexicon(&lexicon_text)?;
    std::fs::create_dir_all(cfg.prepare_dir()).map_err(io_err(&cfg.prepare_dir()))?;
    let outcomes: Vec<(String, Result<PreparedEntry>)> = with_workers(cfg.workers, || {
        entries
            .par_iter()
            .map(|e| {
                (
                    e.id.clone(),
                    prepare_one(cfg, &lexicon_bytes, &lexicon, &base, e),
                )
            })
            .collect()
    })?;
    let mut summary = PrepareSummary {
        recordings: entries.len(),
        ..PrepareSummary::default()
    };
    for (id, outcome) in outcomes {
        match outcome {
            Ok(entry) => {
                summary.cache_hits += usize::from(entry.cached);
                summary.prepared.push(entry);
            }
            Err(err) => {
                warn!("recording {id} failed: {err}");
                summary.failures.push(Failure {
                    id,
                    error: err.to_string(),
                });
            }
        }
    }
    write_file(&cfg.prepare_dir().join("report.toml"), summary.to_toml())?;
    info!(
        "prepared {} of {} recordings ({} from cache)",
        summary.prepared.len(),
        summary.recordings,
        summary.cache_hits
    );
    if summary.prepared.is_empty() && !entries.is_empty() {
        return Err(PipelineError::AllRecordingsFailed(entries.len()));
    }
    Ok(summary)
}

pub(crate) fn load_summary(cfg: &PipelineConfig) -> Result<PrepareSummary> {
    let path = cfg.prepare_dir().join("report.toml");
    if !path.is_file() {
        return Err(PipelineError::MissingStage("prepare", path));
    }
    toml::from_str(&read_text(&path)?).map_err(|e| PipelineError::CorruptStore {
        path,
        reason: e.to_string(),
    })
}

/// Clips of a prepared recording, after checking they are still current.
pub(crate) fn load_prepared(
    cfg: &PipelineConfig,
    entry: &PreparedEntry,
    current_key: &str,
) -> Result<StreamPair> {
    let dir = recording_dir(cfg, &entry.id);
    let stored = std::fs::read_to_string(dir.join("key")).unwrap_or_default();
    if stored != current_key {
        return Err(PipelineError::MissingStage(
            "prepare (inputs or voicing settings changed)",
            dir,
        ));
    }
    let path = dir.join("clips.bin");
    decode_clips(&read_bytes(&path)?, &path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_bundle_round_trip() {
        let streams = StreamPair {
            vowel_clips: vec![
                AudioBuffer::new(16000, vec![0.5, -0.25]).unwrap(),
                AudioBuffer::new(16000, vec![]).unwrap(),
            ],
            consonant_clips: vec![AudioBuffer::new(16000, vec![1.0, -1.0, 0.125]).unwrap()],
        };
        let bytes = encode_clips(&streams, 16000);
        assert_eq!(decode_clips(&bytes, Path::new("x")).unwrap(), streams);
        assert!(decode_clips(&bytes[..bytes.len() - 2], Path::new("x")).is_err());
        assert!(decode_clips(b"nope\n", Path::new("x")).is_err());
    }

    #[test]
    fn key_tracks_voicing_settings() {
        let mut cfg = PipelineConfig::from_toml(
            "[paths]\nmanifest = \"m\"\nlexicon = \"l\"\nwork_dir = \"w\"\n",
            Path::new("."),
        )
        .unwrap();
        let a = cache_key(&cfg, b"lex", b"audio", b"tr");
        assert_eq!(a, cache_key(&cfg, b"lex", b"audio", b"tr"));
        assert_ne!(a, cache_key(&cfg, b"lex", b"audio", b"tr2"));
        cfg.voicing.vuc = 0.2;
        assert_ne!(a, cache_key(&cfg, b"lex", b"audio", b"tr"));
        cfg.voicing.vuc = 0.14;
        cfg.train.learning_rate = 0.5;
        cfg.augment.seed = 3;
        assert_eq!(a, cache_key(&cfg, b"lex", b"audio", b"tr"));
    }
}
