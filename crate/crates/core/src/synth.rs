//! Synthetic interview corpus for tests, demos and the learning check.
//!
//! Each recording alternates interviewer and participant turns. Participant
//! words are rendered phone by phone with equal durations, so the uniform
//! aligner recovers the true phone boundaries. Vowels are harmonic tones and
//! consonants are a voiced buzz plus band-limited noise; the two classes
//! differ in pitch range, spectral tilt and noise band.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::{write_wav, AudioBuffer, AudioError};
use crate::phoneme::{classify_phone, PhoneClass};

/// Dictionary of the corpus. `HMM` is spoken but deliberately missing.
pub const LEXICON: &str = ";;; synthetic corpus dictionary
NO  N OW1
MAYBE  M EY1 B IY0
LINE  L AY1 N
MONEY  M AH1 N IY0
NEVER  N EH1 V ER0
ALONE  AH0 L OW1 N
WORRY  W ER1 IY0
LONELY  L OW1 N L IY0
REMEMBER  R IH0 M EH1 M B ER0
MORNING  M AO1 R N IH0 NG
YEAH  Y AE1
WELL  W EH1 L
";

const WORDS: [&str; 12] = [
    "NO", "MAYBE", "LINE", "MONEY", "NEVER", "ALONE", "WORRY", "LONELY", "REMEMBER", "MORNING",
    "YEAH", "WELL",
];
const OOV_WORD: &str = "HMM";

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub recordings: usize,
    /// Participant turns per recording.
    pub turns: usize,
    pub words_per_turn: usize,
    /// Duration of every participant word, seconds.
    pub word_seconds: f64,
    pub sample_rate: u32,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            recordings: 12,
            turns: 4,
            words_per_turn: 8,
            word_seconds: 0.4,
            sample_rate: 16000,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthRecording {
    pub id: String,
    pub binary: u8,
    pub score: u8,
    pub audio: AudioBuffer,
    pub transcript: String,
}

/// Paths of a corpus written to disk.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub dir: PathBuf,
    pub manifest: PathBuf,
    pub lexicon: PathBuf,
    pub recordings: Vec<SynthRecording>,
}

struct Voice {
    f0: f64,
    /// Harmonic amplitude falls as `h^-tilt`.
    tilt: f64,
    noise_lo: f64,
    noise_hi: f64,
}

fn voice(class: u8, rng: &mut ChaCha8Rng) -> Voice {
    if class == 0 {
        Voice {
            f0: rng.gen_range(185.0..235.0),
            tilt: rng.gen_range(0.6..0.9),
            noise_lo: 3000.0,
            noise_hi: 5000.0,
        }
    } else {
        Voice {
            f0: rng.gen_range(95.0..135.0),
            tilt: rng.gen_range(1.6..2.0),
            noise_lo: 800.0,
            noise_hi: 1800.0,
        }
    }
}

/// Formant pair of a vowel, keyed on its first letter so that every vowel
/// has a stable colour.
fn formants(phone: &str) -> (f64, f64) {
    match phone.as_bytes()[0] {
        b'A' => (750.0, 1200.0),
        b'E' => (550.0, 1800.0),
        b'I' => (350.0, 2200.0),
        b'O' => (500.0, 900.0),
        _ => (450.0, 1400.0),
    }
}

fn resonance(f: f64, centre: f64) -> f64 {
    let bw = 0.25 * centre;
    1.0 / (1.0 + ((f - centre) / bw).powi(2))
}

fn harmonic(
    out: &mut [f64],
    sr: f64,
    f0: f64,
    tilt: f64,
    shape: impl Fn(f64) -> f64,
    gain: f64,
    phase: f64,
) {
    let nyq = 0.45 * sr;
    let mut h = 1.0;
    let mut weights = Vec::new();
    while h * f0 < nyq {
        weights.push(h.powf(-tilt) * shape(h * f0));
        h += 1.0;
    }
    let norm: f64 = weights.iter().map(|w| w * w).sum::<f64>().sqrt().max(1e-12);
    for (i, v) in out.iter_mut().enumerate() {
        let t = i as f64 / sr;
        let mut s = 0.0;
        for (k, w) in weights.iter().enumerate() {
            s += w * (2.0 * PI * (k + 1) as f64 * f0 * t + phase * (k + 1) as f64).sin();
        }
        *v += gain * s / norm;
    }
}

/// Noise band-limited by summing random-phase sinusoids across the band.
fn band_noise(out: &mut [f64], sr: f64, lo: f64, hi: f64, gain: f64, rng: &mut ChaCha8Rng) {
    let parts = 24;
    let comps: Vec<(f64, f64)> = (0..parts)
        .map(|_| (rng.gen_range(lo..hi), rng.gen_range(0.0..2.0 * PI)))
        .collect();
    let norm = (parts as f64 / 2.0).sqrt();
    for (i, v) in out.iter_mut().enumerate() {
        let t = i as f64 / sr;
        let s: f64 = comps
            .iter()
            .map(|(f, p)| (2.0 * PI * f * t + p).sin())
            .sum();
        *v += gain * s / norm;
    }
}

fn render_phone(phone: &str, len: usize, sr: f64, v: &Voice, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut out = vec![0.0; len];
    let f0 = v.f0 * rng.gen_range(0.97..1.03);
    let phase = rng.gen_range(0.0..2.0 * PI);
    match classify_phone(phone).expect("lexicon phones are valid") {
        PhoneClass::Vowel => {
            let (f1, f2) = formants(phone);
            harmonic(
                &mut out,
                sr,
                f0,
                v.tilt,
                |f| 0.3 + resonance(f, f1) + 0.7 * resonance(f, f2),
                0.5,
                phase,
            );
        }
        PhoneClass::Consonant => {
            harmonic(&mut out, sr, f0, v.tilt + 1.0, |_| 1.0, 0.3, phase);
            band_noise(&mut out, sr, v.noise_lo, v.noise_hi, 0.08, rng);
        }
    }
    out
}

/// Interviewer speech: a steady tone far from either class's voice.
fn render_interviewer(len: usize, sr: f64) -> Vec<f64> {
    (0..len)
        .map(|i| 0.3 * (2.0 * PI * 330.0 * i as f64 / sr).sin())
        .collect()
}

fn lexicon_phones(word: &str) -> Vec<&'static str> {
    LEXICON
        .lines()
        .find_map(|l| {
            let mut t = l.split_whitespace();
            (t.next() == Some(word)).then(|| t.collect())
        })
        .unwrap_or_default()
}

/// Generates one recording. Labels alternate with the index; scores lie in
/// 0..=9 for class 0 and 10..=23 for class 1.
pub fn synth_recording(cfg: &SynthConfig, index: usize) -> SynthRecording {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let binary = (index % 2) as u8;
    let score = if binary == 0 {
        rng.gen_range(0..=9)
    } else {
        rng.gen_range(10..=23)
    };
    let v = voice(binary, &mut rng);
    let sr = cfg.sample_rate as f64;
    let gap = (0.25 * sr) as usize;
    let mut samples: Vec<f64> = vec![0.0; gap];
    let mut transcript = String::from("start_time\tstop_time\tspeaker\tvalue\n");
    let mut turn = |samples: &mut Vec<f64>, speaker: &str, words: &[&str], audio: Vec<f64>| {
        let start = samples.len() as f64 / sr;
        samples.extend(audio);
        let stop = samples.len() as f64 / sr;
        let _ = writeln!(
            transcript,
            "{start:.6}\t{stop:.6}\t{speaker}\t{}",
            words.join(" ")
        );
        samples.extend(std::iter::repeat(0.0).take(gap));
    };
    let word_len = (cfg.word_seconds * sr).round() as usize;
    for t in 0..cfg.turns {
        turn(
            &mut samples,
            "Ellie",
            &["HOW", "ARE", "YOU"],
            render_interviewer((0.8 * sr) as usize, sr),
        );
        let mut words: Vec<&str> = (0..cfg.words_per_turn)
            .map(|_| WORDS[rng.gen_range(0..WORDS.len())])
            .collect();
        if t == 0 {
            words[0] = OOV_WORD;
        }
        let mut audio = Vec::with_capacity(word_len * words.len());
        for w in &words {
            let phones = if *w == OOV_WORD {
                vec!["M"]
            } else {
                lexicon_phones(w)
            };
            // Phone boundaries match the aligner's uniform split exactly.
            let n = phones.len();
            for (k, p) in phones.iter().enumerate() {
                let a = k * word_len / n;
                let b = (k + 1) * word_len / n;
                audio.extend(render_phone(p, b - a, sr, &v, &mut rng));
            }
        }
        turn(&mut samples, "Participant", &words, audio);
    }
    SynthRecording {
        id: format!("rec{index:03}"),
        binary,
        score,
        audio: AudioBuffer::from_clamped(cfg.sample_rate, samples),
        transcript,
    }
}

pub fn synth_corpus(cfg: &SynthConfig) -> Vec<SynthRecording> {
    (0..cfg.recordings)
        .map(|i| synth_recording(cfg, i))
        .collect()
}

/// Writes audio, transcripts, lexicon and manifest under `dir`.
pub fn write_corpus(dir: &Path, cfg: &SynthConfig) -> Result<SynthCorpus, AudioError> {
    std::fs::create_dir_all(dir.join("audio"))?;
    std::fs::create_dir_all(dir.join("transcripts"))?;
    let recordings = synth_corpus(cfg);
    let mut manifest = String::from("id,audio_path,transcript_path,phq8_score,phq8_binary\n");
    for r in &recordings {
        let audio = format!("audio/{}.wav", r.id);
        let transcript = format!("transcripts/{}.tsv", r.id);
        write_wav(dir.join(&audio), &r.audio, 16)?;
        std::fs::write(dir.join(&transcript), &r.transcript)?;
        let _ = writeln!(
            manifest,
            "{},{audio},{transcript},{},{}",
            r.id, r.score, r.binary
        );
    }
    let lexicon = dir.join("lexicon.dict");
    std::fs::write(&lexicon, LEXICON)?;
    let manifest_path = dir.join("manifest.csv");
    std::fs::write(&manifest_path, manifest)?;
    Ok(SynthCorpus {
        dir: dir.to_path_buf(),
        manifest: manifest_path,
        lexicon,
        recordings,
    })
}

/// A configuration for quick runs on a synthetic corpus: small spectrogram
/// chunks, narrow branches and few epochs.
pub fn quick_config_toml(work_dir: &str) -> String {
    format!(
        "seed = 3
workers = 2

[paths]
manifest = \"manifest.csv\"
lexicon = \"lexicon.dict\"
work_dir = \"{work_dir}\"

[augment]
noise_alphas = [0.01]
pitch_semitones_down = [2.0]

[spectrogram]
window_len = 256
hop = 128
kept_bins = 32
chunk_frames = 32

[branch]
block_filters = [2, 2]
block_conv_counts = [1, 1]
input_rows = 32
input_cols = 32

[fusion]
fc_sizes = [16, 8]

[train]
learning_rate = 0.001
batch_size = 8
max_epochs = 6
patience = 3
"
    )
}
