//! Pronouncing-dictionary parsing, vowel/consonant classification, phone
//! alignment within word spans, and vowel/consonant stream splitting.

use std::collections::HashMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::audio::{AudioBuffer, PlacedTurn};
use crate::voicing::{voiced_segments, Segment, VoicingTrack};

#[derive(Debug, Error, PartialEq)]
pub enum PhonemeError {
    #[error("unknown phone {0:?}")]
    UnknownPhone(String),
    #[error("line {line}: {reason}")]
    MalformedEntry { line: usize, reason: String },
    #[error("dictionary has no entries")]
    EmptyLexicon,
    #[error("word {0:?} is not in the dictionary")]
    OutOfVocabulary(String),
    #[error("span [{start}, {end}]s outside audio of {duration}s")]
    SpanOutOfRange { start: f64, end: f64, duration: f64 },
    #[error("spans overlap at {0}s")]
    OverlappingSpans(f64),
}

pub const VOWELS: [&str; 15] = [
    "AA", "AE", "AH", "AO", "AW", "AY", "EH", "ER", "EY", "IH", "IY", "OW", "OY", "UH", "UW",
];

pub const CONSONANTS: [&str; 24] = [
    "B", "CH", "D", "DH", "F", "G", "HH", "JH", "K", "L", "M", "N", "NG", "P", "R", "S", "SH", "T",
    "TH", "V", "W", "Y", "Z", "ZH",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PhoneClass {
    Vowel,
    Consonant,
}

impl PhoneClass {
    pub fn as_str(self) -> &'static str {
        match self {
            PhoneClass::Vowel => "vowel",
            PhoneClass::Consonant => "consonant",
        }
    }
}

/// Vowel iff the stress-stripped label is one of the 15 ARPAbet vowels.
/// Stress digits 0–2 are accepted on vowels only.
pub fn classify_phone(label: &str) -> Result<PhoneClass, PhonemeError> {
    let unknown = || PhonemeError::UnknownPhone(label.to_string());
    let (base, stressed) = match label.as_bytes().last() {
        Some(b'0'..=b'2') => (&label[..label.len() - 1], true),
        _ => (label, false),
    };
    if VOWELS.contains(&base) {
        Ok(PhoneClass::Vowel)
    } else if !stressed && CONSONANTS.contains(&base) {
        Ok(PhoneClass::Consonant)
    } else {
        Err(unknown())
    }
}

#[derive(Debug, Clone, Default)]
pub struct Lexicon {
    entries: HashMap<String, Vec<String>>,
}

impl Lexicon {
    pub fn get(&self, word: &str) -> Option<&[String]> {
        self.entries.get(&normalize_word(word)).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Uppercases and strips surrounding punctuation (apostrophes kept).
pub fn normalize_word(word: &str) -> String {
    word.trim_matches(|c: char| !c.is_alphanumeric() && c != '\'')
        .to_uppercase()
}

/// Parses CMU-dictionary text: `WORD PH1 PH2 ...` per line, `;;;` comments.
/// Only the first pronunciation of a word is kept; `WORD(2)` variants are
/// ignored once `WORD` has an entry.
pub fn parse_lexicon(text: &str) -> Result<Lexicon, PhonemeError> {
    let mut entries: HashMap<String, Vec<String>> = HashMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with(";;;") {
            continue;
        }
        let mut tokens = line.split_whitespace();
        let head = tokens.next().unwrap_or_default();
        let word = match head.find('(') {
            Some(p) if head.ends_with(')') => &head[..p],
            _ => head,
        }
        .to_uppercase();
        let phones: Vec<String> = tokens.map(str::to_string).collect();
        if phones.is_empty() {
            return Err(PhonemeError::MalformedEntry {
                line: idx + 1,
                reason: format!("{head} has no phones"),
            });
        }
        for p in &phones {
            classify_phone(p)?;
        }
        entries.entry(word).or_insert(phones);
    }
    if entries.is_empty() {
        return Err(PhonemeError::EmptyLexicon);
    }
    Ok(Lexicon { entries })
}

#[derive(Debug, Clone, PartialEq)]
pub struct WordSpan {
    pub start: f64,
    pub end: f64,
    pub word: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhonemeSpan {
    pub phone: String,
    pub class: PhoneClass,
    pub start: f64,
    pub end: f64,
}

/// Places a word's phones in time. Implementations may use acoustics; the
/// default divides the word span uniformly.
pub trait PhoneAligner {
    fn align(&self, word: &WordSpan, lexicon: &Lexicon) -> Result<Vec<PhonemeSpan>, PhonemeError>;
}

/// Equal-duration phone allocation, then retention by voiced overlap: a
/// phone is kept when at least half of it is voiced, clipped to the bounding
/// interval of its voiced part.
pub struct UniformAligner {
    voiced: Vec<Segment>,
}

impl UniformAligner {
    pub fn new(track: &VoicingTrack) -> Self {
        Self {
            voiced: voiced_segments(track),
        }
    }

    fn voiced_part(&self, start: f64, end: f64) -> Option<(f64, f64, f64)> {
        // Segments are sorted and disjoint.
        let first = self.voiced.partition_point(|s| s.end <= start);
        let mut covered = 0.0;
        let mut bounds: Option<(f64, f64)> = None;
        for s in self.voiced[first..].iter().take_while(|s| s.start < end) {
            let lo = s.start.max(start);
            let hi = s.end.min(end);
            if hi > lo {
                covered += hi - lo;
                bounds = Some(match bounds {
                    None => (lo, hi),
                    Some((a, _)) => (a, hi),
                });
            }
        }
        bounds.map(|(a, b)| (covered, a, b))
    }
}

impl PhoneAligner for UniformAligner {
    fn align(&self, word: &WordSpan, lexicon: &Lexicon) -> Result<Vec<PhonemeSpan>, PhonemeError> {
        let phones = lexicon
            .get(&word.word)
            .ok_or_else(|| PhonemeError::OutOfVocabulary(word.word.clone()))?;
        let step = (word.end - word.start) / phones.len() as f64;
        let mut out = Vec::new();
        for (k, phone) in phones.iter().enumerate() {
            let start = word.start + step * k as f64;
            let end = if k + 1 == phones.len() {
                word.end
            } else {
                word.start + step * (k + 1) as f64
            };
            if end <= start {
                continue;
            }
            if let Some((covered, lo, hi)) = self.voiced_part(start, end) {
                // Exactly half counts as retained.
                if covered >= 0.5 * (end - start) - 1e-12 {
                    out.push(PhonemeSpan {
                        phone: phone.clone(),
                        class: classify_phone(phone)?,
                        start: lo,
                        end: hi,
                    });
                }
            }
        }
        Ok(out)
    }
}

pub fn align_phonemes(
    word: &WordSpan,
    lexicon: &Lexicon,
    track: &VoicingTrack,
) -> Result<Vec<PhonemeSpan>, PhonemeError> {
    UniformAligner::new(track).align(word, lexicon)
}

/// Words of each turn get uniform sub-spans of the turn.
pub fn word_spans(turns: &[PlacedTurn]) -> Vec<WordSpan> {
    let mut out = Vec::new();
    for t in turns {
        if t.words.is_empty() {
            continue;
        }
        let step = t.duration / t.words.len() as f64;
        for (k, w) in t.words.iter().enumerate() {
            out.push(WordSpan {
                start: t.offset + step * k as f64,
                end: if k + 1 == t.words.len() {
                    t.offset + t.duration
                } else {
                    t.offset + step * (k + 1) as f64
                },
                word: w.clone(),
            });
        }
    }
    out
}

#[derive(Debug, Clone, Default)]
pub struct Alignment {
    pub spans: Vec<PhonemeSpan>,
    pub words: usize,
    pub out_of_vocabulary: usize,
}

/// Aligns every word of every turn; unknown words are counted and skipped.
pub fn align_turns(
    turns: &[PlacedTurn],
    lexicon: &Lexicon,
    aligner: &dyn PhoneAligner,
) -> Result<Alignment, PhonemeError> {
    let mut result = Alignment::default();
    for w in word_spans(turns) {
        result.words += 1;
        match aligner.align(&w, lexicon) {
            Ok(spans) => result.spans.extend(spans),
            Err(PhonemeError::OutOfVocabulary(_)) => result.out_of_vocabulary += 1,
            Err(e) => return Err(e),
        }
    }
    Ok(result)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StreamPair {
    pub vowel_clips: Vec<AudioBuffer>,
    pub consonant_clips: Vec<AudioBuffer>,
}

impl StreamPair {
    pub fn clips(&self, class: PhoneClass) -> &[AudioBuffer] {
        match class {
            PhoneClass::Vowel => &self.vowel_clips,
            PhoneClass::Consonant => &self.consonant_clips,
        }
    }

    pub fn total_samples(&self) -> usize {
        self.vowel_clips
            .iter()
            .chain(&self.consonant_clips)
            .map(AudioBuffer::len)
            .sum()
    }
}

fn span_samples(span: &PhonemeSpan, sample_rate: u32) -> (usize, usize) {
    let sr = sample_rate as f64;
    (
        (span.start * sr).round() as usize,
        (span.end * sr).round() as usize,
    )
}

/// Slices each span out of `audio` into the stream of its class, keeping
/// temporal order. Spans that round to zero samples are skipped.
pub fn split_streams(
    audio: &AudioBuffer,
    spans: &[PhonemeSpan],
) -> Result<StreamPair, PhonemeError> {
    let mut order: Vec<&PhonemeSpan> = spans.iter().collect();
    order.sort_by(|a, b| a.start.total_cmp(&b.start));
    let mut pair = StreamPair::default();
    let mut prev_end = 0usize;
    for span in order {
        let (s, e) = span_samples(span, audio.sample_rate());
        if span.start < 0.0 || e > audio.len() {
            return Err(PhonemeError::SpanOutOfRange {
                start: span.start,
                end: span.end,
                duration: audio.duration(),
            });
        }
        if s < prev_end {
            return Err(PhonemeError::OverlappingSpans(span.start));
        }
        prev_end = prev_end.max(e);
        if e <= s {
            continue;
        }
        let clip = audio.slice(s, e);
        match span.class {
            PhoneClass::Vowel => pair.vowel_clips.push(clip),
            PhoneClass::Consonant => pair.consonant_clips.push(clip),
        }
    }
    Ok(pair)
}

/// Tab-separated export: `phone, class, start, end`.
pub fn spans_to_tsv(spans: &[PhonemeSpan]) -> String {
    let mut s = String::from("phone\tclass\tstart\tend\n");
    for p in spans {
        let _ = writeln!(
            s,
            "{}\t{}\t{:.6}\t{:.6}",
            p.phone,
            p.class.as_str(),
            p.start,
            p.end
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lexicon() -> Lexicon {
        parse_lexicon(";;; test dictionary\nHELLO  HH AH0 L OW1\nA  AH0\nA(2)  EY1\nOK  OW2 K EY1\nSEE  S IY1\n")
            .unwrap()
    }

    fn track(labels: Vec<bool>) -> VoicingTrack {
        VoicingTrack {
            labels,
            frame_len: 0.01,
            global_peak: 1.0,
        }
    }

    #[test]
    fn lexicon_format() {
        let lx = lexicon();
        assert_eq!(lx.get("hello").unwrap(), ["HH", "AH0", "L", "OW1"]);
        assert_eq!(lx.get("A").unwrap(), ["AH0"]);
        assert_eq!(lx.len(), 4);
        assert_eq!(
            parse_lexicon(";;; only a comment\n").unwrap_err(),
            PhonemeError::EmptyLexicon
        );
        assert_eq!(
            parse_lexicon("BAD  ZZZ\n").unwrap_err(),
            PhonemeError::UnknownPhone("ZZZ".into())
        );
        assert!(matches!(
            parse_lexicon("LONE\n"),
            Err(PhonemeError::MalformedEntry { line: 1, .. })
        ));
    }

    #[test]
    fn phone_classes() {
        assert_eq!(classify_phone("AA1"), Ok(PhoneClass::Vowel));
        assert_eq!(classify_phone("ER"), Ok(PhoneClass::Vowel));
        assert_eq!(classify_phone("K"), Ok(PhoneClass::Consonant));
        assert_eq!(
            classify_phone("ZZZ"),
            Err(PhonemeError::UnknownPhone("ZZZ".into()))
        );
        assert!(classify_phone("K1").is_err());
        assert!(classify_phone("AA3").is_err());
        assert!(classify_phone("").is_err());
    }

    #[test]
    fn stress_invariance() {
        for v in VOWELS {
            for d in 0..=2 {
                assert_eq!(classify_phone(&format!("{v}{d}")), classify_phone(v));
            }
        }
    }

    fn word(start: f64, end: f64, w: &str) -> WordSpan {
        WordSpan {
            start,
            end,
            word: w.into(),
        }
    }

    #[test]
    fn uniform_alignment() {
        let lx = lexicon();
        let voiced = track(vec![true; 20]);
        let one = align_phonemes(&word(0.0, 0.1, "a"), &lx, &voiced).unwrap();
        assert_eq!(one.len(), 1);
        assert!((one[0].end - one[0].start - 0.1).abs() < 1e-12);

        let two = align_phonemes(&word(0.0, 0.1, "see"), &lx, &voiced).unwrap();
        assert_eq!(two.len(), 2);
        assert!((two[0].end - 0.05).abs() < 1e-12 && (two[1].start - 0.05).abs() < 1e-12);
        assert_eq!(two[0].class, PhoneClass::Consonant);
        assert_eq!(two[1].class, PhoneClass::Vowel);

        let mut labels = vec![true; 5];
        labels.extend(vec![false; 5]);
        let half = align_phonemes(&word(0.0, 0.1, "see"), &lx, &track(labels)).unwrap();
        assert_eq!(half.len(), 1);
        assert_eq!(half[0].phone, "S");

        assert_eq!(
            align_phonemes(&word(0.0, 0.1, "zebra"), &lx, &voiced),
            Err(PhonemeError::OutOfVocabulary("zebra".into()))
        );
    }

    #[test]
    fn partial_voicing_is_clipped_and_half_is_kept() {
        let lx = lexicon();
        // Phone "A" over [0, 0.1): voiced frames 2..7 → 50% voiced, clipped.
        let labels: Vec<bool> = (0..10).map(|i| (2..7).contains(&i)).collect();
        let out = align_phonemes(&word(0.0, 0.1, "a"), &lx, &track(labels)).unwrap();
        assert_eq!(out.len(), 1);
        assert!((out[0].start - 0.02).abs() < 1e-12 && (out[0].end - 0.07).abs() < 1e-12);
        let labels: Vec<bool> = (0..10).map(|i| (2..6).contains(&i)).collect();
        assert!(align_phonemes(&word(0.0, 0.1, "a"), &lx, &track(labels))
            .unwrap()
            .is_empty());
    }

    #[test]
    fn turns_with_unknown_words() {
        let lx = lexicon();
        let turns = vec![PlacedTurn {
            words: vec!["Hello,".into(), "[laughter]".into(), "ok".into()],
            offset: 0.0,
            duration: 0.3,
        }];
        let aligner = UniformAligner::new(&track(vec![true; 30]));
        let a = align_turns(&turns, &lx, &aligner).unwrap();
        assert_eq!(a.words, 3);
        assert_eq!(a.out_of_vocabulary, 1);
        assert_eq!(a.spans.len(), 7);
        let vowels = a
            .spans
            .iter()
            .filter(|s| s.class == PhoneClass::Vowel)
            .count();
        assert_eq!(vowels, 4);
    }

    fn span(start: f64, end: f64, phone: &str) -> PhonemeSpan {
        PhonemeSpan {
            phone: phone.into(),
            class: classify_phone(phone).unwrap(),
            start,
            end,
        }
    }

    #[test]
    fn stream_splitting() {
        let audio = AudioBuffer::from_clamped(1000, (0..1000).map(|i| i as f64 / 1000.0));
        let all_vowels =
            split_streams(&audio, &[span(0.0, 0.1, "AA1"), span(0.2, 0.3, "IY0")]).unwrap();
        assert!(all_vowels.consonant_clips.is_empty());
        assert_eq!(all_vowels.vowel_clips.len(), 2);

        let parts = [
            span(0.1, 0.2, "AA1"),
            span(0.2, 0.25, "K"),
            span(0.25, 0.4, "IY1"),
        ];
        let pair = split_streams(&audio, &parts).unwrap();
        assert_eq!(pair.total_samples(), 300);
        assert_eq!(pair.vowel_clips.len(), 2);
        assert_eq!(pair.vowel_clips[0].samples()[0], audio.samples()[100]);
        assert_eq!(pair.vowel_clips[1].samples()[0], audio.samples()[250]);

        assert!(matches!(
            split_streams(&audio, &[span(0.9, 1.2, "K")]),
            Err(PhonemeError::SpanOutOfRange { .. })
        ));
        assert!(matches!(
            split_streams(&audio, &[span(0.1, 0.3, "K"), span(0.2, 0.4, "AA1")]),
            Err(PhonemeError::OverlappingSpans(_))
        ));
    }

    #[test]
    fn span_tsv() {
        let tsv = spans_to_tsv(&[span(0.0, 0.05, "K")]);
        assert_eq!(tsv.lines().nth(1), Some("K\tconsonant\t0.000000\t0.050000"));
    }

    proptest! {
        #[test]
        fn fully_voiced_word_keeps_every_phone(w in prop::sample::select(vec!["hello", "a", "ok", "see"]), start in 0.0f64..1.0, len in 0.05f64..0.5) {
            let lx = lexicon();
            let tr = track(vec![true; 200]);
            let spans = align_phonemes(&word(start, start + len, w), &lx, &tr).unwrap();
            prop_assert_eq!(spans.len(), lx.get(w).unwrap().len());
            for s in &spans {
                prop_assert!(s.start >= start - 1e-12 && s.end <= start + len + 1e-12);
                prop_assert!(s.end <= tr.duration() + 1e-12);
            }
        }

        #[test]
        fn splitting_conserves_samples(cuts in prop::collection::btree_set(1usize..999, 1..12), classes in prop::collection::vec(any::<bool>(), 12)) {
            let audio = AudioBuffer::from_clamped(1000, (0..1000).map(|i| (i as f64 * 0.1).sin()));
            let bounds: Vec<usize> = std::iter::once(0).chain(cuts).chain(std::iter::once(1000)).collect();
            let spans: Vec<PhonemeSpan> = bounds
                .windows(2)
                .zip(&classes)
                .map(|(w, &v)| span(w[0] as f64 / 1000.0, w[1] as f64 / 1000.0, if v { "AE1" } else { "S" }))
                .collect();
            let pair = split_streams(&audio, &spans).unwrap();
            let expected: usize = spans.iter().map(|s| {
                let (a, b) = span_samples(s, 1000);
                b - a
            }).sum();
            prop_assert_eq!(pair.total_samples(), expected);
        }
    }
}
