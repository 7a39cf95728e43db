use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{PipelineConfig, Task};
use super::prepare::{load_manifest, load_prepared, load_summary, recording_key};
use super::{
    io_err, read_bytes, read_text, recording_seed, with_workers, write_file, PipelineError, Result,
};
use crate::audio::AudioBuffer;
use crate::augment::{augment_set, AugmentConfig, LabeledClip, Origin};
use crate::nn::split::DEFAULT_RATIOS;
use crate::nn::{split_dataset, Sample, StreamMode, Tensor};
use crate::spectrogram::{power_spectrogram, to_model_inputs, InputTensor, SpectrogramConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        Split::ALL.into_iter().find(|x| x.as_str() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stream {
    Vowel,
    Consonant,
}

impl Stream {
    pub fn as_str(self) -> &'static str {
        match self {
            Stream::Vowel => "vowel",
            Stream::Consonant => "consonant",
        }
    }

    fn parse(s: &str) -> Option<Stream> {
        match s {
            "vowel" => Some(Stream::Vowel),
            "consonant" => Some(Stream::Consonant),
            _ => None,
        }
    }
}

/// One stored spectrogram chunk.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkRecord {
    pub recording: String,
    pub split: Split,
    pub stream: Stream,
    pub chunk: usize,
    pub origin: Origin,
    /// Offset of the tensor in the data file, in values.
    pub offset: u64,
    pub binary: u8,
    pub score: u8,
}

impl ChunkRecord {
    pub fn label(&self, task: Task) -> usize {
        match task {
            Task::Binary => self.binary as usize,
            Task::Severity => self.score as usize,
        }
    }
}

const INDEX_HEADER: &str = "recording\tsplit\tstream\tchunk\torigin\toffset\tbinary\tscore";

/// Spectrogram chunks of every recording grouped by origin, in the fixed
/// order original, noise copies, pitch copies.
pub fn stream_chunks(
    clips: &[AudioBuffer],
    augment: Option<&AugmentConfig>,
    spec: &SpectrogramConfig,
    sample_rate: u32,
) -> Result<Vec<(Origin, Vec<InputTensor>)>> {
    let labeled: Vec<LabeledClip<()>> = clips
        .iter()
        .map(|c| LabeledClip {
            clip: c.clone(),
            label: (),
        })
        .collect();
    let mut groups: Vec<(Origin, Vec<AudioBuffer>)> = vec![(Origin::Original, clips.to_vec())];
    if let Some(aug) = augment {
        for &a in &aug.noise_alphas {
            groups.push((Origin::Noise(a), Vec::new()));
        }
        for &s in &aug.pitch_semitones_down {
            groups.push((Origin::Pitch(s), Vec::new()));
        }
        for c in augment_set(&labeled, aug)
            .into_iter()
            .filter(|c| !c.origin.is_original())
        {
            let slot = groups
                .iter_mut()
                .find(|g| g.0 == c.origin)
                .expect("origin listed");
            slot.1.push(c.clip);
        }
    }
    groups
        .into_iter()
        .map(|(origin, clips)| {
            let joined = AudioBuffer::concat(sample_rate, &clips);
            let chunks = if joined.len() < spec.window_len {
                Vec::new()
            } else {
                to_model_inputs(&power_spectrogram(&joined, spec)?, spec)
            };
            Ok((origin, chunks))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SplitSummary {
    pub recordings: usize,
    pub pairs: usize,
    pub vowel_chunks: usize,
    pub consonant_chunks: usize,
    pub augmented_chunks: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BuildSummary {
    pub rows: usize,
    pub cols: usize,
    pub skipped_failed: Vec<String>,
    pub train: SplitSummary,
    pub val: SplitSummary,
    pub test: SplitSummary,
}

impl BuildSummary {
    pub fn split(&self, s: Split) -> &SplitSummary {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    fn split_mut(&mut self, s: Split) -> &mut SplitSummary {
        match s {
            Split::Train => &mut self.train,
            Split::Val => &mut self.val,
            Split::Test => &mut self.test,
        }
    }
}

struct Built {
    id: String,
    split: Split,
    binary: u8,
    score: u8,
    streams: Vec<(Stream, Vec<(Origin, Vec<InputTensor>)>)>,
}

/// Splits prepared recordings, augments the training split, and writes the
/// chunk store.
pub fn cmd_build(cfg: &PipelineConfig) -> Result<BuildSummary> {
    let (entries, base) = load_manifest(cfg)?;
    let summary = load_summary(cfg)?;
    let lexicon = read_bytes(&cfg.paths.lexicon)?;
    let prepared: BTreeMap<&str, _> = summary
        .prepared
        .iter()
        .map(|p| (p.id.as_str(), p))
        .collect();
    let failed: BTreeSet<&str> = summary.failures.iter().map(|f| f.id.as_str()).collect();
    let mut usable = Vec::new();
    let mut skipped_failed = Vec::new();
    for e in &entries {
        if let Some(p) = prepared.get(e.id.as_str()) {
            usable.push((e, *p));
        } else if failed.contains(e.id.as_str()) {
            skipped_failed.push(e.id.clone());
        } else {
            return Err(PipelineError::MissingStage(
                "prepare",
                cfg.prepare_dir().join(&e.id),
            ));
        }
    }
    usable.sort_by(|a, b| a.0.id.cmp(&b.0.id));
    let ids: Vec<&str> = usable.iter().map(|u| u.0.id.as_str()).collect();
    let split = split_dataset(&ids, DEFAULT_RATIOS, cfg.seed)?;
    let mut assignment: BTreeMap<&str, Split> = BTreeMap::new();
    for (s, list) in [
        (Split::Train, &split.train),
        (Split::Val, &split.val),
        (Split::Test, &split.test),
    ] {
        for id in list {
            if assignment.insert(id, s).is_some() {
                return Err(PipelineError::Leakage(format!(
                    "recording {id} assigned to two splits"
                )));
            }
        }
    }

    let dir = cfg.build_dir();
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let data_path = dir.join("chunks.f32");
    let mut data = BufWriter::new(File::create(&data_path).map_err(io_err(&data_path))?);
    let mut index = String::from(INDEX_HEADER);
    index.push('\n');
    let mut offset = 0u64;
    let mut out = BuildSummary {
        rows: cfg.spectrogram.kept_bins,
        cols: cfg.spectrogram.chunk_frames,
        skipped_failed,
        ..BuildSummary::default()
    };

    // Bounded batches keep memory flat while output order stays fixed.
    let batch = if cfg.workers == 0 {
        rayon::current_num_threads()
    } else {
        cfg.workers
    }
    .max(1)
        * 2;
    for group in usable.chunks(batch) {
        let built: Vec<Built> = with_workers(cfg.workers, || {
            group
                .par_iter()
                .map(|(e, p)| {
                    let key = recording_key(cfg, &lexicon, &base, e)?;
                    let streams = load_prepared(cfg, p, &key)?;
                    let s = assignment[e.id.as_str()];
                    let aug = (s == Split::Train).then(|| AugmentConfig {
                        seed: recording_seed(cfg.augment.seed, &e.id),
                        ..cfg.augment.clone()
                    });
                    let mut per_stream = Vec::new();
                    for (stream, clips) in [
                        (Stream::Vowel, &streams.vowel_clips),
                        (Stream::Consonant, &streams.consonant_clips),
                    ] {
                        per_stream.push((
                            stream,
                            stream_chunks(clips, aug.as_ref(), &cfg.spectrogram, cfg.sample_rate)?,
                        ));
                    }
                    Ok(Built {
                        id: e.id.clone(),
                        split: s,
                        binary: e.phq8_binary,
                        score: e.phq8_score,
                        streams: per_stream,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })??;
        for b in built {
            let sum = out.split_mut(b.split);
            sum.recordings += 1;
            let count = |stream: Stream, origin: Origin| {
                b.streams
                    .iter()
                    .find(|s| s.0 == stream)
                    .and_then(|s| s.1.iter().find(|o| o.0 == origin))
                    .map_or(0, |o| o.1.len())
            };
            for (stream, groups) in &b.streams {
                for (origin, chunks) in groups {
                    for (k, t) in chunks.iter().enumerate() {
                        for v in &t.values {
                            data.write_all(&v.to_le_bytes())
                                .map_err(io_err(&data_path))?;
                        }
                        index.push_str(&format!(
                            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                            b.id,
                            b.split.as_str(),
                            stream.as_str(),
                            k,
                            origin.tag(),
                            offset,
                            b.binary,
                            b.score
                        ));
                        offset += t.values.len() as u64;
                    }
                    match stream {
                        Stream::Vowel => sum.vowel_chunks += chunks.len(),
                        Stream::Consonant => sum.consonant_chunks += chunks.len(),
                    }
                    if !origin.is_original() {
                        sum.augmented_chunks += chunks.len();
                    }
                    if *stream == Stream::Vowel {
                        sum.pairs += chunks.len().min(count(Stream::Consonant, *origin));
                    }
                }
            }
        }
    }
    data.flush().map_err(io_err(&data_path))?;
    drop(data);
    write_file(&dir.join("index.tsv"), &index)?;
    let mut split_tsv = String::from("recording\tsplit\n");
    for (id, s) in &assignment {
        split_tsv.push_str(&format!("{id}\t{}\n", s.as_str()));
    }
    write_file(&dir.join("split.tsv"), split_tsv)?;
    write_file(
        &dir.join("summary.toml"),
        toml::to_string(&out).expect("summary serializes"),
    )?;

    let store = load_chunk_store(cfg)?;
    store.check_guards()?;
    for s in Split::ALL {
        if out.split(s).pairs == 0 {
            return Err(PipelineError::EmptySplit(s.as_str().into()));
        }
    }
    info!(
        "built {} / {} / {} chunk pairs (train / val / test)",
        out.train.pairs, out.val.pairs, out.test.pairs
    );
    Ok(out)
}

/// Index of the chunk store plus on-demand tensor access.
#[derive(Debug, Clone)]
pub struct ChunkStore {
    pub rows: usize,
    pub cols: usize,
    pub records: Vec<ChunkRecord>,
    pub splits: BTreeMap<String, Split>,
    data_path: PathBuf,
}

pub fn load_chunk_store(cfg: &PipelineConfig) -> Result<ChunkStore> {
    let dir = cfg.build_dir();
    let index_path = dir.join("index.tsv");
    if !index_path.is_file() {
        return Err(PipelineError::MissingStage("build", index_path));
    }
    let corrupt = |path: &Path, reason: String| PipelineError::CorruptStore {
        path: path.to_path_buf(),
        reason,
    };
    let text = read_text(&index_path)?;
    let mut lines = text.lines();
    if lines.next() != Some(INDEX_HEADER) {
        return Err(corrupt(&index_path, "bad header".into()));
    }
    let mut records = Vec::new();
    for (n, line) in lines.enumerate() {
        let f: Vec<&str> = line.split('\t').collect();
        let parsed = (|| {
            let [rec, split, stream, chunk, origin, offset, binary, score] = f[..] else {
                return None;
            };
            Some(ChunkRecord {
                recording: rec.to_string(),
                split: Split::parse(split)?,
                stream: Stream::parse(stream)?,
                chunk: chunk.parse().ok()?,
                origin: Origin::parse(origin)?,
                offset: offset.parse().ok()?,
                binary: binary.parse().ok()?,
                score: score.parse().ok()?,
            })
        })();
        records.push(parsed.ok_or_else(|| corrupt(&index_path, format!("bad row {}", n + 2)))?);
    }
    let split_path = dir.join("split.tsv");
    let mut splits = BTreeMap::new();
    for (n, line) in read_text(&split_path)?.lines().skip(1).enumerate() {
        let (id, s) = line
            .split_once('\t')
            .and_then(|(id, s)| Some((id, Split::parse(s)?)))
            .ok_or_else(|| corrupt(&split_path, format!("bad row {}", n + 2)))?;
        if splits.insert(id.to_string(), s).is_some() {
            return Err(PipelineError::Leakage(format!(
                "recording {id} listed in two splits"
            )));
        }
    }
    let store = ChunkStore {
        rows: cfg.spectrogram.kept_bins,
        cols: cfg.spectrogram.chunk_frames,
        records,
        splits,
        data_path: dir.join("chunks.f32"),
    };
    let needed = store
        .records
        .iter()
        .map(|r| r.offset + store.tensor_len() as u64)
        .max()
        .unwrap_or(0)
        * 4;
    let have = std::fs::metadata(&store.data_path)
        .map_err(io_err(&store.data_path))?
        .len();
    if have != needed {
        return Err(corrupt(
            &store.data_path,
            format!("holds {have} bytes, index implies {needed} (was the spectrogram configuration changed?)"),
        ));
    }
    Ok(store)
}

/// Chunk pairs or single-stream chunks of one recording, ready for the model.
#[derive(Debug, Clone)]
pub struct RecordingSamples {
    pub id: String,
    pub binary: u8,
    pub score: u8,
    pub samples: Vec<Sample<f32>>,
}

impl ChunkStore {
    pub fn tensor_len(&self) -> usize {
        self.rows * self.cols
    }

    /// No recording in two splits, no augmented chunk outside the training
    /// split, and every chunk tagged with its recording's split.
    pub fn check_guards(&self) -> Result<()> {
        for r in &self.records {
            match self.splits.get(&r.recording) {
                None => {
                    return Err(PipelineError::Leakage(format!(
                        "chunk of unsplit recording {}",
                        r.recording
                    )))
                }
                Some(s) if *s != r.split => {
                    return Err(PipelineError::Leakage(format!(
                        "recording {} appears in {} and {}",
                        r.recording,
                        s.as_str(),
                        r.split.as_str()
                    )))
                }
                _ => {}
            }
            if !r.origin.is_original() && r.split != Split::Train {
                return Err(PipelineError::Leakage(format!(
                    "augmented chunk ({}) of recording {} in split {}",
                    r.origin.tag(),
                    r.recording,
                    r.split.as_str()
                )));
            }
        }
        Ok(())
    }

    fn read_tensor(&self, file: &mut File, r: &ChunkRecord) -> Result<Tensor<f32>> {
        let n = self.tensor_len();
        let mut buf = vec![0u8; n * 4];
        file.seek(SeekFrom::Start(r.offset * 4))
            .map_err(io_err(&self.data_path))?;
        file.read_exact(&mut buf).map_err(io_err(&self.data_path))?;
        let values = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok(Tensor::from_vec(&[1, self.rows, self.cols], values)?)
    }

    /// Samples of every recording in `split`, grouped by recording in id
    /// order. Fusion pairs the k-th vowel chunk with the k-th consonant chunk
    /// of the same recording and origin; single-stream modes use every chunk
    /// of their stream. `originals_only` drops augmented copies.
    pub fn recordings(
        &self,
        split: Split,
        mode: StreamMode,
        task: Task,
        originals_only: bool,
    ) -> Result<Vec<RecordingSamples>> {
        let mut file = File::open(&self.data_path).map_err(io_err(&self.data_path))?;
        let mut by_key: BTreeMap<(&str, Stream, String, usize), &ChunkRecord> = BTreeMap::new();
        for r in self.records.iter().filter(|r| r.split == split) {
            if originals_only && !r.origin.is_original() {
                continue;
            }
            by_key.insert((&r.recording, r.stream, r.origin.tag(), r.chunk), r);
        }
        let mut out: Vec<RecordingSamples> = Vec::new();
        for (&(rec, stream, ref origin, chunk), r) in &by_key {
            let sample = match mode {
                StreamMode::Vowel if stream == Stream::Vowel => Sample {
                    vowel: Some(self.read_tensor(&mut file, r)?),
                    consonant: None,
                    label: r.label(task),
                },
                StreamMode::Consonant if stream == Stream::Consonant => Sample {
                    vowel: None,
                    consonant: Some(self.read_tensor(&mut file, r)?),
                    label: r.label(task),
                },
                StreamMode::Fusion if stream == Stream::Vowel => {
                    let Some(c) = by_key.get(&(rec, Stream::Consonant, origin.clone(), chunk))
                    else {
                        continue;
                    };
                    if c.recording != r.recording {
                        return Err(PipelineError::Leakage(format!(
                            "pair mixes recordings {} and {}",
                            r.recording, c.recording
                        )));
                    }
                    Sample {
                        vowel: Some(self.read_tensor(&mut file, r)?),
                        consonant: Some(self.read_tensor(&mut file, c)?),
                        label: r.label(task),
                    }
                }
                _ => continue,
            };
            if out.last().map(|l| l.id.as_str()) != Some(rec) {
                out.push(RecordingSamples {
                    id: rec.to_string(),
                    binary: r.binary,
                    score: r.score,
                    samples: Vec::new(),
                });
            }
            out.last_mut().expect("pushed").samples.push(sample);
        }
        Ok(out)
    }

    /// Recording ids assigned to `split`, in id order.
    pub fn split_ids(&self, split: Split) -> Vec<&str> {
        self.splits
            .iter()
            .filter(|(_, s)| **s == split)
            .map(|(id, _)| id.as_str())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(len: usize, f: f64) -> AudioBuffer {
        AudioBuffer::from_clamped(
            16000,
            (0..len).map(|i| 0.4 * (2.0 * std::f64::consts::PI * f * i as f64 / 16000.0).sin()),
        )
    }

    #[test]
    fn augmented_stream_has_seven_groups() {
        let spec = SpectrogramConfig {
            chunk_frames: 4,
            ..SpectrogramConfig::default()
        };
        let clips = vec![tone(3000, 200.0), tone(2500, 300.0), tone(1200, 250.0)];
        let aug = AugmentConfig::default();
        let groups = stream_chunks(&clips, Some(&aug), &spec, 16000).unwrap();
        assert_eq!(groups.len(), 7);
        assert!(groups.iter().all(|g| !g.1.is_empty()));
        let plain = stream_chunks(&clips, None, &spec, 16000).unwrap();
        assert_eq!(plain.len(), 1);
        assert_eq!(plain[0].1, groups[0].1);
        assert!(
            stream_chunks(&[tone(100, 200.0)], None, &spec, 16000).unwrap()[0]
                .1
                .is_empty()
        );
    }
}
