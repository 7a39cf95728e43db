//! Checkpoint layout: UTF-8 header lines of `key value...`, terminated by a
//! line reading `end`, followed by every parameter tensor as raw
//! little-endian values in `Model::params` order. Tensor shapes are implied
//! by the architecture keys.
//!
//! ```text
//! vowelcons-checkpoint 1
//! dtype f32le
//! stream fusion
//! block_filters 64 128 256 512 512
//! block_conv_counts 2 2 3 3 3
//! kernel 3
//! input 128 128
//! fc_sizes 1024 256
//! n_classes 2
//! seed 42
//! epoch 17
//! metric val_loss 0.1234
//! tensors 40
//! end
//! ```

use std::io::{BufRead, Write};
use std::path::Path;

use super::model::{BranchConfig, FusionConfig, Model, ModelConfig, StreamMode};
use super::tensor::Real;
use super::NnError;

const MAGIC: &str = "vowelcons-checkpoint 1";

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub metrics: Vec<(String, f64)>,
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
}

pub fn encode<T: Real>(model: &Model<T>, meta: &CheckpointMeta) -> Vec<u8> {
    let cfg = model.config();
    let params = model.params();
    let mut header = format!(
        "{MAGIC}\ndtype {}\nstream {}\nblock_filters {}\nblock_conv_counts {}\nkernel {}\ninput {} {}\nfc_sizes {}\nn_classes {}\nseed {}\nepoch {}\n",
        T::DTYPE,
        cfg.mode.as_str(),
        join(&cfg.branch.block_filters),
        join(&cfg.branch.block_conv_counts),
        cfg.branch.kernel,
        cfg.branch.input_rows,
        cfg.branch.input_cols,
        join(&cfg.fusion.fc_sizes),
        cfg.fusion.n_classes,
        model.seed(),
        meta.epoch,
    );
    for (k, v) in &meta.metrics {
        header.push_str(&format!("metric {k} {v:?}\n"));
    }
    header.push_str(&format!("tensors {}\nend\n", params.len()));
    let mut out = header.into_bytes();
    for p in params {
        for &v in p.data() {
            v.write_le(&mut out);
        }
    }
    out
}

pub fn write_checkpoint<T: Real>(
    path: impl AsRef<Path>,
    model: &Model<T>,
    meta: &CheckpointMeta,
) -> Result<(), NnError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(&encode(model, meta))?;
    f.flush()?;
    Ok(())
}

pub fn read_checkpoint<T: Real>(
    path: impl AsRef<Path>,
) -> Result<(Model<T>, CheckpointMeta), NnError> {
    decode(std::io::BufReader::new(std::fs::File::open(path)?))
}

fn bad(msg: impl Into<String>) -> NnError {
    NnError::Checkpoint(msg.into())
}

fn nums(v: &[&str], key: &str) -> Result<Vec<usize>, NnError> {
    v.iter()
        .map(|s| {
            s.parse()
                .map_err(|_| bad(format!("bad number {s:?} for {key}")))
        })
        .collect()
}

pub fn decode<T: Real, R: BufRead>(mut r: R) -> Result<(Model<T>, CheckpointMeta), NnError> {
    let mut line = String::new();
    r.read_line(&mut line)?;
    if line.trim_end() != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let mut branch = BranchConfig::default();
    let mut fusion = FusionConfig::default();
    let mut mode = None;
    let mut seed = None;
    let mut tensors = None;
    let mut meta = CheckpointMeta::default();
    loop {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(bad("header ended before `end`"));
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let Some((&key, rest)) = fields.split_first() else {
            return Err(bad("blank header line"));
        };
        let one = || -> Result<usize, NnError> {
            match nums(rest, key)?.as_slice() {
                [v] => Ok(*v),
                _ => Err(bad(format!("{key} takes one value"))),
            }
        };
        match key {
            "end" => break,
            "dtype" => {
                if rest != [T::DTYPE] {
                    return Err(bad(format!("stored dtype {rest:?}, expected {}", T::DTYPE)));
                }
            }
            "stream" => {
                mode = Some(
                    rest.first()
                        .and_then(|s| StreamMode::parse(s))
                        .ok_or_else(|| bad("unknown stream"))?,
                )
            }
            "block_filters" => branch.block_filters = nums(rest, key)?,
            "block_conv_counts" => branch.block_conv_counts = nums(rest, key)?,
            "kernel" => branch.kernel = one()?,
            "input" => match nums(rest, key)?.as_slice() {
                [h, w] => (branch.input_rows, branch.input_cols) = (*h, *w),
                _ => return Err(bad("input takes two values")),
            },
            "fc_sizes" => fusion.fc_sizes = nums(rest, key)?,
            "n_classes" => fusion.n_classes = one()?,
            "seed" => {
                seed = Some(
                    rest.first()
                        .and_then(|s| s.parse::<u64>().ok())
                        .ok_or_else(|| bad("bad seed"))?,
                )
            }
            "epoch" => meta.epoch = one()?,
            "metric" => match rest {
                [name, v] => meta.metrics.push((
                    name.to_string(),
                    v.parse().map_err(|_| bad(format!("bad metric {v:?}")))?,
                )),
                _ => return Err(bad("metric takes a name and a value")),
            },
            "tensors" => tensors = Some(one()?),
            other => return Err(bad(format!("unknown header key {other:?}"))),
        }
    }
    let config = ModelConfig {
        branch,
        fusion,
        mode: mode.ok_or_else(|| bad("missing stream"))?,
    };
    let mut model = Model::<T>::new(config, seed.ok_or_else(|| bad("missing seed"))?)
        .map_err(|e| bad(format!("architecture: {e}")))?;
    let mut params = model.params_mut();
    if tensors != Some(params.len()) {
        return Err(bad(format!(
            "header lists {tensors:?} tensors, architecture has {}",
            params.len()
        )));
    }
    let mut buf = vec![0u8; T::BYTES];
    for p in params.iter_mut() {
        for v in p.data_mut() {
            r.read_exact(&mut buf)
                .map_err(|_| bad("parameter data truncated"))?;
            *v = T::read_le(&buf);
        }
    }
    if r.read(&mut buf)? != 0 {
        return Err(bad("trailing bytes after parameters"));
    }
    Ok((model, meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            branch: BranchConfig {
                block_filters: vec![2, 3],
                block_conv_counts: vec![1, 1],
                kernel: 3,
                input_rows: 8,
                input_cols: 8,
            },
            fusion: FusionConfig {
                fc_sizes: vec![4, 3],
                n_classes: 24,
            },
            mode: StreamMode::Consonant,
        }
    }

    #[test]
    fn round_trip() {
        let m = Model::<f32>::new(cfg(), 77).unwrap();
        let meta = CheckpointMeta {
            epoch: 12,
            metrics: vec![("val_loss".into(), 0.1 + 0.2)],
        };
        let bytes = encode(&m, &meta);
        let (back, meta2) = decode::<f32, _>(&bytes[..]).unwrap();
        assert_eq!(back, m);
        assert_eq!(meta2, meta);
        assert_eq!(encode(&back, &meta2), bytes);
        let text = String::from_utf8_lossy(&bytes[..200]);
        assert!(text.contains("stream consonant"));
    }

    #[test]
    fn corruption_detected() {
        let m = Model::<f32>::new(cfg(), 1).unwrap();
        let bytes = encode(&m, &CheckpointMeta::default());
        assert!(decode::<f32, _>(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode::<f32, _>(&extra[..]).is_err());
        assert!(decode::<f64, _>(&bytes[..]).is_err());
        assert!(decode::<f32, _>(&b"garbage\n"[..]).is_err());
    }
}
