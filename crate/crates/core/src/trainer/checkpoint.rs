//! Binary checkpoint: `MGCK`, a version byte, a little-endian `u32` manifest
//! length, the JSON manifest, then raw little-endian `f32` blocks.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mgq::CodebookSet;
use crate::model::ParamSet;
use crate::ndgrad::Tensor;
use crate::trainer::{OptState, TrainConfig};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MGCK";
pub const CHECKPOINT_VERSION: u8 = 1;

/// Serializable position of a ChaCha8 stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    /// 32-byte key as hex.
    pub seed: String,
    pub stream: u64,
    /// `u128` word position, decimal.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || Error::Format {
            what: "checkpoint",
            message: format!("malformed rng state {self:?}"),
        };
        if self.seed.len() != 64 || !self.seed.is_ascii() {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub params: ParamSet<f32>,
    pub codebooks: CodebookSet<f32>,
    pub opt: OptState,
    pub step: u64,
    pub rng: RngState,
}

impl Checkpoint {
    /// Field-for-field equality with tensors compared bitwise.
    pub fn bit_eq(&self, other: &Checkpoint) -> bool {
        self.config == other.config
            && self.step == other.step
            && self.rng == other.rng
            && self.params.bit_eq(&other.params)
            && self.codebooks.bit_eq(&other.codebooks)
            && self.opt.bit_eq(&other.opt)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut blocks: Vec<(String, Vec<usize>, &[f32])> = Vec::new();
        for (name, t) in self.params.iter() {
            blocks.push((format!("param/{name}"), t.shape().to_vec(), t.data()));
        }
        for (g, t) in self.codebooks.tables().iter().enumerate() {
            blocks.push((format!("codebook/{g}"), t.shape().to_vec(), t.data()));
        }
        for (prefix, moments) in [("adam.m", &self.opt.first), ("adam.v", &self.opt.second)] {
            for (name, v) in moments {
                blocks.push((format!("{prefix}/{name}"), vec![v.len()], v));
            }
        }
        let mut offset = 0usize;
        let entries = blocks
            .iter()
            .map(|(name, shape, data)| {
                let e = BlockEntry {
                    name: name.clone(),
                    shape: shape.clone(),
                    offset,
                };
                offset += data.len() * 4;
                e
            })
            .collect();
        let manifest = Manifest {
            config: self.config.clone(),
            step: self.step,
            opt_step: self.opt.step,
            rng: self.rng.clone(),
            blocks: entries,
        };
        let json = serde_json::to_vec(&manifest)?;
        let json_len =
            u32::try_from(json.len()).map_err(|_| Error::invalid("manifest too large"))?;
        let mut out = Vec::with_capacity(9 + json.len() + offset);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.push(CHECKPOINT_VERSION);
        out.extend_from_slice(&json_len.to_le_bytes());
        out.extend_from_slice(&json);
        for (_, _, data) in &blocks {
            for v in data.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |message: String| Error::Format {
            what: "checkpoint",
            message,
        };
        if bytes.len() < 9 {
            return Err(fmt(format!(
                "file is {} bytes, shorter than the header",
                bytes.len()
            )));
        }
        if &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(fmt(format!(
                "bad magic {:?}, expected \"MGCK\"",
                &bytes[..4]
            )));
        }
        if bytes[4] != CHECKPOINT_VERSION {
            return Err(Error::Version {
                what: "checkpoint",
                found: bytes[4],
                supported: CHECKPOINT_VERSION,
            });
        }
        let json_len = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        let body = &bytes[9..];
        if body.len() < json_len {
            return Err(fmt(format!(
                "truncated manifest: need {json_len} bytes, {} present",
                body.len()
            )));
        }
        let manifest: Manifest = serde_json::from_slice(&body[..json_len])?;
        let data = &body[json_len..];

        let mut expected = 0usize;
        let mut read = |entry: &BlockEntry| -> Result<Vec<f32>> {
            let n: usize = entry.shape.iter().product();
            if entry.offset != expected {
                return Err(fmt(format!(
                    "block {} at offset {}, expected {expected}",
                    entry.name, entry.offset
                )));
            }
            let end = entry.offset + n * 4;
            if end > data.len() {
                return Err(fmt(format!(
                    "truncated: block {} ends at byte {end}, data section has {}",
                    entry.name,
                    data.len()
                )));
            }
            expected = end;
            Ok(data[entry.offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect())
        };

        let mut params = ParamSet::new();
        let mut tables = Vec::new();
        let mut opt = OptState {
            step: manifest.opt_step,
            ..OptState::default()
        };
        for entry in &manifest.blocks {
            let values = read(entry)?;
            let (kind, name) = entry
                .name
                .split_once('/')
                .ok_or_else(|| fmt(format!("unnamed block {}", entry.name)))?;
            match kind {
                "param" => params.insert(name, Tensor::param(&entry.shape, values)?)?,
                "codebook" => {
                    if name != tables.len().to_string() {
                        return Err(fmt(format!("codebook block {name} out of order")));
                    }
                    tables.push(Tensor::param(&entry.shape, values)?);
                }
                "adam.m" => {
                    opt.first.insert(name.to_string(), values);
                }
                "adam.v" => {
                    opt.second.insert(name.to_string(), values);
                }
                _ => return Err(fmt(format!("unknown block kind {kind}"))),
            }
        }
        if expected != data.len() {
            return Err(fmt(format!(
                "{} trailing bytes after the last block",
                data.len() - expected
            )));
        }
        Ok(Self {
            config: manifest.config,
            params,
            codebooks: CodebookSet::from_tables(tables)?,
            opt,
            step: manifest.step,
            rng: manifest.rng,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct BlockEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the data section.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: TrainConfig,
    step: u64,
    opt_step: u64,
    rng: RngState,
    blocks: Vec<BlockEntry>,
}

/// Writes via a temporary sibling and a rename, so a failed write never
/// leaves a half-written checkpoint under `path`.
pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = ckpt.to_bytes()?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    std::fs::write(&tmp, &bytes).map_err(|e| Error::io(path, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::Trainer;
    use rand::RngCore;

    fn small() -> Checkpoint {
        let mut cfg = TrainConfig::default();
        cfg.apply_kv(
            "hidden_dim=8\ndepth=1\nlatent_dim=8\ngroups=4\ncodebook_size=4\nimage_size=8",
        )
        .unwrap();
        let mut t = Trainer::new(cfg).unwrap();
        let imgs = crate::synthetic::scenes(4, 8, 0);
        t.train_step(&imgs, None).unwrap();
        t.checkpoint()
    }

    #[test]
    fn round_trip_bit_identical() {
        let c = small();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.mgck");
        save_checkpoint(&c, &p).unwrap();
        let back = load_checkpoint(&p).unwrap();
        assert!(c.bit_eq(&back));
        assert_eq!(back.opt.step, 1);
        assert!(!back.opt.first.is_empty());
    }

    #[test]
    fn corrupted_and_truncated_rejected() {
        let bytes = small().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bad),
            Err(Error::Format { .. })
        ));
        for cut in [3, 20, bytes.len() - 1] {
            assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err(), "cut {cut}");
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).is_err());
    }

    #[test]
    fn newer_version_names_both() {
        let mut bytes = small().to_bytes().unwrap();
        bytes[4] = 7;
        let msg = Checkpoint::from_bytes(&bytes).unwrap_err().to_string();
        assert!(msg.contains('7') && msg.contains('1'), "{msg}");
    }

    #[test]
    fn rng_state_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        rng.next_u64();
        rng.next_u32();
        let st = RngState::capture(&rng);
        let mut back = st.restore().unwrap();
        assert_eq!(rng.next_u64(), back.next_u64());
    }
}
