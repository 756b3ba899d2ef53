//! Binary model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      b"SYNF"
//! version    u32 (= 1)
//! kind       u8  (0 = language model, 1 = reward model, 2 = policy)
//! arch tag   u16 length + UTF-8
//! dims       u32 vocab, u32 embed_dim, u32 hidden_dim, u32 max_seq
//! metadata   u32 length + UTF-8 JSON object of string values
//! backbone   u64 count + count x f32
//! head       u64 count + count x f32 (0 when absent)
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use super::tinylm::{LmConfig, TinyLm, ARCH_TAG, VOCAB_SIZE};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"SYNF";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointKind {
    LanguageModel = 0,
    RewardModel = 1,
    Policy = 2,
}

impl CheckpointKind {
    fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(CheckpointKind::LanguageModel),
            1 => Some(CheckpointKind::RewardModel),
            2 => Some(CheckpointKind::Policy),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub config: LmConfig,
    pub metadata: BTreeMap<String, String>,
    pub backbone: Vec<f32>,
    pub head: Vec<f32>,
}

impl Checkpoint {
    pub fn from_lm<S: Scalar>(kind: CheckpointKind, lm: &TinyLm<S>) -> Self {
        Checkpoint {
            kind,
            config: *lm.config(),
            metadata: BTreeMap::new(),
            backbone: lm.params().iter().map(|p| p.as_f64() as f32).collect(),
            head: Vec::new(),
        }
    }

    pub fn lm<S: Scalar>(&self) -> Option<TinyLm<S>> {
        TinyLm::from_params(
            self.config,
            self.backbone.iter().map(|&p| S::of(p as f64)).collect(),
        )
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + 4 * (self.backbone.len() + self.head.len()));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.kind as u8);
        out.extend_from_slice(&(ARCH_TAG.len() as u16).to_le_bytes());
        out.extend_from_slice(ARCH_TAG.as_bytes());
        for dim in [
            VOCAB_SIZE,
            self.config.embed_dim,
            self.config.hidden_dim,
            self.config.max_seq,
        ] {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        let meta = serde_json::to_string(&self.metadata).expect("string map encodes");
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        for block in [&self.backbone, &self.head] {
            out.extend_from_slice(&(block.len() as u64).to_le_bytes());
            for v in block.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = bytes;
        let mut take = |n: usize| -> std::result::Result<&[u8], String> {
            if r.len() < n {
                return Err("truncated checkpoint".to_string());
            }
            let (head, rest) = r.split_at(n);
            r = rest;
            Ok(head)
        };
        if take(4)? != MAGIC {
            return Err("bad magic".into());
        }
        let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let kind = CheckpointKind::from_u8(take(1)?[0]).ok_or("unknown checkpoint kind")?;
        let tag_len = u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize;
        let tag = std::str::from_utf8(take(tag_len)?).map_err(|e| e.to_string())?;
        if tag != ARCH_TAG {
            return Err(format!("unsupported architecture `{tag}`"));
        }
        let mut dims = [0usize; 4];
        for d in dims.iter_mut() {
            *d = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        }
        if dims[0] != VOCAB_SIZE {
            return Err(format!("vocabulary {} != {VOCAB_SIZE}", dims[0]));
        }
        let config = LmConfig {
            embed_dim: dims[1],
            hidden_dim: dims[2],
            max_seq: dims[3],
        };
        let meta_len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let metadata: BTreeMap<String, String> =
            serde_json::from_slice(take(meta_len)?).map_err(|e| e.to_string())?;
        let mut blocks = Vec::with_capacity(2);
        for _ in 0..2 {
            let n = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
            let raw = take(n.checked_mul(4).ok_or("block too large")?)?;
            blocks.push(
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect::<Vec<f32>>(),
            );
        }
        if !r.is_empty() {
            return Err(format!("{} trailing bytes", r.len()));
        }
        let head = blocks.pop().unwrap();
        let backbone = blocks.pop().unwrap();
        let ck = Checkpoint {
            kind,
            config,
            metadata,
            backbone,
            head,
        };
        if ck.lm::<f32>().is_none() {
            return Err("parameter count does not match dimensions".into());
        }
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes).map_err(|message| Error::Checkpoint {
            path: path.to_path_buf(),
            message,
        })
    }

    pub fn expect_kind(self, kind: CheckpointKind, path: &Path) -> Result<Self> {
        if self.kind != kind {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                message: format!("expected a {kind:?} checkpoint, found {:?}", self.kind),
            });
        }
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_bytes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lm: TinyLm<f32> = TinyLm::new(
            LmConfig {
                embed_dim: 4,
                hidden_dim: 6,
                max_seq: 10,
            },
            &mut rng,
        );
        let mut ck = Checkpoint::from_lm(CheckpointKind::RewardModel, &lm);
        ck.head = vec![0.5, -1.25, 3.0, 0.0, 7.0];
        ck.metadata.insert("role".into(), "asis".into());
        let bytes = ck.to_bytes();
        assert_eq!(&bytes[..4], MAGIC);
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.lm::<f32>().unwrap(), lm);
    }

    #[test]
    fn rejects_corruption() {
        let lm: TinyLm<f32> = TinyLm::zeros(LmConfig {
            embed_dim: 2,
            hidden_dim: 2,
            max_seq: 4,
        });
        let bytes = Checkpoint::from_lm(CheckpointKind::LanguageModel, &lm).to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }
}
