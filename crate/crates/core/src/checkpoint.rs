//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "DSMM" | u32 format version
//! u64 epoch | u64 rng seed | u64 rng stream | u128 rng word position
//! u32 config length | config JSON bytes
//! u32 tensor count
//!   repeated: u32 name length | name | u32 rank | u64 dims... | f64 values...
//! 32-byte SHA-256 of everything above
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::dichotomizer::MahalanobisParams;
use crate::error::{Error, Result};
use crate::tensor::{RngState, SeededRng, Tensor};
use crate::trainer::{Model, INIT_STREAM};

pub const MAGIC: &[u8; 4] = b"DSMM";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub config: RunConfig,
    pub epoch: u64,
    pub rng: RngState,
    pub tensors: Vec<(String, Tensor)>,
}

impl std::fmt::Debug for Checkpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let shapes: Vec<(&str, &[usize])> = self.tensors.iter().map(|(n, t)| (n.as_str(), t.shape())).collect();
        f.debug_struct("Checkpoint")
            .field("version", &self.version)
            .field("epoch", &self.epoch)
            .field("rng", &self.rng)
            .field("mode", &self.config.train.mode)
            .field("tensors", &shapes)
            .finish()
    }
}

impl Checkpoint {
    pub fn from_model(model: &Model, config: &RunConfig, epoch: usize, rng: RngState) -> Self {
        Self {
            version: FORMAT_VERSION,
            config: config.clone(),
            epoch: epoch as u64,
            rng,
            tensors: model.named_tensors(),
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Rebuilds the model the checkpoint was taken from.
    pub fn to_model(&self) -> Result<Model> {
        let w0 = self
            .tensor("backbone.0.weight")
            .ok_or_else(|| Error::MalformedCheckpoint("missing tensor 'backbone.0.weight'".into()))?;
        let head = self
            .tensor("head.weight")
            .ok_or_else(|| Error::MalformedCheckpoint("missing tensor 'head.weight'".into()))?;
        let d_input = w0.shape().get(1).copied().unwrap_or(0);
        let n_classes = head.rows();
        let cfg = &self.config.train;
        let mut model = Model::new(cfg, d_input, n_classes, &mut SeededRng::with_stream(0, INIT_STREAM))?;
        model.mahalanobis = self
            .tensor("mahalanobis.l")
            .map(|_| MahalanobisParams::new(cfg.d_adapt, cfg.mahalanobis_threshold));
        model.load_tensors(&self.tensors)?;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&self.version.to_le_bytes());
        b.extend_from_slice(&self.epoch.to_le_bytes());
        b.extend_from_slice(&self.rng.seed.to_le_bytes());
        b.extend_from_slice(&self.rng.stream.to_le_bytes());
        b.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        let cfg = serde_json::to_vec(&self.config).expect("config serialises");
        b.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        b.extend_from_slice(&cfg);
        b.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            b.extend_from_slice(&(name.len() as u32).to_le_bytes());
            b.extend_from_slice(name.as_bytes());
            b.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                b.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&b);
        b.extend_from_slice(&digest);
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::Truncated(format!("{} bytes, header needs 8", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::BadMagic);
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        if bytes.len() < 8 + DIGEST_LEN {
            return Err(Error::Truncated(format!("{} bytes, too short for a checksum", bytes.len())));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::ChecksumMismatch);
        }
        let mut r = Reader { buf: body, pos: 8 };
        let epoch = r.u64()?;
        let rng = RngState {
            seed: r.u64()?,
            stream: r.u64()?,
            word_pos: u128::from_le_bytes(r.take(16)?.try_into().unwrap()),
        };
        let cfg_len = r.u32()? as usize;
        let config: RunConfig = serde_json::from_slice(r.take(cfg_len)?)
            .map_err(|e| Error::MalformedCheckpoint(format!("config: {e}")))?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::MalformedCheckpoint("tensor name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::MalformedCheckpoint(format!("tensor '{name}' is too large")))?;
            let raw = r.take(n.checked_mul(8).ok_or_else(|| {
                Error::MalformedCheckpoint(format!("tensor '{name}' is too large"))
            })?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != body.len() {
            return Err(Error::MalformedCheckpoint(format!(
                "{} trailing bytes",
                body.len() - r.pos
            )));
        }
        Ok(Self {
            version,
            config,
            epoch,
            rng,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::MalformedCheckpoint(format!("record overruns file at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::TrainConfig;

    fn small() -> (Checkpoint, RunConfig) {
        let run = RunConfig {
            train: TrainConfig {
                hidden_dims: vec![5],
                d_embed: 4,
                d_adapt: 3,
                classifier_batchnorm: true,
                ..Default::default()
            },
            ..Default::default()
        };
        let model = Model::new(&run.train, 6, 3, &mut SeededRng::new(2)).unwrap();
        (Checkpoint::from_model(&model, &run, 4, SeededRng::new(9).state()), run)
    }

    #[test]
    fn round_trip_bit_exact() {
        let (ck, _) = small();
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        for ((_, a), (_, b)) in ck.tensors.iter().zip(&back.tensors) {
            let (ab, bb): (Vec<u64>, Vec<u64>) = (
                a.data().iter().map(|v| v.to_bits()).collect(),
                b.data().iter().map(|v| v.to_bits()).collect(),
            );
            assert_eq!(ab, bb);
        }
        let m = back.to_model().unwrap();
        assert_eq!(m.named_tensors(), ck.tensors);
    }

    #[test]
    fn distinct_error_kinds() {
        let (ck, _) = small();
        let bytes = ck.to_bytes();

        let truncated = &bytes[..bytes.len() - 50];
        assert!(matches!(Checkpoint::from_bytes(truncated), Err(Error::ChecksumMismatch)));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..6]), Err(Error::Truncated(_))));

        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(
            Checkpoint::from_bytes(&bad),
            Err(Error::UnsupportedVersion { found: 9, .. })
        ));

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::BadMagic)));

        let mut bad = bytes.clone();
        let mid = bad.len() / 2;
        bad[mid] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::ChecksumMismatch)));
    }
}
