//! Binary checkpoint format (all integers and floats little-endian):
//!
//! ```text
//! magic        8 bytes   "BYOLCKPT"
//! version      u32       1
//! digest       32 bytes  SHA-256 of the config text
//! config_len   u32       followed by config_len bytes of UTF-8 config text
//! step         u64
//! epoch        u64
//! tau          f64
//! lr           f64
//! momentum     f64
//! 5 sections, in order: online params, online buffers, target params,
//! target buffers, optimizer velocity. Each section is
//!   count      u32
//!   count blobs of
//!     name_len u16, name bytes (UTF-8)
//!     ndim     u8, ndim x u32 extents
//!     data     product(extents) x f32
//! ```
//!
//! Nothing may follow the last section.

use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use super::ModelPair;
use crate::nn::NamedTensor;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"BYOLCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint byte {offset}: {message}")]
    Format { offset: usize, message: String },
    #[error("checkpoint does not match the model: {0}")]
    Mismatch(String),
}

pub fn sha256(text: &str) -> [u8; 32] {
    Sha256::digest(text.as_bytes()).into()
}

pub fn hex(digest: &[u8; 32]) -> String {
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    pub digest: [u8; 32],
    pub step: u64,
    pub epoch: u64,
    pub tau: f64,
    pub lr: f64,
    pub momentum: f64,
    pub online_params: Vec<NamedTensor>,
    pub online_buffers: Vec<NamedTensor>,
    pub target_params: Vec<NamedTensor>,
    pub target_buffers: Vec<NamedTensor>,
    /// One entry per online parameter, same name and shape.
    pub velocity: Vec<NamedTensor>,
}

impl Checkpoint {
    /// Snapshot of `pair` and its optimizer velocity.
    pub fn capture(
        pair: &ModelPair,
        velocity: &[NamedTensor],
        config_text: &str,
        step: u64,
        epoch: u64,
        lr: f64,
        momentum: f64,
    ) -> Self {
        Self {
            config_text: config_text.to_string(),
            digest: sha256(config_text),
            step,
            epoch,
            tau: pair.tau,
            lr,
            momentum,
            online_params: pair.online.store.params().to_vec(),
            online_buffers: pair.online.store.buffers().to_vec(),
            target_params: pair.target.store.params().to_vec(),
            target_buffers: pair.target.store.buffers().to_vec(),
            velocity: velocity.to_vec(),
        }
    }

    /// Copies every stored tensor into `pair`, which must have been built
    /// from a compatible configuration.
    pub fn restore_into(&self, pair: &mut ModelPair) -> Result<(), CheckpointError> {
        fill(&self.online_params, pair.online.store.params_mut(), "online parameter")?;
        fill(&self.online_buffers, pair.online.store.buffers_mut(), "online buffer")?;
        fill(&self.target_params, pair.target.store.params_mut(), "target parameter")?;
        fill(&self.target_buffers, pair.target.store.buffers_mut(), "target buffer")?;
        pair.tau = self.tau;
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.online_params.iter().map(|t| t.value.len()).sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.digest);
        out.extend_from_slice(&(self.config_text.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config_text.as_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        for v in [self.tau, self.lr, self.momentum] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for section in self.sections() {
            out.extend_from_slice(&(section.len() as u32).to_le_bytes());
            for t in section {
                out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
                out.extend_from_slice(t.name.as_bytes());
                out.push(t.value.shape().len() as u8);
                for &d in t.value.shape() {
                    out.extend_from_slice(&(d as u32).to_le_bytes());
                }
                for v in t.value.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8, "magic")? != MAGIC {
            return Err(r.error_at(0, "bad magic (not a checkpoint file)"));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(r.error_at(8, &format!("unsupported version {version}")));
        }
        let digest: [u8; 32] = r.take(32, "digest")?.try_into().expect("32 bytes");
        let len = r.u32("config length")? as usize;
        let config_start = r.pos;
        let config_text = String::from_utf8(r.take(len, "config text")?.to_vec())
            .map_err(|_| r.error_at(config_start, "config text is not UTF-8"))?;
        if sha256(&config_text) != digest {
            return Err(r.error_at(12, "config digest does not match the embedded config text"));
        }
        let step = r.u64("step")?;
        let epoch = r.u64("epoch")?;
        let tau = r.f64("tau")?;
        let lr = r.f64("lr")?;
        let momentum = r.f64("momentum")?;
        let mut sections: Vec<Vec<NamedTensor>> = Vec::with_capacity(5);
        for _ in 0..5 {
            let count = r.u32("section count")?;
            let mut section = Vec::new();
            for _ in 0..count {
                section.push(r.blob()?);
            }
            sections.push(section);
        }
        if r.pos != bytes.len() {
            return Err(r.error_at(r.pos, &format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let mut it = sections.into_iter();
        let mut next = || it.next().expect("five sections");
        Ok(Self {
            config_text,
            digest,
            step,
            epoch,
            tau,
            lr,
            momentum,
            online_params: next(),
            online_buffers: next(),
            target_params: next(),
            target_buffers: next(),
            velocity: next(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }

    fn sections(&self) -> [&[NamedTensor]; 5] {
        [
            &self.online_params,
            &self.online_buffers,
            &self.target_params,
            &self.target_buffers,
            &self.velocity,
        ]
    }
}

fn fill(src: &[NamedTensor], dst: &mut [NamedTensor], what: &str) -> Result<(), CheckpointError> {
    if src.len() != dst.len() {
        return Err(CheckpointError::Mismatch(format!(
            "{} {what}s stored, model has {}",
            src.len(),
            dst.len()
        )));
    }
    for (s, d) in src.iter().zip(dst.iter_mut()) {
        if s.name != d.name || s.value.shape() != d.value.shape() {
            return Err(CheckpointError::Mismatch(format!(
                "{what} {} {:?} stored where model has {} {:?}",
                s.name,
                s.value.shape(),
                d.name,
                d.value.shape()
            )));
        }
        d.value = s.value.clone();
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn error_at(&self, offset: usize, message: &str) -> CheckpointError {
        CheckpointError::Format {
            offset,
            message: message.to_string(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            self.error_at(
                self.pos,
                &format!("truncated reading {what}: need {n} bytes, {} remain", self.bytes.len() - self.pos),
            )
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self, what: &str) -> Result<f64, CheckpointError> {
        Ok(f64::from_bits(self.u64(what)?))
    }

    fn blob(&mut self) -> Result<NamedTensor, CheckpointError> {
        let len = u16::from_le_bytes(self.take(2, "name length")?.try_into().expect("2 bytes")) as usize;
        let start = self.pos;
        let name = std::str::from_utf8(self.take(len, "tensor name")?)
            .map_err(|_| self.error_at(start, "tensor name is not UTF-8"))?
            .to_string();
        let ndim = self.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.u32("extent")? as usize);
        }
        let count: usize = shape.iter().product();
        let raw = self.take(count * 4, &format!("data of {name}"))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let value = Tensor::new(shape, data).expect("length matches extents");
        Ok(NamedTensor { name, value })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{EncoderConfig, DEFAULT_TAU};

    fn sample() -> Checkpoint {
        let pair = ModelPair::new(&EncoderConfig::default(), DEFAULT_TAU, 3).unwrap();
        let velocity: Vec<_> = pair
            .online
            .store
            .params()
            .iter()
            .map(|p| NamedTensor {
                name: p.name.clone(),
                value: p.value.map(|v| v * 0.5),
            })
            .collect();
        Checkpoint::capture(&pair, &velocity, "seed = 3\n", 17, 2, 0.008, 0.9)
    }

    #[test]
    fn round_trip_is_lossless() {
        let ckpt = sample();
        let bytes = ckpt.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn restore_reproduces_parameters() {
        let ckpt = sample();
        let mut pair = ModelPair::new(&EncoderConfig::default(), DEFAULT_TAU, 99).unwrap();
        ckpt.restore_into(&mut pair).unwrap();
        assert_eq!(pair.online.store.params(), &ckpt.online_params[..]);
        assert_eq!(pair.target.store.buffers(), &ckpt.target_buffers[..]);
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = sample().to_bytes();
        let cut = bytes.len() - 3;
        match Checkpoint::from_bytes(&bytes[..cut]) {
            Err(CheckpointError::Format { offset, message }) => {
                assert!(offset < cut, "{offset}");
                assert!(message.contains("truncated"), "{message}");
            }
            other => panic!("expected format error, got {other:?}"),
        }
        assert!(matches!(
            Checkpoint::from_bytes(b"NOTACKPT"),
            Err(CheckpointError::Format { offset: 0, .. })
        ));
    }

    #[test]
    fn corrupted_config_text_fails_digest_check() {
        let mut bytes = sample().to_bytes();
        bytes[8 + 4 + 32 + 4] ^= 1;
        let err = Checkpoint::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("digest"), "{err}");
    }

    #[test]
    fn incompatible_model_is_rejected() {
        let ckpt = sample();
        let config = EncoderConfig {
            width: 32,
            ..EncoderConfig::default()
        };
        let mut pair = ModelPair::new(&config, DEFAULT_TAU, 1).unwrap();
        assert!(matches!(ckpt.restore_into(&mut pair), Err(CheckpointError::Mismatch(_))));
    }
}
