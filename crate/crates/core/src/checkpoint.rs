//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "CFIT" | u32 version | u32 header_len | header (UTF-8 JSON)
//!        | tensor payloads (f32, little-endian, in directory order)
//!        | u32 CRC-32 of every preceding byte
//! ```
//!
//! The header carries the encoder config, training metadata and a tensor
//! directory (`name`, `shape`, byte `offset` into the payload, byte
//! `length`).

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{Encoder, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::optim::AdamState;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CFIT";
pub const VERSION: u32 = 1;

const OPT_FIRST: &str = "optimizer.first.";
const OPT_SECOND: &str = "optimizer.second.";

/// Single-precision tensor as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl StoredTensor {
    pub fn from_tensor(t: &Tensor) -> Self {
        Self {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn from_slice(shape: &[usize], values: &[f64]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: values.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::new(
            self.shape.clone(),
            self.data.iter().map(|&v| v as f64).collect(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TrainingMetadata {
    /// `init`, `stage1`, `stage2` or `mlp-baseline`.
    pub stage: String,
    pub epochs_completed: usize,
    pub seed: u64,
    /// Stages this checkpoint descends from, oldest first, each as
    /// `stage@fingerprint`.
    #[serde(default)]
    pub lineage: Vec<String>,
    #[serde(default)]
    pub loss_kind: Option<String>,
    #[serde(default)]
    pub negatives_per_positive: Option<usize>,
    /// True when the optimizer started from zero moments.
    #[serde(default)]
    pub optimizer_reset: bool,
    /// Class names for classifier checkpoints, in output order.
    #[serde(default)]
    pub labels: Vec<String>,
    #[serde(default)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerSnapshot {
    pub step: u64,
    pub first: BTreeMap<String, StoredTensor>,
    pub second: BTreeMap<String, StoredTensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub encoder_config: EncoderConfig,
    pub tensors: BTreeMap<String, StoredTensor>,
    pub optimizer: Option<OptimizerSnapshot>,
    pub metadata: TrainingMetadata,
}

#[derive(Serialize, Deserialize)]
struct DirEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    length: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    encoder_config: EncoderConfig,
    metadata: TrainingMetadata,
    optimizer_step: Option<u64>,
    tensors: Vec<DirEntry>,
}

impl Checkpoint {
    pub fn from_encoder_params(
        cfg: &EncoderConfig,
        params: &EncoderParams,
        metadata: TrainingMetadata,
    ) -> Self {
        let tensors = params
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n.to_string(), StoredTensor::from_tensor(t)))
            .collect();
        Self {
            encoder_config: cfg.clone(),
            tensors,
            optimizer: None,
            metadata,
        }
    }

    /// Attaches optimizer moments for the given parameter shapes.
    pub fn with_optimizer(mut self, state: &AdamState) -> Self {
        let shape_of = |name: &str, len: usize| {
            self.tensors
                .get(name)
                .map_or_else(|| vec![len], |t| t.shape.clone())
        };
        let conv = |m: &BTreeMap<String, Vec<f64>>| {
            m.iter()
                .map(|(k, v)| {
                    (
                        k.clone(),
                        StoredTensor::from_slice(&shape_of(k, v.len()), v),
                    )
                })
                .collect()
        };
        let snapshot = OptimizerSnapshot {
            step: state.step,
            first: conv(&state.first),
            second: conv(&state.second),
        };
        self.optimizer = Some(snapshot);
        self
    }

    pub fn encoder_params(&self) -> Result<EncoderParams> {
        let tensors = self
            .tensors
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.to_tensor()?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        EncoderParams::from_named(tensors)
    }

    pub fn encoder(&self) -> Result<Encoder> {
        Encoder::new(self.encoder_config.clone(), self.encoder_params()?)
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MalformedCheckpoint(format!("missing tensor `{name}`")))?
            .to_tensor()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries: Vec<(String, &StoredTensor)> =
            self.tensors.iter().map(|(k, v)| (k.clone(), v)).collect();
        if let Some(opt) = &self.optimizer {
            entries.extend(
                opt.first
                    .iter()
                    .map(|(k, v)| (format!("{OPT_FIRST}{k}"), v)),
            );
            entries.extend(
                opt.second
                    .iter()
                    .map(|(k, v)| (format!("{OPT_SECOND}{k}"), v)),
            );
        }
        let mut dir = Vec::with_capacity(entries.len());
        let mut offset = 0;
        for (name, t) in &entries {
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(Error::InvalidShape {
                    shape: t.shape.clone(),
                    len: t.data.len(),
                });
            }
            let length = t.data.len() * 4;
            dir.push(DirEntry {
                name: name.clone(),
                shape: t.shape.clone(),
                offset,
                length,
            });
            offset += length;
        }
        let header = serde_json::to_vec(&Header {
            encoder_config: self.encoder_config.clone(),
            metadata: self.metadata.clone(),
            optimizer_step: self.optimizer.as_ref().map(|o| o.step),
            tensors: dir,
        })?;
        let header_len = u32::try_from(header.len())
            .map_err(|_| Error::MalformedCheckpoint("header exceeds 4 GiB".into()))?;

        let mut out = Vec::with_capacity(16 + header.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&header_len.to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &entries {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(if bytes.len() < 4 {
                Error::Truncated(format!("{} bytes", bytes.len()))
            } else {
                Error::BadMagic
            });
        }
        if bytes.len() < 12 {
            return Err(Error::Truncated(format!(
                "{} bytes, preamble needs 12",
                bytes.len()
            )));
        }
        let u32_at = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
        let version = u32_at(4);
        if version != VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: VERSION,
            });
        }
        let header_len = u32_at(8) as usize;
        let header_end = 12 + header_len;
        if bytes.len() < header_end + 4 {
            return Err(Error::Truncated(format!(
                "{} bytes, header alone needs {}",
                bytes.len(),
                header_end + 4
            )));
        }
        let body_end = bytes.len() - 4;
        let stored = u32_at(body_end);
        let computed = crc32fast::hash(&bytes[..body_end]);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        let header: Header = serde_json::from_slice(&bytes[12..header_end])
            .map_err(|e| Error::MalformedCheckpoint(format!("header: {e}")))?;
        let payload = &bytes[header_end..body_end];
        let expected: usize = header.tensors.iter().map(|e| e.length).sum();
        if payload.len() != expected {
            return Err(Error::Truncated(format!(
                "payload has {} bytes, directory describes {expected}",
                payload.len()
            )));
        }

        let mut tensors = BTreeMap::new();
        let mut first = BTreeMap::new();
        let mut second = BTreeMap::new();
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            if e.length != n * 4 || e.offset + e.length > payload.len() {
                return Err(Error::MalformedCheckpoint(format!(
                    "bad directory entry for `{}`",
                    e.name
                )));
            }
            let data = payload[e.offset..e.offset + e.length]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = StoredTensor {
                shape: e.shape,
                data,
            };
            if let Some(k) = e.name.strip_prefix(OPT_FIRST) {
                first.insert(k.to_string(), t);
            } else if let Some(k) = e.name.strip_prefix(OPT_SECOND) {
                second.insert(k.to_string(), t);
            } else {
                tensors.insert(e.name, t);
            }
        }
        let optimizer = header.optimizer_step.map(|step| OptimizerSnapshot {
            step,
            first,
            second,
        });
        Ok(Self {
            encoder_config: header.encoder_config,
            tensors,
            optimizer,
            metadata: header.metadata,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderParams;

    fn sample() -> Checkpoint {
        let cfg = EncoderConfig {
            hash_buckets: 64,
            embed_dim: 8,
            projection_dim: 4,
            ..EncoderConfig::default()
        };
        let mut params = EncoderParams::init(&cfg, 5).unwrap();
        params.ensure_projection(&cfg, 5);
        let meta = TrainingMetadata {
            stage: "stage2".into(),
            epochs_completed: 3,
            seed: 5,
            lineage: vec!["stage1@abc".into()],
            loss_kind: Some("ocl".into()),
            negatives_per_positive: Some(3),
            optimizer_reset: true,
            ..TrainingMetadata::default()
        };
        let mut state = AdamState {
            step: 7,
            ..AdamState::default()
        };
        state.first.insert("proj_bias".into(), vec![0.25; 4]);
        state.second.insert("proj_bias".into(), vec![1e-6; 4]);
        Checkpoint::from_encoder_params(&cfg, &params, meta).with_optimizer(&state)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.cfit");
        ck.save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap();
        assert_eq!(back, ck);
        for (name, t) in &ck.tensors {
            let bits: Vec<u32> = t.data.iter().map(|v| v.to_bits()).collect();
            let back_bits: Vec<u32> = back.tensors[name]
                .data
                .iter()
                .map(|v| v.to_bits())
                .collect();
            assert_eq!(bits, back_bits);
        }
        assert_eq!(back.to_bytes().unwrap(), ck.to_bytes().unwrap());
    }

    #[test]
    fn layout_preamble() {
        let bytes = sample().to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"CFIT");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), VERSION);
        let hl = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[12..12 + hl]).unwrap();
        assert!(header["tensors"]
            .as_array()
            .unwrap()
            .iter()
            .any(|e| e["name"] == "embedding_table"));
    }

    #[test]
    fn corrupted_byte_fails_checksum() {
        let mut bytes = sample().to_bytes().unwrap();
        let at = bytes.len() - 40;
        bytes[at] ^= 0x10;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::Checksum { .. })
        ));
    }

    #[test]
    fn version_mismatch_is_explicit() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[4..8].copy_from_slice(&0u32.to_le_bytes());
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::VersionMismatch {
                found: 0,
                expected: VERSION
            })
        ));
    }

    #[test]
    fn truncation_detected() {
        let bytes = sample().to_bytes().unwrap();
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..10]),
            Err(Error::Truncated(_))
        ));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..40]),
            Err(Error::Truncated(_))
        ));
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 8]).is_err());
        assert!(matches!(
            Checkpoint::from_bytes(b"NOPE1234567890"),
            Err(Error::BadMagic)
        ));
    }

    #[test]
    fn encoder_reconstruction() {
        let ck = sample();
        let enc = ck.encoder().unwrap();
        assert!(enc.params().projection_enabled());
        assert_eq!(enc.output_dim(), 4);
    }
}
