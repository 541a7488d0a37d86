//! Checkpoint file format.
//!
//! ```text
//! magic        8 bytes   "GVPTCKPT"
//! version      u32 LE
//! header_len   u64 LE
//! header       header_len bytes of JSON: config, tuning settings, seeds,
//!              trainable names, and per-parameter {name, shape, offset}
//! payload      f64 LE values, parameters concatenated in header order
//! ```
//!
//! Offsets count `f64` elements from the start of the payload.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{parameter_shapes, ParamStore, ViTConfig};
use crate::error::{Error, FormatError, Result};
use crate::prompt::TuningConfig;
use crate::tensor::Tensor;
use crate::util::{push_f64s, read_f64s, ByteReader};

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"GVPTCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub backbone_seed: u64,
    pub tuning_seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ViTConfig,
    /// Present once prompt-tuning parameters have been attached.
    pub tuning: Option<TuningConfig>,
    pub params: ParamStore,
    /// Sorted names of the non-frozen parameters.
    pub trainable: Vec<String>,
    pub provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    config: ViTConfig,
    tuning: Option<TuningConfig>,
    provenance: Provenance,
    trainable: Vec<String>,
    params: Vec<ParamEntry>,
    payload_values: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        for name in &self.trainable {
            if !self.params.contains(name) {
                return Err(Error::State(format!(
                    "trainable name `{name}` is not a parameter"
                )));
            }
        }
        let mut entries = Vec::with_capacity(self.params.len());
        let mut offset = 0u64;
        for (name, t) in self.params.iter() {
            entries.push(ParamEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += t.len() as u64;
        }
        let mut trainable = self.trainable.clone();
        trainable.sort();
        let header = Header {
            format_version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            tuning: self.tuning.clone(),
            provenance: self.provenance.clone(),
            trainable,
            params: entries,
            payload_values: offset,
        };
        let header = serde_json::to_vec(&header)
            .map_err(|e| Error::State(format!("serializing checkpoint header: {e}")))?;
        let mut out = Vec::with_capacity(20 + header.len() + offset as usize * 8);
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in self.params.iter() {
            push_f64s(&mut out, t.data());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, FormatError> {
        check_magic(bytes, &CHECKPOINT_MAGIC)?;
        let mut r = ByteReader::new(bytes);
        r.take(8)?;
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(FormatError::UnsupportedVersion {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let header_len = r.u64()? as usize;
        let header: Header = serde_json::from_slice(r.take(header_len)?)
            .map_err(|e| FormatError::Corrupt(format!("checkpoint header: {e}")))?;
        if header.format_version != version {
            return Err(FormatError::Corrupt(format!(
                "header version {} disagrees with preamble version {version}",
                header.format_version
            )));
        }
        let total = header.payload_values as usize;
        let payload = r.take(total * 8)?;
        if r.remaining() != 0 {
            return Err(FormatError::Corrupt(format!(
                "{} trailing bytes after payload",
                r.remaining()
            )));
        }
        let values = read_f64s(payload);
        let mut params = ParamStore::new();
        for (i, e) in header.params.iter().enumerate() {
            let end = header
                .params
                .get(i + 1)
                .map_or(total as u64, |next| next.offset);
            if e.offset > end || end > total as u64 {
                return Err(FormatError::Corrupt(format!(
                    "parameter `{}` has offsets outside the payload",
                    e.name
                )));
            }
            let span = (end - e.offset) as usize;
            let numel: usize = e.shape.iter().product();
            if e.shape.is_empty() || numel != span {
                return Err(FormatError::ShapeMismatch {
                    name: e.name.clone(),
                    expected: vec![span],
                    found: e.shape.clone(),
                });
            }
            let start = e.offset as usize;
            let t = Tensor::new(e.shape.clone(), values[start..start + span].to_vec())
                .map_err(|err| FormatError::Corrupt(err.to_string()))?;
            params.insert(e.name.clone(), t);
        }
        if params.len() != header.params.len() {
            return Err(FormatError::Corrupt("duplicate parameter names".into()));
        }
        for name in &header.trainable {
            if !params.contains(name) {
                return Err(FormatError::Corrupt(format!(
                    "trainable name `{name}` is not a parameter"
                )));
            }
        }
        Ok(Checkpoint {
            config: header.config,
            tuning: header.tuning,
            params,
            trainable: header.trainable,
            provenance: header.provenance,
        })
    }

    /// Checks every backbone and head parameter against the shapes implied
    /// by `config`.
    pub fn validate_against(&self, config: &ViTConfig) -> std::result::Result<(), FormatError> {
        for (name, shape) in parameter_shapes(config) {
            match self.params.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(FormatError::ShapeMismatch {
                        name,
                        expected: shape,
                        found: t.shape().to_vec(),
                    })
                }
                None => {
                    return Err(FormatError::Corrupt(format!("missing parameter `{name}`")))
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn check_magic(bytes: &[u8], magic: &[u8; 8]) -> std::result::Result<(), FormatError> {
    let n = bytes.len().min(8);
    if bytes[..n] != magic[..n] {
        return Err(FormatError::BadMagic {
            expected: *magic,
            found: bytes[..n].to_vec(),
        });
    }
    if n < 8 {
        return Err(FormatError::Truncated {
            needed: 8,
            found: n as u64,
        });
    }
    Ok(())
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let bytes = ckpt.to_bytes()?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes).map_err(|e| Error::format(path, e))
}

/// Loads a checkpoint and verifies its parameter shapes against `config`.
pub fn load_checkpoint_for(path: impl AsRef<Path>, config: &ViTConfig) -> Result<Checkpoint> {
    let path = path.as_ref();
    let ckpt = load_checkpoint(path)?;
    ckpt.validate_against(config)
        .map_err(|e| Error::format(path, e))?;
    Ok(ckpt)
}
