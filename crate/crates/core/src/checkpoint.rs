//! Versioned checkpoint container.
//!
//! Layout: `"MMCK"`, u8 version, u32 LE length + JSON header, u32 LE entry
//! count, then per entry a u32 LE length-prefixed UTF-8 name followed by an
//! MMTF tensor. Optimizer velocities are stored as `opt.velocity.<param>`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_err, Error, Result};
use crate::image::ImageStats;
use crate::mmtf;
use crate::model::{BnMoments, Model, ModelConfig};
use crate::optim::{SgdConfig, SgdState};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"MMCK";
pub const VERSION: u8 = 1;
const VELOCITY_PREFIX: &str = "opt.velocity.";

/// JSON header of a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    /// Hex SHA-256 of the serialized model configuration.
    pub config_hash: String,
    pub image_stats: ImageStats,
    pub bn_running: BnMoments,
    pub sgd: SgdConfig,
    pub epoch: usize,
    pub seed: u64,
    /// Free-form run configuration kept for provenance.
    #[serde(default)]
    pub run: serde_json::Value,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub optimizer: SgdState<f32>,
    pub image_stats: ImageStats,
    pub epoch: usize,
    pub seed: u64,
    pub run: serde_json::Value,
}

/// Hex SHA-256 of any serializable value's compact JSON form.
pub fn json_hash<S: Serialize>(value: &S) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

pub fn config_hash(config: &ModelConfig) -> Result<String> {
    json_hash(config)
}

impl Checkpoint {
    pub fn new(model: Model<f32>, image_stats: ImageStats, seed: u64) -> Result<Self> {
        Ok(Self {
            model,
            optimizer: SgdState::new(SgdConfig::default())?,
            image_stats,
            epoch: 0,
            seed,
            run: serde_json::Value::Null,
        })
    }

    pub fn header(&self) -> Result<CheckpointHeader> {
        Ok(CheckpointHeader {
            model: self.model.config.clone(),
            config_hash: config_hash(&self.model.config)?,
            image_stats: self.image_stats.clone(),
            bn_running: self.model.bn_running,
            sgd: self.optimizer.config.clone(),
            epoch: self.epoch,
            seed: self.seed,
            run: self.run.clone(),
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header()?)?;
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        push_len(&mut out, header.len())?;
        out.extend_from_slice(&header);
        let entries: Vec<(String, &Tensor<f32>)> = self
            .model
            .params
            .iter()
            .map(|(k, v)| (k.clone(), v))
            .chain(self.optimizer.velocity.iter().map(|(k, v)| (format!("{VELOCITY_PREFIX}{k}"), v)))
            .collect();
        push_len(&mut out, entries.len())?;
        for (name, t) in entries {
            push_len(&mut out, name.len())?;
            out.extend_from_slice(name.as_bytes());
            mmtf::encode(t, &mut out)?;
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
        if magic != MAGIC {
            return Err(Error::BadMagic {
                kind: "checkpoint",
                expected: MAGIC,
                found: magic,
            });
        }
        let version = r.take(1)?[0];
        if version != VERSION {
            return Err(Error::Version {
                kind: "checkpoint",
                expected: VERSION,
                found: version,
            });
        }
        let hlen = r.u32()? as usize;
        let header: CheckpointHeader = serde_json::from_slice(r.take(hlen)?)?;
        let computed = config_hash(&header.model)?;
        if computed != header.config_hash {
            return Err(Error::ConfigHash {
                stored: header.config_hash,
                computed,
            });
        }
        let count = r.u32()? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec())
                .map_err(|_| Error::InvalidArgument("checkpoint entry name is not UTF-8".into()))?;
            let (t, used) = mmtf::decode::<f32>(&bytes[r.pos..])?;
            r.pos += used;
            tensors.insert(name, t);
        }
        let mut params = BTreeMap::new();
        for (name, shape) in header.model.param_shapes() {
            let t = tensors.remove(&name).ok_or_else(|| Error::MissingTensor(name.clone()))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Shape {
                    op: "checkpoint_load",
                    lhs: t.shape().to_vec(),
                    rhs: shape,
                });
            }
            params.insert(name, t);
        }
        let mut optimizer = SgdState::new(header.sgd.clone())?;
        for (name, t) in tensors {
            match name.strip_prefix(VELOCITY_PREFIX) {
                Some(p) if params.contains_key(p) => {
                    optimizer.velocity.insert(p.to_string(), t);
                }
                _ => return Err(Error::InvalidArgument(format!("unexpected checkpoint entry `{name}`"))),
            }
        }
        Ok(Self {
            model: Model {
                config: header.model,
                params,
                bn_running: header.bn_running,
            },
            optimizer,
            image_stats: header.image_stats,
            epoch: header.epoch,
            seed: header.seed,
            run: header.run,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
        fs::rename(&tmp, path).map_err(io_err(path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&fs::read(path).map_err(io_err(path))?)
    }
}

fn push_len(out: &mut Vec<u8>, n: usize) -> Result<()> {
    let n = u32::try_from(n).map_err(|_| Error::Overflow(format!("length {n} exceeds u32")))?;
    out.extend_from_slice(&n.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(Error::Truncated {
            needed: self.pos.saturating_add(n),
            available: self.bytes.len(),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
