//! PHN1 checkpoint container.
//!
//! ```text
//! offset  size  field
//!      0     4  magic "PHN1"
//!      4     2  format version (u16 LE)
//!      6     4  header length n (u32 LE)
//!     10     n  UTF-8 JSON header
//!   10+n     …  f64 LE payload, tensors back to back in header order
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::autodiff::BatchNormState;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};

pub const PHN1_MAGIC: &[u8; 4] = b"PHN1";
pub const PHN1_VERSION: u16 = 1;
const PREFIX_LEN: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Position in the deterministic sample stream.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub epoch: u64,
    pub step: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNormMeta {
    pub tracked: u64,
    pub eps: f64,
    pub momentum: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u16,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Parameters, then batch-norm running statistics, then velocities.
    pub tensors: Vec<NamedTensor>,
    pub batch_norm: Vec<BatchNormMeta>,
    pub rng: RngState,
    /// Completed passes over the training set.
    pub epoch: u64,
    pub beta: Option<f64>,
    pub calibrated_threshold: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the payload, in f64 elements.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    train: TrainConfig,
    entries: Vec<Entry>,
    batch_norm: Vec<BatchNormMeta>,
    rng: RngState,
    epoch: u64,
    beta: Option<f64>,
    calibrated_threshold: Option<f64>,
}

pub fn velocity_name(param: &str) -> String {
    format!("velocity.{param}")
}

impl Checkpoint {
    /// Snapshot of a model plus optimizer state. `velocity` is either empty
    /// or holds one buffer per parameter in registry order.
    pub fn capture(model: &Model, train: &TrainConfig, velocity: &[Vec<f64>], rng: RngState, epoch: u64) -> Self {
        let mut tensors: Vec<NamedTensor> = model
            .params()
            .iter()
            .map(|p| NamedTensor {
                name: p.name.clone(),
                shape: p.tensor.shape().to_vec(),
                data: p.tensor.data().to_vec(),
            })
            .collect();
        for (i, bn) in model.bn_states().iter().enumerate() {
            let m = i + 1;
            for (suffix, v) in [("running_mean", &bn.running_mean), ("running_var", &bn.running_var)] {
                tensors.push(NamedTensor {
                    name: format!("stage{m}.bn.{suffix}"),
                    shape: vec![v.len()],
                    data: v.clone(),
                });
            }
        }
        for (p, v) in model.params().iter().zip(velocity) {
            tensors.push(NamedTensor {
                name: velocity_name(&p.name),
                shape: p.tensor.shape().to_vec(),
                data: v.clone(),
            });
        }
        Checkpoint {
            version: PHN1_VERSION,
            model: model.config().clone(),
            train: train.clone(),
            tensors,
            batch_norm: model
                .bn_states()
                .iter()
                .map(|b| BatchNormMeta {
                    tracked: b.tracked,
                    eps: b.eps,
                    momentum: b.momentum,
                })
                .collect(),
            rng,
            epoch,
            beta: None,
            calibrated_threshold: None,
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    fn require(&self, name: &str, shape: &[usize]) -> Result<&NamedTensor> {
        let t = self
            .tensor(name)
            .ok_or_else(|| Error::Input(format!("checkpoint lacks tensor {name}")))?;
        if t.shape != shape {
            return Err(Error::Dimension(format!(
                "checkpoint tensor {name} has shape {:?}, model expects {shape:?}",
                t.shape
            )));
        }
        Ok(t)
    }

    /// Rebuilds the model with stored parameters and running statistics.
    pub fn to_model(&self) -> Result<Model> {
        let mut model = Model::new(self.model.clone())?;
        for p in model.params_mut() {
            let t = self.require(&p.name, p.tensor.shape())?;
            p.tensor.data_mut().copy_from_slice(&t.data);
        }
        if self.batch_norm.len() != model.bn_states().len() {
            return Err(Error::Input("checkpoint batch-norm layer count differs from the model".into()));
        }
        for (i, (bn, meta)) in model.bn_states_mut().iter_mut().zip(&self.batch_norm).enumerate() {
            let m = i + 1;
            let c = bn.channels();
            *bn = BatchNormState {
                running_mean: self.require(&format!("stage{m}.bn.running_mean"), &[c])?.data.clone(),
                running_var: self.require(&format!("stage{m}.bn.running_var"), &[c])?.data.clone(),
                tracked: meta.tracked,
                eps: meta.eps,
                momentum: meta.momentum,
            };
        }
        Ok(model)
    }

    /// Velocity buffers in parameter order; zeros where none were stored.
    pub fn velocities(&self, model: &Model) -> Result<Vec<Vec<f64>>> {
        model
            .params()
            .iter()
            .map(|p| match self.tensor(&velocity_name(&p.name)) {
                Some(_) => Ok(self.require(&velocity_name(&p.name), p.tensor.shape())?.data.clone()),
                None => Ok(vec![0.0; p.numel()]),
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let entries = self
            .tensors
            .iter()
            .map(|t| {
                if t.shape.iter().product::<usize>() != t.data.len() {
                    return Err(Error::Dimension(format!("tensor {} shape does not match its data", t.name)));
                }
                let e = Entry {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    offset,
                };
                offset += t.data.len();
                Ok(e)
            })
            .collect::<Result<Vec<_>>>()?;
        let header = serde_json::to_vec(&Header {
            model: self.model.clone(),
            train: self.train.clone(),
            entries,
            batch_norm: self.batch_norm.clone(),
            rng: self.rng,
            epoch: self.epoch,
            beta: self.beta,
            calibrated_threshold: self.calibrated_threshold,
        })?;
        let header_len =
            u32::try_from(header.len()).map_err(|_| Error::Input("checkpoint header exceeds 4 GiB".into()))?;
        let mut out = Vec::with_capacity(PREFIX_LEN + header.len() + offset * 8);
        out.extend_from_slice(PHN1_MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&header_len.to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != PHN1_MAGIC {
            return Err(Error::Format {
                offset: 0,
                message: "missing PHN1 magic".into(),
            });
        }
        if bytes.len() < PREFIX_LEN {
            return Err(Error::Truncation {
                expected: PREFIX_LEN,
                actual: bytes.len(),
            });
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != PHN1_VERSION {
            return Err(Error::Format {
                offset: 4,
                message: format!("unsupported checkpoint version {version}"),
            });
        }
        let header_len = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
        let header_end = PREFIX_LEN
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or(Error::Truncation {
                expected: PREFIX_LEN.saturating_add(header_len),
                actual: bytes.len(),
            })?;
        let header: Header = serde_json::from_slice(&bytes[PREFIX_LEN..header_end]).map_err(|e| Error::Format {
            offset: PREFIX_LEN,
            message: format!("bad checkpoint header: {e}"),
        })?;
        let payload = &bytes[header_end..];
        let total: usize = header.entries.iter().map(|e| e.shape.iter().product::<usize>()).sum();
        if payload.len() != total * 8 {
            return Err(Error::Truncation {
                expected: header_end + total * 8,
                actual: bytes.len(),
            });
        }
        let mut expected_offset = 0;
        let mut tensors = Vec::with_capacity(header.entries.len());
        for e in header.entries {
            let n: usize = e.shape.iter().product();
            if e.offset != expected_offset {
                return Err(Error::Format {
                    offset: PREFIX_LEN,
                    message: format!("tensor {} offset {} is not contiguous", e.name, e.offset),
                });
            }
            let data = payload[e.offset * 8..(e.offset + n) * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            expected_offset += n;
            tensors.push(NamedTensor {
                name: e.name,
                shape: e.shape,
                data,
            });
        }
        Ok(Checkpoint {
            version,
            model: header.model,
            train: header.train,
            tensors,
            batch_norm: header.batch_norm,
            rng: header.rng,
            epoch: header.epoch,
            beta: header.beta,
            calibrated_threshold: header.calibrated_threshold,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Checkpoint::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}
