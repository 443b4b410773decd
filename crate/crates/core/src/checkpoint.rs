//! Versioned binary checkpoint.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"RISTCKPT"            magic
//! u32                    format version (currently 1)
//! u32, [u8]              JSON header: configs, epoch, optimizer scalars, RNG state
//! u32                    tensor count
//! per tensor:
//!   u16, [u8]            UTF-8 name
//!   u8                   dtype (0 = f64)
//!   u8, [u64; ndim]      shape
//!   [f64; prod(shape)]   row-major data
//! [u8; 32]               SHA-256 of every preceding byte
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::model::{Model, ModelConfig};
use crate::params::Parameterized;
use crate::training::{Adam, TrainConfig};

pub const MAGIC: &[u8; 8] = b"RISTCKPT";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;
const ADAM_M: &str = "optimizer.m";
const ADAM_V: &str = "optimizer.v";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: Option<Adam>,
    pub epoch: usize,
    pub rng: Option<ChaCha8Rng>,
    pub train_config: Option<TrainConfig>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    epoch: usize,
    optimizer: Option<Adam>,
    rng: Option<ChaCha8Rng>,
    train_config: Option<TrainConfig>,
}

struct Tensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Checkpoint {
    pub fn from_model(model: Model) -> Self {
        Self {
            model,
            optimizer: None,
            epoch: 0,
            rng: None,
            train_config: None,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            model: self.model.config(),
            epoch: self.epoch,
            optimizer: self.optimizer.clone(),
            rng: self.rng.clone(),
            train_config: self.train_config.clone(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");

        let mut tensors = Vec::new();
        self.model.visit_params("", &mut |name, a| {
            tensors.push(Tensor {
                name: name.to_string(),
                shape: a.shape().to_vec(),
                data: a.iter().copied().collect(),
            });
        });
        if let Some(opt) = &self.optimizer {
            for (name, v) in [(ADAM_M, &opt.m), (ADAM_V, &opt.v)] {
                tensors.push(Tensor {
                    name: name.to_string(),
                    shape: vec![v.len()],
                    data: v.clone(),
                });
            }
        }

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for t in &tensors {
            out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(DTYPE_F64);
            out.push(t.shape.len() as u8);
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in &t.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |msg: &str| Error::CorruptCheckpoint(msg.to_string());
        if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(corrupt("missing RISTCKPT magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        if bytes.len() < 12 + 32 {
            return Err(corrupt("file truncated"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("checksum mismatch (truncated or modified file)"));
        }

        let mut r = Reader { buf: body, pos: 12 };
        let header_len = r.u32()? as usize;
        let header: Header =
            serde_json::from_slice(r.take(header_len)?).map_err(|e| corrupt(&format!("header: {e}")))?;
        let count = r.u32()? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name =
                String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| corrupt("tensor name is not UTF-8"))?;
            if r.u8()? != DTYPE_F64 {
                return Err(corrupt(&format!("tensor {name}: unsupported dtype")));
            }
            let ndim = r.u8()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let len = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| corrupt("tensor too large"))?;
            let raw = r.take(len.checked_mul(8).ok_or_else(|| corrupt("tensor too large"))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.insert(name.clone(), Tensor { name, shape, data });
        }
        if r.pos != body.len() {
            return Err(corrupt("trailing bytes after tensors"));
        }

        let mut model = Model::new(&header.model, 0).map_err(|e| corrupt(&format!("model config: {e}")))?;
        let mut failure = None;
        model.visit_params_mut("", &mut |name, a| {
            if failure.is_some() {
                return;
            }
            match tensors.remove(name) {
                Some(t) if t.shape == a.shape() => {
                    *a = Array2::from_shape_vec(a.raw_dim(), t.data).expect("shape checked");
                }
                Some(t) => {
                    failure = Some(format!(
                        "tensor {} has shape {:?}, expected {:?}",
                        t.name,
                        t.shape,
                        a.shape()
                    ))
                }
                None => failure = Some(format!("tensor {name} missing")),
            }
        });
        if let Some(msg) = failure {
            return Err(corrupt(&msg));
        }

        let mut optimizer = header.optimizer;
        if let Some(opt) = optimizer.as_mut() {
            let n = model.param_count();
            for (name, slot) in [(ADAM_M, &mut opt.m), (ADAM_V, &mut opt.v)] {
                let t = tensors
                    .remove(name)
                    .ok_or_else(|| corrupt(&format!("tensor {name} missing")))?;
                if t.shape != [n] {
                    return Err(corrupt(&format!("tensor {name} does not match the parameter count")));
                }
                *slot = t.data;
            }
        }
        if let Some(name) = tensors.keys().next() {
            return Err(corrupt(&format!("unexpected tensor {name}")));
        }

        Ok(Self {
            model,
            optimizer,
            epoch: header.epoch,
            rng: header.rng,
            train_config: header.train_config,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Hex SHA-256 of a checkpoint file, as recorded in output headers.
pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    Checkpoint::from_model(model.clone()).save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    Checkpoint::load(path).map(|c| c.model)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::CorruptCheckpoint("unexpected end of data".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
