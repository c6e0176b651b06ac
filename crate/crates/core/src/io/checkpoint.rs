//! Checkpoint files.
//!
//! Little-endian layout: magic `PDPC`, `u32` format version, `u64`
//! structural hash, `u32` length + JSON header (model config and optional
//! training state), `u32` tensor count, then per tensor: `u32` name length,
//! UTF-8 name, `u32` rank, `u32` dims, `f32` values. Model entries come first
//! in store order, followed by Adam moments named `optim.m.<param>` and
//! `optim.v.<param>`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{structural_hash, Model, ModelConfig};
use crate::nn::ParamStore;
use crate::tensor::Tensor;
use crate::training::{Adam, TrainState};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PDPC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    training: Option<TrainState>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub optimizer: Option<Adam>,
    pub training: Option<TrainState>,
}

impl Checkpoint {
    pub fn structural_hash(&self) -> u64 {
        structural_hash(&self.config, &self.store)
    }

    /// Rebuilds the network layout for the stored parameters.
    pub fn model(&self) -> Result<Model> {
        let (model, _) = Model::build(&self.config, 0)?;
        model.check_store(&self.store)?;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.structural_hash().to_le_bytes());
        let header = Header {
            model: self.config.clone(),
            training: self.training.clone(),
        };
        let json = serde_json::to_vec(&header).expect("checkpoint header serializes");
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        let mut tensors: Vec<(String, &Tensor)> = self
            .store
            .entries()
            .iter()
            .map(|e| (e.name.clone(), &e.value))
            .collect();
        if let Some(adam) = &self.optimizer {
            for s in &adam.slots {
                tensors.push((format!("optim.m.{}", s.name), &s.first));
                tensors.push((format!("optim.v.{}", s.name), &s.second));
            }
        }
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = Reader {
            bytes,
            pos: 0,
            origin,
        };
        if r.take(4, "magic")? != CHECKPOINT_MAGIC {
            return Err(r.fail("not a checkpoint (bad magic)"));
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(r.fail(&format!("unsupported checkpoint version {version}")));
        }
        let hash = u64::from_le_bytes(r.take(8, "structural hash")?.try_into().unwrap());
        let len = r.u32("header length")? as usize;
        let header: Header = serde_json::from_slice(r.take(len, "header")?)
            .map_err(|e| r.fail(&format!("header: {e}")))?;
        let (model, mut store) = Model::build(&header.model, 0)?;
        let mut adam = Adam::new(&store);
        let mut seen = std::collections::HashSet::new();
        let mut seen_model = 0usize;
        let mut seen_optim = false;
        let count = r.u32("tensor count")?;
        for _ in 0..count {
            let name_len = r.u32("name length")? as usize;
            let name = String::from_utf8(r.take(name_len, "tensor name")?.to_vec())
                .map_err(|_| r.fail("tensor name is not UTF-8"))?;
            let rank = r.u32("rank")? as usize;
            let shape = (0..rank)
                .map(|_| r.u32("dims").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(4 * n, "tensor data")?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            let value = Tensor::new(shape, data)?;
            if !seen.insert(name.clone()) {
                return Err(r.fail(&format!("duplicate tensor {name}")));
            }
            let target = if let Some(p) = name.strip_prefix("optim.m.") {
                seen_optim = true;
                adam.slots
                    .iter_mut()
                    .find(|s| s.name == p)
                    .map(|s| &mut s.first)
            } else if let Some(p) = name.strip_prefix("optim.v.") {
                seen_optim = true;
                adam.slots
                    .iter_mut()
                    .find(|s| s.name == p)
                    .map(|s| &mut s.second)
            } else {
                seen_model += 1;
                store.get_mut(&name)
            };
            let slot = target.ok_or_else(|| r.fail(&format!("unexpected tensor {name}")))?;
            if slot.shape() != value.shape() {
                return Err(r.fail(&format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    value.shape(),
                    slot.shape()
                )));
            }
            *slot = value;
        }
        if seen_model != store.entries().len() {
            return Err(r.fail(&format!(
                "{seen_model} model tensors, expected {}",
                store.entries().len()
            )));
        }
        if r.pos != bytes.len() {
            return Err(r.fail("trailing bytes"));
        }
        let expected = model.structural_hash(&store);
        if hash != expected {
            return Err(Error::config(format!(
                "checkpoint hash {hash:016x} does not match its configuration ({expected:016x})"
            )));
        }
        if let (true, Some(t)) = (seen_optim, &header.training) {
            adam.steps = t.steps;
        }
        Ok(Self {
            config: header.model,
            store,
            optimizer: seen_optim.then_some(adam),
            training: header.training,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

/// `(name, scalar count)` of every tensor in a checkpoint, read without
/// rebuilding the model.
pub fn list_tensors(bytes: &[u8]) -> Result<Vec<(String, usize)>> {
    let origin = Path::new("<checkpoint>");
    let mut r = Reader {
        bytes,
        pos: 0,
        origin,
    };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(r.fail("not a checkpoint (bad magic)"));
    }
    r.take(12, "version and hash")?;
    let len = r.u32("header length")? as usize;
    r.take(len, "header")?;
    let count = r.u32("tensor count")?;
    (0..count)
        .map(|_| {
            let name_len = r.u32("name length")? as usize;
            let name = String::from_utf8_lossy(r.take(name_len, "tensor name")?).into_owned();
            let rank = r.u32("rank")? as usize;
            let mut n = 1usize;
            for _ in 0..rank {
                n *= r.u32("dims")? as usize;
            }
            r.take(4 * n, "tensor data")?;
            Ok((name, n))
        })
        .collect()
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a Path,
}

impl<'a> Reader<'a> {
    fn fail(&self, msg: &str) -> Error {
        Error::format(self.origin, msg.to_string())
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(&format!("truncated {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}
