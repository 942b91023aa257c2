//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      4 bytes  "DLRA"
//! version    u32      1
//! meta_len   u64      byte length of the metadata
//! metadata   UTF-8 JSON
//! count      u64      number of tensors
//! per tensor:
//!   name_len u64, name (UTF-8)
//!   dtype    u32      1 = f64
//!   rank     u32
//!   dims     u64 × rank
//!   payload  8 × product(dims) bytes, f64 little-endian
//! ```
//!
//! No bytes may follow the last tensor.

use std::collections::BTreeSet;
use std::path::Path;

use serde_json::Value;

use crate::adapters::LowRankAdapter;
use crate::error::{Error, Result};
use crate::nets::Model;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DLRA";
pub const VERSION: u32 = 1;
pub const DTYPE_F64: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub metadata: Value,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn new(metadata: Value) -> Self {
        Self {
            metadata,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(Error::contract(format!("duplicate tensor name {name:?}")));
        }
        self.tensors.push(NamedTensor { name, tensor });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .map(|t| &t.tensor)
    }

    fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::contract(format!("checkpoint has no tensor {name:?}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_string(&self.metadata)?;
        let payload: usize = self.tensors.iter().map(|t| 8 * t.tensor.numel()).sum();
        let mut out = Vec::with_capacity(32 + meta.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for NamedTensor { name, tensor } in &self.tensors {
            out.extend_from_slice(&(name.len() as u64).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&DTYPE_F64.to_le_bytes());
            out.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
            for &d in tensor.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(r.fail_at(0, "bad magic"));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(r.fail_at(4, format!("unsupported version {version}")));
        }
        let meta_len = r.len_u64("metadata length")?;
        let meta_at = r.pos;
        let meta = std::str::from_utf8(r.take(meta_len, "metadata")?)
            .map_err(|e| r.fail_at(meta_at, format!("metadata is not UTF-8: {e}")))?;
        let metadata: Value = serde_json::from_str(meta)
            .map_err(|e| r.fail_at(meta_at, format!("metadata is not JSON: {e}")))?;

        let count = r.len_u64("tensor count")?;
        let mut names = BTreeSet::new();
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name_at = r.pos;
            let name_len = r.len_u64("name length")?;
            let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
                .map_err(|_| r.fail_at(name_at, "tensor name is not UTF-8"))?
                .to_string();
            if !names.insert(name.clone()) {
                return Err(r.fail_at(name_at, format!("duplicate tensor name {name:?}")));
            }
            let dtype_at = r.pos;
            let dtype = r.u32("dtype")?;
            if dtype != DTYPE_F64 {
                return Err(r.fail_at(dtype_at, format!("unknown dtype tag {dtype}")));
            }
            let rank = r.u32("rank")? as usize;
            let mut dims = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                dims.push(r.len_u64("dimension")?);
            }
            let payload_at = r.pos;
            let numel = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|n| n.checked_mul(8))
                .ok_or_else(|| r.fail_at(payload_at, "tensor size overflows"))?;
            let raw = r.take(numel, "tensor payload")?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let tensor = Tensor::new(dims, data)
                .map_err(|e| r.fail_at(payload_at, format!("invalid tensor {name:?}: {e}")))?;
            tensors.push(NamedTensor { name, tensor });
        }
        if r.pos != bytes.len() {
            return Err(r.fail_at(r.pos, "trailing bytes after last tensor"));
        }
        Ok(Self { metadata, tensors })
    }

    /// Writes via a temporary file in the target directory and an atomic
    /// rename, so an interrupted save leaves no partial file behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        super::atomic_write(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Adds `<name>.A`, `<name>.B` and scalar `<name>.alpha`, `<name>.r`,
    /// `<name>.p` for one adapter.
    pub fn push_adapter(&mut self, name: &str, adapter: &LowRankAdapter) -> Result<()> {
        self.push(format!("{name}.A"), adapter.a().clone())?;
        self.push(format!("{name}.B"), adapter.b().clone())?;
        self.push(format!("{name}.alpha"), Tensor::scalar(adapter.alpha())?)?;
        self.push(format!("{name}.r"), Tensor::scalar(adapter.rank() as f64)?)?;
        self.push(format!("{name}.p"), Tensor::scalar(adapter.pruning_prob())?)?;
        Ok(())
    }

    /// Names `X` for which the checkpoint holds `X.A`.
    pub fn adapter_names(&self) -> Vec<&str> {
        self.tensors
            .iter()
            .filter_map(|t| t.name.strip_suffix(".A"))
            .collect()
    }

    /// Copies stored factors and alpha into the model's matching adapters.
    /// Every adapter in the model must be present in the checkpoint.
    pub fn install<M: Model + ?Sized>(&self, model: &mut M) -> Result<()> {
        for layer in model.layers_mut() {
            let name = layer.name();
            let Some(ad) = layer.adapter_mut() else {
                continue;
            };
            let a = self.require(&format!("{name}.A"))?.clone();
            let b = self.require(&format!("{name}.B"))?.clone();
            let alpha = self.require(&format!("{name}.alpha"))?.item();
            ad.set_factors(a, b)?;
            ad.set_alpha(alpha)?;
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail_at(&self, offset: usize, reason: impl Into<String>) -> Error {
        Error::Integrity {
            offset: offset as u64,
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s: &'a [u8] = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.fail_at(
                self.pos,
                format!(
                    "truncated {what}: need {n} bytes, {} remain",
                    self.bytes.len() - self.pos
                ),
            )),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn len_u64(&mut self, what: &str) -> Result<usize> {
        let at = self.pos;
        let v = u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| self.fail_at(at, format!("{what} {v} too large")))
    }
}

/// Saves every adapter of `adapters` with `metadata`.
pub fn save_adapter(
    path: &Path,
    adapters: &[(&str, &LowRankAdapter)],
    metadata: Value,
) -> Result<()> {
    let mut ck = Checkpoint::new(metadata);
    for (name, ad) in adapters {
        ck.push_adapter(name, ad)?;
    }
    ck.save(path)
}

pub fn load_adapter(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path)
}
