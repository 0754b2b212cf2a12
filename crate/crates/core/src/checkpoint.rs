//! Versioned binary container for model parameters and optimizer moments.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "CAMSEGCK" | version u32 | epoch u64 | adam_step u64 | config_hash u64
//! tensor_count u32
//! per tensor: name_len u32 | name utf-8 | dtype u8 (0 = f32) | ndim u32
//!             | dims u64 × ndim | payload f32 × numel
//! ```
//!
//! Adam moments are stored as ordinary tensors named `adam.m.<param>` and
//! `adam.v.<param>`.

use std::path::Path;

use camseg_tensor::{AdamState, ParamId, Tensor};

use crate::error::{Error, Result};
use crate::model::FewShotSegmenter;

pub const MAGIC: &[u8; 8] = b"CAMSEGCK";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;
const FIRST_MOMENT: &str = "adam.m.";
const SECOND_MOMENT: &str = "adam.v.";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Completed epochs of the stage that wrote the checkpoint.
    pub epoch: u64,
    pub adam_step: u64,
    pub config_hash: u64,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    /// Snapshot of every parameter, plus the moments of `optimizer` if given
    /// (`ids` lists the parameters the moments belong to, in order).
    pub fn capture(
        model: &FewShotSegmenter,
        optimizer: Option<(&[ParamId], &AdamState)>,
        epoch: u64,
        config_hash: u64,
    ) -> Result<Self> {
        let store = model.store();
        let mut tensors: Vec<(String, Tensor)> =
            store.iter().map(|(_, name, t)| (name.to_string(), plain(t.shape(), t.data()))).collect();
        let mut adam_step = 0;
        if let Some((ids, state)) = optimizer {
            if ids.len() != state.first.len() {
                return Err(Error::Checkpoint(format!(
                    "{} optimizer slots for {} parameters",
                    state.first.len(),
                    ids.len()
                )));
            }
            adam_step = state.step;
            for (prefix, moments) in [(FIRST_MOMENT, &state.first), (SECOND_MOMENT, &state.second)] {
                for (&id, m) in ids.iter().zip(moments) {
                    tensors.push((format!("{prefix}{}", store.name(id)), plain(store.get(id).shape(), m)));
                }
            }
        }
        Ok(Checkpoint { epoch, adam_step, config_hash, tensors })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Copy parameters into `model`. Every checkpoint parameter must exist in
    /// the model with the same shape, and every model parameter must be
    /// present.
    pub fn restore_into(&self, model: &mut FewShotSegmenter) -> Result<()> {
        let store = model.store_mut();
        let mut seen = 0;
        for (name, t) in &self.tensors {
            if name.starts_with(FIRST_MOMENT) || name.starts_with(SECOND_MOMENT) {
                continue;
            }
            let id = store
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown tensor name `{name}`")))?;
            let dst = store.get_mut(id);
            if dst.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?} in the checkpoint but {:?} in the model",
                    t.shape(),
                    dst.shape()
                )));
            }
            dst.data_mut().copy_from_slice(t.data());
            seen += 1;
        }
        if seen != store.len() {
            let missing: Vec<_> = store
                .iter()
                .filter(|(_, n, _)| self.get(n).is_none())
                .map(|(_, n, _)| n.to_string())
                .collect();
            return Err(Error::Checkpoint(format!("checkpoint lacks tensors {missing:?}")));
        }
        Ok(())
    }

    /// Optimizer state for `ids`, or `None` if the checkpoint carries no
    /// moments for them.
    pub fn adam_state(&self, model: &FewShotSegmenter, ids: &[ParamId]) -> Result<Option<AdamState>> {
        let store = model.store();
        let mut first = Vec::with_capacity(ids.len());
        let mut second = Vec::with_capacity(ids.len());
        for &id in ids {
            let name = store.name(id);
            match (self.get(&format!("{FIRST_MOMENT}{name}")), self.get(&format!("{SECOND_MOMENT}{name}"))) {
                (Some(m), Some(v)) if m.numel() == store.get(id).numel() && v.numel() == m.numel() => {
                    first.push(m.data().to_vec());
                    second.push(v.data().to_vec());
                }
                (None, None) if first.is_empty() => return Ok(None),
                _ => return Err(Error::Checkpoint(format!("incomplete optimizer moments for `{name}`"))),
            }
        }
        Ok(Some(AdamState { step: self.adam_step, first, second }))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.adam_step.to_le_bytes());
        out.extend_from_slice(&self.config_hash.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F32);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8, "magic")? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic bytes)".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version} (expected {VERSION})")));
        }
        let epoch = r.u64("epoch")?;
        let adam_step = r.u64("adam step")?;
        let config_hash = r.u64("config hash")?;
        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let len = r.u32("name length")? as usize;
            let name = String::from_utf8(r.take(len, "tensor name")?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not utf-8".into()))?;
            let dtype = r.take(1, "dtype")?[0];
            if dtype != DTYPE_F32 {
                return Err(Error::Checkpoint(format!("tensor `{name}` has unknown dtype {dtype}")));
            }
            let ndim = r.u32("rank")? as usize;
            let shape = (0..ndim).map(|_| r.u64("dimension").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let bytes_needed = numel.and_then(|n| n.checked_mul(4)).ok_or_else(|| {
                Error::Checkpoint(format!("tensor `{name}` has an impossible shape {shape:?}"))
            })?;
            let payload = r.take(bytes_needed, "tensor payload")?;
            let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes after the tensor table", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { epoch, adam_step, config_hash, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

fn plain(shape: &[usize], data: &[f32]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).expect("shape matches source")
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated checkpoint while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}
