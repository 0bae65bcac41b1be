//! Binary weight container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"GMBI"
//! version u32
//! graph   u64   fingerprint of the graph the tensors belong to
//! step    u64   training step (0 for fresh weights)
//! count   u32
//! count x { name_len u16, name utf-8, dims u32 x 4, values f32 x numel }
//! ```
//!
//! Tensor names are prefixed `param/`, `buffer/`, `adam/m/` or `adam/v/`;
//! `adam/t` holds the optimizer update count as a one-element tensor.
//! Entries are written in lexicographic order, so encoding is canonical.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Model, ParamStore};
use crate::tensor::{Shape, Tensor};
use crate::train::{AdamState, TrainState};

pub const MAGIC: [u8; 4] = *b"GMBI";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub fingerprint: u64,
    pub step: u64,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn from_model(model: &Model<f32>) -> Self {
        let mut tensors = Vec::new();
        push_store(&mut tensors, "param/", &model.params);
        push_store(&mut tensors, "buffer/", &model.buffers);
        tensors.sort_by(|a, b| a.0.cmp(&b.0));
        Checkpoint { fingerprint: model.graph.fingerprint(), step: 0, tensors }
    }

    /// Weights plus optimizer moments, enough to resume training.
    pub fn from_state(state: &TrainState<f32>) -> Self {
        let mut ck = Self::from_model(&state.model);
        push_store(&mut ck.tensors, "adam/m/", &state.adam.m);
        push_store(&mut ck.tensors, "adam/v/", &state.adam.v);
        ck.tensors.push(("adam/t".into(), Tensor::scalar(state.adam.t as f32)));
        ck.tensors.sort_by(|a, b| a.0.cmp(&b.0));
        ck.step = state.step;
        ck
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|t| t.0 == name).map(|t| &t.1)
    }

    pub fn has_optimizer(&self) -> bool {
        self.get("adam/t").is_some()
    }

    pub fn check_fingerprint(&self, model: &Model<f32>) -> Result<()> {
        let expected = model.graph.fingerprint();
        if self.fingerprint != expected {
            return Err(Error::FingerprintMismatch { expected, found: self.fingerprint });
        }
        Ok(())
    }

    /// Overwrites every parameter and buffer of `model`; all must be present with matching shapes.
    pub fn restore_model(&self, model: &mut Model<f32>) -> Result<()> {
        self.check_fingerprint(model)?;
        fill_store(self, "param/", &mut model.params)?;
        fill_store(self, "buffer/", &mut model.buffers)
    }

    /// Restores weights, optimizer moments and step counter.
    pub fn restore_state(&self, state: &mut TrainState<f32>) -> Result<()> {
        self.restore_model(&mut state.model)?;
        if !self.has_optimizer() {
            return Err(Error::Checkpoint("no optimizer state stored".into()));
        }
        let mut adam = AdamState::new(&state.model.params);
        fill_store(self, "adam/m/", &mut adam.m)?;
        fill_store(self, "adam/v/", &mut adam.v)?;
        adam.t = self.get("adam/t").map(|t| t.item() as u64).unwrap_or(0);
        state.adam = adam;
        state.step = self.step;
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.fingerprint.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            for d in t.shape().dims() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("not a GMBI checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let fingerprint = r.u64()?;
        let step = r.u64()?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = core::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not utf-8".into()))?
                .to_string();
            let d = [r.u32()?, r.u32()?, r.u32()?, r.u32()?].map(|v| v as usize);
            let shape = Shape::new(d[0], d[1], d[2], d[3]);
            let raw = r.take(shape.numel().checked_mul(4).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            tensors.push((name, Tensor::from_vec(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { fingerprint, step, tensors })
    }
}

fn push_store(out: &mut Vec<(String, Tensor<f32>)>, prefix: &str, store: &ParamStore<f32>) {
    for (name, t) in store.iter() {
        out.push((format!("{prefix}{name}"), t.clone()));
    }
}

fn fill_store(ck: &Checkpoint, prefix: &str, store: &mut ParamStore<f32>) -> Result<()> {
    for (name, slot) in store.iter_mut() {
        let key = format!("{prefix}{name}");
        let t = ck.get(&key).ok_or_else(|| Error::Checkpoint(format!("missing tensor `{key}`")))?;
        if t.shape() != slot.shape() {
            return Err(Error::Checkpoint(format!("`{key}` has shape {}, model expects {}", t.shape(), slot.shape())));
        }
        *slot = t.clone();
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let mut a = [0u8; 8];
        a.copy_from_slice(self.take(8)?);
        Ok(u64::from_le_bytes(a))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_gmbinet, NetConfig};

    fn toy() -> Model<f32> {
        Model::init(build_gmbinet(&NetConfig::toy()).unwrap(), 4)
    }

    #[test]
    fn round_trip_is_canonical() {
        let m = toy();
        let bytes = Checkpoint::from_model(&m).encode();
        let ck = Checkpoint::decode(&bytes).unwrap();
        let mut fresh = Model::init(m.graph.clone(), 99);
        ck.restore_model(&mut fresh).unwrap();
        assert_eq!(fresh, m);
        assert_eq!(Checkpoint::from_model(&fresh).encode(), bytes);
    }

    #[test]
    fn rejects_foreign_graph_and_corruption() {
        let bytes = Checkpoint::from_model(&toy()).encode();
        let other = NetConfig::toy().scale_dim(4);
        let mut m = Model::init(build_gmbinet(&other).unwrap(), 0);
        let ck = Checkpoint::decode(&bytes).unwrap();
        assert!(matches!(ck.restore_model(&mut m), Err(Error::FingerprintMismatch { .. })));
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::decode(&bad).is_err());
    }

    #[test]
    fn optimizer_state_round_trip() {
        let mut st = TrainState::new(toy());
        st.step = 7;
        st.adam.t = 7;
        st.adam.m.iter_mut().for_each(|(_, t)| t.data_mut().fill(0.25));
        let ck = Checkpoint::decode(&Checkpoint::from_state(&st).encode()).unwrap();
        let mut back = TrainState::new(Model::init(st.model.graph.clone(), 1));
        ck.restore_state(&mut back).unwrap();
        assert_eq!(back.model, st.model);
        assert_eq!(back.adam, st.adam);
        assert_eq!(back.step, 7);
    }
}
