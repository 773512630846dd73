//! Named parameter storage and the checkpoint file format.
//!
//! A checkpoint is a flat little-endian archive:
//!
//! ```text
//! magic      8 bytes   "PTCKPT01"
//! count      u32       number of entries
//! entry*     sorted by name (byte order)
//!   name_len u32
//!   name     name_len bytes, UTF-8 parameter path such as "encoder.0.attn.q.weight"
//!   rank     u32
//!   dims     rank x u32
//!   values   product(dims) x f32
//! ```
//!
//! Entries are written in sorted order and values are always stored as
//! `f32`, so saving the same parameters twice produces identical bytes.

use std::collections::BTreeMap;
use std::ops::Index;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Real, Tape, Tensor, Var};

const MAGIC: &[u8; 8] = b"PTCKPT01";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Optimizer group. The backbone (patch embedding, positional encodings
/// and the fusion encoder) trains with a smaller learning rate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Backbone,
    Other,
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor<T>,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

/// Parameters recorded on a tape, indexable by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

impl Bound {
    /// Wraps tape variables listed in parameter order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter {name}"
        );
        self.params.push(Param { name, group, value });
        ParamId(self.params.len() - 1)
    }

    /// Normal(0, std) initialized parameter.
    pub fn add_normal(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        shape: &[usize],
        std: f64,
        rng: &mut Rng,
    ) -> ParamId {
        let value = Tensor::from_fn(shape.to_vec(), |_| T::of(std * rng.normal()));
        self.add(name, group, value)
    }

    pub fn add_const(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        shape: &[usize],
        value: f64,
    ) -> ParamId {
        self.add(name, group, Tensor::full(shape.to_vec(), T::of(value)))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Records every parameter as a gradient-requiring leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Result<Bound> {
        self.bind_with(tape, true)
    }

    pub fn bind_with(&self, tape: &mut Tape<T>, requires_grad: bool) -> Result<Bound> {
        let vars = self
            .params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), requires_grad))
            .collect::<Result<_>>()?;
        Ok(Bound(vars))
    }

    /// Gradients of every parameter after `tape.backward`.
    pub fn grads(&self, tape: &Tape<T>, bound: &Bound) -> Vec<Tensor<T>> {
        self.params
            .iter()
            .zip(&bound.0)
            .map(|(p, &v)| {
                tape.grad(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(p.value.shape().to_vec()))
            })
            .collect()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    group: p.group,
                    value: p.value.cast(),
                })
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let sorted: BTreeMap<&str, &Tensor<T>> = self
            .params
            .iter()
            .map(|p| (p.name.as_str(), &p.value))
            .collect();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(sorted.len() as u32).to_le_bytes());
        for (name, value) in sorted {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(value.shape().len() as u32).to_le_bytes());
            for &d in value.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in value.data() {
                let x = v.to_f32().unwrap_or(f32::NAN);
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    /// Overwrites parameter values from a checkpoint. Every parameter of
    /// this store must be present with a matching shape; extra entries are
    /// an error.
    pub fn load_bytes(&mut self, bytes: &[u8]) -> Result<()> {
        let entries = read_entries(bytes)?;
        if entries.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, model has {}",
                entries.len(),
                self.params.len()
            )));
        }
        for (name, shape, values) in entries {
            let id = self
                .find(&name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
            let slot = &mut self.params[id.0].value;
            if slot.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "{name}: checkpoint shape {shape:?}, model shape {:?}",
                    slot.shape()
                )));
            }
            for (dst, v) in slot.data_mut().iter_mut().zip(values) {
                *dst = T::of(v as f64);
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = std::fs::read(path)?;
        self.load_bytes(&bytes)
    }
}

type Entry = (String, Vec<usize>, Vec<f32>);

fn read_entries(bytes: &[u8]) -> Result<Vec<Entry>> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let count = cur.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(len)?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
            .to_owned();
        let rank = cur.u32()? as usize;
        let shape = (0..rank)
            .map(|_| cur.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let values = cur
            .take(numel * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push((name, shape, values));
    }
    if cur.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore<f32> {
        let mut rng = Rng::new(3);
        let mut s = ParamStore::new();
        s.add_normal("b.weight", ParamGroup::Other, &[2, 3], 1.0, &mut rng);
        s.add_normal("a.bias", ParamGroup::Backbone, &[3], 1.0, &mut rng);
        s
    }

    #[test]
    fn bytes_are_sorted_and_stable() {
        let s = store();
        let bytes = s.to_bytes();
        assert_eq!(bytes, s.to_bytes());
        assert_eq!(&bytes[..8], MAGIC);
        // first entry is "a.bias"
        assert_eq!(&bytes[16..22], b"a.bias");
    }

    #[test]
    fn round_trip_restores_values() {
        let s = store();
        let mut fresh = ParamStore::<f32>::new();
        fresh.add_const("b.weight", ParamGroup::Other, &[2, 3], 0.0);
        fresh.add_const("a.bias", ParamGroup::Backbone, &[3], 0.0);
        fresh.load_bytes(&s.to_bytes()).unwrap();
        for ((_, a), (_, b)) in s.iter().zip(fresh.iter()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn shape_mismatch_and_truncation_fail() {
        let s = store();
        let mut other = ParamStore::<f32>::new();
        other.add_const("b.weight", ParamGroup::Other, &[3, 2], 0.0);
        other.add_const("a.bias", ParamGroup::Backbone, &[3], 0.0);
        assert!(other.load_bytes(&s.to_bytes()).is_err());
        let bytes = s.to_bytes();
        let mut same = s.clone();
        assert!(same.load_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
