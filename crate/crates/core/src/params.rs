//! Named parameter storage, binding onto a tape, and the `HSEB` snapshot format.
//!
//! Snapshot layout, all little-endian: magic `HSEB`, `u32` version, then one
//! record per tensor until end of file: `u32` name length, UTF-8 name, `u32`
//! rank, `u32` extents, `f32` values.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{HseError, Result};
use crate::numerics::{Gradients, Real, Tape, Tensor, Var};

pub const SNAPSHOT_MAGIC: &[u8; 4] = b"HSEB";
pub const SNAPSHOT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T: Real> {
    pub name: String,
    pub value: Tensor<T>,
    pub frozen: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T: Real = f32> {
    params: Vec<Param<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore { params: Vec::new() }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, frozen: bool) -> ParamId {
        let name = name.into();
        assert!(
            self.find(&name).is_none(),
            "duplicate parameter name {name}"
        );
        self.params.push(Param {
            name,
            value,
            frozen,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Sets the frozen flag on every parameter whose name starts with `prefix`.
    pub fn set_frozen(&mut self, prefix: &str, frozen: bool) {
        for p in self
            .params
            .iter_mut()
            .filter(|p| p.name.starts_with(prefix))
        {
            p.frozen = frozen;
        }
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    frozen: p.frozen,
                })
                .collect(),
        }
    }

    /// Overwrites values by name; every stored parameter must be present with
    /// the same shape.
    pub fn load_values(&mut self, entries: &[(String, Tensor<f32>)]) -> Result<()> {
        for p in &mut self.params {
            let (_, t) = entries
                .iter()
                .find(|(n, _)| *n == p.name)
                .ok_or_else(|| HseError::Format(format!("snapshot lacks parameter {}", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(HseError::Format(format!(
                    "parameter {} has shape {:?} in snapshot, model expects {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.cast();
        }
        if entries.len() != self.params.len() {
            return Err(HseError::Format(format!(
                "snapshot holds {} tensors, model has {}",
                entries.len(),
                self.params.len()
            )));
        }
        Ok(())
    }
}

/// Lazily places parameters on a tape. Frozen parameters (or all of them when
/// gradients are off) enter as constants.
pub struct Binder<'s, T: Real> {
    store: &'s ParamStore<T>,
    vars: Vec<Option<Var>>,
    track_grads: bool,
}

impl<'s, T: Real> Binder<'s, T> {
    pub fn new(store: &'s ParamStore<T>, track_grads: bool) -> Self {
        Binder {
            store,
            vars: vec![None; store.len()],
            track_grads,
        }
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub fn var(&mut self, tape: &mut Tape<T>, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let p = self.store.get(id);
        let v = if self.track_grads && !p.frozen {
            tape.param(p.value.clone())
        } else {
            tape.constant(p.value.clone())
        };
        self.vars[id.0] = Some(v);
        v
    }

    /// Binds `id` to an existing tape variable instead of a fresh copy.
    pub fn preset(&mut self, id: ParamId, var: Var) {
        self.vars[id.0] = Some(var);
    }

    /// Parameters placed on the tape so far.
    pub fn bound(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
    }

    /// Per-parameter gradients, `None` where the parameter was unused or frozen.
    pub fn collect(&self, grads: &mut Gradients<T>) -> Vec<Option<Tensor<T>>> {
        self.vars
            .iter()
            .map(|v| v.and_then(|v| grads.take(v)))
            .collect()
    }
}

pub fn write_snapshot<T: Real>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    encode_snapshot(store, &mut buf)?;
    std::fs::write(path, buf).map_err(|e| HseError::io(path, e))
}

pub fn encode_snapshot<T: Real>(store: &ParamStore<T>, out: &mut impl Write) -> Result<()> {
    let io = |e| HseError::io("<snapshot>", e);
    out.write_all(SNAPSHOT_MAGIC).map_err(io)?;
    out.write_all(&SNAPSHOT_VERSION.to_le_bytes()).map_err(io)?;
    for (_, p) in store.iter() {
        let name = p.name.as_bytes();
        out.write_all(&(name.len() as u32).to_le_bytes())
            .map_err(io)?;
        out.write_all(name).map_err(io)?;
        out.write_all(&(p.value.rank() as u32).to_le_bytes())
            .map_err(io)?;
        for &e in p.value.shape() {
            out.write_all(&(e as u32).to_le_bytes()).map_err(io)?;
        }
        for &v in p.value.data() {
            out.write_all(&(v.to_f64() as f32).to_le_bytes())
                .map_err(io)?;
        }
    }
    Ok(())
}

pub fn read_snapshot(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let bytes = std::fs::read(path).map_err(|e| HseError::io(path, e))?;
    decode_snapshot(&bytes)
}

pub fn decode_snapshot(mut bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    fn take<'a>(bytes: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
        if bytes.len() < n {
            return Err(HseError::Format("truncated HSEB snapshot".into()));
        }
        let (head, tail) = bytes.split_at(n);
        *bytes = tail;
        Ok(head)
    }
    fn u32_le(bytes: &mut &[u8]) -> Result<u32> {
        let mut b = [0u8; 4];
        take(bytes, 4)?.read_exact(&mut b).expect("length checked");
        Ok(u32::from_le_bytes(b))
    }

    if take(&mut bytes, 4)? != SNAPSHOT_MAGIC {
        return Err(HseError::Format("not an HSEB snapshot (bad magic)".into()));
    }
    let version = u32_le(&mut bytes)?;
    if version != SNAPSHOT_VERSION {
        return Err(HseError::Format(format!(
            "unsupported HSEB version {version}"
        )));
    }
    let mut out = Vec::new();
    while !bytes.is_empty() {
        let n = u32_le(&mut bytes)? as usize;
        let name = std::str::from_utf8(take(&mut bytes, n)?)
            .map_err(|_| HseError::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = u32_le(&mut bytes)? as usize;
        let shape = (0..rank)
            .map(|_| u32_le(&mut bytes).map(|e| e as usize))
            .collect::<Result<Vec<_>>>()?;
        let count: usize = shape.iter().product();
        let raw = take(&mut bytes, count * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor::new(shape, data)
            .map_err(|e| HseError::Format(format!("tensor {name}: {e}")))?;
        out.push((name, t));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snapshot_roundtrip() {
        let mut s = ParamStore::<f32>::new();
        s.add(
            "a.w",
            Tensor::from_fn([2, 3], |i| i as f32 * 0.25 - 1.0),
            true,
        );
        s.add("b", Tensor::scalar(7.5), false);
        let mut buf = Vec::new();
        encode_snapshot(&s, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"HSEB");
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        let back = decode_snapshot(&buf).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].0, "a.w");
        assert_eq!(&back[0].1, s.value(ParamId(0)));
        assert_eq!(back[1].1.shape(), &[] as &[usize]);
    }

    #[test]
    fn truncated_snapshot_is_format_error() {
        let mut s = ParamStore::<f32>::new();
        s.add("x", Tensor::zeros([4]), false);
        let mut buf = Vec::new();
        encode_snapshot(&s, &mut buf).unwrap();
        buf.pop();
        assert!(matches!(decode_snapshot(&buf), Err(HseError::Format(_))));
        assert!(matches!(
            decode_snapshot(b"NOPE\x01\0\0\0"),
            Err(HseError::Format(_))
        ));
    }

    #[test]
    fn frozen_params_bind_as_constants() {
        let mut s = ParamStore::<f64>::new();
        let a = s.add("frozen", Tensor::scalar(1.0), true);
        let b = s.add("free", Tensor::scalar(2.0), false);
        let mut tape = Tape::new();
        let mut binder = Binder::new(&s, true);
        let va = binder.var(&mut tape, a);
        let vb = binder.var(&mut tape, b);
        assert_eq!(binder.var(&mut tape, b), vb);
        assert!(!tape.requires_grad(va));
        assert!(tape.requires_grad(vb));
        assert_eq!(tape.params(), vec![vb]);
    }
}
