//! Named parameter sets with freeze flags, gradient buffers, Adam state, and
//! a versioned binary checkpoint format.
//!
//! # Checkpoint layout (version 1)
//!
//! All integers little-endian. Values are stored as raw `f64` regardless of
//! the in-memory scalar type.
//!
//! ```text
//! magic    8 bytes   "AVPARAMS"
//! version  u32       1
//! count    u32       number of entries
//! entry table, repeated `count` times in name order:
//!   name_len u32, name utf-8 bytes, frozen u8, ndim u32, dims u64 x ndim
//! payload: raw f64 values per entry, same order as the table
//! ```
//!
//! Optimizer moments are not serialized; loading a checkpoint starts Adam
//! fresh. Serialization order is the sorted name order, so identical
//! parameter sets produce identical bytes.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use super::scalar::Scalar;
use super::tensor::Tensor;
use super::NumericsError;

const MAGIC: &[u8; 8] = b"AVPARAMS";
const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub(crate) struct Param<S> {
    pub value: Tensor<S>,
    pub frozen: bool,
    pub grad: Option<Tensor<S>>,
    pub m: Vec<S>,
    pub v: Vec<S>,
    pub steps: u64,
}

/// Collection of named tensors with per-entry freeze flags.
///
/// Iteration order is always sorted name order, which makes optimizer sweeps
/// and serialization deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamSet<S> {
    pub(crate) entries: BTreeMap<String, Param<S>>,
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        ParamSet {
            entries: BTreeMap::new(),
        }
    }

    /// Registers a new parameter. Panics if the name is already taken;
    /// parameter names are assigned statically by the model builders.
    pub fn insert(&mut self, name: &str, value: Tensor<S>) {
        let len = value.len();
        let prev = self.entries.insert(
            name.to_string(),
            Param {
                value,
                frozen: false,
                grad: None,
                m: vec![S::zero(); len],
                v: vec![S::zero(); len],
                steps: 0,
            },
        );
        assert!(prev.is_none(), "duplicate parameter name {name:?}");
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn n_entries(&self) -> usize {
        self.entries.len()
    }

    /// Total number of scalar values across all entries.
    pub fn n_values(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<S>, NumericsError> {
        self.entries
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| NumericsError::UnknownParam {
                name: name.to_string(),
            })
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor<S>, NumericsError> {
        self.entries
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| NumericsError::UnknownParam {
                name: name.to_string(),
            })
    }

    pub fn is_frozen(&self, name: &str) -> Result<bool, NumericsError> {
        self.entries
            .get(name)
            .map(|p| p.frozen)
            .ok_or_else(|| NumericsError::UnknownParam {
                name: name.to_string(),
            })
    }

    pub fn set_frozen(&mut self, name: &str, frozen: bool) -> Result<(), NumericsError> {
        let p = self
            .entries
            .get_mut(name)
            .ok_or_else(|| NumericsError::UnknownParam {
                name: name.to_string(),
            })?;
        p.frozen = frozen;
        Ok(())
    }

    /// Sets the freeze flag on every entry whose name starts with `prefix`.
    /// Returns how many entries matched.
    pub fn set_frozen_prefix(&mut self, prefix: &str, frozen: bool) -> usize {
        let mut n = 0;
        for (name, p) in self.entries.iter_mut() {
            if name.starts_with(prefix) {
                p.frozen = frozen;
                n += 1;
            }
        }
        n
    }

    pub fn set_all_frozen(&mut self, frozen: bool) {
        for p in self.entries.values_mut() {
            p.frozen = frozen;
        }
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor<S>> {
        self.entries.get(name).and_then(|p| p.grad.as_ref())
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.grad = None;
        }
    }

    /// Adds `grads` into the stored gradient buffers, allocating them on
    /// first use. Unknown names and shape mismatches are contract errors.
    pub fn accumulate_grads(
        &mut self,
        grads: &BTreeMap<String, Tensor<S>>,
    ) -> Result<(), NumericsError> {
        for (name, g) in grads {
            let p = self
                .entries
                .get_mut(name)
                .ok_or_else(|| NumericsError::UnknownParam { name: name.clone() })?;
            if g.shape() != p.value.shape() {
                return Err(NumericsError::ShapeMismatch {
                    op: "accumulate_grads",
                    left: p.value.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
            match &mut p.grad {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a = *a + *b;
                    }
                }
                None => p.grad = Some(g.clone()),
            }
        }
        Ok(())
    }

    /// Scales every stored gradient, used to average over a batch.
    pub fn scale_grads(&mut self, factor: f64) {
        let f = S::of(factor);
        for p in self.entries.values_mut() {
            if let Some(g) = &mut p.grad {
                for v in g.data_mut() {
                    *v = *v * f;
                }
            }
        }
    }

    /// Writes the checkpoint format described in the module docs.
    pub fn save(&self, path: &Path) -> Result<(), NumericsError> {
        let bytes = self.to_bytes();
        std::fs::write(path, bytes).map_err(|e| NumericsError::Io(format!("{path:?}: {e}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, p) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(p.frozen as u8);
            let shape = p.value.shape();
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
        }
        for p in self.entries.values() {
            for v in p.value.data() {
                out.extend_from_slice(&v.real().to_le_bytes());
            }
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self, NumericsError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| NumericsError::Io(format!("{path:?}: {e}")))?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NumericsError> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.take(8)?;
        if magic != MAGIC {
            return Err(NumericsError::BadCheckpoint("bad magic bytes".into()));
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(NumericsError::BadCheckpoint(format!(
                "unsupported version {version}"
            )));
        }
        let count = cur.u32()? as usize;
        let mut table = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = cur.u32()? as usize;
            let name = String::from_utf8(cur.take(name_len)?.to_vec())
                .map_err(|_| NumericsError::BadCheckpoint("non-utf8 parameter name".into()))?;
            let frozen = cur.take(1)?[0] != 0;
            let ndim = cur.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(cur.u64()? as usize);
            }
            table.push((name, frozen, shape));
        }
        let mut set = ParamSet::new();
        for (name, frozen, shape) in table {
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(S::of(f64::from_le_bytes(
                    cur.take(8)?.try_into().unwrap(),
                )));
            }
            if set.contains(&name) {
                return Err(NumericsError::BadCheckpoint(format!(
                    "duplicate entry {name:?}"
                )));
            }
            set.insert(&name, Tensor::from_vec(&shape, data)?);
            set.set_frozen(&name, frozen).unwrap();
        }
        if cur.pos != bytes.len() {
            return Err(NumericsError::BadCheckpoint(format!(
                "{} trailing bytes",
                bytes.len() - cur.pos
            )));
        }
        Ok(set)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NumericsError> {
        if self.pos + n > self.bytes.len() {
            return Err(NumericsError::BadCheckpoint("truncated file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, NumericsError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, NumericsError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
