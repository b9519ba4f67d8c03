//! Named parameter storage and the flat binary checkpoint format.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic    b"TPCK"
//! version  u32 = 1
//! count    u32
//! repeated count times, in registration order:
//!   name_len u32, name (UTF-8 bytes)
//!   ndim     u32, dims u32 x ndim
//!   values   f32 x product(dims)
//! ```

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{Real, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"TPCK";
const VERSION: u32 = 1;

/// Handle to a registered parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    lookup: HashMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            lookup: HashMap::new(),
        }
    }

    /// Registers a parameter. Panics on a duplicate name, which is a
    /// construction bug rather than an input error.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        let id = ParamId(self.tensors.len());
        let previous = self.lookup.insert(name.clone(), id);
        assert!(previous.is_none(), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(value);
        id
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            lookup: self.lookup.clone(),
        }
    }

    pub fn write_checkpoint(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(16 + self.numel() * 4);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, tensor) in self.names.iter().zip(&self.tensors) {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
            for &dim in tensor.shape() {
                buf.extend_from_slice(&(dim as u32).to_le_bytes());
            }
            for &x in tensor.data() {
                let v = x.to_f32().unwrap_or(f32::NAN);
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    /// Overwrites every registered parameter from a checkpoint. The file must
    /// hold exactly the same names, in the same order, with the same shapes.
    pub fn load_checkpoint(&mut self, path: &Path) -> Result<()> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let mut cursor = Cursor {
            bytes: &bytes,
            pos: 0,
            path,
        };
        if cursor.take(4)? != MAGIC {
            return Err(Error::format(path, "bad magic"));
        }
        let version = cursor.u32()?;
        if version != VERSION {
            return Err(Error::format(path, format!("unsupported version {version}")));
        }
        let count = cursor.u32()? as usize;
        if count != self.tensors.len() {
            return Err(Error::validation(format!(
                "checkpoint has {count} parameters, model expects {}",
                self.tensors.len()
            )));
        }
        for idx in 0..count {
            let name_len = cursor.u32()? as usize;
            let name = std::str::from_utf8(cursor.take(name_len)?)
                .map_err(|_| Error::format(path, "parameter name is not UTF-8"))?
                .to_string();
            let ndim = cursor.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| cursor.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            if name != self.names[idx] {
                return Err(Error::validation(format!(
                    "checkpoint parameter {idx} is {name}, model expects {}",
                    self.names[idx]
                )));
            }
            if shape != self.tensors[idx].shape() {
                return Err(Error::Dimension {
                    op: "load_checkpoint",
                    lhs: shape,
                    rhs: self.tensors[idx].shape().to_vec(),
                });
            }
            let dst = self.tensors[idx].data_mut();
            for slot in dst.iter_mut() {
                *slot = T::of(f32::from_le_bytes(cursor.take(4)?.try_into().unwrap()) as f64);
            }
        }
        if cursor.pos != bytes.len() {
            return Err(Error::format(path, "trailing bytes"));
        }
        Ok(())
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(self.path, "truncated"));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.bin");
        let mut store = ParamStore::<f32>::new();
        store.add("a", Tensor::new([2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        store.add("b", Tensor::new([3], vec![-1.0, 0.5, 0.25]).unwrap());
        store.write_checkpoint(&path).unwrap();

        let mut other = ParamStore::<f32>::new();
        let a = other.add("a", Tensor::zeros([2, 2]));
        let b = other.add("b", Tensor::zeros([3]));
        other.load_checkpoint(&path).unwrap();
        assert_eq!(other.get(a).data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(other.get(b).data(), &[-1.0, 0.5, 0.25]);

        let mut wrong = ParamStore::<f32>::new();
        wrong.add("a", Tensor::zeros([4]));
        wrong.add("b", Tensor::zeros([3]));
        assert!(matches!(wrong.load_checkpoint(&path), Err(Error::Dimension { .. })));
    }
}
