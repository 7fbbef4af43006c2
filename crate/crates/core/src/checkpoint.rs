//! Binary checkpoint container shared by every model.
//!
//! Layout (all little-endian):
//!
//! ```text
//! magic      8 bytes  "LSEPCKPT"
//! version    u32      = 1
//! kind       u32      1 codec, 2 generator, 3 training state
//! n_ints     u32      followed by n_ints × u64 config integers
//! n_floats   u32      followed by n_floats × f32 config reals
//! n_tensors  u32      followed by n_tensors × (rows u32, cols u32)
//! payload             every tensor's values as f32, row-major, in order
//! ```
//!
//! The meaning of the integers, reals and tensor order is fixed per kind by
//! the owning model (see `CodecModel::to_checkpoint` and
//! `GeneratorModel::to_checkpoint`).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"LSEPCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u32)]
pub enum Kind {
    Codec = 1,
    Generator = 2,
    TrainState = 3,
}

impl Kind {
    fn from_u32(v: u32) -> Option<Self> {
        match v {
            1 => Some(Kind::Codec),
            2 => Some(Kind::Generator),
            3 => Some(Kind::TrainState),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: Kind,
    pub ints: Vec<u64>,
    pub floats: Vec<f32>,
    pub tensors: Vec<Tensor>,
}

impl Checkpoint {
    pub fn new(kind: Kind) -> Self {
        Self {
            kind,
            ints: Vec::new(),
            floats: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.kind as u32).to_le_bytes());
        out.extend_from_slice(&(self.ints.len() as u32).to_le_bytes());
        for v in &self.ints {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.floats.len() as u32).to_le_bytes());
        for v in &self.floats {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
        }
        for t in &self.tensors {
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, off: 0 };
        if r.take(8)? != MAGIC {
            return Err(r.err(0, "bad magic bytes"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.err(8, format!("unsupported version {version}")));
        }
        let kind_raw = r.u32()?;
        let kind = Kind::from_u32(kind_raw).ok_or_else(|| r.err(12, format!("unknown kind {kind_raw}")))?;
        let n_ints = r.u32()? as usize;
        let ints = (0..n_ints).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let n_floats = r.u32()? as usize;
        let floats = (0..n_floats).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
        let n_tensors = r.u32()? as usize;
        let shapes = (0..n_tensors)
            .map(|_| Ok((r.u32()? as usize, r.u32()? as usize)))
            .collect::<Result<Vec<_>>>()?;
        let mut tensors = Vec::with_capacity(n_tensors);
        for (rows, cols) in shapes {
            let data = (0..rows * cols).map(|_| r.f32().map(f64::from)).collect::<Result<Vec<_>>>()?;
            tensors.push(Tensor::from_vec(rows, cols, data)?);
        }
        if r.off != bytes.len() {
            return Err(r.err(r.off, "trailing bytes after payload"));
        }
        Ok(Self {
            kind,
            ints,
            floats,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn expect_kind(&self, kind: Kind) -> Result<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "checkpoint holds a {:?}, expected a {kind:?}",
                self.kind
            )))
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    off: usize,
}

impl Reader<'_> {
    fn err(&self, offset: usize, msg: impl Into<String>) -> Error {
        Error::Parse {
            what: "checkpoint".into(),
            offset: offset as u64,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let s = self
            .bytes
            .get(self.off..self.off + n)
            .ok_or_else(|| self.err(self.off, "unexpected end of file"))?;
        self.off += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Sequential reader over a checkpoint's integer and tensor lists.
pub(crate) struct Cursor<'a> {
    ck: &'a Checkpoint,
    int: usize,
    float: usize,
    tensor: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(ck: &'a Checkpoint) -> Self {
        Self {
            ck,
            int: 0,
            float: 0,
            tensor: 0,
        }
    }

    pub(crate) fn int(&mut self) -> Result<u64> {
        let v = self.ck.ints.get(self.int).copied().ok_or_else(|| {
            Error::InvalidArgument("checkpoint header has too few integers".into())
        })?;
        self.int += 1;
        Ok(v)
    }

    pub(crate) fn usize(&mut self) -> Result<usize> {
        self.int().map(|v| v as usize)
    }

    pub(crate) fn float(&mut self) -> Result<f64> {
        let v = self.ck.floats.get(self.float).copied().ok_or_else(|| {
            Error::InvalidArgument("checkpoint header has too few reals".into())
        })?;
        self.float += 1;
        Ok(v as f64)
    }

    pub(crate) fn tensor(&mut self) -> Result<&'a Tensor> {
        let t = self.ck.tensors.get(self.tensor).ok_or_else(|| {
            Error::InvalidArgument("checkpoint payload has too few tensors".into())
        })?;
        self.tensor += 1;
        Ok(t)
    }

    /// Fills every parameter of `store` in order, checking shapes.
    pub(crate) fn fill(&mut self, store: &mut crate::params::ParamStore) -> Result<()> {
        for p in store.iter_mut() {
            let t = self.tensor()?;
            if t.shape() != p.value.shape() {
                return Err(Error::InvalidArgument(format!(
                    "parameter {} has shape {:?} in checkpoint, model expects {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.clone();
        }
        Ok(())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.tensor != self.ck.tensors.len() {
            return Err(Error::InvalidArgument(format!(
                "checkpoint has {} tensors, model consumed {}",
                self.ck.tensors.len(),
                self.tensor
            )));
        }
        Ok(())
    }
}

pub(crate) fn push_store(ck: &mut Checkpoint, store: &crate::params::ParamStore) {
    ck.tensors.extend(store.iter().map(|p| p.value.clone()));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_corruption() {
        let mut ck = Checkpoint::new(Kind::Codec);
        ck.ints = vec![1, 64, 8];
        ck.floats = vec![0.5];
        ck.tensors = vec![
            Tensor::from_vec(2, 2, vec![1.0, -0.5, 0.25, 3.0]).unwrap(),
            Tensor::zeros(0, 3),
        ];
        let bytes = ck.to_bytes();
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ck);

        let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 2]).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        assert!(ck.expect_kind(Kind::Generator).is_err());
    }
}
