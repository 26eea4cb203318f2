//! Flat binary container for datasets, checkpoints and analysis records.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     4 bytes  "SRCN"
//! version   u32      1
//! kind_len  u32, kind utf-8 bytes       ("dataset", "checkpoint", ...)
//! count     u32      number of entries
//! entry*    name_len u32, name utf-8,
//!           dtype u8 (1 = f32, 2 = f64, 3 = u32, 4 = u64, 5 = u8),
//!           rank u32, dims u64 * rank,
//!           payload: prod(dims) little-endian values
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Element, Tensor};

pub const MAGIC: &[u8; 4] = b"SRCN";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U32(Vec<u32>),
    U64(Vec<u64>),
    U8(Vec<u8>),
}

impl ArrayData {
    fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
            ArrayData::U32(v) => v.len(),
            ArrayData::U64(v) => v.len(),
            ArrayData::U8(v) => v.len(),
        }
    }

    fn code(&self) -> u8 {
        match self {
            ArrayData::F32(_) => 1,
            ArrayData::F64(_) => 2,
            ArrayData::U32(_) => 3,
            ArrayData::U64(_) => 4,
            ArrayData::U8(_) => 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

impl Array {
    pub fn new(shape: Vec<usize>, data: ArrayData) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("array holds {} values", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn from_tensor<T: Element>(t: &Tensor<T>) -> Self {
        let data = match T::DTYPE {
            DType::F32 => ArrayData::F32(t.data().iter().map(|v| v.as_f64() as f32).collect()),
            DType::F64 => ArrayData::F64(t.data().iter().map(|v| v.as_f64()).collect()),
        };
        Self {
            shape: t.shape().to_vec(),
            data,
        }
    }

    pub fn u64s(values: Vec<u64>) -> Self {
        Self {
            shape: vec![values.len()],
            data: ArrayData::U64(values),
        }
    }

    pub fn u32s(values: Vec<u32>) -> Self {
        Self {
            shape: vec![values.len()],
            data: ArrayData::U32(values),
        }
    }

    /// UTF-8 text stored as a byte array.
    pub fn text(s: &str) -> Self {
        Self {
            shape: vec![s.len()],
            data: ArrayData::U8(s.as_bytes().to_vec()),
        }
    }

    pub fn as_text(&self) -> Result<&str> {
        match &self.data {
            ArrayData::U8(v) => std::str::from_utf8(v).map_err(|_| Error::InvalidArgument("text entry is not utf-8".into())),
            _ => Err(Error::InvalidArgument("expected a u8 text array".into())),
        }
    }

    /// Converts floating data to a tensor of `T`; the stored width must
    /// match `T` so the conversion is exact.
    pub fn to_tensor<T: Element>(&self) -> Result<Tensor<T>> {
        let values: Vec<T> = match (&self.data, T::DTYPE) {
            (ArrayData::F32(v), DType::F32) => v.iter().map(|&x| T::of(x as f64)).collect(),
            (ArrayData::F64(v), DType::F64) => v.iter().map(|&x| T::of(x)).collect(),
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "stored dtype code {} does not match requested {:?}",
                    self.data.code(),
                    T::DTYPE
                )))
            }
        };
        Tensor::new(self.shape.clone(), values)
    }

    pub fn as_u64(&self) -> Result<&[u64]> {
        match &self.data {
            ArrayData::U64(v) => Ok(v),
            _ => Err(Error::InvalidArgument("expected a u64 array".into())),
        }
    }

    pub fn as_u32(&self) -> Result<&[u32]> {
        match &self.data {
            ArrayData::U32(v) => Ok(v),
            _ => Err(Error::InvalidArgument("expected a u32 array".into())),
        }
    }

    pub fn as_f64(&self) -> Result<&[f64]> {
        match &self.data {
            ArrayData::F64(v) => Ok(v),
            _ => Err(Error::InvalidArgument("expected an f64 array".into())),
        }
    }
}

/// Ordered collection of named arrays with a kind tag.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: String,
    pub entries: Vec<(String, Array)>,
}

impl Container {
    pub fn new(kind: impl Into<String>) -> Self {
        Self {
            kind: kind.into(),
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, array: Array) {
        self.entries.push((name.into(), array));
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    pub fn require(&self, name: &str) -> Result<&Array> {
        self.get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("{} container has no entry {name:?}", self.kind)))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.kind);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, array) in &self.entries {
            put_str(&mut out, name);
            out.push(array.data.code());
            out.extend_from_slice(&(array.shape.len() as u32).to_le_bytes());
            for &d in &array.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &array.data {
                ArrayData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                ArrayData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                ArrayData::U32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                ArrayData::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                ArrayData::U8(v) => out.extend_from_slice(v),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format {
                offset: 0,
                reason: "bad magic".into(),
            });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format {
                offset: 4,
                reason: format!("unsupported version {version}"),
            });
        }
        let kind = r.string()?;
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.string()?;
            let code_at = r.pos;
            let code = r.take(1)?[0];
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| r.err("array size overflows"))?;
            let width = match code {
                5 => 1,
                1 | 3 => 4,
                2 | 4 => 8,
                other => {
                    return Err(Error::Format {
                        offset: code_at as u64,
                        reason: format!("unknown dtype code {other}"),
                    })
                }
            };
            let payload = r.take(n.checked_mul(width).ok_or_else(|| r.err("payload size overflows"))?)?;
            let chunks = payload.chunks_exact(width);
            let data = match code {
                1 => ArrayData::F32(chunks.map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
                2 => ArrayData::F64(chunks.map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
                3 => ArrayData::U32(chunks.map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect()),
                5 => ArrayData::U8(payload.to_vec()),
                _ => ArrayData::U64(chunks.map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect()),
            };
            entries.push((name, Array { shape, data }));
        }
        if r.pos != bytes.len() {
            return Err(r.err("trailing bytes after last entry"));
        }
        Ok(Self { kind, entries })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn expect_kind(self, kind: &str) -> Result<Self> {
        if self.kind != kind {
            return Err(Error::InvalidArgument(format!(
                "expected a {kind} container, found {}",
                self.kind
            )));
        }
        Ok(self)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, reason: &str) -> Error {
        Error::Format {
            offset: self.pos as u64,
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(&format!("truncated: need {n} more bytes")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let at = self.pos;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Format {
            offset: at as u64,
            reason: "invalid utf-8 name".into(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let c = Container::new("x");
        let b = c.to_bytes();
        assert_eq!(&b[..4], b"SRCN");
        assert_eq!(&b[4..8], &1u32.to_le_bytes());
        assert_eq!(&b[8..12], &1u32.to_le_bytes());
        assert_eq!(b[12], b'x');
        assert_eq!(&b[13..17], &0u32.to_le_bytes());
    }

    #[test]
    fn truncation_reports_offset() {
        let mut c = Container::new("dataset");
        c.push("v", Array::u32s(vec![1, 2, 3]));
        let b = c.to_bytes();
        let err = Container::from_bytes(&b[..b.len() - 2]).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
        assert!(Container::from_bytes(b"NOPE").is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bitwise(
            f in proptest::collection::vec(any::<f32>(), 1..40),
            d in proptest::collection::vec(any::<f64>(), 1..40),
            u in proptest::collection::vec(any::<u64>(), 0..10),
        ) {
            let mut c = Container::new("t");
            c.push("f", Array::new(vec![f.len()], ArrayData::F32(f.clone())).unwrap());
            c.push("d", Array::new(vec![1, d.len()], ArrayData::F64(d.clone())).unwrap());
            c.push("u", Array::u64s(u));
            let bytes = c.to_bytes();
            let back = Container::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
        }
    }
}
