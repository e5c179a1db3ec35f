//! `MMC1` binary container: a flat list of named, typed n-d arrays.
//!
//! Layout (little-endian): magic `MMC1`, u32 version, u32 array count, then per
//! array a u16 name length, the UTF-8 name, u8 dtype code, u8 rank, `rank`
//! u64 dims and the raw payload.

use std::path::Path;

use crate::error::{CheckpointError, Error, Result};
use crate::grid::{DType, Grid, Real};

pub const MAGIC: [u8; 4] = *b"MMC1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U64(Vec<u64>),
}

impl ArrayData {
    pub fn dtype(&self) -> DType {
        match self {
            ArrayData::F32(_) => DType::F32,
            ArrayData::F64(_) => DType::F64,
            ArrayData::U64(_) => DType::U64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
            ArrayData::U64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

impl NamedArray {
    pub fn from_grid<T: Real>(name: impl Into<String>, g: &Grid<T>) -> Self {
        let data = match T::DTYPE {
            DType::F32 => ArrayData::F32(g.data().iter().map(|v| v.as_f64() as f32).collect()),
            _ => ArrayData::F64(g.data().iter().map(|v| v.as_f64()).collect()),
        };
        Self {
            name: name.into(),
            shape: g.shape().to_vec(),
            data,
        }
    }

    pub fn from_u64(name: impl Into<String>, values: Vec<u64>) -> Self {
        Self {
            name: name.into(),
            shape: vec![values.len()],
            data: ArrayData::U64(values),
        }
    }

    /// Read as a grid of `T`; the stored dtype must be `T`'s.
    pub fn to_grid<T: Real>(&self) -> Result<Grid<T>> {
        let values: Vec<T> = match (&self.data, T::DTYPE) {
            (ArrayData::F32(v), DType::F32) => v.iter().map(|&x| T::lit(x as f64)).collect(),
            (ArrayData::F64(v), DType::F64) => v.iter().map(|&x| T::lit(x)).collect(),
            (d, want) => {
                return Err(CheckpointError::DType {
                    name: self.name.clone(),
                    expected: want.code(),
                    found: d.dtype().code(),
                }
                .into())
            }
        };
        Grid::new(self.shape.clone(), values)
    }

    pub fn as_u64(&self) -> Result<&[u64]> {
        match &self.data {
            ArrayData::U64(v) => Ok(v),
            d => Err(CheckpointError::DType {
                name: self.name.clone(),
                expected: DType::U64.code(),
                found: d.dtype().code(),
            }
            .into()),
        }
    }
}

/// Ordered arrays; names are unique.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    pub arrays: Vec<NamedArray>,
}

impl Container {
    pub fn push(&mut self, a: NamedArray) {
        assert!(self.get(&a.name).is_none(), "duplicate array {}", a.name);
        self.arrays.push(a);
    }

    pub fn get(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut NamedArray> {
        self.arrays.iter_mut().find(|a| a.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&NamedArray> {
        self.get(name)
            .ok_or_else(|| CheckpointError::MissingArray(name.to_string()).into())
    }

    pub fn remove(&mut self, name: &str) -> Option<NamedArray> {
        let i = self.arrays.iter().position(|a| a.name == name)?;
        Some(self.arrays.remove(i))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for a in &self.arrays {
            let name = a.name.as_bytes();
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name);
            out.push(a.data.dtype().code());
            out.push(a.shape.len() as u8);
            for &d in &a.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &a.data {
                ArrayData::F32(v) => v
                    .iter()
                    .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                ArrayData::F64(v) => v
                    .iter()
                    .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                ArrayData::U64(v) => v
                    .iter()
                    .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
        if magic != MAGIC {
            return Err(CheckpointError::BadMagic(magic).into());
        }
        let version = u32::from_le_bytes(r.take(4, "version")?.try_into().unwrap());
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(version).into());
        }
        let count = u32::from_le_bytes(r.take(4, "array count")?.try_into().unwrap());
        let mut c = Container::default();
        for i in 0..count {
            let what = format!("array {i} header");
            let nlen = u16::from_le_bytes(r.take(2, &what)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(r.take(nlen, &what)?)
                .map_err(|_| CheckpointError::Malformed(format!("array {i} name is not UTF-8")))?
                .to_string();
            let code = r.take(1, &name)?[0];
            let dtype = DType::from_code(code).ok_or_else(|| {
                CheckpointError::Malformed(format!("{name}: unknown dtype code {code}"))
            })?;
            let rank = r.take(1, &name)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u64::from_le_bytes(r.take(8, &name)?.try_into().unwrap()) as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| {
                    CheckpointError::Malformed(format!("{name}: element count overflows"))
                })?;
            let width = if dtype == DType::F32 { 4 } else { 8 };
            let bytes = n.checked_mul(width).ok_or_else(|| {
                CheckpointError::Malformed(format!("{name}: payload size overflows"))
            })?;
            let raw = r.take(bytes, &name)?;
            let data = match dtype {
                DType::F32 => ArrayData::F32(
                    raw.chunks_exact(4)
                        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                        .collect(),
                ),
                DType::F64 => ArrayData::F64(
                    raw.chunks_exact(8)
                        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                        .collect(),
                ),
                DType::U64 => ArrayData::U64(
                    raw.chunks_exact(8)
                        .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
                        .collect(),
                ),
            };
            if c.get(&name).is_some() {
                return Err(CheckpointError::Malformed(format!("duplicate array {name}")).into());
            }
            c.arrays.push(NamedArray { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Malformed(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            ))
            .into());
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(CheckpointError::Truncated(what.to_string()).into());
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut c = Container::default();
        c.push(NamedArray::from_grid(
            "a/w",
            &Grid::<f32>::from_fn(&[2, 3], |i| i as f32 * 0.5 - 1.0),
        ));
        c.push(NamedArray::from_grid(
            "b",
            &Grid::<f64>::from_fn(&[4], |i| (i as f64).sin()),
        ));
        c.push(NamedArray::from_u64("meta/step", vec![42]));
        c.push(NamedArray::from_grid("empty", &Grid::<f32>::zeros(&[0, 5])));
        c
    }

    #[test]
    fn byte_layout_by_hand() {
        let mut c = Container::default();
        c.push(NamedArray::from_u64("s", vec![7]));
        let b = c.to_bytes();
        let mut want = b"MMC1".to_vec();
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&1u16.to_le_bytes());
        want.push(b's');
        want.extend_from_slice(&[2, 1]);
        want.extend_from_slice(&1u64.to_le_bytes());
        want.extend_from_slice(&7u64.to_le_bytes());
        assert_eq!(b, want);
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let back = Container::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), c.to_bytes());
    }

    #[test]
    fn every_truncation_is_an_error() {
        let bytes = sample().to_bytes();
        for n in 0..bytes.len() {
            let err = Container::from_bytes(&bytes[..n]).unwrap_err();
            assert!(
                matches!(err, Error::Checkpoint(CheckpointError::Truncated(_))),
                "length {n}: {err}"
            );
        }
    }

    #[test]
    fn header_errors_are_distinct() {
        let mut bytes = sample().to_bytes();
        bytes[0] = b'X';
        let e = Container::from_bytes(&bytes).unwrap_err();
        assert!(matches!(e, Error::Checkpoint(CheckpointError::BadMagic(_))));
        let mut bytes = sample().to_bytes();
        bytes[4] = 9;
        let e = Container::from_bytes(&bytes).unwrap_err();
        assert!(matches!(
            e,
            Error::Checkpoint(CheckpointError::UnsupportedVersion(9))
        ));
        let mut bytes = sample().to_bytes();
        bytes.push(0);
        assert!(matches!(
            Container::from_bytes(&bytes).unwrap_err(),
            Error::Checkpoint(CheckpointError::Malformed(_))
        ));
    }

    #[test]
    fn dtype_is_checked_on_read() {
        let c = sample();
        let e = c.get("a/w").unwrap().to_grid::<f64>().unwrap_err();
        assert!(matches!(
            e,
            Error::Checkpoint(CheckpointError::DType {
                expected: 1,
                found: 0,
                ..
            })
        ));
        assert!(c.get("meta/step").unwrap().to_grid::<f32>().is_err());
        assert_eq!(c.get("meta/step").unwrap().as_u64().unwrap(), &[42]);
    }
}
