//! `FADETNSR` binary tensor container.
//!
//! All integers are little-endian. Layout:
//!
//! | field              | encoding                                              |
//! |--------------------|-------------------------------------------------------|
//! | magic              | 8 bytes, ASCII `FADETNSR`                             |
//! | version            | u32, currently 1                                      |
//! | entry count        | u32                                                   |
//! | entry table        | per entry: name (u16 byte length + UTF-8), dtype u8 (0 = f32, 1 = i32), rank u8, `rank` dims as u64, payload byte offset u64 |
//! | metadata           | u32 pair count, then per pair: key (u16 length + UTF-8), value (u32 length + UTF-8) |
//! | payload            | raw little-endian row-major element data; offsets are relative to the payload start |
//! | checksum           | u32 CRC-32 (IEEE) of the payload bytes                |
//!
//! Entries keep their insertion order. Tensors are written back to back in
//! entry order, so a written file is fully determined by the store contents.

use std::path::Path;

use indexmap::IndexMap;
use nalgebra::DMatrix;

use crate::error::{QuantError, Result};

pub const MAGIC: &[u8; 8] = b"FADETNSR";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 0,
    I32 = 1,
}

impl DType {
    pub fn size(self) -> usize {
        4
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DType::F32),
            1 => Ok(DType::I32),
            other => Err(QuantError::Malformed(format!("unknown dtype code {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    I32(Vec<i32>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::I32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::I32(_) => DType::I32,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(QuantError::shape("tensor data", n, data.len()));
        }
        if shape.len() > u8::MAX as usize {
            return Err(QuantError::InvalidInput(format!(
                "rank {} too large",
                shape.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    fn byte_len(&self) -> usize {
        self.data.len() * self.dtype().size()
    }

    /// Row-major f64 matrix view of a rank-2 tensor (f32 widened, i32 converted).
    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        if self.shape.len() != 2 {
            return Err(QuantError::shape("matrix tensor rank", 2, self.shape.len()));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        Ok(match &self.data {
            TensorData::F32(v) => DMatrix::from_fn(r, c, |i, j| f64::from(v[i * c + j])),
            TensorData::I32(v) => DMatrix::from_fn(r, c, |i, j| f64::from(v[i * c + j])),
        })
    }

    /// Narrow an f64 matrix to an f32 rank-2 tensor.
    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        let (r, c) = m.shape();
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                data.push(m[(i, j)] as f32);
            }
        }
        Tensor {
            shape: vec![r, c],
            data: TensorData::F32(data),
        }
    }

    pub fn from_i32_matrix(m: &DMatrix<i32>) -> Self {
        let (r, c) = m.shape();
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                data.push(m[(i, j)]);
            }
        }
        Tensor {
            shape: vec![r, c],
            data: TensorData::I32(data),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorStore {
    entries: IndexMap<String, Tensor>,
    pub metadata: IndexMap<String, String>,
}

impl TensorStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert or replace; a replaced entry keeps its position.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.insert(name.into(), tensor);
    }

    pub fn insert_matrix(&mut self, name: impl Into<String>, m: &DMatrix<f64>) {
        self.insert(name, Tensor::from_matrix(m));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn matrix(&self, name: &str) -> Result<DMatrix<f64>> {
        self.get(name)
            .ok_or_else(|| QuantError::MissingTensor(name.to_string()))?
            .to_matrix()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&u32_len(self.entries.len(), "entry count")?.to_le_bytes());

        let mut offset = 0u64;
        for (name, t) in &self.entries {
            put_str16(&mut out, name)?;
            out.push(t.dtype() as u8);
            out.push(t.shape.len() as u8);
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += t.byte_len() as u64;
        }

        out.extend_from_slice(&u32_len(self.metadata.len(), "metadata count")?.to_le_bytes());
        for (k, v) in &self.metadata {
            put_str16(&mut out, k)?;
            out.extend_from_slice(&u32_len(v.len(), "metadata value")?.to_le_bytes());
            out.extend_from_slice(v.as_bytes());
        }

        let payload_start = out.len();
        for t in self.entries.values() {
            match &t.data {
                TensorData::F32(v) => v
                    .iter()
                    .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::I32(v) => v
                    .iter()
                    .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        let crc = crc32fast::hash(&out[payload_start..]);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(QuantError::BadMagic);
        }
        r.pos = MAGIC.len();
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(QuantError::VersionMismatch {
                found: version,
                expected: VERSION,
            });
        }
        let count = r.u32("entry count")? as usize;
        let mut table = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.str16("entry name")?;
            let dtype = DType::from_code(r.u8("dtype")?)?;
            let rank = r.u8("rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let d = r.u64("dimension")?;
                shape.push(usize::try_from(d).map_err(|_| {
                    QuantError::Malformed(format!("dimension {d} of '{name}' too large"))
                })?);
            }
            let offset = r.u64("payload offset")?;
            table.push((name, dtype, shape, offset));
        }
        let meta_count = r.u32("metadata count")? as usize;
        let mut metadata = IndexMap::new();
        for _ in 0..meta_count {
            let k = r.str16("metadata key")?;
            let len = r.u32("metadata value length")? as usize;
            let v = String::from_utf8(r.take(len, "metadata value")?.to_vec())
                .map_err(|_| QuantError::Malformed("metadata value is not UTF-8".into()))?;
            metadata.insert(k, v);
        }

        let payload_start = r.pos;
        if bytes.len() < payload_start + 4 {
            return Err(QuantError::Truncated("missing checksum".into()));
        }
        let payload_end = bytes.len() - 4;
        let payload = &bytes[payload_start..payload_end];

        let mut extents = Vec::with_capacity(table.len());
        for (name, dtype, shape, offset) in &table {
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| n.checked_mul(dtype.size()))
                .ok_or_else(|| QuantError::Malformed(format!("size of '{name}' overflows")))?;
            let start = usize::try_from(*offset)
                .map_err(|_| QuantError::Malformed(format!("offset of '{name}' too large")))?;
            let end = start
                .checked_add(n)
                .ok_or_else(|| QuantError::Malformed(format!("extent of '{name}' overflows")))?;
            if end > payload.len() {
                return Err(QuantError::Truncated(format!(
                    "tensor '{name}' needs payload bytes up to {end}, only {} present",
                    payload.len()
                )));
            }
            extents.push((start, end));
        }

        let stored = u32::from_le_bytes(bytes[payload_end..].try_into().expect("4 bytes"));
        let computed = crc32fast::hash(payload);
        if stored != computed {
            return Err(QuantError::CrcMismatch { stored, computed });
        }

        let mut entries = IndexMap::with_capacity(table.len());
        for ((name, dtype, shape, _), (start, end)) in table.into_iter().zip(extents) {
            let raw = &payload[start..end];
            let data = match dtype {
                DType::F32 => TensorData::F32(
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                        .collect(),
                ),
                DType::I32 => TensorData::I32(
                    raw.chunks_exact(4)
                        .map(|c| i32::from_le_bytes(c.try_into().expect("4 bytes")))
                        .collect(),
                ),
            };
            if entries
                .insert(name.clone(), Tensor { shape, data })
                .is_some()
            {
                return Err(QuantError::Malformed(format!(
                    "duplicate tensor name '{name}'"
                )));
            }
        }
        Ok(TensorStore { entries, metadata })
    }
}

fn u32_len(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| QuantError::InvalidInput(format!("{what} {n} exceeds u32")))
}

fn put_str16(out: &mut Vec<u8>, s: &str) -> Result<()> {
    let len = u16::try_from(s.len())
        .map_err(|_| QuantError::InvalidInput(format!("name '{s}' longer than 65535 bytes")))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| QuantError::Truncated(format!("header ends inside {what}")))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }

    fn str16(&mut self, what: &str) -> Result<String> {
        let len = u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")) as usize;
        String::from_utf8(self.take(len, what)?.to_vec())
            .map_err(|_| QuantError::Malformed(format!("{what} is not UTF-8")))
    }
}

pub fn write_store(store: &TensorStore, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = store.to_bytes()?;
    std::fs::write(path, bytes).map_err(|e| QuantError::io(path, e))
}

pub fn read_store(path: impl AsRef<Path>) -> Result<TensorStore> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| QuantError::io(path, e))?;
    TensorStore::from_bytes(&bytes)
}
