//! Little-endian binary encoding shared by the protocol messages and the
//! on-disk tensor files.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Default, Clone)]
pub struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn put_u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn put_u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn put_u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn put_u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn put_f32(&mut self, v: f64) {
        self.buf.extend_from_slice(&(v as f32).to_le_bytes());
    }

    pub fn put_f32s(&mut self, values: &[f64]) {
        for &v in values {
            self.put_f32(v);
        }
    }

    pub fn put_bytes(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }
}

/// Narrows a count to a u16 wire field.
pub fn u16_field(what: &'static str, v: usize) -> Result<u16> {
    u16::try_from(v).map_err(|_| Error::Format {
        what,
        reason: format!("{v} does not fit in u16"),
    })
}

pub struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8], what: &'static str) -> Self {
        Self { buf, pos: 0, what }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format {
                what: self.what,
                reason: format!("truncated at byte {} (wanted {n} more)", self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f32(&mut self) -> Result<f64> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()) as f64)
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f32()).collect()
    }

    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        self.take(n)
    }

    pub fn at_end(&self) -> bool {
        self.pos == self.buf.len()
    }

    pub fn finish(self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format {
                what: self.what,
                reason: format!("{} trailing bytes", self.buf.len() - self.pos),
            });
        }
        Ok(())
    }

    pub fn malformed(&self, reason: impl Into<String>) -> Error {
        Error::Format {
            what: self.what,
            reason: reason.into(),
        }
    }
}

/// Rounds through f32 so that values survive a round trip through the
/// binary formats unchanged.
pub fn f32_round(v: f64) -> f64 {
    v as f32 as f64
}

/// A row-major f32 tensor as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        Self::new(vec![rows, cols], data)
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self::new(vec![data.len()], data)
    }
}

/// Versioned container: magic, schema version, JSON header, named tensors.
///
/// Layout: `magic[8] | version u16 | header_len u32 | header utf8 |
/// tensor_count u32 | { name_len u16 | name | ndim u8 | dims u32.. | f32.. }`.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub magic: [u8; 8],
    pub version: u16,
    pub header: serde_json::Value,
    pub tensors: BTreeMap<String, Tensor>,
}

impl TensorFile {
    pub fn new(magic: [u8; 8], version: u16, header: serde_json::Value) -> Self {
        Self {
            magic,
            version,
            header,
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn take(&mut self, name: &str) -> Result<Tensor> {
        self.tensors.remove(name).ok_or_else(|| Error::Format {
            what: "tensor file",
            reason: format!("missing tensor {name:?}"),
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = ByteWriter::new();
        w.put_bytes(&self.magic);
        w.put_u16(self.version);
        let header = serde_json::to_vec(&self.header)?;
        w.put_u32(header.len() as u32);
        w.put_bytes(&header);
        w.put_u32(self.tensors.len() as u32);
        for (name, t) in &self.tensors {
            w.put_u16(u16_field("tensor name length", name.len())?);
            w.put_bytes(name.as_bytes());
            w.put_u8(t.shape.len() as u8);
            for &dim in &t.shape {
                w.put_u32(dim as u32);
            }
            w.put_f32s(&t.data);
        }
        Ok(w.into_bytes())
    }

    pub fn from_bytes(bytes: &[u8], magic: [u8; 8], version: u16) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "tensor file");
        if r.bytes(8)? != magic {
            return Err(r.malformed("bad magic"));
        }
        let found = r.u16()?;
        if found != version {
            return Err(r.malformed(format!("schema version {found}, expected {version}")));
        }
        let header_len = r.u32()? as usize;
        let header = serde_json::from_slice(r.bytes(header_len)?)?;
        let count = r.u32()?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.bytes(name_len)?)
                .map_err(|e| r.malformed(e.to_string()))?
                .to_owned();
            let ndim = r.u8()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let data = r.f32s(shape.iter().product())?;
            tensors.insert(name, Tensor { shape, data });
        }
        r.finish()?;
        Ok(Self {
            magic,
            version,
            header,
            tensors,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: &Path, magic: [u8; 8], version: u16) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?, magic, version)
    }
}
