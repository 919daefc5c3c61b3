//! The `DCEC` embedding cache: id-aligned rows of little-endian f32.
//!
//! Layout: `"DCEC"`, u16 version, u32 dim, u32 count, u32 byte length of the
//! id block, then per id a u16 byte length and UTF-8 bytes, then `count·dim`
//! f32 values row-major. All integers little-endian.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DCEC";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingCache {
    dim: usize,
    ids: Vec<String>,
    data: Vec<f32>,
}

impl EmbeddingCache {
    pub fn new(dim: usize, ids: Vec<String>, data: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::shape("cache dimension must be positive"));
        }
        if data.len() != ids.len() * dim {
            return Err(Error::shape(format!(
                "{} ids of dimension {dim} need {} values, got {}",
                ids.len(),
                ids.len() * dim,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::numeric(format!("row `{}` is not finite", ids[i / dim])));
        }
        if let Some(id) = ids.iter().find(|id| id.len() > u16::MAX as usize) {
            return Err(Error::input(format!("id of {} bytes is too long", id.len())));
        }
        Ok(EmbeddingCache { dim, ids, data })
    }

    pub fn from_matrix(ids: Vec<String>, m: &Tensor<f32>) -> Result<Self> {
        let (_, d) = m.dims2()?;
        Self::new(d, ids, m.data().to_vec())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    /// `count×dim` matrix; an input error when the cache is empty.
    pub fn matrix(&self) -> Result<Tensor<f32>> {
        if self.is_empty() {
            return Err(Error::input("embedding cache is empty"));
        }
        Tensor::new(vec![self.len(), self.dim], self.data.clone())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let id_bytes: usize = self.ids.iter().map(|s| 2 + s.len()).sum();
        let mut out = Vec::with_capacity(18 + id_bytes + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.ids.len() as u32).to_le_bytes());
        out.extend_from_slice(&(id_bytes as u32).to_le_bytes());
        for id in &self.ids {
            out.extend_from_slice(&(id.len() as u16).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
        }
        for x in &self.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4, "magic")? != MAGIC {
            return Err(r.err(0, "bad magic, expected DCEC"));
        }
        let version = r.u16("version")?;
        if version != VERSION {
            return Err(r.err(4, &format!("unsupported version {version}")));
        }
        let dim = r.u32("dim")? as usize;
        if dim == 0 {
            return Err(r.err(6, "dimension is zero"));
        }
        let count = r.u32("count")? as usize;
        let block = r.u32("id block length")? as usize;
        let block_start = r.pos;
        let mut ids = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let at = r.pos;
            let n = r.u16("id length")? as usize;
            let s = r.take(n, "id bytes")?;
            let s = std::str::from_utf8(s).map_err(|_| r.err(at, "id is not UTF-8"))?;
            ids.push(s.to_string());
        }
        if r.pos - block_start != block {
            return Err(r.err(
                block_start - 4,
                &format!("id block declares {block} bytes but ids span {}", r.pos - block_start),
            ));
        }
        let n = count
            .checked_mul(dim)
            .ok_or_else(|| r.err(10, "count × dim overflows"))?;
        let payload_at = r.pos;
        let payload = r.take(n * 4, "payload")?;
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if r.pos != bytes.len() {
            return Err(r.err(r.pos, &format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(r.err(payload_at + 4 * i, "non-finite value"));
        }
        Ok(EmbeddingCache { dim, ids, data })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn err(&self, offset: usize, msg: &str) -> Error {
        Error::ParseBytes {
            path: self.path.to_path_buf(),
            offset: offset as u64,
            message: msg.to_string(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(self.pos, &format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
