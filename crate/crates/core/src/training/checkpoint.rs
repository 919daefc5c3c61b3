//! `DCKP` checkpoint files.
//!
//! Layout: `"DCKP"`, u16 version, u32 length + JSON metadata, then until end
//! of file: u16 name length, name, u8 rank, u32 per dimension, f32 payload.
//! Integers and floats little-endian. Tensors are written in name order.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{TrainConfig, Variant};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DCKP";
pub const VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Teacher,
    Student,
}

/// Position of a named random stream. `word_pos` is a decimal u128.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub name: String,
    pub seed: u64,
    pub word_pos: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: CheckpointKind,
    pub variant: Variant,
    pub epoch: usize,
    pub step: u64,
    pub config: TrainConfig,
    pub rng: Vec<RngState>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: BTreeMap<String, Tensor<f32>>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let json = serde_json::to_vec(&self.meta).expect("checkpoint metadata");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (name, t) in &self.tensors {
            t.check_finite(name)?;
            if name.len() > u16::MAX as usize || t.rank() > u8::MAX as usize {
                return Err(Error::input(format!("tensor `{name}` cannot be stored")));
            }
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut c = Cursor { bytes, pos: 0, path };
        let magic = c.take(4, "magic")?;
        if magic != MAGIC {
            return Err(c.err(0, "bad magic, expected DCKP".into()));
        }
        let version = u16::from_le_bytes(c.array("version")?);
        if version != VERSION {
            return Err(c.err(4, format!("unsupported version {version}")));
        }
        let len = u32::from_le_bytes(c.array("metadata length")?) as usize;
        let at = c.pos;
        let json = c.take(len, "metadata")?;
        let meta: CheckpointMeta = serde_json::from_slice(json)
            .map_err(|e| c.err(at + e.column().saturating_sub(1), format!("metadata: {e}")))?;

        let mut tensors = BTreeMap::new();
        while c.pos < bytes.len() {
            let at = c.pos;
            let n = u16::from_le_bytes(c.array("name length")?) as usize;
            let name = std::str::from_utf8(c.take(n, "name")?)
                .map_err(|_| c.err(at, "tensor name is not UTF-8".into()))?
                .to_string();
            let rat = c.pos;
            let [rank] = c.array::<1>("rank")?;
            if rank == 0 {
                return Err(c.err(rat, format!("tensor `{name}` has rank 0")));
            }
            let mut shape = Vec::with_capacity(rank as usize);
            for _ in 0..rank {
                let dat = c.pos;
                let d = u32::from_le_bytes(c.array("dimension")?) as usize;
                if d == 0 {
                    return Err(c.err(dat, format!("tensor `{name}` has a zero dimension")));
                }
                shape.push(d);
            }
            let count = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| c.err(rat, format!("tensor `{name}` is too large")))?;
            let pat = c.pos;
            let data: Vec<f32> = c
                .take(count, "payload")?
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            if let Some(i) = data.iter().position(|x| !x.is_finite()) {
                return Err(c.err(pat + 4 * i, format!("tensor `{name}` has a non-finite value")));
            }
            if tensors.contains_key(&name) {
                return Err(c.err(at, format!("tensor `{name}` appears twice")));
            }
            tensors.insert(name, Tensor::new(shape, data)?);
        }
        Ok(Checkpoint { meta, tensors })
    }

    /// Writes to a sibling temporary file and renames it into place, so an
    /// interrupted save never leaves a partial checkpoint at `path`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let mut tmp_name = path.as_os_str().to_owned();
        tmp_name.push(".partial");
        let tmp = std::path::PathBuf::from(tmp_name);
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).and_then(|_| f.sync_all()).map_err(|e| Error::io(&tmp, e))?;
        drop(f);
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Tensors under `prefix`, with the prefix removed.
    pub fn group(&self, prefix: &str) -> BTreeMap<String, Tensor<f32>> {
        self.tensors
            .iter()
            .filter_map(|(k, t)| k.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
            .collect()
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn err(&self, offset: usize, message: String) -> Error {
        Error::ParseBytes {
            path: self.path.to_path_buf(),
            offset: offset as u64,
            message,
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(self.pos, format!("truncated while reading {what}")));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut tensors = BTreeMap::new();
        tensors.insert("fusion.a".into(), Tensor::new(vec![2, 3], vec![1.0, -2.5, 0.0, 3e-9, 7.0, -0.0]).unwrap());
        tensors.insert("loss.tau".into(), Tensor::scalar(0.07f32));
        Checkpoint {
            meta: CheckpointMeta {
                kind: CheckpointKind::Teacher,
                variant: Variant::B,
                epoch: 3,
                step: 42,
                config: TrainConfig::preset(Variant::B, u64::MAX),
                rng: vec![RngState {
                    name: "teacher.shuffle.2".into(),
                    seed: u64::MAX,
                    word_pos: u128::MAX.to_string(),
                }],
            },
            tensors,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let b = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&b, Path::new("x")).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), b);
        assert_eq!(c.group("fusion.").len(), 1);
    }

    #[test]
    fn malformed_files_report_offsets() {
        let b = sample().to_bytes().unwrap();
        let p = Path::new("x");
        let mut bad = b.clone();
        bad[1] = b'?';
        assert!(matches!(Checkpoint::from_bytes(&bad, p), Err(Error::ParseBytes { offset: 0, .. })));
        let cut = &b[..b.len() - 2];
        match Checkpoint::from_bytes(cut, p) {
            Err(Error::ParseBytes { offset, .. }) => assert!(offset as usize > 10 && (offset as usize) < b.len()),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.dckp");
        sample().save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), sample());
    }
}
