//! `FMCK` parameter files.
//!
//! Layout: magic `FMCK`, u32 format version, u32 entry count, then per
//! entry a u16 name length, the UTF-8 name, a u8 dtype code, a u8 rank, u32
//! dims and the raw values. Everything is little-endian, and a CRC32 of all
//! preceding bytes closes the file.

use std::fs;
use std::path::Path;

use crate::config::write_atomic;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"FMCK";
pub const FORMAT_VERSION: u32 = 1;

/// Names of the metadata entries (bytes stored one per f32 value).
pub const META_CONFIG: &str = "meta.config";
pub const META_HASH: &str = "meta.config_sha256";

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    /// Values widened to f64; narrowing back to f32 is exact.
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<Entry>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_tensor<T: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.entries.push(Entry {
            name: name.into(),
            dtype: T::DTYPE,
            shape: t.shape().to_vec(),
            values: t.to_f64_vec(),
        });
    }

    /// Every value (weights and buffers) of `store`.
    pub fn push_store<T: Scalar>(&mut self, store: &ParamStore<T>) {
        for e in store.entries() {
            self.push_tensor(e.name.clone(), &e.value);
        }
    }

    pub fn push_bytes(&mut self, name: impl Into<String>, bytes: &[u8]) {
        let values: Vec<f64> = bytes.iter().map(|&b| f64::from(b)).collect();
        let len = values.len();
        self.entries.push(Entry { name: name.into(), dtype: DType::F32, shape: vec![len], values });
    }

    pub fn bytes(&self, name: &str) -> Option<Vec<u8>> {
        self.get(name).map(|e| e.values.iter().map(|&v| v as u8).collect())
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Entries whose name starts with `prefix`, as tensors of type `T`.
    pub fn tensors<T: Scalar>(&self, prefix: &str) -> Result<Vec<(String, Tensor<T>)>> {
        self.entries
            .iter()
            .filter(|e| e.name.starts_with(prefix))
            .map(|e| Ok((e.name.clone(), Tensor::new(&e.shape, e.values.iter().map(|&v| T::lit(v)).collect())?)))
            .collect()
    }

    pub fn config_text(&self) -> Option<String> {
        self.bytes(META_CONFIG).and_then(|b| String::from_utf8(b).ok())
    }

    pub fn config_hash(&self) -> Option<String> {
        self.bytes(META_HASH).map(|b| b.iter().map(|x| format!("{x:02x}")).collect())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            let name = e.name.as_bytes();
            let name_len = u16::try_from(name.len()).map_err(|_| Error::Invalid(format!("name too long: {}", e.name)))?;
            let rank = u8::try_from(e.shape.len()).map_err(|_| Error::Invalid(format!("rank of {}", e.name)))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name);
            out.push(e.dtype.code());
            out.push(rank);
            for &d in &e.shape {
                let d = u32::try_from(d).map_err(|_| Error::Invalid(format!("extent of {}", e.name)))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for &v in &e.values {
                match e.dtype {
                    DType::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                    DType::F64 => out.extend_from_slice(&v.to_le_bytes()),
                }
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    /// Parses a checkpoint, verifying the CRC before anything else.
    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        let bad = |detail: &str| Error::Format { path: path.to_path_buf(), detail: detail.to_string() };
        if bytes.len() < 16 {
            return Err(bad("file too short"));
        }
        let (payload, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(payload);
        if stored != computed {
            return Err(Error::Crc { stored, computed });
        }
        if &payload[..4] != MAGIC {
            return Err(bad("bad magic"));
        }
        let mut r = Reader { buf: payload, pos: 4 };
        let version = r.u32().ok_or_else(|| bad("truncated header"))?;
        if version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported format version {version}")));
        }
        let count = r.u32().ok_or_else(|| bad("truncated header"))?;
        let mut entries = Vec::new();
        for _ in 0..count {
            let name_len = r.u16().ok_or_else(|| bad("truncated entry"))? as usize;
            let name = String::from_utf8(r.take(name_len).ok_or_else(|| bad("truncated name"))?.to_vec())
                .map_err(|_| bad("name is not UTF-8"))?;
            let code = r.u8().ok_or_else(|| bad("truncated entry"))?;
            let dtype = DType::from_code(code).ok_or_else(|| bad(&format!("unknown dtype code {code}")))?;
            let rank = r.u8().ok_or_else(|| bad("truncated entry"))? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| bad("truncated dims"))?;
            let len: usize = shape.iter().product();
            let raw = r.take(len * dtype.size()).ok_or_else(|| bad(&format!("truncated values of {name}")))?;
            let values = match dtype {
                DType::F32 => raw.chunks_exact(4).map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4")))).collect(),
                DType::F64 => raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8"))).collect(),
            };
            entries.push(Entry { name, dtype, shape, values });
        }
        if r.pos != payload.len() {
            return Err(bad("trailing bytes after entries"));
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(path, &bytes)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }

    fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new();
        c.push_tensor("a.w", &Tensor::<f32>::from_fn(&[2, 3], |i| i as f32 * 0.1 - 0.2));
        c.push_tensor("b", &Tensor::<f64>::from_fn(&[4], |i| (i as f64).sqrt()));
        c.push_bytes(META_CONFIG, b"seed = 3\n");
        c
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"FMCK");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
        let back = Checkpoint::from_bytes(Path::new("mem"), &bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.config_text().unwrap(), "seed = 3\n");
        let t: Vec<(String, Tensor<f32>)> = back.tensors("a.").unwrap();
        assert_eq!(t[0].1.data()[4], 4.0f32 * 0.1 - 0.2);
    }

    #[test]
    fn corruption_is_caught() {
        let bytes = sample().to_bytes().unwrap();
        for i in 0..bytes.len() {
            let mut b = bytes.clone();
            b[i] ^= 0x5a;
            assert!(Checkpoint::from_bytes(Path::new("mem"), &b).is_err(), "byte {i}");
        }
        assert!(Checkpoint::from_bytes(Path::new("mem"), &bytes[..bytes.len() - 1]).is_err());
    }
}
