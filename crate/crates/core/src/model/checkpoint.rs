//! Little-endian tensor container.
//!
//! ```text
//! b"VRGL"  u32 version  u32 tensor_count
//! per tensor: u32 name_len, name (UTF-8), u8 dtype, u32 rank, u64 dims[rank], raw data
//! trailing: 32-byte SHA-256 of the resolved run config
//! ```
//!
//! dtype tags: 0 = f64, 1 = u64, 2 = u8.

use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"VRGL";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Tensor {
    F64(ArrayD<f64>),
    U64(ArrayD<u64>),
    U8(ArrayD<u8>),
}

impl Tensor {
    fn tag(&self) -> u8 {
        match self {
            Tensor::F64(_) => 0,
            Tensor::U64(_) => 1,
            Tensor::U8(_) => 2,
        }
    }

    fn shape(&self) -> &[usize] {
        match self {
            Tensor::F64(a) => a.shape(),
            Tensor::U64(a) => a.shape(),
            Tensor::U8(a) => a.shape(),
        }
    }

    pub fn as_f64(&self) -> Option<&ArrayD<f64>> {
        match self {
            Tensor::F64(a) => Some(a),
            _ => None,
        }
    }

    pub fn scalar_u64(v: u64) -> Self {
        Tensor::U64(ArrayD::from_elem(IxDyn(&[]), v))
    }

    pub fn bytes(data: &[u8]) -> Self {
        Tensor::U8(ArrayD::from_shape_vec(IxDyn(&[data.len()]), data.to_vec()).expect("rank-1 shape"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub tensors: Vec<(String, Tensor)>,
    pub config_hash: [u8; 32],
}

pub fn hash_config(text: &str) -> [u8; 32] {
    Sha256::digest(text.as_bytes()).into()
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(
                self.pos as u64,
                format!("truncated while reading {what}"),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

impl Checkpoint {
    pub fn new(tensors: Vec<(String, Tensor)>, config_hash: [u8; 32]) -> Self {
        Self {
            version: VERSION,
            tensors,
            config_hash,
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.tag());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match t {
                Tensor::F64(a) => a.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
                Tensor::U64(a) => a.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
                Tensor::U8(a) => out.extend(a.iter()),
            }
        }
        out.extend_from_slice(&self.config_hash);
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::format(0, "bad magic, expected VRGL"));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::format(4, format!("unsupported checkpoint version {version}")));
        }
        let count = r.u32("tensor count")?;
        let mut tensors = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let start = r.pos as u64;
            let len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| Error::format(start, "tensor name is not UTF-8"))?
                .to_string();
            let tag = r.u8("dtype")?;
            let rank = r.u32("rank")? as usize;
            let dims = (0..rank)
                .map(|_| r.u64("dims").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            let shape = IxDyn(&dims);
            let t = match tag {
                0 => {
                    let raw = r.take(n * 8, "f64 data")?;
                    let v = raw
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect();
                    Tensor::F64(ArrayD::from_shape_vec(shape, v).expect("size checked"))
                }
                1 => {
                    let raw = r.take(n * 8, "u64 data")?;
                    let v = raw
                        .chunks_exact(8)
                        .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect();
                    Tensor::U64(ArrayD::from_shape_vec(shape, v).expect("size checked"))
                }
                2 => Tensor::U8(ArrayD::from_shape_vec(shape, r.take(n, "u8 data")?.to_vec()).expect("size checked")),
                other => return Err(Error::format(start, format!("unknown dtype tag {other}"))),
            };
            tensors.push((name, t));
        }
        let hash: [u8; 32] = r.take(32, "config hash")?.try_into().expect("32 bytes");
        if r.pos != buf.len() {
            return Err(Error::format(r.pos as u64, "trailing bytes after config hash"));
        }
        Ok(Self {
            version,
            tensors,
            config_hash: hash,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint::new(
            vec![
                (
                    "w".into(),
                    Tensor::F64(
                        ArrayD::from_shape_vec(IxDyn(&[2, 2]), vec![1.0, -0.5, f64::MIN_POSITIVE, 3.25]).unwrap(),
                    ),
                ),
                ("step".into(), Tensor::scalar_u64(42)),
                ("meta".into(), Tensor::bytes(b"{}")),
            ],
            hash_config("x"),
        )
    }

    #[test]
    fn bytes_round_trip() {
        let c = sample();
        assert_eq!(Checkpoint::from_bytes(&c.to_bytes()).unwrap(), c);
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = sample().to_bytes();
        for cut in [3, 10, bytes.len() - 1] {
            match Checkpoint::from_bytes(&bytes[..cut]) {
                Err(Error::Format { offset, .. }) => assert!(offset as usize <= cut),
                other => panic!("expected format error, got {other:?}"),
            }
        }
    }

    #[test]
    fn bad_magic() {
        let mut bytes = sample().to_bytes();
        bytes[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::Format { offset: 0, .. })
        ));
    }
}
