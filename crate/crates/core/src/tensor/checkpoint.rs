//! Binary checkpoint container.
//!
//! ```text
//! "NVSD" | u32 version | u32 value width in bytes (4 or 8) | u32 section count
//! section := u32 len, name | u32 len, header text | u32 count, record*
//!            | u8 has_adam [ u64 step | u32 count, record* (m) | u32 count, record* (v) ]
//! record  := u32 len, name | u32 rank | u64 dim * rank | values, little endian
//! ```
//!
//! All integers are little endian. The header is free-form text
//! (conventionally `key=value` lines).

use std::path::Path;

use super::{AdamState, Shape, Tensor};
use crate::error::{Error, Result};
use crate::real::Real;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"NVSD";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointSection<T> {
    pub name: String,
    pub header: String,
    pub params: Vec<(String, Tensor<T>)>,
    pub adam: Option<AdamState<T>>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Checkpoint<T> {
    pub sections: Vec<CheckpointSection<T>>,
}

impl<T: Real> Checkpoint<T> {
    pub fn section(&self, name: &str) -> Option<&CheckpointSection<T>> {
        self.sections.iter().find(|s| s.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        put_u32(&mut out, T::BYTES as u32);
        put_u32(&mut out, self.sections.len() as u32);
        for s in &self.sections {
            put_str(&mut out, &s.name);
            put_str(&mut out, &s.header);
            put_records(&mut out, s.params.iter().map(|(n, t)| (n.as_str(), t)));
            match &s.adam {
                None => out.push(0),
                Some(st) => {
                    out.push(1);
                    out.extend_from_slice(&st.step.to_le_bytes());
                    for moments in [&st.m, &st.v] {
                        put_records(&mut out, s.params.iter().map(|(n, _)| n.as_str()).zip(moments));
                    }
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::config("not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::config(format!("unsupported checkpoint version {version}")));
        }
        let width = r.u32()? as usize;
        if width != T::BYTES {
            return Err(Error::config(format!(
                "checkpoint stores {width}-byte values, reader expects {}",
                T::BYTES
            )));
        }
        let count = r.u32()? as usize;
        let mut sections = Vec::with_capacity(count);
        for _ in 0..count {
            let name = r.string()?;
            let header = r.string()?;
            let params = r.records::<T>()?;
            let adam = match r.take(1)?[0] {
                0 => None,
                1 => {
                    let step = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
                    let m = r.records::<T>()?.into_iter().map(|(_, t)| t).collect::<Vec<_>>();
                    let v = r.records::<T>()?.into_iter().map(|(_, t)| t).collect::<Vec<_>>();
                    if m.len() != params.len() || v.len() != params.len() {
                        return Err(Error::config("optimizer state does not match parameter list"));
                    }
                    Some(AdamState { step, m, v })
                }
                other => return Err(Error::config(format!("bad optimizer flag {other}"))),
            };
            sections.push(CheckpointSection {
                name,
                header,
                params,
                adam,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::config("trailing bytes after checkpoint"));
        }
        Ok(Self { sections })
    }
}

pub fn write_checkpoint<T: Real>(path: &Path, ckpt: &Checkpoint<T>) -> Result<()> {
    std::fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint<T: Real>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::ingestion(path, e.to_string()))?;
    Checkpoint::from_bytes(&bytes).map_err(|e| Error::ingestion(path, e.to_string()))
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

fn put_records<'a, T: Real + 'a>(out: &mut Vec<u8>, items: impl ExactSizeIterator<Item = (&'a str, &'a Tensor<T>)>) {
    put_u32(out, items.len() as u32);
    for (name, t) in items {
        put_str(out, name);
        let dims = t.shape().dims();
        put_u32(out, dims.len() as u32);
        for d in dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(out);
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::config("checkpoint truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::config("checkpoint string is not UTF-8"))
    }

    fn records<T: Real>(&mut self) -> Result<Vec<(String, Tensor<T>)>> {
        let count = self.u32()? as usize;
        let mut out = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = self.string()?;
            let rank = self.u32()? as usize;
            if rank > 4 {
                return Err(Error::config(format!("tensor {name} has rank {rank} > 4")));
            }
            let mut dims = [1usize; 4];
            for d in dims.iter_mut().skip(4 - rank) {
                *d = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")) as usize;
            }
            let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
            let raw = self.take(
                shape
                    .numel()
                    .checked_mul(T::BYTES)
                    .ok_or_else(|| Error::config("tensor too large"))?,
            )?;
            let data = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
            out.push((name, Tensor::new(shape, data)?));
        }
        Ok(out)
    }
}
