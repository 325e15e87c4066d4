//! Binary tensor checkpoints.
//!
//! Layout, all little-endian: the 8-byte magic `NANCKPT1`, a `u32` entry
//! count, then per entry a `u16` name length, the UTF-8 name, a `u8` rank,
//! `rank` `u32` dims, a `u8` dtype (0 = f32, 1 = f64) and the raw values.

use std::io::{Read, Write};
use std::path::Path;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"NANCKPT1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub tensor: Tensor,
    pub dtype: Dtype,
}

impl Entry {
    pub fn f64(name: impl Into<String>, tensor: Tensor) -> Self {
        Self {
            name: name.into(),
            tensor,
            dtype: Dtype::F64,
        }
    }
}

pub fn encode(entries: &[Entry]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&u32::try_from(entries.len()).map_err(|_| Error::invalid("too many entries"))?.to_le_bytes());
    for e in entries {
        let name = e.name.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| Error::invalid(format!("entry name too long: {}", e.name)))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name);
        let shape = e.tensor.shape();
        out.push(u8::try_from(shape.len()).map_err(|_| Error::invalid("rank above 255"))?);
        for &d in shape {
            out.extend_from_slice(&u32::try_from(d).map_err(|_| Error::invalid("dimension above u32"))?.to_le_bytes());
        }
        match e.dtype {
            Dtype::F32 => {
                out.push(0);
                for &v in e.tensor.data() {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
            Dtype::F64 => {
                out.push(1);
                for &v in e.tensor.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if self.buf.len() - self.pos < n {
            return Err(format!("truncated at byte {}", self.pos));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> std::result::Result<u16, String> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(buf: &[u8]) -> std::result::Result<Vec<Entry>, String> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(8)? != MAGIC {
        return Err("bad magic".into());
    }
    let count = c.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = c.u16()? as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| "entry name is not UTF-8".to_string())?
            .to_string();
        let rank = c.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u32()? as usize);
        }
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or("shape overflows")?;
        let (dtype, data) = match c.u8()? {
            0 => {
                let raw = c.take(n.checked_mul(4).ok_or("shape overflows")?)?;
                let data = raw
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
                    .collect();
                (Dtype::F32, data)
            }
            1 => {
                let raw = c.take(n.checked_mul(8).ok_or("shape overflows")?)?;
                let data = raw
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                    .collect();
                (Dtype::F64, data)
            }
            other => return Err(format!("unknown dtype {other} for {name}")),
        };
        let tensor = Tensor::new(shape, data).map_err(|e| e.to_string())?;
        entries.push(Entry { name, tensor, dtype });
    }
    if c.pos != buf.len() {
        return Err(format!("{} trailing bytes", buf.len() - c.pos));
    }
    Ok(entries)
}

pub fn write(path: &Path, entries: &[Entry]) -> Result<()> {
    let bytes = encode(entries)?;
    // Write to a sibling file first so a crash never leaves a torn checkpoint.
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Vec<Entry>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    decode(&buf).map_err(|r| Error::format(path, r))
}

const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";
pub const STEP_ENTRY: &str = "meta.step";

impl ParamStore {
    /// Parameter values, then Adam moments and the step counter when `with_optimizer`.
    pub fn to_entries(&self, with_optimizer: bool) -> Vec<Entry> {
        let mut out: Vec<Entry> = self.iter().map(|p| Entry::f64(&p.name, p.value.clone())).collect();
        if with_optimizer {
            for p in self.iter() {
                let shape = p.value.shape().to_vec();
                out.push(Entry::f64(format!("{ADAM_M}{}", p.name), Tensor::new(shape.clone(), p.m.clone()).expect("same size")));
                out.push(Entry::f64(format!("{ADAM_V}{}", p.name), Tensor::new(shape, p.v.clone()).expect("same size")));
            }
            out.push(Entry::f64(STEP_ENTRY, Tensor::scalar(self.step as f64)));
        }
        out
    }

    /// Overwrites parameters (and optimizer state when present) from checkpoint
    /// entries. Every parameter in the store must be present with its shape.
    pub fn load_entries(&mut self, entries: &[Entry]) -> Result<()> {
        let find = |name: &str| entries.iter().find(|e| e.name == name);
        let names: Vec<String> = self.iter().map(|p| p.name.clone()).collect();
        for name in &names {
            let e = find(name).ok_or_else(|| Error::invalid(format!("checkpoint lacks parameter {name:?}")))?;
            let p = self.get_param_mut(name).expect("listed");
            if e.tensor.shape() != p.value.shape() {
                return Err(Error::ShapeMismatch {
                    op: "checkpoint",
                    lhs: p.value.shape().to_vec(),
                    rhs: e.tensor.shape().to_vec(),
                });
            }
            p.value = e.tensor.clone();
            if let (Some(m), Some(v)) = (find(&format!("{ADAM_M}{name}")), find(&format!("{ADAM_V}{name}"))) {
                p.m = m.tensor.data().to_vec();
                p.v = v.tensor.data().to_vec();
            }
        }
        if let Some(s) = find(STEP_ENTRY).and_then(|e| e.tensor.item()) {
            self.step = s as u64;
        }
        Ok(())
    }
}
