//! Binary parameter checkpoints.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "ENSM" | u32 version | u32 count
//! count × ( u16 name_len | name | u8 rank | rank × u32 extent | f32 data )
//! optional trailer:
//! "XTRA" | u32 json_len | json | u32 count
//! count × ( u16 name_len | name | u64 len | f64 data )
//! ```
//!
//! The main section is what inference needs. The trailer carries free-form
//! metadata plus full-precision arrays (master weights, optimizer moments) so
//! training can resume exactly.

use std::fs;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

use super::ParamSet;

pub const MAGIC: &[u8; 4] = b"ENSM";
pub const EXTRAS_MAGIC: &[u8; 4] = b"XTRA";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CheckpointExtras {
    pub meta: serde_json::Value,
    pub arrays: Vec<(String, Vec<f64>)>,
}

impl CheckpointExtras {
    pub fn array(&self, name: &str) -> Option<&[f64]> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_slice())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Values widened from the stored `f32`.
    pub params: ParamSet,
    pub extras: Option<CheckpointExtras>,
}

fn put_name(out: &mut Vec<u8>, name: &str) -> Result<()> {
    let len = u16::try_from(name.len()).map_err(|_| Error::CheckpointFormat(format!("name too long: {name:?}")))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    Ok(())
}

pub fn encode_checkpoint(params: &ParamSet, extras: Option<&CheckpointExtras>) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(16 + params.numel() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        put_name(&mut out, name)?;
        let rank = u8::try_from(t.rank()).map_err(|_| Error::CheckpointFormat(format!("rank too large for {name}")))?;
        out.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::CheckpointFormat(format!("extent too large for {name}")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    if let Some(x) = extras {
        out.extend_from_slice(EXTRAS_MAGIC);
        let json = serde_json::to_vec(&x.meta)?;
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(x.arrays.len() as u32).to_le_bytes());
        for (name, data) in &x.arrays {
            put_name(&mut out, name)?;
            out.extend_from_slice(&(data.len() as u64).to_le_bytes());
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or(Error::CheckpointTruncated(what))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn name(&mut self) -> Result<String> {
        let len = self.u16("name length")? as usize;
        let bytes = self.take(len, "name")?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::CheckpointFormat("name is not UTF-8".into()))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if bytes.len() < 4 {
        return Err(if MAGIC.starts_with(bytes) { Error::CheckpointTruncated("magic") } else { Error::CheckpointMagic });
    }
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::CheckpointMagic);
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::CheckpointVersion(version));
    }
    let count = r.u32("array count")? as usize;
    let mut entries = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name = r.name()?;
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("extent")? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::CheckpointFormat(format!("{name}: extent overflow")))?;
        let raw = r.take(n.checked_mul(4).ok_or(Error::CheckpointTruncated("array data"))?, "array data")?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::CheckpointFormat(format!("{name}: {e}")))?;
        entries.push((name, t));
    }
    let params = ParamSet::new(entries).map_err(|e| Error::CheckpointFormat(e.to_string()))?;
    if r.remaining() == 0 {
        return Ok(Checkpoint { params, extras: None });
    }
    if r.take(4.min(r.remaining()), "extras magic")? != EXTRAS_MAGIC {
        return Err(Error::CheckpointFormat("unexpected bytes after parameter arrays".into()));
    }
    let json_len = r.u32("extras metadata length")? as usize;
    let meta = serde_json::from_slice(r.take(json_len, "extras metadata")?)?;
    let count = r.u32("extras array count")? as usize;
    let mut arrays = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name = r.name()?;
        let len = r.u64("extras array length")? as usize;
        let raw = r.take(len.checked_mul(8).ok_or(Error::CheckpointTruncated("extras data"))?, "extras data")?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        arrays.push((name, data));
    }
    if r.remaining() != 0 {
        return Err(Error::CheckpointFormat(format!("{} trailing bytes", r.remaining())));
    }
    Ok(Checkpoint {
        params,
        extras: Some(CheckpointExtras { meta, arrays }),
    })
}

pub fn save_checkpoint(params: &ParamSet, extras: Option<&CheckpointExtras>, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(params, extras)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
