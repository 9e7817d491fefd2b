//! Binary parameter checkpoints.
//!
//! Layout: magic `SKDW`, one version byte, then per parameter until end of
//! file: id length (u32), id bytes (UTF-8), rank (u32), extents (u32 each),
//! elements (f32 each). All integers and floats little-endian.

use std::path::Path;

use sha2::{Digest, Sha256};

use super::Network;
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

pub const MAGIC: &[u8; 4] = b"SKDW";
pub const VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointEntry {
    pub id: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

pub fn encode<T: Float>(net: &Network<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(5 + net.param_count() * 4);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    for p in net.params() {
        let id = p.id.as_str().as_bytes();
        out.extend_from_slice(&(id.len() as u32).to_le_bytes());
        out.extend_from_slice(id);
        out.extend_from_slice(&(p.tensor.rank() as u32).to_le_bytes());
        for &e in p.tensor.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for v in p.tensor.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                message: format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<CheckpointEntry>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format { offset: 0, message: "bad magic, expected SKDW".into() });
    }
    let version = r.take(1, "version")?[0];
    if version != VERSION {
        return Err(Error::Format { offset: 4, message: format!("unsupported version {version}") });
    }
    let mut entries = Vec::new();
    while r.pos < bytes.len() {
        let id_len = r.u32("id length")? as usize;
        let id_at = r.pos;
        let id = std::str::from_utf8(r.take(id_len, "id")?)
            .map_err(|_| Error::Format { offset: id_at as u64, message: "parameter id is not UTF-8".into() })?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u32("extent")? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * 4, "elements")?;
        let values = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        entries.push(CheckpointEntry { id, shape, values });
    }
    Ok(entries)
}

/// Loads parameter values into a network built from the same architecture.
pub fn load_into<T: Float>(net: &mut Network<T>, bytes: &[u8]) -> Result<()> {
    let entries = decode(bytes)?;
    let count = net.params().count();
    if entries.len() != count {
        return Err(Error::Incompatible(format!("checkpoint holds {} parameters, network has {count}", entries.len())));
    }
    for (p, e) in net.params_mut().zip(entries) {
        if p.id.as_str() != e.id || p.tensor.shape() != e.shape.as_slice() {
            return Err(Error::Incompatible(format!(
                "checkpoint parameter {} {:?} does not match network parameter {} {:?}",
                e.id,
                e.shape,
                p.id,
                p.tensor.shape()
            )));
        }
        p.tensor = Tensor::new(e.shape, e.values.iter().map(|&v| T::of(v as f64)).collect())?;
    }
    Ok(())
}

pub fn save<T: Float>(net: &Network<T>, path: &Path) -> Result<()> {
    std::fs::write(path, encode(net))?;
    Ok(())
}

pub fn load<T: Float>(net: &mut Network<T>, path: &Path) -> Result<()> {
    let bytes =
        std::fs::read(path).map_err(|e| Error::Data(format!("cannot read checkpoint {}: {e}", path.display())))?;
    load_into(net, &bytes)
}

/// SHA-256 of the encoded checkpoint, hex encoded.
pub fn hash<T: Float>(net: &Network<T>) -> String {
    hex::encode(Sha256::digest(encode(net)))
}
