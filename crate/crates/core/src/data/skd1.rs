//! SKD1 files: magic `SKD1`, then u32 `N, H, W, C, class_count`, then `N`
//! records of a u16 label followed by `H·W·C` f32 pixels in `H, W, C` order.
//! Everything little-endian. Flat datasets use `H = W = 1`.

use std::path::Path;

use super::{Dataset, Split};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SKD1";
const HEADER: usize = 4 + 5 * 4;

fn dims(ds: &Dataset) -> Result<[usize; 3]> {
    match *ds.sample_shape() {
        [c] => Ok([1, 1, c]),
        [c, h, w] => Ok([h, w, c]),
        ref other => Err(Error::Data(format!("SKD1 cannot store samples of shape {other:?}"))),
    }
}

pub fn encode(ds: &Dataset) -> Result<Vec<u8>> {
    let [h, w, c] = dims(ds)?;
    if ds.classes() > u16::MAX as usize + 1 {
        return Err(Error::Data(format!("{} classes exceed the u16 label range", ds.classes())));
    }
    let mut out = Vec::with_capacity(HEADER + ds.len() * (2 + 4 * h * w * c));
    out.extend_from_slice(MAGIC);
    for v in [ds.len(), h, w, c, ds.classes()] {
        let v = u32::try_from(v).map_err(|_| Error::Data(format!("{v} does not fit in u32")))?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    for i in 0..ds.len() {
        out.extend_from_slice(&(ds.labels()[i] as u16).to_le_bytes());
        let s = ds.sample(i);
        // network layout is C,H,W; the file is H,W,C
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    out.extend_from_slice(&s[(ch * h + y) * w + x].to_le_bytes());
                }
            }
        }
    }
    Ok(out)
}

fn truncated(offset: usize, what: &str) -> Error {
    Error::Format { offset: offset as u64, message: format!("truncated {what}") }
}

pub fn decode(bytes: &[u8], split: Split) -> Result<Dataset> {
    if bytes.len() < 4 {
        return Err(truncated(0, "magic"));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format { offset: 0, message: "bad magic, expected SKD1".into() });
    }
    if bytes.len() < HEADER {
        return Err(truncated(bytes.len().min(HEADER), "header"));
    }
    let u32_at = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
    let [n, h, w, c, classes] = [4, 8, 12, 16, 20].map(u32_at);
    if h == 0 || w == 0 || c == 0 {
        return Err(Error::Format { offset: 8, message: format!("zero extent in {h}x{w}x{c}") });
    }
    let pixels = h * w * c;
    let record = 2 + 4 * pixels;
    let mut labels = Vec::with_capacity(n.min(bytes.len() / record + 1));
    let mut inputs = vec![0f32; 0];
    let mut pos = HEADER;
    for _ in 0..n {
        if bytes.len() < pos + record {
            let what = if bytes.len() < pos + 2 { "label" } else { "pixels" };
            return Err(truncated(bytes.len().min(pos + 2).max(pos), what));
        }
        let y = u16::from_le_bytes([bytes[pos], bytes[pos + 1]]) as usize;
        if y >= classes {
            return Err(Error::Format {
                offset: pos as u64,
                message: format!("label {y} not below class count {classes}"),
            });
        }
        labels.push(y);
        let base = inputs.len();
        inputs.resize(base + pixels, 0.0);
        let raw = &bytes[pos + 2..pos + record];
        for (i, chunk) in raw.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(chunk.try_into().unwrap());
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Format {
                    offset: (pos + 2 + 4 * i) as u64,
                    message: format!("pixel value {v} outside [0, 1]"),
                });
            }
            let (y, rest) = (i / (w * c), i % (w * c));
            let (x, ch) = (rest / c, rest % c);
            inputs[base + (ch * h + y) * w + x] = v;
        }
        pos += record;
    }
    if pos != bytes.len() {
        return Err(Error::Format {
            offset: pos as u64,
            message: format!("{} trailing bytes after {n} records", bytes.len() - pos),
        });
    }
    let shape = if h == 1 && w == 1 { vec![c] } else { vec![c, h, w] };
    Dataset::new(shape, inputs, labels, classes, split)
}

pub fn save(ds: &Dataset, path: &Path) -> Result<()> {
    std::fs::write(path, encode(ds)?)?;
    Ok(())
}

pub fn load(path: &Path, split: Split) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::Data(format!("cannot read dataset {}: {e}", path.display())))?;
    decode(&bytes, split)
}
