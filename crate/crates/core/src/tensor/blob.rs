//! Binary tensor blobs.
//!
//! Layout (all little-endian):
//!
//! ```text
//! b"ESPT" | version: u16 | rank: u8 | dims: rank × u32 | values
//! ```
//!
//! Values are IEEE-754 `f64` or `f32`; the element width is implied by the payload length
//! (`payload / prod(dims)` is 8 or 4).

use std::fs;
use std::io::Write;
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"ESPT";
pub const VERSION: u16 = 1;

/// Storage width of blob values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl Precision {
    pub fn width(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }

    /// Round a value to what this precision can store.
    pub fn quantize(self, x: f64) -> f64 {
        match self {
            Precision::F32 => x as f32 as f64,
            Precision::F64 => x,
        }
    }
}

pub fn encode(t: &Tensor, precision: Precision) -> Result<Vec<u8>> {
    if t.rank() > u8::MAX as usize {
        return Err(Error::Format(format!("rank {} too large for blob", t.rank())));
    }
    let mut out = Vec::with_capacity(7 + 4 * t.rank() + precision.width() * t.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(t.rank() as u8);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    match precision {
        Precision::F64 => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        Precision::F32 => t
            .data()
            .iter()
            .for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let bad = |msg: String| Error::Format(msg);
    if bytes.len() < 7 || &bytes[..4] != MAGIC {
        return Err(bad("missing ESPT magic".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(bad(format!("unsupported blob version {version}")));
    }
    let rank = bytes[6] as usize;
    let header = 7 + 4 * rank;
    if bytes.len() < header {
        return Err(bad("truncated blob header".into()));
    }
    let shape: Vec<usize> = (0..rank)
        .map(|i| {
            let o = 7 + 4 * i;
            u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize
        })
        .collect();
    let count: usize = shape.iter().product();
    let payload = &bytes[header..];
    let data: Vec<f64> = if count > 0 && payload.len() == 8 * count {
        payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect()
    } else if count > 0 && payload.len() == 4 * count {
        payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect()
    } else {
        return Err(bad(format!(
            "payload of {} bytes does not fit shape {shape:?}",
            payload.len()
        )));
    };
    Tensor::new(shape, data)
}

pub fn write(path: &Path, t: &Tensor, precision: Precision) -> Result<()> {
    let bytes = encode(t, precision)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}
