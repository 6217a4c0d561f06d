//! Parameter checkpoint container.
//!
//! Binary layout (all integers little-endian):
//!
//! ```text
//! magic    4 bytes  "GKPT"
//! version  u32      1
//! epoch    u64
//! count    u64      number of parameters
//! layers   u32
//! layer × layers:
//!   name_len  u16, name (UTF-8)
//!   kind      u8   0 = linear, 1 = conv
//!   offset    u64  start of the weight block
//!   ndim      u8,  dims u64 × ndim (weight shape)
//!   stride    u32
//! values   f64 × count
//! ```
//!
//! Each layer's bias block follows its weights and has one entry per output
//! unit, so offsets and shapes fully determine the layer map.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::models::{LayerEntry, LayerKind, ParamVector};

pub const MAGIC: &[u8; 4] = b"GKPT";
pub const VERSION: u32 = 1;

fn bad(reason: impl Into<String>) -> Error {
    Error::Format { format: "GKPT", reason: reason.into() }
}

pub fn write_checkpoint<W: Write>(mut w: W, epoch: usize, params: &ParamVector) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(epoch as u64).to_le_bytes())?;
    w.write_all(&(params.len() as u64).to_le_bytes())?;
    w.write_all(&(params.layers().len() as u32).to_le_bytes())?;
    for l in params.layers() {
        let name = l.name.as_bytes();
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&[match l.kind {
            LayerKind::Linear => 0,
            LayerKind::Conv => 1,
        }])?;
        w.write_all(&(l.weight.start as u64).to_le_bytes())?;
        w.write_all(&[l.shape.len() as u8])?;
        for d in &l.shape {
            w.write_all(&(*d as u64).to_le_bytes())?;
        }
        w.write_all(&(l.stride as u32).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(params.len() * 8);
    for v in params.values() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| bad(format!("truncated: {e}")))?;
    Ok(buf)
}

fn read_u64<R: Read>(r: &mut R) -> Result<usize> {
    Ok(u64::from_le_bytes(read_array(r)?) as usize)
}

/// Returns the epoch and the parameters with their layer map.
pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(usize, ParamVector)> {
    if &read_array::<4, _>(&mut r)? != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u32::from_le_bytes(read_array(&mut r)?);
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let epoch = read_u64(&mut r)?;
    let count = read_u64(&mut r)?;
    let nlayers = u32::from_le_bytes(read_array(&mut r)?) as usize;
    let mut layers = Vec::with_capacity(nlayers.min(1024));
    for _ in 0..nlayers {
        let len = u16::from_le_bytes(read_array(&mut r)?) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(|e| bad(format!("truncated name: {e}")))?;
        let name = String::from_utf8(name).map_err(|_| bad("layer name is not UTF-8"))?;
        let kind = match read_array::<1, _>(&mut r)?[0] {
            0 => LayerKind::Linear,
            1 => LayerKind::Conv,
            k => return Err(bad(format!("layer kind {k}"))),
        };
        let offset = read_u64(&mut r)?;
        let ndim = read_array::<1, _>(&mut r)?[0] as usize;
        let expected = match kind {
            LayerKind::Linear => 2,
            LayerKind::Conv => 4,
        };
        if ndim != expected {
            return Err(bad(format!("layer {name} has {ndim} dims")));
        }
        let shape = (0..ndim).map(|_| read_u64(&mut r)).collect::<Result<Vec<_>>>()?;
        let stride = u32::from_le_bytes(read_array(&mut r)?) as usize;
        let nw: usize = shape.iter().product();
        let mut entry = LayerEntry { name, kind, weight: offset..offset + nw, bias: 0..0, shape, stride };
        let nb = entry.outputs();
        entry.bias = offset + nw..offset + nw + nb;
        layers.push(entry);
    }
    if count > (1 << 32) {
        return Err(bad(format!("implausible parameter count {count}")));
    }
    let mut raw = vec![0u8; count * 8];
    r.read_exact(&mut raw).map_err(|e| bad(format!("truncated values: {e}")))?;
    let values = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    let params = ParamVector::new(values, layers).map_err(|e| bad(e.to_string()))?;
    Ok((epoch, params))
}
