//! Snapshot container.
//!
//! Binary layout (all integers little-endian):
//!
//! ```text
//! magic    4 bytes  "ISNG"
//! version  u32      1
//! L        u32      lattice size
//! count    u64      number of records
//! record × count:
//!   temperature  f64
//!   label        u8   0 = ordered, 1 = disordered
//!   spins        ceil(L²/8) bytes, site i (row-major) in bit i%8 of byte i/8,
//!                bit set = +1
//! ```
//!
//! The Monte Carlo step count is not stored; decoded snapshots carry
//! `mc_steps = 0`.

use std::io::{BufRead, Read, Write};

use super::{Phase, Snapshot};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"ISNG";
pub const VERSION: u32 = 1;

fn bad(reason: impl Into<String>) -> Error {
    Error::Format { format: "ISNG", reason: reason.into() }
}

pub fn write_snapshots<W: Write>(mut w: W, size: usize, snapshots: &[Snapshot]) -> Result<()> {
    if let Some(s) = snapshots.iter().find(|s| s.size() != size) {
        return Err(Error::dim(format!("snapshot of size {} in a size-{size} container", s.size())));
    }
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(size as u32).to_le_bytes())?;
    w.write_all(&(snapshots.len() as u64).to_le_bytes())?;
    let nbytes = (size * size).div_ceil(8);
    let mut packed = vec![0u8; nbytes];
    for s in snapshots {
        w.write_all(&s.temperature.to_le_bytes())?;
        w.write_all(&[s.label.class() as u8])?;
        packed.iter_mut().for_each(|b| *b = 0);
        for (i, &spin) in s.spins().iter().enumerate() {
            if spin > 0 {
                packed[i / 8] |= 1 << (i % 8);
            }
        }
        w.write_all(&packed)?;
    }
    w.flush()?;
    Ok(())
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| bad(format!("truncated: {e}")))?;
    Ok(buf)
}

/// Returns the lattice size and the snapshots.
pub fn read_snapshots<R: Read>(mut r: R) -> Result<(usize, Vec<Snapshot>)> {
    if &read_array::<4, _>(&mut r)? != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u32::from_le_bytes(read_array(&mut r)?);
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let size = u32::from_le_bytes(read_array(&mut r)?) as usize;
    let count = u64::from_le_bytes(read_array(&mut r)?) as usize;
    let nbytes = (size * size).div_ceil(8);
    let mut out = Vec::with_capacity(count.min(1 << 20));
    let mut packed = vec![0u8; nbytes];
    for _ in 0..count {
        let temperature = f64::from_le_bytes(read_array(&mut r)?);
        let label = match read_array::<1, _>(&mut r)?[0] {
            0 => Phase::Ordered,
            1 => Phase::Disordered,
            other => return Err(bad(format!("label byte {other}"))),
        };
        r.read_exact(&mut packed).map_err(|e| bad(format!("truncated spins: {e}")))?;
        let spins = (0..size * size).map(|i| if packed[i / 8] >> (i % 8) & 1 == 1 { 1 } else { -1 }).collect();
        out.push(Snapshot::new(size, spins, temperature, label)?);
    }
    Ok((size, out))
}

/// One snapshot per line, spins as space-separated `1`/`-1`.
pub fn write_text<W: Write>(mut w: W, snapshots: &[Snapshot]) -> Result<()> {
    for s in snapshots {
        let line: Vec<&str> = s.spins().iter().map(|&v| if v > 0 { "1" } else { "-1" }).collect();
        writeln!(w, "{}", line.join(" "))?;
    }
    Ok(())
}

/// Parses the text export back into spin rows.
pub fn read_text<R: BufRead>(r: R) -> Result<Vec<Vec<i8>>> {
    r.lines()
        .filter(|l| l.as_ref().map(|l| !l.trim().is_empty()).unwrap_or(true))
        .map(|line| {
            line?
                .split_whitespace()
                .map(|tok| match tok {
                    "1" | "+1" => Ok(1),
                    "-1" => Ok(-1),
                    other => Err(Error::Format { format: "ISNG text", reason: format!("token `{other}`") }),
                })
                .collect()
        })
        .collect()
}
