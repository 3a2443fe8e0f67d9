//! On-disk formats: the binary frame stream, its CSV twin, and NDJSON records.
//!
//! Binary layout (all little-endian): magic `RAIN`, version `u32`, frame
//! dimension `u32`, frame count `u64`, then `count * d` `f32` values.

use std::io::{BufRead, Read, Write};

use serde::Serialize;

use crate::error::{Error, Result};

pub const FRAME_MAGIC: &[u8; 4] = b"RAIN";
pub const FRAME_VERSION: u32 = 1;

pub fn write_frames_binary<W: Write>(mut w: W, dim: usize, frames: &[Vec<f64>]) -> Result<()> {
    let dim32 = u32::try_from(dim).map_err(|_| Error::Format(format!("frame dim {dim} does not fit in u32")))?;
    w.write_all(FRAME_MAGIC)?;
    w.write_all(&FRAME_VERSION.to_le_bytes())?;
    w.write_all(&dim32.to_le_bytes())?;
    w.write_all(&(frames.len() as u64).to_le_bytes())?;
    let mut buf = Vec::with_capacity(frames.len() * dim * 4);
    for (i, f) in frames.iter().enumerate() {
        if f.len() != dim {
            return Err(Error::Format(format!("frame {i} has {} values, expected {dim}", f.len())));
        }
        for &v in f {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

/// Returns `(dim, frames)`.
pub fn read_frames_binary<R: Read>(mut r: R) -> Result<(usize, Vec<Vec<f64>>)> {
    let mut header = [0u8; 20];
    r.read_exact(&mut header).map_err(|_| Error::Format("truncated frame header".into()))?;
    if &header[0..4] != FRAME_MAGIC {
        return Err(Error::Format("bad magic, not a frame file".into()));
    }
    let version = u32::from_le_bytes(header[4..8].try_into().expect("4 bytes"));
    if version != FRAME_VERSION {
        return Err(Error::Format(format!("unsupported frame file version {version}")));
    }
    let dim = u32::from_le_bytes(header[8..12].try_into().expect("4 bytes")) as usize;
    let count = u64::from_le_bytes(header[12..20].try_into().expect("8 bytes")) as usize;
    let mut body = Vec::new();
    r.read_to_end(&mut body)?;
    if body.len() != count * dim * 4 {
        return Err(Error::Format(format!(
            "frame body has {} bytes, header promises {} frames of {dim}",
            body.len(),
            count
        )));
    }
    let values: Vec<f64> =
        body.chunks_exact(4).map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes")))).collect();
    let frames = if dim == 0 { vec![Vec::new(); count] } else { values.chunks(dim).map(<[f64]>::to_vec).collect() };
    Ok((dim, frames))
}

/// CSV with header `index,x0,...,x{d-1}`; values printed with full precision.
pub fn write_frames_csv<W: Write>(mut w: W, dim: usize, frames: &[Vec<f64>]) -> Result<()> {
    let mut header = String::from("index");
    for k in 0..dim {
        header.push_str(&format!(",x{k}"));
    }
    writeln!(w, "{header}")?;
    for (i, f) in frames.iter().enumerate() {
        if f.len() != dim {
            return Err(Error::Format(format!("frame {i} has {} values, expected {dim}", f.len())));
        }
        let mut line = i.to_string();
        for v in f {
            line.push(',');
            line.push_str(&v.to_string());
        }
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads what [`write_frames_csv`] writes. Leading `#` lines are skipped.
pub fn read_frames_csv<R: BufRead>(r: R) -> Result<(usize, Vec<Vec<f64>>)> {
    let mut dim = None;
    let mut frames = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        let lineno = n + 1;
        if line.trim().is_empty() || (dim.is_none() && line.starts_with('#')) {
            continue;
        }
        let Some(dim) = dim else {
            dim = Some(line.split(',').count().saturating_sub(1));
            continue;
        };
        let vals: Vec<f64> = line
            .split(',')
            .skip(1)
            .map(|v| v.trim().parse::<f64>().map_err(|e| Error::Format(format!("line {lineno}: {e}"))))
            .collect::<Result<_>>()?;
        if vals.len() != dim {
            return Err(Error::Format(format!("line {lineno}: {} values, expected {dim}", vals.len())));
        }
        frames.push(vals);
    }
    let dim = dim.ok_or_else(|| Error::Format("empty CSV".into()))?;
    Ok((dim, frames))
}

/// Write one JSON object per line.
pub fn write_ndjson<W: Write, T: Serialize>(mut w: W, records: &[T]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
