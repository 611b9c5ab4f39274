//! `.wvt` tensor files: `"WVT1"`, u32 rank, rank × u32 dims, f32 data, all little-endian.

use super::Tensor;
use crate::error::{Error, Result};
use std::io::{Read, Write};

pub const WVT_MAGIC: &[u8; 4] = b"WVT1";

/// Guards against allocating absurd buffers from a corrupt header.
const MAX_ELEMENTS: u64 = 1 << 32;

pub fn write_wvt<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    w.write_all(WVT_MAGIC)?;
    write_wvt_body(w, t)
}

/// Rank, dims and data without the magic prefix (checkpoint records use this).
pub fn write_wvt_body<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.numel() * 4);
    for &v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_wvt<R: Read>(r: &mut R) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic, "magic")?;
    if &magic != WVT_MAGIC {
        return Err(Error::Format(format!(
            "bad tensor magic {:?}, expected {:?}",
            String::from_utf8_lossy(&magic),
            "WVT1"
        )));
    }
    read_wvt_body(r)
}

pub fn read_wvt_body<R: Read>(r: &mut R) -> Result<Tensor> {
    let rank = read_u32(r, "rank")? as usize;
    if rank == 0 || rank > 8 {
        return Err(Error::Format(format!("unsupported tensor rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut n: u64 = 1;
    for _ in 0..rank {
        let d = read_u32(r, "dimension")?;
        if d == 0 {
            return Err(Error::Format("zero-sized dimension".into()));
        }
        n = n.saturating_mul(d as u64);
        shape.push(d as usize);
    }
    if n > MAX_ELEMENTS {
        return Err(Error::Format(format!("tensor with {n} elements is too large")));
    }
    let mut bytes = vec![0u8; n as usize * 4];
    read_exact(r, &mut bytes, "tensor data")?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(shape, data)
}

pub(crate) fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format(format!("truncated input while reading {what}")),
        _ => Error::Io(e),
    })
}
