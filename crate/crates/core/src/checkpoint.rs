//! Checkpoint container shared by the VAE and DiT formats.
//!
//! Layout (little-endian): 4-byte magic, u32 version, u32 config length, config
//! text (`key=value` lines), u32 record count, then per record a u32 name
//! length, the UTF-8 name and a `.wvt` body without its magic.

use crate::error::{Error, Result};
use crate::tensor::{read_wvt_body, write_wvt_body, Tensor};
use std::io::{Read, Write};

pub struct Checkpoint {
    pub version: u32,
    pub config: String,
    pub records: Vec<(String, Tensor)>,
}

const MAX_TEXT: u32 = 1 << 24;

pub fn write_checkpoint<W: Write>(
    w: &mut W,
    magic: &[u8; 4],
    version: u32,
    config: &str,
    records: &[(&str, &Tensor)],
) -> Result<()> {
    w.write_all(magic)?;
    w.write_all(&version.to_le_bytes())?;
    w.write_all(&(config.len() as u32).to_le_bytes())?;
    w.write_all(config.as_bytes())?;
    w.write_all(&(records.len() as u32).to_le_bytes())?;
    for (name, t) in records {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        write_wvt_body(w, t)?;
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R, magic: &[u8; 4]) -> Result<Checkpoint> {
    use crate::tensor::io_util::{read_exact, read_u32};
    let mut m = [0u8; 4];
    read_exact(r, &mut m, "magic")?;
    if &m != magic {
        return Err(Error::Format(format!(
            "bad checkpoint magic {:?}, expected {:?}",
            String::from_utf8_lossy(&m),
            String::from_utf8_lossy(magic)
        )));
    }
    let version = read_u32(r, "version")?;
    let config = read_text(r, "config")?;
    let count = read_u32(r, "record count")?;
    let mut records = Vec::with_capacity(count.min(4096) as usize);
    for _ in 0..count {
        let name = read_text(r, "record name")?;
        records.push((name, read_wvt_body(r)?));
    }
    Ok(Checkpoint {
        version,
        config,
        records,
    })
}

fn read_text<R: Read>(r: &mut R, what: &str) -> Result<String> {
    use crate::tensor::io_util::{read_exact, read_u32};
    let len = read_u32(r, what)?;
    if len > MAX_TEXT {
        return Err(Error::Format(format!("{what} length {len} is implausible")));
    }
    let mut buf = vec![0u8; len as usize];
    read_exact(r, &mut buf, what)?;
    String::from_utf8(buf).map_err(|_| Error::Format(format!("{what} is not UTF-8")))
}
