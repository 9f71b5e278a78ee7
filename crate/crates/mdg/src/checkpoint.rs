//! Parameter checkpoint container.
//!
//! Flat binary layout, little-endian throughout:
//!
//! ```text
//! magic    "MDGCKPT1" (8 bytes)
//! u32      config length, then config text (key=value lines)
//! u32      entry count
//! entry*   u32 name length, name bytes, u32 rank, u64 extents...,
//!          f64 data (raw IEEE-754 bits)
//! ```
//!
//! Round-trips are bit-exact: values are written and read as raw bits.

use crate::error::{MdgError, Result};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"MDGCKPT1";

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    pub entries: Vec<Entry>,
}

fn put_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| MdgError::data("checkpoint truncated"))?;
    Ok(u32::from_le_bytes(b))
}

fn get_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|_| MdgError::data("checkpoint truncated"))?;
    Ok(u64::from_le_bytes(b))
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        put_u32(&mut w, self.config_text.len() as u32)?;
        w.write_all(self.config_text.as_bytes())?;
        put_u32(&mut w, self.entries.len() as u32)?;
        for e in &self.entries {
            put_u32(&mut w, e.name.len() as u32)?;
            w.write_all(e.name.as_bytes())?;
            put_u32(&mut w, e.shape.len() as u32)?;
            let mut numel = 1usize;
            for &d in &e.shape {
                put_u64(&mut w, d as u64)?;
                numel *= d;
            }
            assert_eq!(numel, e.data.len(), "entry {} shape/data mismatch", e.name);
            for &v in &e.data {
                w.write_all(&v.to_bits().to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| MdgError::data("checkpoint truncated"))?;
        if &magic != MAGIC {
            return Err(MdgError::data(format!(
                "bad checkpoint magic {:?}, expected {:?}",
                String::from_utf8_lossy(&magic),
                String::from_utf8_lossy(MAGIC)
            )));
        }
        let clen = get_u32(&mut r)? as usize;
        let mut cbuf = vec![0u8; clen];
        r.read_exact(&mut cbuf)
            .map_err(|_| MdgError::data("checkpoint truncated"))?;
        let config_text = String::from_utf8(cbuf)
            .map_err(|_| MdgError::data("checkpoint config is not valid UTF-8"))?;
        let count = get_u32(&mut r)? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let nlen = get_u32(&mut r)? as usize;
            let mut nbuf = vec![0u8; nlen];
            r.read_exact(&mut nbuf)
                .map_err(|_| MdgError::data("checkpoint truncated"))?;
            let name = String::from_utf8(nbuf)
                .map_err(|_| MdgError::data("checkpoint entry name is not valid UTF-8"))?;
            let rank = get_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            let mut numel = 1usize;
            for _ in 0..rank {
                let d = get_u64(&mut r)? as usize;
                shape.push(d);
                numel = numel
                    .checked_mul(d)
                    .ok_or_else(|| MdgError::data("checkpoint extent overflow"))?;
            }
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(f64::from_bits(get_u64(&mut r)?));
            }
            entries.push(Entry { name, shape, data });
        }
        // Trailing bytes mean the file does not match the declared layout.
        let mut extra = [0u8; 1];
        if r.read(&mut extra)? != 0 {
            return Err(MdgError::data("checkpoint has trailing bytes"));
        }
        Ok(Checkpoint {
            config_text,
            entries,
        })
    }
}
