//! `ZSTK` raw stack files.
//!
//! Header: magic `ZSTK`, then u32 version, N, H, W, C, p (little-endian).
//! Body: N·H·W·C f32 little-endian values, level-major, row-major,
//! channel-last.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::zoom::{ZoomSchedule, ZoomStack};

pub const MAGIC: &[u8; 4] = b"ZSTK";
pub const VERSION: u32 = 1;

pub fn write_stack(stack: &ZoomStack, out: &mut impl Write) -> Result<()> {
    let s = stack.schedule();
    out.write_all(MAGIC)?;
    for v in [
        VERSION,
        s.levels() as u32,
        s.height() as u32,
        s.width() as u32,
        s.channels() as u32,
        s.base() as u32,
    ] {
        out.write_all(&v.to_le_bytes())?;
    }
    for layer in stack.layers() {
        let mut bytes = Vec::with_capacity(layer.len() * 4);
        for &v in layer.data() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out.write_all(&bytes)?;
    }
    Ok(())
}

pub fn read_stack(input: &mut impl Read) -> Result<ZoomStack> {
    let mut header = [0u8; 28];
    input
        .read_exact(&mut header)
        .map_err(|_| Error::invalid("ZSTK header truncated"))?;
    if &header[..4] != MAGIC {
        return Err(Error::invalid("not a ZSTK file (bad magic)"));
    }
    let field = |i: usize| {
        let o = 4 + 4 * i;
        u32::from_le_bytes([header[o], header[o + 1], header[o + 2], header[o + 3]]) as usize
    };
    let version = field(0);
    if version != VERSION as usize {
        return Err(Error::invalid(format!("unsupported ZSTK version {version}")));
    }
    let (n, h, w, c, p) = (field(1), field(2), field(3), field(4), field(5));
    let schedule = ZoomSchedule::new(p, n, h, w, c)?;
    let per_layer = h
        .checked_mul(w)
        .and_then(|v| v.checked_mul(c))
        .ok_or_else(|| Error::invalid("ZSTK dims overflow"))?;
    let mut layers = Vec::with_capacity(n);
    let mut bytes = vec![0u8; per_layer * 4];
    for i in 0..n {
        input
            .read_exact(&mut bytes)
            .map_err(|_| Error::invalid(format!("ZSTK body truncated in layer {i}")))?;
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        layers.push(Image::from_vec(h, w, c, data)?);
    }
    let mut extra = [0u8; 1];
    if input.read(&mut extra)? != 0 {
        return Err(Error::invalid("trailing bytes after ZSTK body"));
    }
    ZoomStack::new(schedule, layers)
}

pub fn save_stack(stack: &ZoomStack, path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_stack(stack, &mut out)?;
    out.flush()?;
    Ok(())
}

pub fn load_stack(path: impl AsRef<Path>) -> Result<ZoomStack> {
    read_stack(&mut BufReader::new(File::open(path)?))
}
