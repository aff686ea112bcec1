//! `LSFB` framebuffer dumps: magic, version, width:u32, height:u32,
//! channels:u32, tag:u8, then width·height·channels f32 values.

use std::path::Path;

use super::{put_f32s, put_u32, read_file, write_file, FormatError, Reader};
use crate::raster::{ChannelTag, Framebuffer};
use crate::{Error, Result};

const MAGIC: [u8; 4] = *b"LSFB";

pub fn framebuffer_to_bytes(fb: &Framebuffer) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(21 + fb.data.len() * 4);
    out.extend_from_slice(&MAGIC);
    put_u32(&mut out, super::FORMAT_VERSION as usize)?;
    put_u32(&mut out, fb.width)?;
    put_u32(&mut out, fb.height)?;
    put_u32(&mut out, fb.channels)?;
    out.push(fb.tag.code());
    put_f32s(&mut out, &fb.data);
    Ok(out)
}

pub fn framebuffer_from_bytes(bytes: &[u8]) -> Result<Framebuffer> {
    let mut r = Reader::new(bytes);
    r.magic(MAGIC)?;
    let width = r.u32()? as usize;
    let height = r.u32()? as usize;
    let channels = r.u32()? as usize;
    let code = r.u8()?;
    let tag = ChannelTag::from_code(code).ok_or(FormatError::UnknownTag(code))?;
    let n = width
        .checked_mul(height)
        .and_then(|v| v.checked_mul(channels))
        .ok_or_else(|| super::invalid(8, "framebuffer size overflows"))?;
    let data = r.f32_vec(n)?;
    r.finish()?;
    Framebuffer::from_data(width, height, channels, tag, data)
}

pub fn dump_framebuffer(path: impl AsRef<Path>, fb: &Framebuffer) -> Result<()> {
    write_file(path.as_ref(), &framebuffer_to_bytes(fb)?)
}

pub fn load_framebuffer(path: impl AsRef<Path>) -> Result<Framebuffer> {
    framebuffer_from_bytes(&read_file(path.as_ref())?)
}

/// Loads into an existing buffer, which fixes the expected shape and tag.
pub fn load_framebuffer_into(path: impl AsRef<Path>, target: &mut Framebuffer) -> Result<()> {
    let fb = load_framebuffer(path)?;
    for (what, expected, actual) in [
        ("framebuffer width", target.width, fb.width),
        ("framebuffer height", target.height, fb.height),
        ("framebuffer channels", target.channels, fb.channels),
    ] {
        if expected != actual {
            return Err(Error::DimensionMismatch { what, expected, actual });
        }
    }
    if fb.tag != target.tag {
        return Err(FormatError::TagMismatch {
            expected: target.tag,
            found: fb.tag,
        }
        .into());
    }
    target.data = fb.data;
    Ok(())
}
