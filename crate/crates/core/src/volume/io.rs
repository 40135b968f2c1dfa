//! DMPV (volume) and DMPL (label mask) binary formats, little-endian.
//!
//! ```text
//! DMPV: "DMPV" | u16 version=1 | u32 W, H, D | f32 sx, sy, sz | f32 x W*H*D
//! DMPL: "DMPL" | u16 version=1 | u32 W, H, D | u16 K          | u8  x W*H*D
//! ```

use std::path::Path;

use super::{Dims, LabelMask, Volume};
use crate::error::{Error, Result};

const VOLUME_MAGIC: &[u8; 4] = b"DMPV";
const MASK_MAGIC: &[u8; 4] = b"DMPL";
const VERSION: u16 = 1;

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let out = &self.buf[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(Error::Truncated {
                expected: self.pos.saturating_add(n),
                found: self.buf.len(),
            }),
        }
    }

    pub(crate) fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let found = self.take(4).map_err(|_| Error::BadMagic {
            expected: String::from_utf8_lossy(expected).into_owned(),
            found: String::from_utf8_lossy(self.buf).into_owned(),
        })?;
        if found != expected {
            return Err(Error::BadMagic {
                expected: String::from_utf8_lossy(expected).into_owned(),
                found: String::from_utf8_lossy(found).into_owned(),
            });
        }
        Ok(())
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn f32_vec(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = n
            .checked_mul(4)
            .ok_or_else(|| Error::InvalidArgument(format!("payload of {n} floats overflows")))?;
        let raw = self.take(bytes)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        match self.buf.len() - self.pos {
            0 => Ok(()),
            extra => Err(Error::TrailingBytes(extra)),
        }
    }

    fn dims(&mut self) -> Result<Dims> {
        let (w, h, d) = (self.u32()?, self.u32()?, self.u32()?);
        let dims = Dims::new(w as usize, h as usize, d as usize);
        match dims.checked_len() {
            Some(n) if n > 0 && n.checked_mul(4).is_some() => Ok(dims),
            _ => Err(Error::BadDims(w, h, d)),
        }
    }
}

fn put_dims(out: &mut Vec<u8>, dims: Dims) {
    for v in [dims.width, dims.height, dims.depth] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
}

pub fn encode_volume(volume: &Volume) -> Vec<u8> {
    let mut out = Vec::with_capacity(30 + volume.voxels.len() * 4);
    out.extend_from_slice(VOLUME_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_dims(&mut out, volume.dims);
    for s in volume.spacing {
        out.extend_from_slice(&s.to_le_bytes());
    }
    for v in &volume.voxels {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_volume(buf: &[u8]) -> Result<Volume> {
    let mut r = Reader::new(buf);
    r.magic(VOLUME_MAGIC)?;
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let dims = r.dims()?;
    let spacing = [r.f32()?, r.f32()?, r.f32()?];
    let voxels = r.f32_vec(dims.len())?;
    r.finish()?;
    Volume::new(dims, spacing, voxels)
}

pub fn encode_mask(mask: &LabelMask) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + mask.labels.len());
    out.extend_from_slice(MASK_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_dims(&mut out, mask.dims);
    out.extend_from_slice(&u16::from(mask.num_classes).to_le_bytes());
    out.extend_from_slice(&mask.labels);
    out
}

pub fn decode_mask(buf: &[u8]) -> Result<LabelMask> {
    let mut r = Reader::new(buf);
    r.magic(MASK_MAGIC)?;
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let dims = r.dims()?;
    let k = r.u16()?;
    let payload = r.take(dims.len())?;
    r.finish()?;
    if let Some(&value) = payload.iter().find(|&&l| u16::from(l) > k) {
        return Err(Error::LabelRange {
            value,
            num_classes: k,
        });
    }
    let k = u8::try_from(k)
        .map_err(|_| Error::InvalidArgument(format!("class count {k} exceeds 255")))?;
    LabelMask::new(dims, k, payload.to_vec())
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    decode_volume(&read_file(path.as_ref())?)
}

pub fn save_volume(volume: &Volume, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_volume(volume))
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<LabelMask> {
    decode_mask(&read_file(path.as_ref())?)
}

pub fn save_mask(mask: &LabelMask, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_mask(mask))
}
