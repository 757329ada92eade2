//! MVF1: minimal little-endian volume container.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "MVF1"
//! 4       4     channel count (u32)
//! 8       12    depth, height, width (u32 each)
//! 20      12    spacing x, y, z in mm (f32 each)
//! 32      1     dtype: 0 = f32 image, 1 = u8 labels
//! 33      ...   payload, channel-major then row-major
//! ```

use std::fs;
use std::path::Path;

use super::{IoError, Result};
use crate::preprocess::{BodyMask, Dims, LabelMask, Spacing, Volume};

pub const MVF_MAGIC: [u8; 4] = *b"MVF1";
const HEADER_LEN: usize = 33;
const DTYPE_F32: u8 = 0;
const DTYPE_U8: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum MvfContent {
    Image(Volume),
    Labels(LabelMask),
}

fn header(out: &mut Vec<u8>, channels: usize, dims: Dims, spacing: Spacing, dtype: u8) {
    out.extend_from_slice(&MVF_MAGIC);
    for v in [channels, dims.depth, dims.height, dims.width] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for v in [spacing.x, spacing.y, spacing.z] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.push(dtype);
}

pub fn encode_volume(volume: &Volume) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + volume.data().len() * 4);
    header(&mut out, volume.channels(), volume.dims(), volume.spacing(), DTYPE_F32);
    for v in volume.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn encode_labels(mask: &LabelMask) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + mask.data().len());
    header(&mut out, 1, mask.dims(), mask.spacing(), DTYPE_U8);
    out.extend_from_slice(mask.data());
    out
}

fn u32_at(bytes: &[u8], at: usize) -> usize {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize
}

fn f32_at(bytes: &[u8], at: usize) -> f32 {
    f32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

pub fn decode(bytes: &[u8]) -> Result<MvfContent> {
    if bytes.len() < 4 || bytes[..4] != MVF_MAGIC {
        let mut magic = [0u8; 4];
        let n = bytes.len().min(4);
        magic[..n].copy_from_slice(&bytes[..n]);
        return Err(IoError::BadMagic(magic));
    }
    if bytes.len() < HEADER_LEN {
        return Err(IoError::Truncated { expected: HEADER_LEN, actual: bytes.len() });
    }
    let channels = u32_at(bytes, 4);
    let dims = Dims::new(u32_at(bytes, 8), u32_at(bytes, 12), u32_at(bytes, 16));
    let spacing = Spacing::new(f32_at(bytes, 20), f32_at(bytes, 24), f32_at(bytes, 28));
    let dtype = bytes[32];
    let elem = match dtype {
        DTYPE_F32 => 4,
        DTYPE_U8 => 1,
        other => return Err(IoError::UnknownDtype(other)),
    };
    let expected = HEADER_LEN + channels * dims.voxels() * elem;
    if bytes.len() != expected {
        return Err(IoError::Truncated { expected, actual: bytes.len() });
    }
    let payload = &bytes[HEADER_LEN..];
    match dtype {
        DTYPE_F32 => {
            let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            Ok(MvfContent::Image(Volume::new(dims, spacing, channels, data)?))
        }
        _ => {
            if channels != 1 {
                return Err(IoError::Volume(crate::preprocess::PreprocessError::Invalid(format!(
                    "label files hold one channel, header says {channels}"
                ))));
            }
            Ok(MvfContent::Labels(LabelMask::new(dims, spacing, payload.to_vec())?))
        }
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| IoError::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| IoError::io(path, e))
}

pub fn write_volume(path: impl AsRef<Path>, volume: &Volume) -> Result<()> {
    write_bytes(path.as_ref(), &encode_volume(volume))
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    match decode(&read_bytes(path.as_ref())?)? {
        MvfContent::Image(v) => Ok(v),
        MvfContent::Labels(_) => Err(IoError::WrongKind { expected: "image", found: "label" }),
    }
}

pub fn write_labels(path: impl AsRef<Path>, mask: &LabelMask) -> Result<()> {
    write_bytes(path.as_ref(), &encode_labels(mask))
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelMask> {
    match decode(&read_bytes(path.as_ref())?)? {
        MvfContent::Labels(m) => Ok(m),
        MvfContent::Image(_) => Err(IoError::WrongKind { expected: "label", found: "image" }),
    }
}

/// Body masks are stored as label files with values `{0, 1}`.
pub fn write_body_mask(path: impl AsRef<Path>, mask: &BodyMask, spacing: Spacing) -> Result<()> {
    let labels = LabelMask::new(mask.dims(), spacing, mask.data().iter().map(|&b| b as u8).collect())?;
    write_labels(path, &labels)
}

pub fn read_body_mask(path: impl AsRef<Path>) -> Result<BodyMask> {
    let labels = read_labels(path)?;
    Ok(BodyMask::new(labels.dims(), labels.data().iter().map(|&l| l != 0).collect())?)
}
