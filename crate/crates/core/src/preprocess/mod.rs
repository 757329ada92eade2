//! Input formatting: per-slice contrast adjustment of the signal channels,
//! three-channel assembly, zero padding, background masking and the
//! fat-fraction threshold of the reference protocol.

mod contrast;
mod pad;
mod volume;

pub use contrast::{contrast_adjust, contrast_adjust_volume, nearest_rank_percentile};
pub use pad::{crop_slices, crop_xy, pad_slices, pad_xy, SlicePadding, XyPadding};
pub use volume::{BodyMask, Channel, Dims, Label, LabelMask, Spacing, Volume};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PreprocessError {
    #[error("{what}: {axis} mismatch (expected {expected}, got {actual})")]
    DimMismatch { what: &'static str, axis: &'static str, expected: usize, actual: usize },
    #[error("{axis} extent {size} exceeds padding target {target}")]
    Oversize { axis: &'static str, size: usize, target: usize },
    #[error("label value {0} outside {{0=background, 1=VAT, 2=SAT}}")]
    InvalidLabel(u8),
    #[error("buffer holds {actual} values, dims need {expected}")]
    BufferLength { expected: usize, actual: usize },
    #[error("invalid volume: {0}")]
    Invalid(String),
}

pub type Result<T, E = PreprocessError> = std::result::Result<T, E>;

/// Fat fraction `fat / (water + fat)`, zero where both signals vanish.
///
/// Only used for synthetic data; scanner FF maps are taken as given.
pub fn fat_fraction(water: f32, fat: f32) -> f32 {
    let total = water + fat;
    if total > 0.0 {
        (fat / total).clamp(0.0, 1.0)
    } else {
        0.0
    }
}

/// Zeroes every channel outside the body.
pub fn mask_background(volume: &Volume, body: &BodyMask) -> Result<Volume> {
    volume.dims().check_same("background mask", body.dims())?;
    let mut out = volume.clone();
    let n = volume.dims().voxels();
    for c in 0..volume.channels() {
        for (v, &inside) in out.channel_mut(c).iter_mut().zip(body.data()) {
            if !inside {
                *v = 0.0;
            }
        }
    }
    debug_assert_eq!(out.data().len(), n * volume.channels());
    Ok(out)
}

/// Resets VAT/SAT labels where the fat fraction is below 0.5.
///
/// The threshold is strict: a voxel at exactly 0.5 keeps its label.
pub fn ff_threshold(mask: &LabelMask, volume: &Volume) -> Result<LabelMask> {
    mask.dims().check_same("ff threshold", volume.dims())?;
    if volume.channels() <= Channel::FatFraction as usize {
        return Err(PreprocessError::Invalid("volume has no fat-fraction channel".into()));
    }
    let ff = volume.channel(Channel::FatFraction as usize);
    let data = mask
        .data()
        .iter()
        .zip(ff)
        .map(|(&l, &f)| if l != Label::Background as u8 && f < 0.5 { Label::Background as u8 } else { l })
        .collect();
    LabelMask::new(mask.dims(), mask.spacing(), data)
}

/// Stacks water, fat and fat fraction (in that order) into one volume.
///
/// Inputs are single-channel volumes; the fat fraction is copied untouched.
pub fn assemble_channels(water: &Volume, fat: &Volume, fat_fraction: &Volume) -> Result<Volume> {
    for (name, v) in [("water", water), ("fat", fat), ("fat fraction", fat_fraction)] {
        if v.channels() != 1 {
            return Err(PreprocessError::Invalid(format!("{name} image must have one channel, has {}", v.channels())));
        }
    }
    water.dims().check_same("assemble fat channel", fat.dims())?;
    water.dims().check_same("assemble fat-fraction channel", fat_fraction.dims())?;
    if water.spacing() != fat.spacing() || water.spacing() != fat_fraction.spacing() {
        return Err(PreprocessError::Invalid("channels have different voxel spacing".into()));
    }
    let mut data = Vec::with_capacity(water.data().len() * 3);
    data.extend_from_slice(water.data());
    data.extend_from_slice(fat.data());
    data.extend_from_slice(fat_fraction.data());
    Volume::new(water.dims(), water.spacing(), 3, data)
}

/// Settings of the full preprocessing chain.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PreprocessOptions {
    /// In-plane size every slice is zero-padded to.
    pub pad_xy: (usize, usize),
    /// Zero the background outside the body mask before normalization.
    pub mask_background: bool,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        PreprocessOptions { pad_xy: (256, 256), mask_background: true }
    }
}

/// A scan ready for the networks plus what is needed to undo the padding.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedScan {
    pub volume: Volume,
    pub xy_padding: XyPadding,
}

/// Background masking, per-slice contrast adjustment of water and fat, and
/// in-plane zero padding of a raw `(water, fat, fat_fraction)` volume.
pub fn prepare_scan(raw: &Volume, body: Option<&BodyMask>, options: PreprocessOptions) -> Result<PreparedScan> {
    if raw.channels() != 3 {
        return Err(PreprocessError::Invalid(format!(
            "expected (water, fat, fat fraction) channels, got {}",
            raw.channels()
        )));
    }
    let masked = match (options.mask_background, body) {
        (true, Some(body)) => mask_background(raw, body)?,
        _ => raw.clone(),
    };
    let adjusted = contrast_adjust_volume(&masked);
    let (volume, xy_padding) = pad_xy(&adjusted, options.pad_xy)?;
    Ok(PreparedScan { volume, xy_padding })
}

#[cfg(test)]
mod tests;
