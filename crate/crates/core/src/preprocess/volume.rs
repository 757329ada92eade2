use serde::{Deserialize, Serialize};

use super::{PreprocessError, Result};

/// Extents of a volume: transverse slices x rows x columns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub depth: usize,
    pub height: usize,
    pub width: usize,
}

impl Dims {
    pub fn new(depth: usize, height: usize, width: usize) -> Self {
        Dims { depth, height, width }
    }

    pub fn voxels(&self) -> usize {
        self.depth * self.height * self.width
    }

    pub fn slice_len(&self) -> usize {
        self.height * self.width
    }

    pub(crate) fn check_same(&self, what: &'static str, other: Dims) -> Result<()> {
        for (axis, expected, actual) in [
            ("depth", self.depth, other.depth),
            ("height", self.height, other.height),
            ("width", self.width, other.width),
        ] {
            if expected != actual {
                return Err(PreprocessError::DimMismatch { what, axis, expected, actual });
            }
        }
        Ok(())
    }
}

/// Physical voxel edge lengths in mm.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spacing {
    pub x: f32,
    pub y: f32,
    pub z: f32,
}

impl Spacing {
    /// Typical geometry of the abdominal water-fat scans.
    pub const ABDOMEN: Spacing = Spacing { x: 2.07, y: 2.07, z: 8.0 };

    pub fn new(x: f32, y: f32, z: f32) -> Self {
        Spacing { x, y, z }
    }

    pub fn voxel_mm3(&self) -> f64 {
        self.x as f64 * self.y as f64 * self.z as f64
    }

    pub fn is_valid(&self) -> bool {
        [self.x, self.y, self.z].iter().all(|v| v.is_finite() && *v > 0.0)
    }
}

impl Default for Spacing {
    fn default() -> Self {
        Spacing::ABDOMEN
    }
}

/// Channel order of an assembled input volume.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Channel {
    Water = 0,
    Fat = 1,
    FatFraction = 2,
}

/// Voxel classes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Background = 0,
    Vat = 1,
    Sat = 2,
}

impl Label {
    pub const FOREGROUND: [Label; 2] = [Label::Vat, Label::Sat];

    pub fn name(self) -> &'static str {
        match self {
            Label::Background => "background",
            Label::Vat => "VAT",
            Label::Sat => "SAT",
        }
    }
}

/// Multi-channel float volume, channel-major then row-major
/// (`[channel][z][y][x]`).
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: Dims,
    spacing: Spacing,
    channels: usize,
    data: Vec<f32>,
}

impl Volume {
    pub fn new(dims: Dims, spacing: Spacing, channels: usize, data: Vec<f32>) -> Result<Self> {
        if !spacing.is_valid() {
            return Err(PreprocessError::Invalid(format!("voxel spacing must be positive, got {spacing:?}")));
        }
        if dims.voxels() == 0 || channels == 0 {
            return Err(PreprocessError::Invalid(format!("empty volume {dims:?} x {channels} channels")));
        }
        let expected = dims.voxels() * channels;
        if data.len() != expected {
            return Err(PreprocessError::BufferLength { expected, actual: data.len() });
        }
        Ok(Volume { dims, spacing, channels, data })
    }

    pub fn zeros(dims: Dims, spacing: Spacing, channels: usize) -> Result<Self> {
        Volume::new(dims, spacing, channels, vec![0.0; dims.voxels() * channels])
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.dims.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.dims.voxels();
        &mut self.data[c * n..(c + 1) * n]
    }

    /// One transverse slice of one channel.
    pub fn slice(&self, c: usize, z: usize) -> &[f32] {
        let s = self.dims.slice_len();
        &self.channel(c)[z * s..(z + 1) * s]
    }

    pub fn slice_mut(&mut self, c: usize, z: usize) -> &mut [f32] {
        let s = self.dims.slice_len();
        &mut self.channel_mut(c)[z * s..(z + 1) * s]
    }

    /// Copies one channel out as a single-channel volume.
    pub fn extract_channel(&self, c: usize) -> Volume {
        Volume { dims: self.dims, spacing: self.spacing, channels: 1, data: self.channel(c).to_vec() }
    }

    pub fn at(&self, c: usize, z: usize, y: usize, x: usize) -> f32 {
        self.channel(c)[(z * self.dims.height + y) * self.dims.width + x]
    }
}

/// Voxel-wise class map with labels in `{0, 1, 2}`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMask {
    dims: Dims,
    spacing: Spacing,
    data: Vec<u8>,
}

impl LabelMask {
    pub fn new(dims: Dims, spacing: Spacing, data: Vec<u8>) -> Result<Self> {
        if data.len() != dims.voxels() {
            return Err(PreprocessError::BufferLength { expected: dims.voxels(), actual: data.len() });
        }
        if let Some(&bad) = data.iter().find(|&&l| l > Label::Sat as u8) {
            return Err(PreprocessError::InvalidLabel(bad));
        }
        Ok(LabelMask { dims, spacing, data })
    }

    pub fn empty(dims: Dims, spacing: Spacing) -> Self {
        LabelMask { dims, spacing, data: vec![0; dims.voxels()] }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    pub fn slice(&self, z: usize) -> &[u8] {
        let s = self.dims.slice_len();
        &self.data[z * s..(z + 1) * s]
    }

    pub fn at(&self, z: usize, y: usize, x: usize) -> u8 {
        self.data[(z * self.dims.height + y) * self.dims.width + x]
    }

    pub fn count(&self, label: Label) -> usize {
        self.data.iter().filter(|&&l| l == label as u8).count()
    }
}

/// Voxels belonging to the body (everything else is background).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BodyMask {
    dims: Dims,
    data: Vec<bool>,
}

impl BodyMask {
    pub fn new(dims: Dims, data: Vec<bool>) -> Result<Self> {
        if data.len() != dims.voxels() {
            return Err(PreprocessError::BufferLength { expected: dims.voxels(), actual: data.len() });
        }
        Ok(BodyMask { dims, data })
    }

    pub fn full(dims: Dims) -> Self {
        BodyMask { dims, data: vec![true; dims.voxels()] }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }
}
