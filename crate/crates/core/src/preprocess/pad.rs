use super::{BodyMask, Dims, LabelMask, PreprocessError, Result, Volume};

/// Offsets of an in-plane zero padding, kept for the inverse crop.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct XyPadding {
    pub top: usize,
    pub left: usize,
    pub original_height: usize,
    pub original_width: usize,
}

impl XyPadding {
    pub fn none(dims: Dims) -> Self {
        XyPadding { top: 0, left: 0, original_height: dims.height, original_width: dims.width }
    }
}

/// Number of slices appended by [`pad_slices`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SlicePadding {
    pub original_depth: usize,
    pub added: usize,
}

fn pad_plane<T: Copy>(src: &[T], dims: Dims, channels: usize, target: (usize, usize), pad: XyPadding, zero: T) -> Vec<T> {
    let (th, tw) = target;
    let mut out = vec![zero; channels * dims.depth * th * tw];
    for p in 0..channels * dims.depth {
        for y in 0..dims.height {
            let s = (p * dims.height + y) * dims.width;
            let d = (p * th + y + pad.top) * tw + pad.left;
            out[d..d + dims.width].copy_from_slice(&src[s..s + dims.width]);
        }
    }
    out
}

fn crop_plane<T: Copy>(src: &[T], dims: Dims, channels: usize, pad: XyPadding) -> Vec<T> {
    let (oh, ow) = (pad.original_height, pad.original_width);
    let mut out = Vec::with_capacity(channels * dims.depth * oh * ow);
    for p in 0..channels * dims.depth {
        for y in 0..oh {
            let s = (p * dims.height + y + pad.top) * dims.width + pad.left;
            out.extend_from_slice(&src[s..s + ow]);
        }
    }
    out
}

fn xy_padding(dims: Dims, target: (usize, usize)) -> Result<XyPadding> {
    let (th, tw) = target;
    if dims.height > th {
        return Err(PreprocessError::Oversize { axis: "height", size: dims.height, target: th });
    }
    if dims.width > tw {
        return Err(PreprocessError::Oversize { axis: "width", size: dims.width, target: tw });
    }
    Ok(XyPadding {
        top: (th - dims.height) / 2,
        left: (tw - dims.width) / 2,
        original_height: dims.height,
        original_width: dims.width,
    })
}

fn check_crop(dims: Dims, pad: &XyPadding) -> Result<()> {
    if pad.top + pad.original_height > dims.height || pad.left + pad.original_width > dims.width {
        return Err(PreprocessError::Invalid(format!("crop {pad:?} exceeds volume {dims:?}")));
    }
    Ok(())
}

/// Centers every slice on a zero canvas of `target = (height, width)`.
pub fn pad_xy(volume: &Volume, target: (usize, usize)) -> Result<(Volume, XyPadding)> {
    let dims = volume.dims();
    let pad = xy_padding(dims, target)?;
    let data = pad_plane(volume.data(), dims, volume.channels(), target, pad, 0.0);
    let out = Volume::new(Dims::new(dims.depth, target.0, target.1), volume.spacing(), volume.channels(), data)?;
    Ok((out, pad))
}

/// Inverse of [`pad_xy`].
pub fn crop_xy(volume: &Volume, pad: &XyPadding) -> Result<Volume> {
    let dims = volume.dims();
    check_crop(dims, pad)?;
    let data = crop_plane(volume.data(), dims, volume.channels(), *pad);
    Volume::new(Dims::new(dims.depth, pad.original_height, pad.original_width), volume.spacing(), volume.channels(), data)
}

impl LabelMask {
    pub fn pad_xy(&self, target: (usize, usize)) -> Result<(LabelMask, XyPadding)> {
        let dims = self.dims();
        let pad = xy_padding(dims, target)?;
        let data = pad_plane(self.data(), dims, 1, target, pad, 0u8);
        Ok((LabelMask::new(Dims::new(dims.depth, target.0, target.1), self.spacing(), data)?, pad))
    }

    pub fn crop_xy(&self, pad: &XyPadding) -> Result<LabelMask> {
        let dims = self.dims();
        check_crop(dims, pad)?;
        let data = crop_plane(self.data(), dims, 1, *pad);
        LabelMask::new(Dims::new(dims.depth, pad.original_height, pad.original_width), self.spacing(), data)
    }

    /// Repeats the last slice up to `target_depth` slices.
    pub fn pad_slices(&self, target_depth: usize) -> Result<(LabelMask, SlicePadding)> {
        let dims = self.dims();
        let pad = slice_padding(dims, target_depth)?;
        let data = repeat_last(self.data(), dims, 1, target_depth);
        Ok((LabelMask::new(Dims::new(target_depth, dims.height, dims.width), self.spacing(), data)?, pad))
    }

    /// Drops the slices appended by [`LabelMask::pad_slices`].
    pub fn crop_slices(&self, pad: &SlicePadding) -> Result<LabelMask> {
        let dims = self.dims();
        check_slice_crop(dims, pad)?;
        let data = keep_first(self.data(), dims, 1, pad.original_depth);
        LabelMask::new(Dims::new(pad.original_depth, dims.height, dims.width), self.spacing(), data)
    }
}

impl BodyMask {
    pub fn pad_xy(&self, target: (usize, usize)) -> Result<BodyMask> {
        let dims = self.dims();
        let pad = xy_padding(dims, target)?;
        let data = pad_plane(self.data(), dims, 1, target, pad, false);
        BodyMask::new(Dims::new(dims.depth, target.0, target.1), data)
    }
}

fn slice_padding(dims: Dims, target_depth: usize) -> Result<SlicePadding> {
    if dims.depth > target_depth {
        return Err(PreprocessError::Oversize { axis: "depth", size: dims.depth, target: target_depth });
    }
    Ok(SlicePadding { original_depth: dims.depth, added: target_depth - dims.depth })
}

fn check_slice_crop(dims: Dims, pad: &SlicePadding) -> Result<()> {
    if pad.original_depth + pad.added != dims.depth {
        return Err(PreprocessError::DimMismatch {
            what: "slice crop",
            axis: "depth",
            expected: pad.original_depth + pad.added,
            actual: dims.depth,
        });
    }
    Ok(())
}

fn repeat_last<T: Copy>(src: &[T], dims: Dims, channels: usize, target_depth: usize) -> Vec<T> {
    let s = dims.slice_len();
    let mut out = Vec::with_capacity(channels * target_depth * s);
    for c in 0..channels {
        let ch = &src[c * dims.depth * s..(c + 1) * dims.depth * s];
        out.extend_from_slice(ch);
        let last = &ch[(dims.depth - 1) * s..];
        for _ in dims.depth..target_depth {
            out.extend_from_slice(last);
        }
    }
    out
}

fn keep_first<T: Copy>(src: &[T], dims: Dims, channels: usize, depth: usize) -> Vec<T> {
    let s = dims.slice_len();
    let mut out = Vec::with_capacity(channels * depth * s);
    for c in 0..channels {
        let start = c * dims.depth * s;
        out.extend_from_slice(&src[start..start + depth * s]);
    }
    out
}

/// Appends copies of the last slice until the volume has `target_depth`
/// slices. The count is returned so padded slices can be excluded later.
pub fn pad_slices(volume: &Volume, target_depth: usize) -> Result<(Volume, SlicePadding)> {
    let dims = volume.dims();
    let pad = slice_padding(dims, target_depth)?;
    let data = repeat_last(volume.data(), dims, volume.channels(), target_depth);
    let out = Volume::new(Dims::new(target_depth, dims.height, dims.width), volume.spacing(), volume.channels(), data)?;
    Ok((out, pad))
}

/// Inverse of [`pad_slices`].
pub fn crop_slices(volume: &Volume, pad: &SlicePadding) -> Result<Volume> {
    let dims = volume.dims();
    check_slice_crop(dims, pad)?;
    let data = keep_first(volume.data(), dims, volume.channels(), pad.original_depth);
    Volume::new(Dims::new(pad.original_depth, dims.height, dims.width), volume.spacing(), volume.channels(), data)
}
