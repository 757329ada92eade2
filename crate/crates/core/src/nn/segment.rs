use super::{NetSpec, Network, NnError, Result};
use crate::preprocess::{pad_slices, Dims, LabelMask, Volume};
use crate::tensor::Tensor;

/// Where the appended slices of a V-Net input are dropped relative to the
/// argmax. Both orders give the same labels since argmax is per voxel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum CropOrder {
    BeforeArgmax,
    #[default]
    AfterArgmax,
}

/// `[1, C, H, W]` network input holding slice `z` of every channel.
pub fn slice_input(volume: &Volume, z: usize) -> Tensor<f32> {
    let d = volume.dims();
    let mut data = Vec::with_capacity(volume.channels() * d.slice_len());
    for c in 0..volume.channels() {
        data.extend_from_slice(volume.slice(c, z));
    }
    Tensor::new(vec![1, volume.channels(), d.height, d.width], data).expect("slice buffer matches shape")
}

/// `[1, C, D, H, W]` network input holding the whole volume.
pub fn volume_input(volume: &Volume) -> Tensor<f32> {
    let d = volume.dims();
    Tensor::new(vec![1, volume.channels(), d.depth, d.height, d.width], volume.data().to_vec())
        .expect("volume buffer matches shape")
}

fn labels_of(scores: &Tensor<f32>) -> Vec<u8> {
    scores.argmax_axis(1).into_iter().map(|c| c as u8).collect()
}

fn mask(dims: Dims, volume: &Volume, data: Vec<u8>) -> Result<LabelMask> {
    LabelMask::new(dims, volume.spacing(), data).map_err(|e| NnError::Input(e.to_string()))
}

impl Network {
    /// Labels every voxel of a preprocessed volume; see [`Self::segment_with`].
    pub fn segment(&self, volume: &Volume) -> Result<LabelMask> {
        self.segment_with(volume, CropOrder::default())
    }

    /// Labels every voxel of a preprocessed `(water, fat, fat fraction)`
    /// volume. The U-Net runs slice by slice; the V-Net input is padded to
    /// its fixed depth by repeating the last slice and the padding is
    /// dropped again at `order`. The result has the input's dimensions.
    pub fn segment_with(&self, volume: &Volume, order: CropOrder) -> Result<LabelMask> {
        let dims = volume.dims();
        match self.spec() {
            NetSpec::Unet(_) => {
                let mut out = Vec::with_capacity(dims.voxels());
                for z in 0..dims.depth {
                    out.extend(labels_of(&self.predict(&slice_input(volume, z))?));
                }
                mask(dims, volume, out)
            }
            NetSpec::Vnet(spec) => {
                let (padded, pad) =
                    pad_slices(volume, spec.input_depth).map_err(|e| NnError::Input(e.to_string()))?;
                let scores = self.predict(&volume_input(&padded))?;
                let keep = pad.original_depth * dims.slice_len();
                let labels = match order {
                    CropOrder::AfterArgmax => {
                        let mut all = labels_of(&scores);
                        all.truncate(keep);
                        all
                    }
                    CropOrder::BeforeArgmax => {
                        let c = scores.shape()[1];
                        let full = spec.input_depth * dims.slice_len();
                        let mut kept = Vec::with_capacity(c * keep);
                        for k in 0..c {
                            kept.extend_from_slice(&scores.data()[k * full..k * full + keep]);
                        }
                        let shape = vec![1, c, pad.original_depth, dims.height, dims.width];
                        labels_of(&Tensor::new(shape, kept)?)
                    }
                };
                mask(dims, volume, labels)
            }
        }
    }
}
