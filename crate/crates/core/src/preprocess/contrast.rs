use super::{Channel, Volume};

/// Nearest-rank percentile of the value multiset: the `ceil(q * n)`-th
/// smallest value (1-based). Returns `None` for an empty input.
pub fn nearest_rank_percentile(values: &[f32], q: f64) -> Option<f32> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f32::total_cmp);
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    Some(sorted[rank - 1])
}

/// Clips the brightest one percent of a slice and rescales to `[0, 1]`.
///
/// The clip level `q` is the nearest-rank 99th percentile over all pixels
/// (zeros included); output is `min(v, q) / q`. A slice whose clip level is
/// not positive maps to all zeros.
pub fn contrast_adjust(slice: &[f32]) -> Vec<f32> {
    let q = nearest_rank_percentile(slice, 0.99).unwrap_or(0.0);
    if q <= 0.0 {
        return vec![0.0; slice.len()];
    }
    slice.iter().map(|&v| v.min(q).max(0.0) / q).collect()
}

/// Applies [`contrast_adjust`] to every transverse slice of the water and
/// fat channels. Any further channel (the fat fraction) is left untouched.
pub fn contrast_adjust_volume(volume: &Volume) -> Volume {
    let mut out = volume.clone();
    let signal = [Channel::Water as usize, Channel::Fat as usize];
    for c in signal.into_iter().filter(|&c| c < volume.channels()) {
        for z in 0..volume.dims().depth {
            let adjusted = contrast_adjust(volume.slice(c, z));
            out.slice_mut(c, z).copy_from_slice(&adjusted);
        }
    }
    out
}
