use serde::{Deserialize, Serialize};

use super::Mode;
use crate::tensor::{split_axis, Float, Result, Tensor, TensorError};

pub(crate) fn max_pool_forward<T: Float>(
    x: &Tensor<T>,
    window: &[usize],
    stride: &[usize],
) -> Result<(Tensor<T>, Vec<usize>)> {
    const OP: &str = "max_pool";
    let shape = x.shape();
    if shape.len() != 4 && shape.len() != 5 {
        return Err(TensorError::shape(OP, format!("input must have rank 4 or 5, got {shape:?}")));
    }
    let rank = shape.len() - 2;
    if window.len() != rank || stride.len() != rank {
        return Err(TensorError::shape(OP, format!("window/stride need {rank} components")));
    }
    let mut in3 = [1usize; 3];
    let mut win3 = [1usize; 3];
    let mut st3 = [1usize; 3];
    in3[3 - rank..].copy_from_slice(&shape[2..]);
    win3[3 - rank..].copy_from_slice(window);
    st3[3 - rank..].copy_from_slice(stride);
    let mut out3 = [1usize; 3];
    for a in 0..3 {
        if st3[a] == 0 {
            return Err(TensorError::invalid(OP, "stride components must be >= 1"));
        }
        if win3[a] == 0 || win3[a] > in3[a] {
            return Err(TensorError::shape(
                OP,
                format!("window {:?} larger than input {:?}", window, &shape[2..]),
            ));
        }
        out3[a] = (in3[a] - win3[a]) / st3[a] + 1;
    }
    let planes = shape[0] * shape[1];
    let in_len: usize = in3.iter().product();
    let out_len: usize = out3.iter().product();
    let src = x.data();
    let mut data = Vec::with_capacity(planes * out_len);
    let mut argmax = Vec::with_capacity(planes * out_len);
    for p in 0..planes {
        let base = p * in_len;
        for oz in 0..out3[0] {
            for oy in 0..out3[1] {
                for ox in 0..out3[2] {
                    let mut best_i = usize::MAX;
                    let mut best = T::neg_infinity();
                    for dz in 0..win3[0] {
                        let iz = oz * st3[0] + dz;
                        for dy in 0..win3[1] {
                            let iy = oy * st3[1] + dy;
                            let row = base + (iz * in3[1] + iy) * in3[2];
                            for dx in 0..win3[2] {
                                let i = row + ox * st3[2] + dx;
                                if best_i == usize::MAX || src[i] > best {
                                    best = src[i];
                                    best_i = i;
                                }
                            }
                        }
                    }
                    data.push(best);
                    argmax.push(best_i);
                }
            }
        }
    }
    let mut out_shape = shape[..2].to_vec();
    out_shape.extend_from_slice(&out3[3 - rank..]);
    Ok((Tensor::new(out_shape, data)?, argmax))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNormConfig {
    pub momentum: f64,
    pub epsilon: f64,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        BatchNormConfig { momentum: 0.1, epsilon: 1e-5 }
    }
}

/// Running mean/variance of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Float> BatchNormStats<T> {
    pub fn new(channels: usize) -> Self {
        BatchNormStats { mean: vec![T::zero(); channels], var: vec![T::one(); channels] }
    }
}

pub(crate) struct BatchNormOut<T> {
    pub value: Tensor<T>,
    pub x_hat: Vec<T>,
    pub inv_std: Vec<T>,
}

pub(crate) fn batch_norm_forward<T: Float>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    stats: &mut BatchNormStats<T>,
    mode: Mode,
    config: BatchNormConfig,
) -> Result<BatchNormOut<T>> {
    const OP: &str = "batch_norm";
    let shape = x.shape();
    if shape.len() < 2 {
        return Err(TensorError::shape(OP, format!("input needs a channel axis, got {shape:?}")));
    }
    let c = shape[1];
    for (name, len) in [
        ("gamma", gamma.numel()),
        ("beta", beta.numel()),
        ("running mean", stats.mean.len()),
        ("running var", stats.var.len()),
    ] {
        if len != c {
            return Err(TensorError::shape(OP, format!("{name} has {len} entries, input has C={c}")));
        }
    }
    let (n, _, s) = split_axis(shape, 1);
    let m = n * s;
    let eps = T::from_f64_lossy(config.epsilon);
    let src = x.data();
    let (mean, var) = match mode {
        Mode::Train => {
            let mf = T::from_usize(m).unwrap();
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ch in 0..c {
                let mut acc = T::zero();
                for b in 0..n {
                    let off = (b * c + ch) * s;
                    acc = src[off..off + s].iter().fold(acc, |a, &v| a + v);
                }
                let mu = acc / mf;
                let mut sq = T::zero();
                for b in 0..n {
                    let off = (b * c + ch) * s;
                    sq = src[off..off + s].iter().fold(sq, |a, &v| a + (v - mu) * (v - mu));
                }
                mean[ch] = mu;
                var[ch] = sq / mf;
            }
            let mom = T::from_f64_lossy(config.momentum);
            let unbias = if m > 1 { mf / T::from_usize(m - 1).unwrap() } else { T::one() };
            for ch in 0..c {
                stats.mean[ch] = (T::one() - mom) * stats.mean[ch] + mom * mean[ch];
                stats.var[ch] = (T::one() - mom) * stats.var[ch] + mom * var[ch] * unbias;
            }
            (mean, var)
        }
        Mode::Eval => (stats.mean.clone(), stats.var.clone()),
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut x_hat = vec![T::zero(); src.len()];
    let mut data = vec![T::zero(); src.len()];
    let (g, bt) = (gamma.data(), beta.data());
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * s;
            for i in off..off + s {
                let h = (src[i] - mean[ch]) * inv_std[ch];
                x_hat[i] = h;
                data[i] = g[ch] * h + bt[ch];
            }
        }
    }
    Ok(BatchNormOut { value: Tensor::new(shape.to_vec(), data)?, x_hat, inv_std })
}

pub(crate) struct BatchNormGrads<T> {
    pub x: Vec<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

pub(crate) fn batch_norm_backward<T: Float>(
    shape: &[usize],
    gamma: &[T],
    x_hat: &[T],
    inv_std: &[T],
    train: bool,
    gout: &[T],
) -> BatchNormGrads<T> {
    let (n, c, s) = split_axis(shape, 1);
    let mf = T::from_usize(n * s).unwrap();
    let mut gx = vec![T::zero(); gout.len()];
    let mut gg = vec![T::zero(); c];
    let mut gb = vec![T::zero(); c];
    for ch in 0..c {
        let mut sum_g = T::zero();
        let mut sum_gh = T::zero();
        for b in 0..n {
            let off = (b * c + ch) * s;
            for i in off..off + s {
                sum_g = sum_g + gout[i];
                sum_gh = sum_gh + gout[i] * x_hat[i];
            }
        }
        gg[ch] = sum_gh;
        gb[ch] = sum_g;
        let k = gamma[ch] * inv_std[ch];
        for b in 0..n {
            let off = (b * c + ch) * s;
            for i in off..off + s {
                gx[i] = if train {
                    k * (gout[i] - sum_g / mf - x_hat[i] * sum_gh / mf)
                } else {
                    k * gout[i]
                };
            }
        }
    }
    BatchNormGrads { x: gx, gamma: gg, beta: gb }
}

fn slope_index(slope_len: usize, shape: &[usize]) -> Result<impl Fn(usize) -> usize> {
    let channels = if shape.len() > 1 { shape[1] } else { 1 };
    if slope_len != 1 && slope_len != channels {
        return Err(TensorError::shape(
            "prelu",
            format!("slope has {slope_len} entries; expected 1 or C={channels}"),
        ));
    }
    let inner: usize = if shape.len() > 2 { shape[2..].iter().product() } else { 1 };
    Ok(move |i: usize| if slope_len == 1 { 0 } else { (i / inner) % channels })
}

pub(crate) fn prelu_forward<T: Float>(x: &Tensor<T>, slope: &Tensor<T>) -> Result<Tensor<T>> {
    let idx = slope_index(slope.numel(), x.shape())?;
    let a = slope.data();
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| if v > T::zero() { v } else { a[idx(i)] * v })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

pub(crate) fn prelu_backward<T: Float>(x: &Tensor<T>, slope: &Tensor<T>, gout: &[T]) -> (Vec<T>, Vec<T>) {
    let idx = slope_index(slope.numel(), x.shape()).expect("validated in forward");
    let a = slope.data();
    let mut gx = vec![T::zero(); gout.len()];
    let mut gs = vec![T::zero(); a.len()];
    for (i, (&v, &g)) in x.data().iter().zip(gout).enumerate() {
        if v > T::zero() {
            gx[i] = g;
        } else {
            let k = idx(i);
            gx[i] = a[k] * g;
            gs[k] = gs[k] + v * g;
        }
    }
    (gx, gs)
}

pub(crate) fn softmax_forward<T: Float>(x: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, len, inner) = split_axis(x.shape(), axis);
    let src = x.data();
    let mut data = vec![T::zero(); src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut mx = T::neg_infinity();
            for c in 0..len {
                mx = mx.max(src[base + c * inner]);
            }
            let mut z = T::zero();
            for c in 0..len {
                let e = (src[base + c * inner] - mx).exp();
                data[base + c * inner] = e;
                z = z + e;
            }
            for c in 0..len {
                data[base + c * inner] = data[base + c * inner] / z;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

pub(crate) fn softmax_backward<T: Float>(y: &Tensor<T>, gout: &[T], axis: usize) -> Vec<T> {
    let (outer, len, inner) = split_axis(y.shape(), axis);
    let yd = y.data();
    let mut gx = vec![T::zero(); yd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut dot = T::zero();
            for c in 0..len {
                dot = dot + gout[base + c * inner] * yd[base + c * inner];
            }
            for c in 0..len {
                let j = base + c * inner;
                gx[j] = yd[j] * (gout[j] - dot);
            }
        }
    }
    gx
}

pub(crate) fn concat_forward<T: Float>(a: &Tensor<T>, b: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    let compatible = sa.len() == sb.len()
        && axis < sa.len()
        && sa.iter().zip(sb).enumerate().all(|(i, (x, y))| i == axis || x == y);
    if !compatible {
        return Err(TensorError::shape(
            "concat",
            format!("cannot concatenate {sa:?} and {sb:?} along axis {axis}"),
        ));
    }
    let (outer, _, inner) = split_axis(sa, axis);
    let la = sa[axis] * inner;
    let lb = sb[axis] * inner;
    let mut data = Vec::with_capacity(a.numel() + b.numel());
    for o in 0..outer {
        data.extend_from_slice(&a.data()[o * la..(o + 1) * la]);
        data.extend_from_slice(&b.data()[o * lb..(o + 1) * lb]);
    }
    let mut shape = sa.to_vec();
    shape[axis] += sb[axis];
    Tensor::new(shape, data)
}

pub(crate) fn slice_forward<T: Float>(x: &Tensor<T>, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
    let shape = x.shape();
    if axis >= shape.len() || len == 0 || start + len > shape[axis] {
        return Err(TensorError::shape(
            "slice",
            format!("range {start}..{} out of bounds for axis {axis} of {shape:?}", start + len),
        ));
    }
    let (outer, full, inner) = split_axis(shape, axis);
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let src = (o * full + start) * inner;
        data.extend_from_slice(&x.data()[src..src + len * inner]);
    }
    let mut out_shape = shape.to_vec();
    out_shape[axis] = len;
    Tensor::new(out_shape, data)
}
