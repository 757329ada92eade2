//! Strided 2D/3D convolution kernels (im2col + GEMM).
//!
//! 2D problems are lifted to 3D with a unit leading axis, so one code path
//! serves both ranks. Weights follow the cross-correlation convention:
//! `[K, C, k...]` for convolution and `[C_in, C_out, k...]` for the
//! transposed variant.

use crate::tensor::{gemm, Float, MatRef, Result, TensorError};

/// Geometry of one sliding-window pass over a single `C x spatial` image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub spatial_rank: usize,
    pub channels: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub output: [usize; 3],
}

fn lift(op: &'static str, what: &str, v: &[usize], rank: usize, fill: usize) -> Result<[usize; 3]> {
    if v.len() != rank {
        return Err(TensorError::shape(
            op,
            format!("{what} has {} components, expected one per spatial axis ({rank})", v.len()),
        ));
    }
    let mut out = [fill; 3];
    out[3 - rank..].copy_from_slice(v);
    Ok(out)
}

const AXIS_NAMES: [&str; 3] = ["depth", "height", "width"];

fn axis_name(rank: usize, axis3: usize) -> &'static str {
    if rank == 2 {
        AXIS_NAMES[axis3.max(1)]
    } else {
        AXIS_NAMES[axis3]
    }
}

impl ConvGeom {
    pub fn new(
        op: &'static str,
        channels: usize,
        input: &[usize],
        kernel: &[usize],
        stride: &[usize],
        pad: &[usize],
    ) -> Result<Self> {
        let rank = input.len();
        if rank != 2 && rank != 3 {
            return Err(TensorError::shape(op, format!("expected 2 or 3 spatial axes, got {rank}")));
        }
        let input3 = lift(op, "input", input, rank, 1)?;
        let kernel3 = lift(op, "kernel", kernel, rank, 1)?;
        let stride3 = lift(op, "stride", stride, rank, 1)?;
        let pad3 = lift(op, "padding", pad, rank, 0)?;
        let mut output = [1; 3];
        for a in 0..3 {
            if stride3[a] == 0 {
                return Err(TensorError::invalid(
                    op,
                    format!("stride along {} must be >= 1", axis_name(rank, a)),
                ));
            }
            let padded = input3[a] + 2 * pad3[a];
            if kernel3[a] == 0 || kernel3[a] > padded {
                return Err(TensorError::shape(
                    op,
                    format!(
                        "kernel extent {} does not fit padded input extent {} along {}: non-positive output extent",
                        kernel3[a],
                        padded,
                        axis_name(rank, a)
                    ),
                ));
            }
            output[a] = (padded - kernel3[a]) / stride3[a] + 1;
        }
        Ok(ConvGeom {
            spatial_rank: rank,
            channels,
            input: input3,
            kernel: kernel3,
            stride: stride3,
            pad: pad3,
            output,
        })
    }

    pub fn input_len(&self) -> usize {
        self.input.iter().product()
    }

    pub fn output_len(&self) -> usize {
        self.output.iter().product()
    }

    pub fn kernel_len(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Rows of the column matrix: `channels * kernel_len`.
    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel_len()
    }

    pub fn output_spatial(&self) -> Vec<usize> {
        self.output[3 - self.spatial_rank..].to_vec()
    }

    pub fn input_spatial(&self) -> Vec<usize> {
        self.input[3 - self.spatial_rank..].to_vec()
    }

    /// True when im2col is the identity (1x1 kernel, unit stride, no pad).
    pub fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1] && self.pad == [0, 0, 0]
    }

    /// Visits every (column-row, output-row) pair with the matching input row.
    ///
    /// `f(col_row_offset, in_row_offset)` receives the start of a run of
    /// `output[2]` column entries and, when the input row is inside the
    /// image, the start of the input row of `input[2]` values.
    #[inline]
    fn for_each_row(&self, mut f: impl FnMut(usize, Option<usize>, usize)) {
        let [id, ih, iw] = self.input;
        let [kd, kh, kw] = self.kernel;
        let [od, oh, ow] = self.output;
        let p = self.output_len();
        let plane = ih * iw;
        for c in 0..self.channels {
            for kz in 0..kd {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let row = ((c * kd + kz) * kh + ky) * kw + kx;
                        for oz in 0..od {
                            let iz = (oz * self.stride[0] + kz) as isize - self.pad[0] as isize;
                            for oy in 0..oh {
                                let iy = (oy * self.stride[1] + ky) as isize - self.pad[1] as isize;
                                let dst = row * p + (oz * oh + oy) * ow;
                                if iz < 0 || iz >= id as isize || iy < 0 || iy >= ih as isize {
                                    f(dst, None, kx);
                                } else {
                                    let src = c * id * plane + iz as usize * plane + iy as usize * iw;
                                    f(dst, Some(src), kx);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Valid output-column range `[lo, hi)` for kernel column `kx` when the
    /// width stride is one.
    #[inline]
    fn unit_stride_range(&self, kx: usize) -> (usize, usize) {
        let ow = self.output[2] as isize;
        let shift = kx as isize - self.pad[2] as isize; // ix = ox + shift
        let lo = (-shift).clamp(0, ow);
        let hi = (self.input[2] as isize - shift).clamp(lo, ow);
        (lo as usize, hi as usize)
    }

    /// Unfolds `image` (`channels x input_len`) into `cols`
    /// (`col_rows x output_len`).
    pub fn im2col<T: Float>(&self, image: &[T], cols: &mut [T]) {
        debug_assert_eq!(image.len(), self.channels * self.input_len());
        debug_assert_eq!(cols.len(), self.col_rows() * self.output_len());
        let ow = self.output[2];
        let iw = self.input[2];
        let sx = self.stride[2];
        let px = self.pad[2] as isize;
        self.for_each_row(|dst, src, kx| {
            let out = &mut cols[dst..dst + ow];
            match src {
                None => out.fill(T::zero()),
                Some(src) => {
                    let row = &image[src..src + iw];
                    if sx == 1 {
                        let (lo, hi) = self.unit_stride_range(kx);
                        let off = (lo as isize + kx as isize - px) as usize;
                        out[..lo].fill(T::zero());
                        out[lo..hi].copy_from_slice(&row[off..off + (hi - lo)]);
                        out[hi..].fill(T::zero());
                    } else {
                        for (ox, o) in out.iter_mut().enumerate() {
                            let ix = (ox * sx + kx) as isize - px;
                            *o = if ix >= 0 && (ix as usize) < iw { row[ix as usize] } else { T::zero() };
                        }
                    }
                }
            }
        });
    }

    /// Folds `cols` back onto `image`, accumulating overlapping entries.
    pub fn col2im_add<T: Float>(&self, cols: &[T], image: &mut [T]) {
        debug_assert_eq!(image.len(), self.channels * self.input_len());
        debug_assert_eq!(cols.len(), self.col_rows() * self.output_len());
        let ow = self.output[2];
        let iw = self.input[2];
        let sx = self.stride[2];
        let px = self.pad[2] as isize;
        self.for_each_row(|dst, src, kx| {
            let Some(src) = src else { return };
            let col = &cols[dst..dst + ow];
            let row = &mut image[src..src + iw];
            if sx == 1 {
                let (lo, hi) = self.unit_stride_range(kx);
                let off = (lo as isize + kx as isize - px) as usize;
                for (r, &c) in row[off..off + (hi - lo)].iter_mut().zip(&col[lo..hi]) {
                    *r = *r + c;
                }
            } else {
                for (ox, &c) in col.iter().enumerate() {
                    let ix = (ox * sx + kx) as isize - px;
                    if ix >= 0 && (ix as usize) < iw {
                        row[ix as usize] = row[ix as usize] + c;
                    }
                }
            }
        });
    }
}

/// Shapes and geometry of a convolution call.
pub(crate) fn conv_geom(
    x_shape: &[usize],
    w_shape: &[usize],
    stride: &[usize],
    pad: &[usize],
) -> Result<ConvGeom> {
    const OP: &str = "conv";
    check_ranks(OP, x_shape, w_shape)?;
    if x_shape[1] != w_shape[1] {
        return Err(TensorError::shape(
            OP,
            format!(
                "channel dimension C mismatch: input has C={} but weight expects C={}",
                x_shape[1], w_shape[1]
            ),
        ));
    }
    ConvGeom::new(OP, x_shape[1], &x_shape[2..], &w_shape[2..], stride, pad)
}

/// Geometry of the forward convolution whose data-gradient a transposed
/// convolution computes: it maps the transposed output back onto its input.
pub(crate) fn conv_transpose_geom(x_shape: &[usize], w_shape: &[usize], stride: &[usize]) -> Result<ConvGeom> {
    const OP: &str = "transposed_conv";
    check_ranks(OP, x_shape, w_shape)?;
    if x_shape[1] != w_shape[0] {
        return Err(TensorError::shape(
            OP,
            format!(
                "channel dimension C mismatch: input has C={} but weight expects C_in={}",
                x_shape[1], w_shape[0]
            ),
        ));
    }
    let rank = x_shape.len() - 2;
    if stride.len() != rank {
        return Err(TensorError::shape(OP, format!("stride needs {rank} components, got {}", stride.len())));
    }
    if let Some(a) = stride.iter().position(|&s| s == 0) {
        return Err(TensorError::invalid(OP, format!("stride along axis {a} must be >= 1")));
    }
    let out: Vec<usize> = (0..rank)
        .map(|a| (x_shape[2 + a] - 1) * stride[a] + w_shape[2 + a])
        .collect();
    let geom = ConvGeom::new(OP, w_shape[1], &out, &w_shape[2..], stride, &vec![0; rank])?;
    debug_assert_eq!(geom.output_spatial(), x_shape[2..].to_vec());
    Ok(geom)
}

fn check_ranks(op: &'static str, x_shape: &[usize], w_shape: &[usize]) -> Result<()> {
    if x_shape.len() != 4 && x_shape.len() != 5 {
        return Err(TensorError::shape(op, format!("input must have rank 4 or 5, got shape {x_shape:?}")));
    }
    if w_shape.len() != x_shape.len() {
        return Err(TensorError::shape(
            op,
            format!("weight rank {} does not match input rank {}", w_shape.len(), x_shape.len()),
        ));
    }
    Ok(())
}

pub(crate) struct ConvGrads<T> {
    pub x: Option<Vec<T>>,
    pub w: Option<Vec<T>>,
    pub b: Option<Vec<T>>,
}

/// `out[n] = W * im2col(x[n]) + b`.
pub(crate) fn conv_forward<T: Float>(
    geom: &ConvGeom,
    batch: usize,
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    out_channels: usize,
) -> Vec<T> {
    let rows = geom.col_rows();
    let p = geom.output_len();
    let in_len = geom.channels * geom.input_len();
    let wmat = MatRef::row_major(w, out_channels, rows);
    let mut out = vec![T::zero(); batch * out_channels * p];
    let mut cols = if geom.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * p] };
    for n in 0..batch {
        let xn = &x[n * in_len..(n + 1) * in_len];
        let on = &mut out[n * out_channels * p..(n + 1) * out_channels * p];
        let colmat = if geom.is_pointwise() {
            MatRef::row_major(xn, rows, p)
        } else {
            geom.im2col(xn, &mut cols);
            MatRef::row_major(&cols, rows, p)
        };
        gemm(T::one(), wmat, colmat, T::zero(), on);
        if let Some(b) = bias {
            for (k, chunk) in on.chunks_exact_mut(p).enumerate() {
                for v in chunk {
                    *v = *v + b[k];
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward<T: Float>(
    geom: &ConvGeom,
    batch: usize,
    x: &[T],
    w: &[T],
    out_channels: usize,
    gout: &[T],
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let rows = geom.col_rows();
    let p = geom.output_len();
    let in_len = geom.channels * geom.input_len();
    let wmat = MatRef::row_major(w, out_channels, rows);
    let mut gx = need.0.then(|| vec![T::zero(); x.len()]);
    let mut gw = need.1.then(|| vec![T::zero(); w.len()]);
    let gb = need.2.then(|| bias_grad(gout, batch, out_channels, p));
    let pointwise = geom.is_pointwise();
    let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); rows * p] };
    for n in 0..batch {
        let gn = MatRef::row_major(&gout[n * out_channels * p..(n + 1) * out_channels * p], out_channels, p);
        let xn = &x[n * in_len..(n + 1) * in_len];
        if let Some(gw) = gw.as_mut() {
            let colmat = if pointwise {
                MatRef::row_major(xn, rows, p)
            } else {
                geom.im2col(xn, &mut cols);
                MatRef::row_major(&cols, rows, p)
            };
            gemm(T::one(), gn, colmat.t(), T::one(), gw);
        }
        if let Some(gx) = gx.as_mut() {
            let gxn = &mut gx[n * in_len..(n + 1) * in_len];
            if pointwise {
                gemm(T::one(), wmat.t(), gn, T::zero(), gxn);
            } else {
                gemm(T::one(), wmat.t(), gn, T::zero(), &mut cols);
                geom.col2im_add(&cols, gxn);
            }
        }
    }
    ConvGrads { x: gx, w: gw, b: gb }
}

/// Transposed convolution: `out[n] = col2im(W^T * x[n]) + b`.
pub(crate) fn conv_transpose_forward<T: Float>(
    geom: &ConvGeom,
    batch: usize,
    in_channels: usize,
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let rows = geom.col_rows();
    let p_in = geom.output_len();
    let out_len = geom.channels * geom.input_len();
    let wmat = MatRef::row_major(w, in_channels, rows);
    let mut out = vec![T::zero(); batch * out_len];
    let mut cols = vec![T::zero(); rows * p_in];
    for n in 0..batch {
        let xn = MatRef::row_major(&x[n * in_channels * p_in..(n + 1) * in_channels * p_in], in_channels, p_in);
        let on = &mut out[n * out_len..(n + 1) * out_len];
        gemm(T::one(), wmat.t(), xn, T::zero(), &mut cols);
        geom.col2im_add(&cols, on);
        if let Some(b) = bias {
            for (k, chunk) in on.chunks_exact_mut(geom.input_len()).enumerate() {
                for v in chunk {
                    *v = *v + b[k];
                }
            }
        }
    }
    out
}

pub(crate) fn conv_transpose_backward<T: Float>(
    geom: &ConvGeom,
    batch: usize,
    in_channels: usize,
    x: &[T],
    w: &[T],
    gout: &[T],
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let rows = geom.col_rows();
    let p_in = geom.output_len();
    let out_len = geom.channels * geom.input_len();
    let wmat = MatRef::row_major(w, in_channels, rows);
    let mut gx = need.0.then(|| vec![T::zero(); x.len()]);
    let mut gw = need.1.then(|| vec![T::zero(); w.len()]);
    let gb = need.2.then(|| bias_grad(gout, batch, geom.channels, geom.input_len()));
    let mut cols = vec![T::zero(); rows * p_in];
    for n in 0..batch {
        if gx.is_none() && gw.is_none() {
            break;
        }
        geom.im2col(&gout[n * out_len..(n + 1) * out_len], &mut cols);
        let gcols = MatRef::row_major(&cols, rows, p_in);
        if let Some(gx) = gx.as_mut() {
            let gxn = &mut gx[n * in_channels * p_in..(n + 1) * in_channels * p_in];
            gemm(T::one(), wmat, gcols, T::zero(), gxn);
        }
        if let Some(gw) = gw.as_mut() {
            let xn = MatRef::row_major(&x[n * in_channels * p_in..(n + 1) * in_channels * p_in], in_channels, p_in);
            gemm(T::one(), xn, gcols.t(), T::one(), gw);
        }
    }
    ConvGrads { x: gx, w: gw, b: gb }
}

fn bias_grad<T: Float>(gout: &[T], batch: usize, channels: usize, p: usize) -> Vec<T> {
    let mut gb = vec![T::zero(); channels];
    for n in 0..batch {
        for (k, g) in gb.iter_mut().enumerate() {
            let start = (n * channels + k) * p;
            *g = gout[start..start + p].iter().fold(*g, |acc, &v| acc + v);
        }
    }
    gb
}
