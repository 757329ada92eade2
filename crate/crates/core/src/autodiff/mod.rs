//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is an append-only tape: every operation pushes a node holding
//! its output value and whatever it needs for the backward pass. Inputs
//! always precede outputs, so the tape is acyclic by construction and
//! [`Graph::backward`] simply walks it in reverse insertion order.

mod conv;
mod loss;
mod ops;

use rand::Rng;

use crate::tensor::{split_axis, Float, Result, Tensor, TensorError};

pub use conv::ConvGeom;
pub use ops::{BatchNormConfig, BatchNormStats};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Train/eval switch for batch norm and dropout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    ConvTranspose { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    MaxPool { x: Var, argmax: Vec<usize> },
    BatchNorm { x: Var, gamma: Var, beta: Var, x_hat: Vec<T>, inv_std: Vec<T>, train: bool },
    Dropout { x: Var, mask: Vec<T> },
    Relu { x: Var },
    Prelu { x: Var, slope: Var },
    Softmax { x: Var, axis: usize },
    Concat { a: Var, b: Var, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Sum { x: Var },
    CrossEntropy { scores: Var, grad: Vec<T> },
    SoftDice { probs: Var, grad: Vec<T> },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv { .. } => "conv",
            Op::ConvTranspose { .. } => "transposed_conv",
            Op::MaxPool { .. } => "max_pool",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Dropout { .. } => "dropout",
            Op::Relu { .. } => "relu",
            Op::Prelu { .. } => "prelu",
            Op::Softmax { .. } => "softmax",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Sum { .. } => "sum",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::SoftDice { .. } => "soft_dice",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match *self {
            Op::Leaf => vec![],
            Op::Conv { x, w, b, .. } | Op::ConvTranspose { x, w, b, .. } => {
                let mut v = vec![x, w];
                v.extend(b);
                v
            }
            Op::BatchNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
            Op::Prelu { x, slope } => vec![x, slope],
            Op::Concat { a, b, .. } | Op::Add { a, b } | Op::Mul { a, b } => vec![a, b],
            Op::MaxPool { x, .. }
            | Op::Dropout { x, .. }
            | Op::Relu { x }
            | Op::Softmax { x, .. }
            | Op::Slice { x, .. }
            | Op::Sum { x } => vec![x],
            Op::CrossEntropy { scores, .. } => vec![scores],
            Op::SoftDice { probs, .. } => vec![probs],
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only differentiation tape. Single owner; not shared across runs.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Adds an input tensor. Gradients are collected for it when
    /// `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last [`backward`](Self::backward) loss w.r.t. a leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// Name of the operation that produced `v` ("leaf" for inputs).
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    pub fn inputs(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    /// Number of nodes that read `v`.
    pub fn consumers(&self, v: Var) -> Vec<Var> {
        (v.0 + 1..self.nodes.len())
            .filter(|&i| self.nodes[i].op.inputs().contains(&v))
            .map(Var)
            .collect()
    }

    /// Cross-correlation with zero padding and per-axis strides.
    ///
    /// `x: [N, C, spatial..]`, `w: [K, C, kernel..]`, `b: [K]`; rank 4 for
    /// 2D and rank 5 for 3D.
    pub fn conv(&mut self, x: Var, w: Var, b: Option<Var>, stride: &[usize], pad: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let geom = conv::conv_geom(&xs, &ws, stride, pad)?;
        let k = ws[0];
        if let Some(b) = b {
            if self.shape(b) != [k] {
                return Err(TensorError::shape("conv", format!("bias shape {:?} != [{k}]", self.shape(b))));
            }
        }
        let out = conv::conv_forward(
            &geom,
            xs[0],
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            k,
        );
        let mut shape = vec![xs[0], k];
        shape.extend(geom.output_spatial());
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Conv { x, w, b, geom }))
    }

    /// Transposed convolution (gradient of [`conv`](Self::conv) w.r.t. its
    /// input), no padding. `w: [C_in, C_out, kernel..]`.
    pub fn conv_transpose(&mut self, x: Var, w: Var, b: Option<Var>, stride: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let geom = conv::conv_transpose_geom(&xs, &ws, stride)?;
        if let Some(b) = b {
            if self.shape(b) != [ws[1]] {
                return Err(TensorError::shape(
                    "transposed_conv",
                    format!("bias shape {:?} != [{}]", self.shape(b), ws[1]),
                ));
            }
        }
        let out = conv::conv_transpose_forward(
            &geom,
            xs[0],
            xs[1],
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let mut shape = vec![xs[0], ws[1]];
        shape.extend(geom.input_spatial());
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::ConvTranspose { x, w, b, geom }))
    }

    /// Max pooling over `[N, C, spatial..]` without padding. Ties route the
    /// gradient to the first element in row-major window order.
    pub fn max_pool(&mut self, x: Var, window: &[usize], stride: &[usize]) -> Result<Var> {
        let (value, argmax) = ops::max_pool_forward(self.value(x), window, stride)?;
        Ok(self.push(value, Op::MaxPool { x, argmax }))
    }

    /// Batch normalization over all non-channel axes.
    ///
    /// Train mode normalizes with batch statistics and updates `stats`;
    /// eval mode uses the running statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut BatchNormStats<T>,
        mode: Mode,
        config: BatchNormConfig,
    ) -> Result<Var> {
        let out = ops::batch_norm_forward(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            stats,
            mode,
            config,
        )?;
        Ok(self.push(
            out.value,
            Op::BatchNorm { x, gamma, beta, x_hat: out.x_hat, inv_std: out.inv_std, train: mode == Mode::Train },
        ))
    }

    /// Inverted dropout: zeroes each element with probability `p` and scales
    /// survivors by `1/(1-p)`. Identity in eval mode.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, mode: Mode, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::invalid("dropout", format!("probability {p} outside [0, 1)")));
        }
        if mode == Mode::Eval || p == 0.0 {
            let n = self.value(x).numel();
            let value = self.value(x).clone();
            return Ok(self.push(value, Op::Dropout { x, mask: vec![T::one(); n] }));
        }
        let scale = T::from_f64_lossy(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(x).numel())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { scale })
            .collect();
        let src = self.value(x);
        let data = src.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(src.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Dropout { x, mask }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(value, Op::Relu { x })
    }

    /// Parametric ReLU; `slope` has one entry or one per channel (axis 1).
    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        let value = ops::prelu_forward(self.value(x), self.value(slope))?;
        Ok(self.push(value, Op::Prelu { x, slope }))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let src = self.value(x);
        if axis >= src.rank() {
            return Err(TensorError::invalid("softmax", format!("axis {axis} out of range for rank {}", src.rank())));
        }
        let value = ops::softmax_forward(src, axis);
        Ok(self.push(value, Op::Softmax { x, axis }))
    }

    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let value = ops::concat_forward(self.value(a), self.value(b), axis)?;
        Ok(self.push(value, Op::Concat { a, b, axis }))
    }

    /// Sub-range `[start, start + len)` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let value = ops::slice_forward(self.value(x), axis, start, len)?;
        Ok(self.push(value, Op::Slice { x, axis, start }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push(value, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push(value, Op::Mul { a, b }))
    }

    /// Sum of all elements as a rank-0 tensor, accumulated left to right.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().fold(T::zero(), |acc, &v| acc + v);
        self.push(Tensor::scalar(s), Op::Sum { x })
    }

    /// Class-weighted mean of `-log softmax(scores)[target]` over all pixels.
    ///
    /// `scores: [N, C, spatial..]`, `target` holds `N * prod(spatial)`
    /// labels. The mean is normalized by the summed weights of the targets.
    pub fn cross_entropy(&mut self, scores: Var, target: &[u8], class_weights: &[T]) -> Result<Var> {
        let (loss, grad) = loss::cross_entropy(self.value(scores), target, class_weights)?;
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { scores, grad }))
    }

    /// Soft dice loss over `probs: [N, C, spatial..]` (softmax already
    /// applied), averaged over `classes`.
    ///
    /// Per class: `1 - (2 sum(p*y) + alpha) / (sum(p) + sum(y) + alpha)`.
    pub fn soft_dice(&mut self, probs: Var, target: &[u8], classes: &[usize], alpha: T) -> Result<Var> {
        let (loss, grad) = loss::soft_dice(self.value(probs), target, classes, alpha)?;
        Ok(self.push(Tensor::scalar(loss), Op::SoftDice { probs, grad }))
    }

    fn zip_same(&self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(TensorError::shape(op, format!("shape {:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    /// Populates gradients of `loss` for every leaf that requires them.
    ///
    /// Nodes are visited in strict reverse insertion order; contributions
    /// to a node are accumulated in the order they are produced, so the
    /// result is bit-reproducible.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = &self.nodes[loss.0].value;
        if root.numel() != 1 {
            return Err(TensorError::NonScalarLoss(root.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(root.shape(), T::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (v, contrib) in self.node_backward(i, &g)? {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn need(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn like(&self, v: Var, data: Vec<T>) -> Result<Tensor<T>> {
        Tensor::new(self.value(v).shape().to_vec(), data)
    }

    fn node_backward(&self, i: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[i];
        let gd = g.data();
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, geom } => {
                let (x, w, b) = (*x, *w, *b);
                let need_b = b.is_some_and(|b| self.need(b));
                let k = self.shape(w)[0];
                let grads = conv::conv_backward(
                    geom,
                    self.shape(x)[0],
                    self.value(x).data(),
                    self.value(w).data(),
                    k,
                    gd,
                    (self.need(x), self.need(w), need_b),
                );
                self.collect_conv(&mut out, x, w, b, grads)?;
            }
            Op::ConvTranspose { x, w, b, geom } => {
                let (x, w, b) = (*x, *w, *b);
                let need_b = b.is_some_and(|b| self.need(b));
                let xs = self.shape(x);
                let grads = conv::conv_transpose_backward(
                    geom,
                    xs[0],
                    xs[1],
                    self.value(x).data(),
                    self.value(w).data(),
                    gd,
                    (self.need(x), self.need(w), need_b),
                );
                self.collect_conv(&mut out, x, w, b, grads)?;
            }
            Op::MaxPool { x, argmax } => {
                let mut gx = vec![T::zero(); self.value(*x).numel()];
                for (&src, &gv) in argmax.iter().zip(gd) {
                    gx[src] = gx[src] + gv;
                }
                out.push((*x, self.like(*x, gx)?));
            }
            Op::BatchNorm { x, gamma, beta, x_hat, inv_std, train } => {
                let grads = ops::batch_norm_backward(
                    self.value(*x).shape(),
                    self.value(*gamma).data(),
                    x_hat,
                    inv_std,
                    *train,
                    gd,
                );
                if self.need(*x) {
                    out.push((*x, self.like(*x, grads.x)?));
                }
                out.push((*gamma, self.like(*gamma, grads.gamma)?));
                out.push((*beta, self.like(*beta, grads.beta)?));
            }
            Op::Dropout { x, mask } => {
                let gx = gd.iter().zip(mask).map(|(&g, &m)| g * m).collect();
                out.push((*x, self.like(*x, gx)?));
            }
            Op::Relu { x } => {
                let xv = self.value(*x).data();
                let gx = gd
                    .iter()
                    .zip(xv)
                    .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                out.push((*x, self.like(*x, gx)?));
            }
            Op::Prelu { x, slope } => {
                let (gx, gs) = ops::prelu_backward(self.value(*x), self.value(*slope), gd);
                if self.need(*x) {
                    out.push((*x, self.like(*x, gx)?));
                }
                out.push((*slope, self.like(*slope, gs)?));
            }
            Op::Softmax { x, axis } => {
                let gx = ops::softmax_backward(&node.value, gd, *axis);
                out.push((*x, self.like(*x, gx)?));
            }
            Op::Concat { a, b, axis } => {
                let (outer, _, inner) = split_axis(node.value.shape(), *axis);
                let la = self.shape(*a)[*axis] * inner;
                let lb = self.shape(*b)[*axis] * inner;
                let mut ga = Vec::with_capacity(outer * la);
                let mut gb = Vec::with_capacity(outer * lb);
                for o in 0..outer {
                    let base = o * (la + lb);
                    ga.extend_from_slice(&gd[base..base + la]);
                    gb.extend_from_slice(&gd[base + la..base + la + lb]);
                }
                out.push((*a, self.like(*a, ga)?));
                out.push((*b, self.like(*b, gb)?));
            }
            Op::Slice { x, axis, start } => {
                let (outer, full, inner) = split_axis(self.shape(*x), *axis);
                let len = node.value.shape()[*axis];
                let mut gx = vec![T::zero(); outer * full * inner];
                for o in 0..outer {
                    let dst = (o * full + start) * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                }
                out.push((*x, self.like(*x, gx)?));
            }
            Op::Add { a, b } => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.need(*a) {
                    out.push((*a, self.like(*a, gd.iter().zip(bv).map(|(&g, &v)| g * v).collect())?));
                }
                if self.need(*b) {
                    out.push((*b, self.like(*b, gd.iter().zip(av).map(|(&g, &v)| g * v).collect())?));
                }
            }
            Op::Sum { x } => {
                let n = self.value(*x).numel();
                out.push((*x, self.like(*x, vec![gd[0]; n])?));
            }
            Op::CrossEntropy { scores: x, grad } | Op::SoftDice { probs: x, grad } => {
                let scale = gd[0];
                out.push((*x, self.like(*x, grad.iter().map(|&v| v * scale).collect())?));
            }
        }
        Ok(out)
    }

    fn collect_conv(
        &self,
        out: &mut Vec<(Var, Tensor<T>)>,
        x: Var,
        w: Var,
        b: Option<Var>,
        grads: conv::ConvGrads<T>,
    ) -> Result<()> {
        if let Some(gx) = grads.x {
            out.push((x, self.like(x, gx)?));
        }
        if let Some(gw) = grads.w {
            out.push((w, self.like(w, gw)?));
        }
        if let (Some(b), Some(gb)) = (b, grads.b) {
            out.push((b, self.like(b, gb)?));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
