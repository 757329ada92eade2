use crate::tensor::{split_axis, Float, Result, Tensor, TensorError};

fn check_target<T: Float>(op: &'static str, x: &Tensor<T>, target: &[u8]) -> Result<(usize, usize, usize)> {
    if x.rank() < 2 {
        return Err(TensorError::shape(op, format!("expected [N, C, spatial..], got {:?}", x.shape())));
    }
    let (n, c, s) = split_axis(x.shape(), 1);
    if target.len() != n * s {
        return Err(TensorError::shape(
            op,
            format!("target has {} labels, scores cover {} pixels", target.len(), n * s),
        ));
    }
    if let Some(&bad) = target.iter().find(|&&t| t as usize >= c) {
        return Err(TensorError::invalid(op, format!("label {bad} outside {{0..{}}}", c - 1)));
    }
    Ok((n, c, s))
}

/// Returns the loss and its gradient w.r.t. the scores.
pub(crate) fn cross_entropy<T: Float>(scores: &Tensor<T>, target: &[u8], weights: &[T]) -> Result<(T, Vec<T>)> {
    const OP: &str = "cross_entropy";
    let (n, c, s) = check_target(OP, scores, target)?;
    if weights.len() != c {
        return Err(TensorError::shape(OP, format!("{} class weights for {c} classes", weights.len())));
    }
    let x = scores.data();
    let mut grad = vec![T::zero(); x.len()];
    let mut total = T::zero();
    let mut wsum = T::zero();
    for b in 0..n {
        for i in 0..s {
            let base = b * c * s + i;
            let mut mx = T::neg_infinity();
            for k in 0..c {
                mx = mx.max(x[base + k * s]);
            }
            let mut z = T::zero();
            for k in 0..c {
                z = z + (x[base + k * s] - mx).exp();
            }
            let lse = mx + z.ln();
            let y = target[b * s + i] as usize;
            let w = weights[y];
            total = total + w * (lse - x[base + y * s]);
            wsum = wsum + w;
            for k in 0..c {
                let p = (x[base + k * s] - lse).exp();
                let ind = if k == y { T::one() } else { T::zero() };
                grad[base + k * s] = w * (p - ind);
            }
        }
    }
    if wsum <= T::zero() {
        return Err(TensorError::invalid(OP, "class weights of all targets sum to zero"));
    }
    for g in &mut grad {
        *g = *g / wsum;
    }
    Ok((total / wsum, grad))
}

pub(crate) fn soft_dice<T: Float>(probs: &Tensor<T>, target: &[u8], classes: &[usize], alpha: T) -> Result<(T, Vec<T>)> {
    const OP: &str = "soft_dice";
    if !(alpha > T::zero()) {
        return Err(TensorError::invalid(OP, format!("alpha must be > 0, got {alpha}")));
    }
    let (n, c, s) = check_target(OP, probs, target)?;
    if classes.is_empty() {
        return Err(TensorError::invalid(OP, "no classes selected"));
    }
    if let Some(&bad) = classes.iter().find(|&&k| k >= c) {
        return Err(TensorError::invalid(OP, format!("class {bad} outside {{0..{}}}", c - 1)));
    }
    let p = probs.data();
    let nc = T::from_usize(classes.len()).unwrap();
    let two = T::one() + T::one();
    let mut grad = vec![T::zero(); p.len()];
    let mut loss = T::zero();
    for &k in classes {
        let (mut inter, mut psum, mut gsum) = (T::zero(), T::zero(), T::zero());
        for b in 0..n {
            for i in 0..s {
                let v = p[(b * c + k) * s + i];
                psum = psum + v;
                if target[b * s + i] as usize == k {
                    inter = inter + v;
                    gsum = gsum + T::one();
                }
            }
        }
        let num = two * inter + alpha;
        let den = psum + gsum + alpha;
        loss = loss + (T::one() - num / den);
        let den2 = den * den;
        for b in 0..n {
            for i in 0..s {
                let y = if target[b * s + i] as usize == k { T::one() } else { T::zero() };
                grad[(b * c + k) * s + i] = -(two * y * den - num) / den2 / nc;
            }
        }
    }
    Ok((loss / nc, grad))
}
