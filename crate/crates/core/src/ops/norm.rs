use crate::element::{cst, Element};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub(crate) struct LayerNormStats<T> {
    pub mean: Vec<T>,
    pub rstd: Vec<T>,
}

fn check_affine<T: Element>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<usize> {
    let c = *x
        .shape()
        .last()
        .ok_or_else(|| Error::dim("layer_norm", x.shape(), gamma.shape()))?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::dim("layer_norm", x.shape(), gamma.shape()));
    }
    Ok(c)
}

pub(crate) fn layer_norm_forward<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, LayerNormStats<T>)> {
    if eps <= T::zero() {
        return Err(Error::Domain(format!(
            "layer_norm eps must be > 0, got {eps}"
        )));
    }
    let c = check_affine(x, gamma, beta)?;
    let rows = x.numel() / c.max(1);
    let inv_c = T::one() / cst::<T>(c as f64);
    let (gd, bd) = (gamma.data(), beta.data());
    let mut out = Vec::with_capacity(x.numel());
    let mut mean = Vec::with_capacity(rows);
    let mut rstd = Vec::with_capacity(rows);
    for row in x.data().chunks(c) {
        let mu = row.iter().copied().sum::<T>() * inv_c;
        let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() * inv_c;
        let r = T::one() / (var + eps).sqrt();
        out.extend(
            row.iter()
                .enumerate()
                .map(|(i, &v)| (v - mu) * r * gd[i] + bd[i]),
        );
        mean.push(mu);
        rstd.push(r);
    }
    Ok((
        Tensor::from_parts(x.shape().to_vec(), out),
        LayerNormStats { mean, rstd },
    ))
}

/// Normalizes the last axis to zero mean and unit variance, then applies
/// `gamma * x̂ + beta`.
pub fn layer_norm<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    Ok(layer_norm_forward(x, gamma, beta, eps)?.0)
}

/// `(dx, dgamma, dbeta)` for [`layer_norm`].
pub(crate) fn layer_norm_backward<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    stats: &LayerNormStats<T>,
    grad: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let c = gamma.numel();
    let inv_c = T::one() / cst::<T>(c as f64);
    let gd = gamma.data();
    let mut dx = Vec::with_capacity(x.numel());
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    let mut xhat = vec![T::zero(); c];
    for (r, (row, grow)) in x.data().chunks(c).zip(grad.chunks(c)).enumerate() {
        let (mu, rs) = (stats.mean[r], stats.rstd[r]);
        let mut sum_d = T::zero();
        let mut sum_dx = T::zero();
        for i in 0..c {
            xhat[i] = (row[i] - mu) * rs;
            let d = grow[i] * gd[i];
            sum_d += d;
            sum_dx += d * xhat[i];
            dgamma[i] += grow[i] * xhat[i];
            dbeta[i] += grow[i];
        }
        let (mean_d, mean_dx) = (sum_d * inv_c, sum_dx * inv_c);
        dx.extend((0..c).map(|i| rs * (grow[i] * gd[i] - mean_d - xhat[i] * mean_dx)));
    }
    (dx, dgamma, dbeta)
}

/// Softmax along the last axis.
pub fn softmax_last<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let c = *x
        .shape()
        .last()
        .ok_or_else(|| Error::Validation("softmax of a rank-0 tensor".into()))?;
    let mut out = Vec::with_capacity(x.numel());
    for row in x.data().chunks(c.max(1)) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let start = out.len();
        out.extend(row.iter().map(|&v| (v - m).exp()));
        let s: T = out[start..].iter().copied().sum();
        out[start..].iter_mut().for_each(|v| *v /= s);
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

pub(crate) fn softmax_backward<T: Element>(y: &[T], grad: &[T], c: usize) -> Vec<T> {
    let mut dx = Vec::with_capacity(y.len());
    for (yr, gr) in y.chunks(c).zip(grad.chunks(c)) {
        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        dx.extend(yr.iter().zip(gr).map(|(&a, &b)| a * (b - dot)));
    }
    dx
}
