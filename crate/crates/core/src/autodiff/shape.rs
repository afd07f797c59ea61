use super::Var;
use crate::element::{cst, Element};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

impl<'t, T: Element> Var<'t, T> {
    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let out = self.value().reshape(shape)?;
        Ok(self.tape.push(out, &[self], |ctx| {
            vec![ctx.needs[0].then(|| ctx.grad.to_vec())]
        }))
    }

    pub fn permute(self, axes: &[usize]) -> Result<Var<'t, T>> {
        let out = self.value().permute(axes)?;
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        let out_shape = out.shape().to_vec();
        Ok(self.tape.push(out, &[self], move |ctx| {
            vec![ctx.needs[0].then(|| {
                Tensor::from_parts(out_shape.clone(), ctx.grad.to_vec())
                    .permute(&inverse)
                    .expect("inverse permutation")
                    .into_vec()
            })]
        }))
    }

    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let out = x.narrow(axis, start, len)?;
        let shape = x.shape().to_vec();
        Ok(self.tape.push(out, &[self], move |ctx| {
            vec![ctx.needs[0].then(|| {
                let outer: usize = shape[..axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let ext = shape[axis];
                let mut dx = vec![T::zero(); outer * ext * inner];
                for o in 0..outer {
                    let dst = (o * ext + start) * inner;
                    dx[dst..dst + len * inner]
                        .copy_from_slice(&ctx.grad[o * len * inner..(o + 1) * len * inner]);
                }
                dx
            })]
        }))
    }

    pub fn flip(self, axis: usize) -> Result<Var<'t, T>> {
        let out = self.value().flip(axis)?;
        let shape = out.shape().to_vec();
        Ok(self.tape.push(out, &[self], move |ctx| {
            vec![ctx.needs[0].then(|| {
                Tensor::from_parts(shape.clone(), ctx.grad.to_vec())
                    .flip(axis)
                    .expect("same axis")
                    .into_vec()
            })]
        }))
    }

    /// Concatenation along `axis`.
    pub fn concat(parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Validation("concat of zero variables".into()))?;
        let values: Vec<Tensor<T>> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor<T>> = values.iter().collect();
        let out = Tensor::concat(&refs, axis)?;
        let out_shape = out.shape().to_vec();
        let extents: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        Ok(first.tape.push(out, parts, move |ctx| {
            let g = Tensor::from_parts(out_shape.clone(), ctx.grad.to_vec());
            let mut start = 0;
            extents
                .iter()
                .zip(&ctx.needs)
                .map(|(&len, &need)| {
                    let piece =
                        need.then(|| g.narrow(axis, start, len).expect("in range").into_vec());
                    start += len;
                    piece
                })
                .collect()
        }))
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean_axis(self, axis: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        if axis >= x.rank() {
            return Err(Error::Validation(format!(
                "mean_axis {axis} on rank {}",
                x.rank()
            )));
        }
        let shape = x.shape().to_vec();
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let ext = shape[axis];
        let inv = T::one() / cst::<T>(ext.max(1) as f64);
        let mut out = vec![T::zero(); outer * inner];
        let xd = x.data();
        for o in 0..outer {
            for e in 0..ext {
                let src = &xd[(o * ext + e) * inner..(o * ext + e + 1) * inner];
                for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        Ok(self
            .tape
            .push(Tensor::from_parts(out_shape, out), &[self], move |ctx| {
                vec![ctx.needs[0].then(|| {
                    let mut dx = Vec::with_capacity(outer * ext * inner);
                    for o in 0..outer {
                        let g = &ctx.grad[o * inner..(o + 1) * inner];
                        for _ in 0..ext {
                            dx.extend(g.iter().map(|&v| v * inv));
                        }
                    }
                    dx
                })]
            }))
    }
}
