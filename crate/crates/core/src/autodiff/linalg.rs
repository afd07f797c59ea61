use super::Var;
use crate::element::Element;
use crate::error::{Error, Result};
use crate::linalg::{bmm, bmm_dims, gemm, matmul, MatMut, MatRef};
use crate::tensor::Tensor;

impl<'t, T: Element> Var<'t, T> {
    /// `[M, K] @ [K, N]`.
    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        let out = matmul(&a, &b)?;
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        Ok(self.tape.push(out, &[self, other], move |ctx| {
            let (a, b) = (ctx.inputs[0].data(), ctx.inputs[1].data());
            let g = MatRef::new(ctx.grad, m, n);
            let da = ctx.needs[0].then(|| {
                let mut da = vec![T::zero(); m * k];
                gemm(
                    T::one(),
                    g,
                    MatRef::new(b, k, n).t(),
                    T::zero(),
                    MatMut::new(&mut da, m, k),
                );
                da
            });
            let db = ctx.needs[1].then(|| {
                let mut db = vec![T::zero(); k * n];
                gemm(
                    T::one(),
                    MatRef::new(a, m, k).t(),
                    g,
                    T::zero(),
                    MatMut::new(&mut db, k, n),
                );
                db
            });
            vec![da, db]
        }))
    }

    /// Batched `op(self) @ op(other)` over rank-3 operands.
    pub fn bmm(self, other: Var<'t, T>, ta: bool, tb: bool) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        let (batch, m, _, n) = bmm_dims(a.shape(), b.shape(), ta, tb)
            .ok_or_else(|| Error::dim("bmm", a.shape(), b.shape()))?;
        let out = bmm(&a, &b, ta, tb)?;
        Ok(self.tape.push(out, &[self, other], move |ctx| {
            let g = Tensor::from_parts(vec![batch, m, n], ctx.grad.to_vec());
            // d op(a) = g op(b)^T and d op(b) = op(a)^T g, then undo op.
            let da = ctx.needs[0].then(|| {
                let r = if ta {
                    bmm(ctx.inputs[1], &g, tb, true)
                } else {
                    bmm(&g, ctx.inputs[1], false, !tb)
                };
                r.expect("shapes checked in forward").into_vec()
            });
            let db = ctx.needs[1].then(|| {
                let r = if tb {
                    bmm(&g, ctx.inputs[0], true, ta)
                } else {
                    bmm(ctx.inputs[0], &g, !ta, false)
                };
                r.expect("shapes checked in forward").into_vec()
            });
            vec![da, db]
        }))
    }

    /// Affine map over the last axis: `x[..., K] @ w[K, N] (+ bias[N])`.
    pub fn linear(self, w: Var<'t, T>, bias: Option<Var<'t, T>>) -> Result<Var<'t, T>> {
        let x = self.value();
        let wv = w.value();
        let k = *x.shape().last().unwrap_or(&0);
        if x.rank() == 0 || wv.rank() != 2 || wv.shape()[0] != k {
            return Err(Error::dim("linear", x.shape(), wv.shape()));
        }
        let n = wv.shape()[1];
        let rows = x.numel() / k.max(1);
        let mut out = vec![T::zero(); rows * n];
        if let Some(b) = bias {
            let bv = b.value();
            if bv.shape() != [n] {
                return Err(Error::dim("linear bias", bv.shape(), &[n]));
            }
            for row in out.chunks_mut(n) {
                row.copy_from_slice(bv.data());
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        gemm(
            T::one(),
            MatRef::new(x.data(), rows, k),
            MatRef::new(wv.data(), k, n),
            beta,
            MatMut::new(&mut out, rows, n),
        );
        let mut shape = x.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = n;
        let out = Tensor::from_parts(shape, out);
        let parents: Vec<Var<'t, T>> = std::iter::once(self)
            .chain(std::iter::once(w))
            .chain(bias)
            .collect();
        Ok(self.tape.push(out, &parents, move |ctx| {
            let (xd, wd) = (ctx.inputs[0].data(), ctx.inputs[1].data());
            let g = MatRef::new(ctx.grad, rows, n);
            let dx = ctx.needs[0].then(|| {
                let mut dx = vec![T::zero(); rows * k];
                gemm(
                    T::one(),
                    g,
                    MatRef::new(wd, k, n).t(),
                    T::zero(),
                    MatMut::new(&mut dx, rows, k),
                );
                dx
            });
            let dw = ctx.needs[1].then(|| {
                let mut dw = vec![T::zero(); k * n];
                gemm(
                    T::one(),
                    MatRef::new(xd, rows, k).t(),
                    g,
                    T::zero(),
                    MatMut::new(&mut dw, k, n),
                );
                dw
            });
            let mut grads = vec![dx, dw];
            if ctx.inputs.len() == 3 {
                grads.push(ctx.needs[2].then(|| {
                    let mut db = vec![T::zero(); n];
                    for row in ctx.grad.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
                    }
                    db
                }));
            }
            grads
        }))
    }
}
