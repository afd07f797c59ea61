//! Batched non-causal kernels recorded on the tape.
//!
//! Shapes follow [`crate::ssd::kernel::ssd_scan`]: `x [Bt,L,Hd,P]`,
//! `b, c [Bt,L,N]`, `m [Bt,L,Hd]`.

use crate::autodiff::Var;
use crate::element::Element;
use crate::error::Result;
use crate::linalg::{gemm, MatMut, MatRef};
use crate::parallel::par_map;
use crate::ssd::kernel::{batch_dims, BatchDims};
use crate::tensor::Tensor;

/// `X·m` for one batch element and head, gathered as a dense `[L, P]`.
fn weighted_rows<T: Element>(d: &BatchDims, bi: usize, h: usize, x: &[T], m: &[T]) -> Vec<T> {
    let BatchDims { l, hd, p, .. } = *d;
    let mut out = Vec::with_capacity(l * p);
    for t in 0..l {
        let row = bi * l + t;
        let w = m[row * hd + h];
        out.extend(x[(row * hd + h) * p..][..p].iter().map(|&v| v * w));
    }
    out
}

/// Head-strided `[L, P]` view of `x` for batch `bi`, head `h`.
fn head_view<'a, T>(d: &BatchDims, bi: usize, h: usize, x: &'a [T]) -> MatRef<'a, T> {
    let BatchDims { l, hd, p, .. } = *d;
    MatRef::strided(&x[(bi * l * hd + h) * p..], l, p, hd * p, 1)
}

/// `Y = C (Bᵀ (X·m))` per batch element and head, without any `L × L`
/// intermediate.
pub fn ncssd_fused<'t, T: Element>(
    x: Var<'t, T>,
    b: Var<'t, T>,
    c: Var<'t, T>,
    m: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let (xv, bv, cv, mv) = (x.value(), b.value(), c.value(), m.value());
    let d = batch_dims(
        xv.shape(),
        bv.shape(),
        cv.shape(),
        mv.shape(),
        "ncssd_fused",
    )?;
    let BatchDims { bt, l, hd, p, n } = d;
    let states = par_map(bt * hd, |job| {
        let (bi, h) = (job / hd, job % hd);
        let xm = weighted_rows(&d, bi, h, xv.data(), mv.data());
        let mut hs = vec![T::zero(); n * p];
        gemm(
            T::one(),
            MatRef::new(&bv.data()[bi * l * n..], l, n).t(),
            MatRef::new(&xm, l, p),
            T::zero(),
            MatMut::new(&mut hs, n, p),
        );
        hs
    });
    let mut y = vec![T::zero(); bt * l * hd * p];
    for (job, hs) in states.iter().enumerate() {
        let (bi, h) = (job / hd, job % hd);
        gemm(
            T::one(),
            MatRef::new(&cv.data()[bi * l * n..], l, n),
            MatRef::new(hs, n, p),
            T::zero(),
            MatMut::strided(&mut y[(bi * l * hd + h) * p..], l, p, hd * p, 1),
        );
    }
    let out = Tensor::from_parts(vec![bt, l, hd, p], y);
    Ok(x.tape().push(out, &[x, b, c, m], move |ctx| {
        let (xd, bd, cd, md) = (
            ctx.inputs[0].data(),
            ctx.inputs[1].data(),
            ctx.inputs[2].data(),
            ctx.inputs[3].data(),
        );
        let parts = par_map(bt * hd, |job| {
            let (bi, h) = (job / hd, job % hd);
            let g = head_view(&d, bi, h, ctx.grad);
            let (bm, cm) = (
                MatRef::new(&bd[bi * l * n..], l, n),
                MatRef::new(&cd[bi * l * n..], l, n),
            );
            let hs = &states[job];
            let mut dh = vec![T::zero(); n * p];
            gemm(T::one(), cm.t(), g, T::zero(), MatMut::new(&mut dh, n, p));
            let mut dc = vec![T::zero(); l * n];
            gemm(
                T::one(),
                g,
                MatRef::new(hs, n, p).t(),
                T::zero(),
                MatMut::new(&mut dc, l, n),
            );
            let mut dxm = vec![T::zero(); l * p];
            gemm(
                T::one(),
                bm,
                MatRef::new(&dh, n, p),
                T::zero(),
                MatMut::new(&mut dxm, l, p),
            );
            let xm = weighted_rows(&d, bi, h, xd, md);
            let mut db = vec![T::zero(); l * n];
            gemm(
                T::one(),
                MatRef::new(&xm, l, p),
                MatRef::new(&dh, n, p).t(),
                T::zero(),
                MatMut::new(&mut db, l, n),
            );
            let mut dx = vec![T::zero(); l * p];
            let mut dm = vec![T::zero(); l];
            for t in 0..l {
                let row = bi * l + t;
                let w = md[row * hd + h];
                let xt = &xd[(row * hd + h) * p..][..p];
                let gt = &dxm[t * p..(t + 1) * p];
                dm[t] = gt.iter().zip(xt).map(|(&a, &b)| a * b).sum();
                dx[t * p..(t + 1) * p]
                    .iter_mut()
                    .zip(gt)
                    .for_each(|(o, &g)| *o = g * w);
            }
            (dx, db, dc, dm)
        });
        let mut dx = vec![T::zero(); bt * l * hd * p];
        let mut db = vec![T::zero(); bt * l * n];
        let mut dc = vec![T::zero(); bt * l * n];
        let mut dm = vec![T::zero(); bt * l * hd];
        for (job, (gx, gb, gc, gm)) in parts.into_iter().enumerate() {
            let (bi, h) = (job / hd, job % hd);
            for t in 0..l {
                let row = bi * l + t;
                dx[(row * hd + h) * p..][..p].copy_from_slice(&gx[t * p..(t + 1) * p]);
                dm[row * hd + h] = gm[t];
            }
            let off = bi * l * n;
            db[off..off + l * n]
                .iter_mut()
                .zip(&gb)
                .for_each(|(a, &v)| *a += v);
            dc[off..off + l * n]
                .iter_mut()
                .zip(&gc)
                .for_each(|(a, &v)| *a += v);
        }
        vec![
            ctx.needs[0].then_some(dx),
            ctx.needs[1].then_some(db),
            ctx.needs[2].then_some(dc),
            ctx.needs[3].then_some(dm),
        ]
    }))
}

/// `Z [Bt,L,Hd,N,P]` with `Z_t = B_t ⊗ x_t` per head.
pub fn expand<'t, T: Element>(x: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
    let (xv, bv) = (x.value(), b.value());
    let xs = xv.shape().to_vec();
    let d = batch_dims(&xs, bv.shape(), bv.shape(), &xs[..3], "ncssd expand")?;
    let BatchDims { bt, l, hd, p, n } = d;
    let (xd, bd) = (xv.data(), bv.data());
    let rows = bt * l;
    let chunks = par_map(rows, |row| {
        let mut z = Vec::with_capacity(hd * n * p);
        for h in 0..hd {
            let xt = &xd[(row * hd + h) * p..][..p];
            for &bk in &bd[row * n..(row + 1) * n] {
                z.extend(xt.iter().map(|&v| bk * v));
            }
        }
        z
    });
    let out = Tensor::from_parts(vec![bt, l, hd, n, p], chunks.concat());
    Ok(x.tape().push(out, &[x, b], move |ctx| {
        let (xd, bd, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad);
        let (mut dx, mut db) = (vec![T::zero(); rows * hd * p], vec![T::zero(); rows * n]);
        for row in 0..rows {
            for h in 0..hd {
                let xt = &xd[(row * hd + h) * p..][..p];
                for k in 0..n {
                    let gz = &g[((row * hd + h) * n + k) * p..][..p];
                    let bk = bd[row * n + k];
                    db[row * n + k] += gz.iter().zip(xt).map(|(&a, &b)| a * b).sum::<T>();
                    dx[(row * hd + h) * p..][..p]
                        .iter_mut()
                        .zip(gz)
                        .for_each(|(o, &v)| *o += v * bk);
                }
            }
        }
        vec![ctx.needs[0].then_some(dx), ctx.needs[1].then_some(db)]
    }))
}

/// `H [Bt,Hd,N,P] = Σ_t m_t Z_t`, tokens visited in ascending order.
pub fn weighted_token_sum<'t, T: Element>(z: Var<'t, T>, m: Var<'t, T>) -> Result<Var<'t, T>> {
    let (zv, mv) = (z.value(), m.value());
    let zs = zv.shape().to_vec();
    if zs.len() != 5 || mv.shape() != &zs[..3] {
        return Err(crate::error::Error::dim(
            "weighted_token_sum",
            &zs,
            mv.shape(),
        ));
    }
    let (bt, l, hd, np) = (zs[0], zs[1], zs[2], zs[3] * zs[4]);
    let (zd, md) = (zv.data(), mv.data());
    let hs = par_map(bt, |bi| {
        let mut acc = vec![T::zero(); hd * np];
        for t in 0..l {
            for h in 0..hd {
                let w = md[(bi * l + t) * hd + h];
                let src = &zd[((bi * l + t) * hd + h) * np..][..np];
                acc[h * np..(h + 1) * np]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(a, &v)| *a += w * v);
            }
        }
        acc
    });
    let out = Tensor::from_parts(vec![bt, hd, zs[3], zs[4]], hs.concat());
    Ok(z.tape().push(out, &[z, m], move |ctx| {
        let (zd, md, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad);
        let dz = ctx.needs[0].then(|| {
            let mut dz = Vec::with_capacity(bt * l * hd * np);
            for bi in 0..bt {
                for t in 0..l {
                    for h in 0..hd {
                        let w = md[(bi * l + t) * hd + h];
                        dz.extend(g[(bi * hd + h) * np..][..np].iter().map(|&v| v * w));
                    }
                }
            }
            dz
        });
        let dm = ctx.needs[1].then(|| {
            let mut dm = Vec::with_capacity(bt * l * hd);
            for bi in 0..bt {
                for t in 0..l {
                    for h in 0..hd {
                        let zt = &zd[((bi * l + t) * hd + h) * np..][..np];
                        let gh = &g[(bi * hd + h) * np..][..np];
                        dm.push(zt.iter().zip(gh).map(|(&a, &b)| a * b).sum());
                    }
                }
            }
            dm
        });
        vec![dz, dm]
    }))
}

/// `Y [Bt,L,Hd,P]` with `y_t = C_tᵀ H` per head.
pub fn readout<'t, T: Element>(c: Var<'t, T>, h: Var<'t, T>) -> Result<Var<'t, T>> {
    let (cv, hv) = (c.value(), h.value());
    let hs = hv.shape().to_vec();
    if hs.len() != 4 || cv.rank() != 3 || cv.shape()[0] != hs[0] || cv.shape()[2] != hs[2] {
        return Err(crate::error::Error::dim("readout", cv.shape(), &hs));
    }
    let (bt, l, hd, n, p) = (hs[0], cv.shape()[1], hs[1], hs[2], hs[3]);
    let (cd, hd_) = (cv.data(), hv.data());
    let rows = par_map(bt * l, |row| {
        let bi = row / l;
        let mut y = vec![T::zero(); hd * p];
        for h in 0..hd {
            for k in 0..n {
                let ck = cd[row * n + k];
                let hk = &hd_[((bi * hd + h) * n + k) * p..][..p];
                y[h * p..(h + 1) * p]
                    .iter_mut()
                    .zip(hk)
                    .for_each(|(o, &v)| *o += ck * v);
            }
        }
        y
    });
    let out = Tensor::from_parts(vec![bt, l, hd, p], rows.concat());
    Ok(c.tape().push(out, &[c, h], move |ctx| {
        let (cd, hsd, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad);
        let mut dc = vec![T::zero(); bt * l * n];
        let mut dh = vec![T::zero(); bt * hd * n * p];
        for row in 0..bt * l {
            let bi = row / l;
            for h in 0..hd {
                let gy = &g[(row * hd + h) * p..][..p];
                for k in 0..n {
                    let off = ((bi * hd + h) * n + k) * p;
                    dc[row * n + k] += hsd[off..off + p]
                        .iter()
                        .zip(gy)
                        .map(|(&a, &b)| a * b)
                        .sum::<T>();
                    let ck = cd[row * n + k];
                    dh[off..off + p]
                        .iter_mut()
                        .zip(gy)
                        .for_each(|(o, &v)| *o += ck * v);
                }
            }
        }
        vec![ctx.needs[0].then_some(dc), ctx.needs[1].then_some(dh)]
    }))
}

/// The contraction route: [`expand`], [`weighted_token_sum`], [`readout`].
pub fn ncssd_contraction<'t, T: Element>(
    x: Var<'t, T>,
    b: Var<'t, T>,
    c: Var<'t, T>,
    m: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let (xs, bs, cs, ms) = (x.shape(), b.shape(), c.shape(), m.shape());
    batch_dims(&xs, &bs, &cs, &ms, "ncssd_contraction")?;
    let z = expand(x, b)?;
    let h = weighted_token_sum(z, m)?;
    readout(c, h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::gradcheck::{grad_check, GradCheckOptions};
    use crate::ncssd::{self, NcssdInputs};
    use crate::rng::Rng;

    fn batch(rng: &mut Rng, d: BatchDims) -> [Tensor<f64>; 4] {
        [
            Tensor::randn(&[d.bt, d.l, d.hd, d.p], 1.0, rng),
            Tensor::randn(&[d.bt, d.l, d.n], 1.0, rng),
            Tensor::randn(&[d.bt, d.l, d.n], 1.0, rng),
            Tensor::uniform(&[d.bt, d.l, d.hd], 0.05, 1.0, rng),
        ]
    }

    #[test]
    fn batched_forms_match_reference() {
        let mut rng = Rng::new(20);
        let d = BatchDims {
            bt: 3,
            l: 11,
            hd: 2,
            p: 3,
            n: 4,
        };
        let ins = batch(&mut rng, d);
        let tape = Tape::new();
        let v: Vec<_> = ins.iter().map(|t| tape.constant(t.clone())).collect();
        let yf = ncssd_fused(v[0], v[1], v[2], v[3]).unwrap().value();
        let yc = ncssd_contraction(v[0], v[1], v[2], v[3]).unwrap().value();
        for bi in 0..3 {
            let pick = |x: &Tensor<f64>| {
                x.narrow(0, bi, 1)
                    .unwrap()
                    .reshape(&x.shape()[1..])
                    .unwrap()
            };
            let seq = NcssdInputs::new(pick(&ins[0]), pick(&ins[1]), pick(&ins[2]), pick(&ins[3]))
                .unwrap();
            let r = ncssd::ncssd_fused(&seq).unwrap();
            assert!(pick(&yf).max_abs_diff(&r).unwrap() < 1e-12);
            assert!(pick(&yc).max_abs_diff(&r).unwrap() < 1e-12);
        }
    }

    #[test]
    fn fused_and_contraction_gradients() {
        let mut rng = Rng::new(21);
        let d = BatchDims {
            bt: 2,
            l: 6,
            hd: 2,
            p: 3,
            n: 2,
        };
        let ins = batch(&mut rng, d);
        for fused in [true, false] {
            let r = grad_check(
                |_, v| {
                    let y = if fused {
                        ncssd_fused(v[0], v[1], v[2], v[3])?
                    } else {
                        ncssd_contraction(v[0], v[1], v[2], v[3])?
                    };
                    Ok(y.square().sum())
                },
                &ins,
                &GradCheckOptions::default(),
            )
            .unwrap();
            assert!(r.max_rel_err < 1e-6, "fused={fused} {r:?}");
        }
    }

    #[test]
    fn fused_and_contraction_gradients_agree() {
        let mut rng = Rng::new(22);
        let d = BatchDims {
            bt: 2,
            l: 7,
            hd: 3,
            p: 2,
            n: 3,
        };
        let ins = batch(&mut rng, d);
        let grads = |fused: bool| {
            let tape = Tape::new();
            let v: Vec<_> = ins.iter().map(|t| tape.param(t.clone())).collect();
            let y = if fused {
                ncssd_fused(v[0], v[1], v[2], v[3]).unwrap()
            } else {
                ncssd_contraction(v[0], v[1], v[2], v[3]).unwrap()
            };
            let g = tape.backward(y.square().sum()).unwrap();
            v.iter().map(|&x| g.wrt(x)).collect::<Vec<_>>()
        };
        for (a, b) in grads(true).iter().zip(grads(false)) {
            assert!(a.max_abs_diff(&b).unwrap() < 1e-10);
        }
    }
}
