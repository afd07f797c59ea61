//! Batched causal scans recorded on the tape.

use crate::autodiff::Var;
use crate::element::Element;
use crate::error::{Error, Result};
use crate::parallel::par_map;
use crate::tensor::Tensor;

/// Extents of a batched sequence kernel call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchDims {
    pub bt: usize,
    pub l: usize,
    pub hd: usize,
    pub p: usize,
    pub n: usize,
}

/// Validates `x [Bt,L,Hd,P]`, `b, c [Bt,L,N]`, `w [Bt,L,Hd]`.
pub(crate) fn batch_dims(
    x: &[usize],
    b: &[usize],
    c: &[usize],
    w: &[usize],
    op: &'static str,
) -> Result<BatchDims> {
    if x.len() != 4 {
        return Err(Error::Validation(format!(
            "{op}: X must be [Bt, L, Hd, P], got {x:?}"
        )));
    }
    let (bt, l, hd, p) = (x[0], x[1], x[2], x[3]);
    if b.len() != 3 || b[..2] != [bt, l] {
        return Err(Error::dim(op, x, b));
    }
    if c != b {
        return Err(Error::dim(op, b, c));
    }
    if w != [bt, l, hd] {
        return Err(Error::dim(op, &[bt, l, hd], w));
    }
    Ok(BatchDims {
        bt,
        l,
        hd,
        p,
        n: b[2],
    })
}

struct ScanGrads<T> {
    dx: Vec<T>,
    db: Vec<T>,
    dc: Vec<T>,
    da: Vec<T>,
}

/// Causal selective scan over every batch element and head.
///
/// `x` is `[Bt,L,Hd,P]`, `b` and `c` are `[Bt,L,N]` shared across heads and
/// `a` is `[Bt,L,Hd]`. Hidden states are kept for the backward pass, which
/// runs the adjoint recurrence in reverse time.
pub fn ssd_scan<'t, T: Element>(
    x: Var<'t, T>,
    b: Var<'t, T>,
    c: Var<'t, T>,
    a: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let (xv, bv, cv, av) = (x.value(), b.value(), c.value(), a.value());
    let d = batch_dims(xv.shape(), bv.shape(), cv.shape(), av.shape(), "ssd_scan")?;
    let BatchDims { bt, l, hd, p, n } = d;
    let keep = [x, b, c, a].iter().any(|v| v.requires_grad());
    let slices = par_map(bt * hd, |job| {
        let (bi, h) = (job / hd, job % hd);
        scan_forward(&d, bi, h, xv.data(), bv.data(), cv.data(), av.data(), keep)
    });
    let mut y = vec![T::zero(); bt * l * hd * p];
    let mut states = Vec::with_capacity(if keep { bt * hd } else { 0 });
    for (job, (ys, st)) in slices.into_iter().enumerate() {
        let (bi, h) = (job / hd, job % hd);
        for t in 0..l {
            y[((bi * l + t) * hd + h) * p..][..p].copy_from_slice(&ys[t * p..(t + 1) * p]);
        }
        if keep {
            states.push(st);
        }
    }
    let out = Tensor::from_parts(vec![bt, l, hd, p], y);
    Ok(x.tape().push(out, &[x, b, c, a], move |ctx| {
        let (xd, bd, cd, ad) = (
            ctx.inputs[0].data(),
            ctx.inputs[1].data(),
            ctx.inputs[2].data(),
            ctx.inputs[3].data(),
        );
        let parts = par_map(bt * hd, |job| {
            let (bi, h) = (job / hd, job % hd);
            scan_backward(&d, bi, h, xd, bd, cd, ad, &states[job], ctx.grad)
        });
        let mut dx = vec![T::zero(); bt * l * hd * p];
        let mut db = vec![T::zero(); bt * l * n];
        let mut dc = vec![T::zero(); bt * l * n];
        let mut da = vec![T::zero(); bt * l * hd];
        // Head partials of the shared projections are summed in head order.
        for (job, g) in parts.into_iter().enumerate() {
            let (bi, h) = (job / hd, job % hd);
            for t in 0..l {
                let row = bi * l + t;
                dx[(row * hd + h) * p..][..p].copy_from_slice(&g.dx[t * p..(t + 1) * p]);
                da[row * hd + h] = g.da[t];
                for k in 0..n {
                    db[row * n + k] += g.db[t * n + k];
                    dc[row * n + k] += g.dc[t * n + k];
                }
            }
        }
        vec![
            ctx.needs[0].then_some(dx),
            ctx.needs[1].then_some(db),
            ctx.needs[2].then_some(dc),
            ctx.needs[3].then_some(da),
        ]
    }))
}

/// Output `[L, P]` and, if `keep`, all hidden states `[L, N, P]`.
#[allow(clippy::too_many_arguments)]
fn scan_forward<T: Element>(
    d: &BatchDims,
    bi: usize,
    h: usize,
    x: &[T],
    b: &[T],
    c: &[T],
    a: &[T],
    keep: bool,
) -> (Vec<T>, Vec<T>) {
    let BatchDims { l, hd, p, n, .. } = *d;
    let mut y = vec![T::zero(); l * p];
    let mut state = vec![T::zero(); n * p];
    let mut states = Vec::with_capacity(if keep { l * n * p } else { 0 });
    for t in 0..l {
        let row = bi * l + t;
        let at = a[row * hd + h];
        let xt = &x[(row * hd + h) * p..][..p];
        let (bt, ct) = (&b[row * n..][..n], &c[row * n..][..n]);
        let yt = &mut y[t * p..(t + 1) * p];
        for k in 0..n {
            let hk = &mut state[k * p..(k + 1) * p];
            let (bk, ck) = (bt[k], ct[k]);
            for ((hv, &xv), yv) in hk.iter_mut().zip(xt).zip(yt.iter_mut()) {
                *hv = at * *hv + bk * xv;
                *yv += ck * *hv;
            }
        }
        if keep {
            states.extend_from_slice(&state);
        }
    }
    (y, states)
}

#[allow(clippy::too_many_arguments)]
fn scan_backward<T: Element>(
    d: &BatchDims,
    bi: usize,
    h: usize,
    x: &[T],
    b: &[T],
    c: &[T],
    a: &[T],
    states: &[T],
    grad: &[T],
) -> ScanGrads<T> {
    let BatchDims { l, hd, p, n, .. } = *d;
    let np = n * p;
    let mut g = ScanGrads {
        dx: vec![T::zero(); l * p],
        db: vec![T::zero(); l * n],
        dc: vec![T::zero(); l * n],
        da: vec![T::zero(); l],
    };
    let mut dh = vec![T::zero(); np];
    for t in (0..l).rev() {
        let row = bi * l + t;
        let gy = &grad[(row * hd + h) * p..][..p];
        let xt = &x[(row * hd + h) * p..][..p];
        let (bt, ct) = (&b[row * n..][..n], &c[row * n..][..n]);
        let ht = &states[t * np..(t + 1) * np];
        let dxt = &mut g.dx[t * p..(t + 1) * p];
        let mut da = T::zero();
        for k in 0..n {
            let dhk = &mut dh[k * p..(k + 1) * p];
            let hk = &ht[k * p..(k + 1) * p];
            let (bk, ck) = (bt[k], ct[k]);
            let mut dck = T::zero();
            let mut dbk = T::zero();
            for q in 0..p {
                dck += hk[q] * gy[q];
                dhk[q] += ck * gy[q];
                dbk += dhk[q] * xt[q];
                dxt[q] += dhk[q] * bk;
            }
            if t > 0 {
                let prev = &states[(t - 1) * np + k * p..][..p];
                da += dhk.iter().zip(prev).map(|(&u, &v)| u * v).sum::<T>();
            }
            g.dc[t * n + k] = dck;
            g.db[t * n + k] = dbk;
        }
        g.da[t] = da;
        let at = a[row * hd + h];
        dh.iter_mut().for_each(|v| *v *= at);
    }
    g
}

/// Split-direction scan: the first half of each head's channels runs
/// forward, the second half over the reversed sequence.
pub fn bi_ssd_scan<'t, T: Element>(
    x: Var<'t, T>,
    b: Var<'t, T>,
    c: Var<'t, T>,
    a: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let shape = x.shape();
    let p = *shape.last().unwrap_or(&0);
    if !p.is_multiple_of(2) {
        return Err(Error::Unsupported(format!(
            "Bi-SSD needs an even head width, got {p}"
        )));
    }
    let half = p / 2;
    let fwd = ssd_scan(x.narrow(3, 0, half)?, b, c, a)?;
    let bwd = ssd_scan(
        x.narrow(3, half, half)?.flip(1)?,
        b.flip(1)?,
        c.flip(1)?,
        a.flip(1)?,
    )?
    .flip(1)?;
    Var::concat(&[fwd, bwd], 3)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::gradcheck::{grad_check, GradCheckOptions};
    use crate::rng::Rng;
    use crate::ssd::{bi_ssd, ssd_recurrent, SsdSequenceInputs};

    fn batch(rng: &mut Rng, d: BatchDims) -> [Tensor<f64>; 4] {
        [
            Tensor::randn(&[d.bt, d.l, d.hd, d.p], 1.0, rng),
            Tensor::randn(&[d.bt, d.l, d.n], 1.0, rng),
            Tensor::randn(&[d.bt, d.l, d.n], 1.0, rng),
            Tensor::uniform(&[d.bt, d.l, d.hd], 0.5, 1.0, rng),
        ]
    }

    fn sequence(t: &[Tensor<f64>; 4], bi: usize) -> SsdSequenceInputs<f64> {
        let pick = |x: &Tensor<f64>| {
            let s = x.narrow(0, bi, 1).unwrap();
            s.reshape(&x.shape()[1..]).unwrap()
        };
        SsdSequenceInputs::new(pick(&t[0]), pick(&t[1]), pick(&t[2]), pick(&t[3])).unwrap()
    }

    #[test]
    fn batched_scan_matches_reference() {
        let mut rng = Rng::new(10);
        let d = BatchDims {
            bt: 3,
            l: 9,
            hd: 2,
            p: 4,
            n: 3,
        };
        let ins = batch(&mut rng, d);
        let tape = Tape::new();
        let v: Vec<_> = ins.iter().map(|t| tape.constant(t.clone())).collect();
        let y = ssd_scan(v[0], v[1], v[2], v[3]).unwrap().value();
        let yb = bi_ssd_scan(v[0], v[1], v[2], v[3]).unwrap().value();
        for bi in 0..3 {
            let seq = sequence(&ins, bi);
            let r = ssd_recurrent(&seq).unwrap();
            let got = y.narrow(0, bi, 1).unwrap().reshape(r.shape()).unwrap();
            assert!(got.max_abs_diff(&r).unwrap() < 1e-12);
            let rb = bi_ssd(&seq).unwrap();
            let gotb = yb.narrow(0, bi, 1).unwrap().reshape(rb.shape()).unwrap();
            assert!(gotb.max_abs_diff(&rb).unwrap() < 1e-12);
        }
    }

    #[test]
    fn scan_gradients() {
        let mut rng = Rng::new(11);
        let d = BatchDims {
            bt: 2,
            l: 5,
            hd: 2,
            p: 2,
            n: 3,
        };
        let ins = batch(&mut rng, d);
        let r = grad_check(
            |_, v| Ok(ssd_scan(v[0], v[1], v[2], v[3])?.square().sum()),
            &ins,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-6, "{r:?}");
        let r = grad_check(
            |_, v| Ok(bi_ssd_scan(v[0], v[1], v[2], v[3])?.square().sum()),
            &ins,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-6, "{r:?}");
    }
}
