//! 2-D convolutions (cross-correlation) on NCHW tensors.

use crate::element::Element;
use crate::error::{Error, Result};
use crate::linalg::{gemm, MatMut, MatRef};
use crate::parallel;
use crate::tensor::Tensor;

/// Geometry shared by forward and backward passes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

fn out_extent(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    (n + 2 * pad).checked_sub(k).map(|r| r / stride + 1)
}

fn depthwise_geom(x: &[usize], w: &[usize], pad: usize) -> Result<ConvGeom> {
    if x.len() != 4 || w.len() != 3 || w[0] != x[1] || w[1] != w[2] {
        return Err(Error::dim("dwconv2d", x, w));
    }
    let k = w[1];
    if k.is_multiple_of(2) {
        return Err(Error::Unsupported(format!(
            "depthwise kernel size {k} must be odd"
        )));
    }
    let ho = out_extent(x[2], k, 1, pad).ok_or_else(|| Error::dim("dwconv2d", x, w))?;
    let wo = out_extent(x[3], k, 1, pad).ok_or_else(|| Error::dim("dwconv2d", x, w))?;
    Ok(ConvGeom {
        batch: x[0],
        c_in: x[1],
        c_out: x[1],
        h: x[2],
        w: x[3],
        k,
        stride: 1,
        pad,
        ho,
        wo,
    })
}

/// Valid output index range `lo..hi` along one axis for kernel tap `u`
/// (stride 1): input index `i + u - pad` must lie in `0..n`.
fn tap_range(u: usize, pad: usize, n: usize, out: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(u);
    let hi = out.min((n + pad).saturating_sub(u));
    (lo, hi.max(lo))
}

fn dw_plane_forward<T: Element>(x: &[T], ker: &[T], g: &ConvGeom, out: &mut [T]) {
    let (k, p) = (g.k, g.pad);
    for u in 0..k {
        let (i_lo, i_hi) = tap_range(u, p, g.h, g.ho);
        for v in 0..k {
            let wt = ker[u * k + v];
            let (j_lo, j_hi) = tap_range(v, p, g.w, g.wo);
            if j_lo >= j_hi {
                continue;
            }
            for i in i_lo..i_hi {
                let xi = i + u - p;
                let src = &x[xi * g.w + j_lo + v - p..xi * g.w + j_hi + v - p];
                let dst = &mut out[i * g.wo + j_lo..i * g.wo + j_hi];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += wt * s;
                }
            }
        }
    }
}

/// Depthwise 2-D cross-correlation, stride 1, zero padding.
///
/// `x: [B, C, H, W]`, `w: [C, k, k]` with odd `k`, optional `bias: [C]`.
pub fn dwconv2d<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = depthwise_geom(x.shape(), w.shape(), pad)?;
    if let Some(b) = bias {
        if b.shape() != [g.c_in] {
            return Err(Error::dim("dwconv2d bias", b.shape(), &[g.c_in]));
        }
    }
    let plane_in = g.h * g.w;
    let plane_out = g.ho * g.wo;
    let mut out = vec![T::zero(); g.batch * g.c_in * plane_out];
    let (xd, wd) = (x.data(), w.data());
    let bd = bias.map(|b| b.data());
    parallel::for_each_chunk(&mut out, plane_out, |bc, o| {
        let c = bc % g.c_in;
        if let Some(bd) = bd {
            o.fill(bd[c]);
        }
        let ker = &wd[c * g.k * g.k..(c + 1) * g.k * g.k];
        dw_plane_forward(&xd[bc * plane_in..(bc + 1) * plane_in], ker, &g, o);
    });
    Ok(Tensor::from_parts(vec![g.batch, g.c_in, g.ho, g.wo], out))
}

/// Input gradient (when requested), weight gradient, bias gradient.
pub type ConvGrads<T> = (Option<Vec<T>>, Vec<T>, Vec<T>);

/// Gradients of [`dwconv2d`]: `(dx, dw, dbias)`.
pub fn dwconv2d_backward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad: &[T],
    pad: usize,
    need_x: bool,
) -> Result<ConvGrads<T>> {
    let g = depthwise_geom(x.shape(), w.shape(), pad)?;
    let (k, p) = (g.k, g.pad);
    let plane_in = g.h * g.w;
    let plane_out = g.ho * g.wo;
    let (xd, wd) = (x.data(), w.data());
    // Per (batch, channel) plane: dx plane, dw taps, dbias.
    let parts = parallel::par_map(g.batch * g.c_in, |bc| {
        let c = bc % g.c_in;
        let xp = &xd[bc * plane_in..(bc + 1) * plane_in];
        let gp = &grad[bc * plane_out..(bc + 1) * plane_out];
        let ker = &wd[c * k * k..(c + 1) * k * k];
        let mut dx = if need_x {
            vec![T::zero(); plane_in]
        } else {
            Vec::new()
        };
        let mut dw = vec![T::zero(); k * k];
        for u in 0..k {
            let (i_lo, i_hi) = tap_range(u, p, g.h, g.ho);
            for v in 0..k {
                let (j_lo, j_hi) = tap_range(v, p, g.w, g.wo);
                if j_lo >= j_hi {
                    continue;
                }
                let wt = ker[u * k + v];
                let mut acc = T::zero();
                for i in i_lo..i_hi {
                    let xi = i + u - p;
                    let xs = xi * g.w + j_lo + v - p;
                    let grow = &gp[i * g.wo + j_lo..i * g.wo + j_hi];
                    let xrow = &xp[xs..xs + (j_hi - j_lo)];
                    for (&gv, &xv) in grow.iter().zip(xrow) {
                        acc += gv * xv;
                    }
                    if need_x {
                        for (d, &gv) in dx[xs..xs + (j_hi - j_lo)].iter_mut().zip(grow) {
                            *d += wt * gv;
                        }
                    }
                }
                dw[u * k + v] = acc;
            }
        }
        let db: T = gp.iter().copied().sum();
        (dx, dw, db)
    });
    let mut dw = vec![T::zero(); g.c_in * k * k];
    let mut db = vec![T::zero(); g.c_in];
    let mut dx = need_x.then(|| Vec::with_capacity(g.batch * g.c_in * plane_in));
    for (bc, (pdx, pdw, pdb)) in parts.into_iter().enumerate() {
        let c = bc % g.c_in;
        for (a, b) in dw[c * k * k..(c + 1) * k * k].iter_mut().zip(&pdw) {
            *a += *b;
        }
        db[c] += pdb;
        if let Some(dx) = dx.as_mut() {
            dx.extend_from_slice(&pdx);
        }
    }
    Ok((dx, dw, db))
}

fn dense_geom(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<ConvGeom> {
    if x.len() != 4 || w.len() != 4 || w[1] != x[1] || w[2] != w[3] || stride == 0 {
        return Err(Error::dim("conv2d", x, w));
    }
    let k = w[2];
    let ho = out_extent(x[2], k, stride, pad).ok_or_else(|| Error::dim("conv2d", x, w))?;
    let wo = out_extent(x[3], k, stride, pad).ok_or_else(|| Error::dim("conv2d", x, w))?;
    Ok(ConvGeom {
        batch: x[0],
        c_in: x[1],
        c_out: w[0],
        h: x[2],
        w: x[3],
        k,
        stride,
        pad,
        ho,
        wo,
    })
}

/// Unfolds one image `[C, H, W]` into `[C·k·k, Ho·Wo]` patch columns.
fn im2col<T: Element>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let (k, s, p) = (g.k, g.stride, g.pad);
    let cols = g.ho * g.wo;
    let mut out = vec![T::zero(); g.c_in * k * k * cols];
    for c in 0..g.c_in {
        for u in 0..k {
            for v in 0..k {
                let row = &mut out[((c * k + u) * k + v) * cols..((c * k + u) * k + v + 1) * cols];
                for i in 0..g.ho {
                    let Some(xi) = (i * s + u).checked_sub(p).filter(|&xi| xi < g.h) else {
                        continue;
                    };
                    for j in 0..g.wo {
                        if let Some(xj) = (j * s + v).checked_sub(p).filter(|&xj| xj < g.w) {
                            row[i * g.wo + j] = x[(c * g.h + xi) * g.w + xj];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatters patch columns back into an image.
fn col2im<T: Element>(cols_data: &[T], g: &ConvGeom) -> Vec<T> {
    let (k, s, p) = (g.k, g.stride, g.pad);
    let cols = g.ho * g.wo;
    let mut out = vec![T::zero(); g.c_in * g.h * g.w];
    for c in 0..g.c_in {
        for u in 0..k {
            for v in 0..k {
                let row =
                    &cols_data[((c * k + u) * k + v) * cols..((c * k + u) * k + v + 1) * cols];
                for i in 0..g.ho {
                    let Some(xi) = (i * s + u).checked_sub(p).filter(|&xi| xi < g.h) else {
                        continue;
                    };
                    for j in 0..g.wo {
                        if let Some(xj) = (j * s + v).checked_sub(p).filter(|&xj| xj < g.w) {
                            out[(c * g.h + xi) * g.w + xj] += row[i * g.wo + j];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Dense 2-D cross-correlation.
///
/// `x: [B, Cin, H, W]`, `w: [Cout, Cin, k, k]`, optional `bias: [Cout]`.
pub fn conv2d<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = dense_geom(x.shape(), w.shape(), stride, pad)?;
    if let Some(b) = bias {
        if b.shape() != [g.c_out] {
            return Err(Error::dim("conv2d bias", b.shape(), &[g.c_out]));
        }
    }
    let ckk = g.c_in * g.k * g.k;
    let hw_out = g.ho * g.wo;
    let plane_in = g.c_in * g.h * g.w;
    let mut out = vec![T::zero(); g.batch * g.c_out * hw_out];
    let (xd, wd) = (x.data(), w.data());
    let bd = bias.map(|b| b.data());
    parallel::for_each_chunk(&mut out, g.c_out * hw_out, |b, o| {
        let cols = im2col(&xd[b * plane_in..(b + 1) * plane_in], &g);
        if let Some(bd) = bd {
            for (co, row) in o.chunks_mut(hw_out).enumerate() {
                row.fill(bd[co]);
            }
        }
        gemm(
            T::one(),
            MatRef::new(wd, g.c_out, ckk),
            MatRef::new(&cols, ckk, hw_out),
            if bd.is_some() { T::one() } else { T::zero() },
            MatMut::new(o, g.c_out, hw_out),
        );
    });
    Ok(Tensor::from_parts(vec![g.batch, g.c_out, g.ho, g.wo], out))
}

/// Gradients of [`conv2d`]: `(dx, dw, dbias)`.
pub fn conv2d_backward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad: &[T],
    stride: usize,
    pad: usize,
    need_x: bool,
) -> Result<ConvGrads<T>> {
    let g = dense_geom(x.shape(), w.shape(), stride, pad)?;
    let ckk = g.c_in * g.k * g.k;
    let hw_out = g.ho * g.wo;
    let plane_in = g.c_in * g.h * g.w;
    let (xd, wd) = (x.data(), w.data());
    let parts = parallel::par_map(g.batch, |b| {
        let cols = im2col(&xd[b * plane_in..(b + 1) * plane_in], &g);
        let gb = &grad[b * g.c_out * hw_out..(b + 1) * g.c_out * hw_out];
        let mut dw = vec![T::zero(); g.c_out * ckk];
        gemm(
            T::one(),
            MatRef::new(gb, g.c_out, hw_out),
            MatRef::new(&cols, ckk, hw_out).t(),
            T::zero(),
            MatMut::new(&mut dw, g.c_out, ckk),
        );
        let dx = need_x.then(|| {
            let mut dcols = vec![T::zero(); ckk * hw_out];
            gemm(
                T::one(),
                MatRef::new(wd, g.c_out, ckk).t(),
                MatRef::new(gb, g.c_out, hw_out),
                T::zero(),
                MatMut::new(&mut dcols, ckk, hw_out),
            );
            col2im(&dcols, &g)
        });
        let db: Vec<T> = gb.chunks(hw_out).map(|r| r.iter().copied().sum()).collect();
        (dx, dw, db)
    });
    let mut dw = vec![T::zero(); g.c_out * ckk];
    let mut db = vec![T::zero(); g.c_out];
    let mut dx = need_x.then(|| Vec::with_capacity(g.batch * plane_in));
    for (pdx, pdw, pdb) in parts {
        dw.iter_mut().zip(&pdw).for_each(|(a, &b)| *a += b);
        db.iter_mut().zip(&pdb).for_each(|(a, &b)| *a += b);
        if let (Some(dx), Some(pdx)) = (dx.as_mut(), pdx) {
            dx.extend_from_slice(&pdx);
        }
    }
    Ok((dx, dw, db))
}
