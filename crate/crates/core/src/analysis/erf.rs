//! Effective receptive fields from input gradients.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{Forward, Model, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Saliency of every input pixel for one output token.
#[derive(Debug, Clone)]
pub struct ErfMap {
    /// `[H, W]`, max-normalized unless degenerate.
    pub grid: Tensor<f64>,
    /// Mean absolute gradient before normalization.
    pub raw: Tensor<f64>,
    /// All gradients were exactly zero; `grid` is left at zero.
    pub degenerate: bool,
    pub images: usize,
    pub source: String,
}

impl ErfMap {
    /// `log(1 + raw)`, max-normalized.
    pub fn log_scaled(&self) -> Tensor<f64> {
        let l = self.raw.map(f64::ln_1p);
        normalize_max(&l).unwrap_or(l)
    }

    /// Fraction of positions with strictly positive saliency.
    pub fn coverage(&self) -> f64 {
        let d = self.raw.data();
        d.iter().filter(|&&v| v > 0.0).count() as f64 / d.len() as f64
    }

    /// Whether every nonzero position lies within `radius` (Chebyshev) of
    /// `(ci, cj)`.
    pub fn support_within(&self, ci: usize, cj: usize, radius: usize) -> bool {
        let w = self.raw.shape()[1];
        self.raw.data().iter().enumerate().all(|(k, &v)| {
            let (i, j) = (k / w, k % w);
            v == 0.0 || (i.abs_diff(ci) <= radius && j.abs_diff(cj) <= radius)
        })
    }
}

fn normalize_max(t: &Tensor<f64>) -> Option<Tensor<f64>> {
    let m = t.data().iter().copied().fold(0.0, f64::max);
    (m > 0.0).then(|| t.map(|v| v / m))
}

/// ERF of `f`, which maps a `[1, C, H, W]` input to a `[1, C', h, w]`
/// feature map. The objective is the channel sum of output token `center`
/// (default: the middle of the output grid); gradients are accumulated in
/// image order.
pub fn erf_map<F>(f: F, images: &[Tensor<f64>], center: Option<(usize, usize)>) -> Result<ErfMap>
where
    F: for<'t> Fn(&'t Tape<f64>, Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    let first = images
        .first()
        .ok_or_else(|| Error::Validation("erf_map needs at least one image".into()))?;
    let s = first.shape().to_vec();
    if s.len() != 3 {
        return Err(Error::dim("erf_map image", &[0, 0, 0], &s));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut acc = vec![0.0f64; h * w];
    for img in images {
        if img.shape() != s.as_slice() {
            return Err(Error::dim("erf_map image", &s, img.shape()));
        }
        let tape = Tape::new();
        let x = tape.param(img.reshape(&[1, c, h, w])?);
        let y = f(&tape, x)?;
        let ys = y.shape();
        if ys.len() != 4 {
            return Err(Error::dim("erf_map output", &[1, 0, 0, 0], &ys));
        }
        let (ci, cj) = center.unwrap_or((ys[2] / 2, ys[3] / 2));
        if ci >= ys[2] || cj >= ys[3] {
            return Err(Error::Domain(format!(
                "center ({ci}, {cj}) outside the {}×{} output grid",
                ys[2], ys[3]
            )));
        }
        let obj = y.narrow(2, ci, 1)?.narrow(3, cj, 1)?.sum();
        let g = tape.backward(obj)?.wrt(x);
        let gd = g.data();
        for ch in 0..c {
            for (a, &v) in acc.iter_mut().zip(&gd[ch * h * w..(ch + 1) * h * w]) {
                *a += v.abs();
            }
        }
    }
    let n = images.len() as f64;
    let raw = Tensor::new(&[h, w], acc.into_iter().map(|v| v / n).collect())?;
    let (grid, degenerate) = match normalize_max(&raw) {
        Some(g) => (g, false),
        None => (Tensor::zeros(&[h, w]), true),
    };
    Ok(ErfMap {
        grid,
        raw,
        degenerate,
        images: images.len(),
        source: String::new(),
    })
}

/// ERF of the output of stage `stage` (0-based) of `model`.
pub fn erf_model(
    model: &Model,
    params: &ParamStore<f64>,
    images: &[Tensor<f64>],
    stage: usize,
    center: Option<(usize, usize)>,
) -> Result<ErfMap> {
    erf_map(
        |tape, x| {
            let b = params.bind(tape, false);
            model.forward_features(&b, x, stage, &mut Forward::default())
        },
        images,
        center,
    )
}

/// A stack of depthwise 3×3 convolutions without bias, used as a purely
/// local baseline.
#[derive(Debug, Clone)]
pub struct DwConvStack {
    pub weights: Vec<Tensor<f64>>,
}

impl DwConvStack {
    /// Weights drawn from `U(0.1, 1)` so no tap is zero.
    pub fn new(layers: usize, channels: usize, rng: &mut Rng) -> Self {
        Self {
            weights: (0..layers)
                .map(|_| Tensor::uniform(&[channels, 3, 3], 0.1, 1.0, rng))
                .collect(),
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape<f64>, x: Var<'t, f64>) -> Result<Var<'t, f64>> {
        let mut x = x;
        for w in &self.weights {
            x = x.dwconv2d(tape.constant(w.clone()), None, 1)?;
        }
        Ok(x)
    }
}

/// Deterministic standard-normal test images `[C, S, S]`.
pub fn random_images(n: usize, channels: usize, side: usize, seed: u64) -> Vec<Tensor<f64>> {
    let mut rng = Rng::new(seed);
    (0..n)
        .map(|_| Tensor::randn(&[channels, side, side], 1.0, &mut rng))
        .collect()
}
