//! Parameterized building blocks.

use super::params::{Bound, ParamId, ParamStore};
use crate::autodiff::Var;
use crate::element::{cst, Element};
use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Creates parameters with deterministic initial values.
pub struct Init<'a, T: Element> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut Rng,
}

impl<T: Element> Init<'_, T> {
    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let v = Tensor::randn(shape, std, self.rng);
        self.store.add(name, v, true)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> ParamId {
        let v = Tensor::uniform(shape, -bound, bound, self.rng);
        self.store.add(name, v, true)
    }

    /// Parameter excluded from weight decay.
    pub fn fixed(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        self.store.add(name, value, false)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.fixed(name, Tensor::zeros(shape))
    }
}

/// `x @ w (+ b)` over the last axis.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Element>(
        init: &mut Init<'_, T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Self {
        let w = init.normal(&format!("{name}.weight"), &[d_in, d_out], 0.02);
        let b = bias.then(|| init.zeros(&format!("{name}.bias"), &[d_out]));
        Self { w, b, d_in, d_out }
    }

    pub fn forward<'t, T: Element>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.linear(p.var(self.w), self.b.map(|b| p.var(b)))
    }

    pub fn numel(&self) -> usize {
        self.d_in * self.d_out + if self.b.is_some() { self.d_out } else { 0 }
    }
}

/// Dense convolution with bias.
#[derive(Debug, Clone)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    pub fn new<T: Element>(
        init: &mut Init<'_, T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
    ) -> Self {
        let fan_in = (c_in * k * k) as f64;
        let w = init.normal(
            &format!("{name}.weight"),
            &[c_out, c_in, k, k],
            (2.0 / fan_in).sqrt(),
        );
        let b = init.zeros(&format!("{name}.bias"), &[c_out]);
        Self {
            w,
            b,
            stride,
            pad: k / 2,
        }
    }

    pub fn forward<'t, T: Element>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.conv2d(p.var(self.w), Some(p.var(self.b)), self.stride, self.pad)
    }
}

/// Depthwise 3×3 convolution with bias.
#[derive(Debug, Clone)]
pub struct DwConv {
    pub w: ParamId,
    pub b: ParamId,
}

impl DwConv {
    pub fn new<T: Element>(init: &mut Init<'_, T>, name: &str, c: usize) -> Self {
        let w = init.uniform(&format!("{name}.weight"), &[c, 3, 3], 1.0 / 3.0);
        let b = init.zeros(&format!("{name}.bias"), &[c]);
        Self { w, b }
    }

    pub fn forward<'t, T: Element>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.dwconv2d(p.var(self.w), Some(p.var(self.b)), 1)
    }

    /// Sets the kernel to `center` at the middle tap and zero elsewhere, and
    /// the bias to zero.
    pub fn set_delta<T: Element>(&self, store: &mut ParamStore<T>, center: f64) {
        let w = store.get_mut(self.w);
        let c = w.shape()[0];
        *w = Tensor::from_fn(
            &[c, 3, 3],
            |i| if i % 9 == 4 { cst(center) } else { T::zero() },
        );
        let b = store.get_mut(self.b);
        *b = Tensor::zeros(b.shape());
    }
}

/// Layer normalization over the channel axis.
#[derive(Debug, Clone)]
pub struct Norm {
    pub g: ParamId,
    pub b: ParamId,
    pub eps: f64,
}

impl Norm {
    pub fn new<T: Element>(init: &mut Init<'_, T>, name: &str, c: usize, eps: f64) -> Self {
        let g = init.fixed(&format!("{name}.weight"), Tensor::ones(&[c]));
        let b = init.zeros(&format!("{name}.bias"), &[c]);
        Self { g, b, eps }
    }

    /// Normalizes the last axis.
    pub fn forward<'t, T: Element>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.layer_norm(p.var(self.g), p.var(self.b), cst(self.eps))
    }

    /// Normalizes the channel axis of an NCHW tensor.
    pub fn forward_nchw<'t, T: Element>(
        &self,
        p: &Bound<'t, T>,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let y = self.forward(p, x.permute(&[0, 2, 3, 1])?)?;
        y.permute(&[0, 3, 1, 2])
    }
}

/// `[B, C, H, W]` to `[B, H·W, C]`.
pub fn to_tokens<'t, T: Element>(x: Var<'t, T>) -> Result<Var<'t, T>> {
    let s = x.shape();
    x.permute(&[0, 2, 3, 1])?
        .reshape(&[s[0], s[2] * s[3], s[1]])
}

/// `[B, H·W, C]` to `[B, C, H, W]`.
pub fn from_tokens<'t, T: Element>(x: Var<'t, T>, h: usize, w: usize) -> Result<Var<'t, T>> {
    let s = x.shape();
    x.reshape(&[s[0], h, w, s[2]])?.permute(&[0, 3, 1, 2])
}
