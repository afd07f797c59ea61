//! Tensor operations without autodiff bookkeeping.
//!
//! The tape wrappers in [`crate::autodiff`] call into these kernels for both
//! the forward value and the gradient computations.

pub mod conv;
pub mod norm;

use crate::element::{cst, Element};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use crate::linalg::{bmm, matmul};
pub use conv::{conv2d, dwconv2d};
pub use norm::{layer_norm, softmax_last};

/// Pointwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Exp,
    Softplus,
    Silu,
    Gelu,
    Sigmoid,
    Square,
}

pub(crate) fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// ln(1 + e^x) without overflow.
pub(crate) fn softplus<T: Element>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

impl Unary {
    pub fn apply<T: Element>(self, x: T) -> T {
        match self {
            Unary::Exp => x.exp(),
            Unary::Softplus => softplus(x),
            Unary::Silu => x * sigmoid(x),
            Unary::Gelu => {
                cst::<T>(0.5) * x * (T::one() + (x * cst(std::f64::consts::FRAC_1_SQRT_2)).erf())
            }
            Unary::Sigmoid => sigmoid(x),
            Unary::Square => x * x,
        }
    }

    /// d apply(x) / dx given the input `x` and output `y`.
    pub fn derivative<T: Element>(self, x: T, y: T) -> T {
        match self {
            Unary::Exp => y,
            Unary::Softplus => sigmoid(x),
            Unary::Silu => {
                let s = sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            }
            Unary::Gelu => {
                let cdf =
                    cst::<T>(0.5) * (T::one() + (x * cst(std::f64::consts::FRAC_1_SQRT_2)).erf());
                let pdf = (-(x * x) * cst(0.5)).exp() * cst(0.398_942_280_401_432_7);
                cdf + x * pdf
            }
            Unary::Sigmoid => y * (T::one() - y),
            Unary::Square => x + x,
        }
    }
}

/// Elementwise binary operations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

/// Applies a unary op per element.
pub fn unary<T: Element>(op: Unary, x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| op.apply(v))
}

/// Applies a binary op per element. Shapes must match, except that a rank-0
/// operand broadcasts against any tensor.
pub fn binary<T: Element>(op: BinaryOp, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let f = |x: T, y: T| match op {
        BinaryOp::Add => x + y,
        BinaryOp::Sub => x - y,
        BinaryOp::Mul => x * y,
    };
    if a.shape() == b.shape() {
        a.zip_map(b, f)
    } else if a.rank() == 0 {
        let s = a.item();
        Ok(b.map(|y| f(s, y)))
    } else if b.rank() == 0 {
        let s = b.item();
        Ok(a.map(|x| f(x, s)))
    } else {
        Err(Error::dim("elementwise", a.shape(), b.shape()))
    }
}
