use super::{BackwardCtx, Var};
use crate::element::{cst, Element};
use crate::error::{Error, Result};
use crate::ops::Unary;
use crate::tensor::Tensor;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
}

impl Binary {
    fn apply<T: Element>(self, a: T, b: T) -> T {
        match self {
            Binary::Add => a + b,
            Binary::Sub => a - b,
            Binary::Mul => a * b,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        }
    }
}

fn is_scalar(shape: &[usize]) -> bool {
    shape.is_empty()
}

/// Sum of a gradient broadcast from a scalar operand.
fn reduce_to_scalar<T: Element>(g: Vec<T>, target_scalar: bool) -> Vec<T> {
    if target_scalar {
        vec![g.iter().copied().sum()]
    } else {
        g
    }
}

// Fallible arithmetic; the std operator traits cannot return `Result`.
#[allow(clippy::should_implement_trait)]
impl<'t, T: Element> Var<'t, T> {
    fn binary(self, other: Var<'t, T>, op: Binary) -> Result<Var<'t, T>> {
        let a = self.value();
        let b = other.value();
        let (sa, sb) = (is_scalar(a.shape()), is_scalar(b.shape()));
        let out_shape = if a.shape() == b.shape() {
            a.shape().to_vec()
        } else if sa {
            b.shape().to_vec()
        } else if sb {
            a.shape().to_vec()
        } else {
            return Err(Error::dim(op.name(), a.shape(), b.shape()));
        };
        let n: usize = out_shape.iter().product();
        let (ad, bd) = (a.data(), b.data());
        let at = |i: usize| if sa { ad[0] } else { ad[i] };
        let bt = |i: usize| if sb { bd[0] } else { bd[i] };
        let out = Tensor::from_parts(out_shape, (0..n).map(|i| op.apply(at(i), bt(i))).collect());
        let (a_scalar, b_scalar) = (sa && !sb, sb && !sa);
        Ok(self
            .tape
            .push(out, &[self, other], move |ctx: &BackwardCtx<'_, T>| {
                let g = ctx.grad;
                let (x, y) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                let xi = |i: usize| if a_scalar { x[0] } else { x[i] };
                let yi = |i: usize| if b_scalar { y[0] } else { y[i] };
                let ga = ctx.needs[0].then(|| {
                    let v = match op {
                        Binary::Add | Binary::Sub => g.to_vec(),
                        Binary::Mul => g.iter().enumerate().map(|(i, &gi)| gi * yi(i)).collect(),
                    };
                    reduce_to_scalar(v, a_scalar)
                });
                let gb = ctx.needs[1].then(|| {
                    let v = match op {
                        Binary::Add => g.to_vec(),
                        Binary::Sub => g.iter().map(|&gi| -gi).collect(),
                        Binary::Mul => g.iter().enumerate().map(|(i, &gi)| gi * xi(i)).collect(),
                    };
                    reduce_to_scalar(v, b_scalar)
                });
                vec![ga, gb]
            }))
    }

    /// Elementwise sum; a rank-0 operand broadcasts.
    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, Binary::Add)
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, Binary::Sub)
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, Binary::Mul)
    }

    /// Multiplication by a constant.
    pub fn scale(self, c: T) -> Var<'t, T> {
        let out = self.value().map(|v| v * c);
        self.tape.push(out, &[self], move |ctx| {
            vec![ctx.needs[0].then(|| ctx.grad.iter().map(|&g| g * c).collect())]
        })
    }

    pub fn add_scalar(self, c: T) -> Var<'t, T> {
        let out = self.value().map(|v| v + c);
        self.tape.push(out, &[self], |ctx| {
            vec![ctx.needs[0].then(|| ctx.grad.to_vec())]
        })
    }

    pub fn neg(self) -> Var<'t, T> {
        self.scale(-T::one())
    }

    pub(crate) fn unary(self, op: Unary) -> Var<'t, T> {
        let out = self.value().map(|v| op.apply(v));
        self.tape.push(out, &[self], move |ctx| {
            let (x, y) = (ctx.inputs[0].data(), ctx.output.data());
            vec![ctx.needs[0].then(|| {
                ctx.grad
                    .iter()
                    .zip(x.iter().zip(y))
                    .map(|(&g, (&xi, &yi))| g * op.derivative(xi, yi))
                    .collect()
            })]
        })
    }

    pub fn exp(self) -> Var<'t, T> {
        self.unary(Unary::Exp)
    }

    pub fn softplus(self) -> Var<'t, T> {
        self.unary(Unary::Softplus)
    }

    pub fn silu(self) -> Var<'t, T> {
        self.unary(Unary::Silu)
    }

    pub fn gelu(self) -> Var<'t, T> {
        self.unary(Unary::Gelu)
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        self.unary(Unary::Sigmoid)
    }

    pub fn square(self) -> Var<'t, T> {
        self.unary(Unary::Square)
    }

    /// Sum of all elements as a rank-0 value.
    pub fn sum(self) -> Var<'t, T> {
        let out = Tensor::scalar(self.value().sum());
        self.tape.push(out, &[self], |ctx| {
            let n = ctx.inputs[0].numel();
            vec![ctx.needs[0].then(|| vec![ctx.grad[0]; n])]
        })
    }

    pub fn mean(self) -> Var<'t, T> {
        let n = self.numel().max(1);
        self.sum().scale(T::one() / cst::<T>(n as f64))
    }

    /// `self[..., j] + v[j]` where `v` has the extent of the last axis.
    pub fn add_last(self, v: Var<'t, T>) -> Result<Var<'t, T>> {
        self.last_axis(v, Binary::Add)
    }

    /// `self[..., j] · v[j]` where `v` has the extent of the last axis.
    pub fn mul_last(self, v: Var<'t, T>) -> Result<Var<'t, T>> {
        self.last_axis(v, Binary::Mul)
    }

    fn last_axis(self, v: Var<'t, T>, op: Binary) -> Result<Var<'t, T>> {
        let (x, w) = (self.value(), v.value());
        let k = x.shape().last().copied().unwrap_or(0);
        if x.rank() == 0 || w.shape() != [k] {
            return Err(Error::dim(op.name(), x.shape(), w.shape()));
        }
        let wd = w.data();
        let out = Tensor::from_parts(
            x.shape().to_vec(),
            x.data()
                .iter()
                .enumerate()
                .map(|(i, &a)| op.apply(a, wd[i % k]))
                .collect(),
        );
        Ok(self.tape.push(out, &[self, v], move |ctx| {
            let (g, xd, wd) = (ctx.grad, ctx.inputs[0].data(), ctx.inputs[1].data());
            let gx = ctx.needs[0].then(|| match op {
                Binary::Mul => g
                    .iter()
                    .enumerate()
                    .map(|(i, &gi)| gi * wd[i % k])
                    .collect(),
                _ => g.to_vec(),
            });
            let gw = ctx.needs[1].then(|| {
                let mut gw = vec![T::zero(); k];
                for (i, &gi) in g.iter().enumerate() {
                    gw[i % k] += match op {
                        Binary::Mul => gi * xd[i],
                        _ => gi,
                    };
                }
                gw
            });
            vec![gx, gw]
        }))
    }

    /// Multiplies slice `i` of the leading axis by the constant `factors[i]`.
    pub fn scale_leading(self, factors: &[T]) -> Result<Var<'t, T>> {
        let x = self.value();
        if x.rank() == 0 || x.shape()[0] != factors.len() {
            return Err(Error::dim("scale_leading", x.shape(), &[factors.len()]));
        }
        let inner = x.numel() / factors.len().max(1);
        let scale_by = move |data: &[T], factors: &[T]| -> Vec<T> {
            data.iter()
                .enumerate()
                .map(|(i, &v)| v * factors[i / inner])
                .collect()
        };
        let out = Tensor::from_parts(x.shape().to_vec(), scale_by(x.data(), factors));
        let factors = factors.to_vec();
        Ok(self.tape.push(out, &[self], move |ctx| {
            vec![ctx.needs[0].then(|| scale_by(ctx.grad, &factors))]
        }))
    }
}

#[cfg(test)]
mod tests {
    use crate::autodiff::Tape;
    use crate::tensor::Tensor;

    #[test]
    fn scalar_broadcast_gradient_sums() {
        let tape = Tape::<f64>::new();
        let s = tape.param(Tensor::scalar(2.0));
        let x = tape.param(Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap());
        let y = s.mul(x).unwrap().sum();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(s).item(), 6.0);
        assert_eq!(g.wrt(x).data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn mismatched_shapes_rejected() {
        let tape = Tape::<f64>::new();
        let a = tape.param(Tensor::zeros(&[2]));
        let b = tape.param(Tensor::zeros(&[3]));
        assert!(a.add(b).is_err());
    }

    #[test]
    fn linearity_of_gradients_is_exact() {
        // grad(f + g) = grad f + grad g for tape-disjoint f, g.
        let x0 = Tensor::from_f64(&[4], &[0.3, -1.2, 2.0, 0.7]).unwrap();
        let grad_of = |which: u8| {
            let tape = Tape::<f64>::new();
            let x = tape.param(x0.clone());
            let f = x.silu().sum();
            let g = x.exp().mul(x).unwrap().sum();
            let loss = match which {
                0 => f,
                1 => g,
                _ => f.add(g).unwrap(),
            };
            tape.backward(loss).unwrap().wrt(x)
        };
        let (gf, gg, gs) = (grad_of(0), grad_of(1), grad_of(2));
        for i in 0..4 {
            assert_eq!(
                gs.data()[i].to_bits(),
                (gf.data()[i] + gg.data()[i]).to_bits()
            );
        }
    }
}
