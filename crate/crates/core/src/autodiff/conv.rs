use super::Var;
use crate::element::Element;
use crate::error::Result;
use crate::ops::conv::{conv2d, conv2d_backward, dwconv2d, dwconv2d_backward};

impl<'t, T: Element> Var<'t, T> {
    /// Depthwise convolution of an NCHW input; see [`crate::ops::dwconv2d`].
    pub fn dwconv2d(
        self,
        w: Var<'t, T>,
        bias: Option<Var<'t, T>>,
        pad: usize,
    ) -> Result<Var<'t, T>> {
        let bv = bias.map(|b| b.value());
        let out = dwconv2d(&self.value(), &w.value(), bv.as_ref(), pad)?;
        let parents: Vec<Var<'t, T>> = [self, w].into_iter().chain(bias).collect();
        Ok(self.tape.push(out, &parents, move |ctx| {
            let (dx, dw, db) =
                dwconv2d_backward(ctx.inputs[0], ctx.inputs[1], ctx.grad, pad, ctx.needs[0])
                    .expect("shapes checked in forward");
            let mut grads = vec![dx, ctx.needs[1].then_some(dw)];
            if ctx.inputs.len() == 3 {
                grads.push(ctx.needs[2].then_some(db));
            }
            grads
        }))
    }

    /// Dense strided convolution of an NCHW input; see [`crate::ops::conv2d`].
    pub fn conv2d(
        self,
        w: Var<'t, T>,
        bias: Option<Var<'t, T>>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<'t, T>> {
        let bv = bias.map(|b| b.value());
        let out = conv2d(&self.value(), &w.value(), bv.as_ref(), stride, pad)?;
        let parents: Vec<Var<'t, T>> = [self, w].into_iter().chain(bias).collect();
        Ok(self.tape.push(out, &parents, move |ctx| {
            let (dx, dw, db) = conv2d_backward(
                ctx.inputs[0],
                ctx.inputs[1],
                ctx.grad,
                stride,
                pad,
                ctx.needs[0],
            )
            .expect("shapes checked in forward");
            let mut grads = vec![dx, ctx.needs[1].then_some(dw)];
            if ctx.inputs.len() == 3 {
                grads.push(ctx.needs[2].then_some(db));
            }
            grads
        }))
    }
}
