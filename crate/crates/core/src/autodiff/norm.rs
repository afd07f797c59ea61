use super::Var;
use crate::element::Element;
use crate::error::Result;
use crate::ops::norm::{layer_norm_backward, layer_norm_forward, softmax_backward, softmax_last};

impl<'t, T: Element> Var<'t, T> {
    /// Layer normalization over the last axis with affine parameters.
    pub fn layer_norm(self, gamma: Var<'t, T>, beta: Var<'t, T>, eps: T) -> Result<Var<'t, T>> {
        let (out, stats) = layer_norm_forward(&self.value(), &gamma.value(), &beta.value(), eps)?;
        Ok(self.tape.push(out, &[self, gamma, beta], move |ctx| {
            let (dx, dg, db) = layer_norm_backward(ctx.inputs[0], ctx.inputs[1], &stats, ctx.grad);
            vec![
                ctx.needs[0].then_some(dx),
                ctx.needs[1].then_some(dg),
                ctx.needs[2].then_some(db),
            ]
        }))
    }

    /// Softmax along the last axis.
    pub fn softmax_last(self) -> Result<Var<'t, T>> {
        let x = self.value();
        let c = *x.shape().last().unwrap_or(&1);
        let out = softmax_last(&x)?;
        Ok(self.tape.push(out, &[self], move |ctx| {
            vec![ctx.needs[0].then(|| softmax_backward(ctx.output.data(), ctx.grad, c.max(1)))]
        }))
    }
}
