use super::Var;
use crate::element::{cst, Element};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-row log-softmax of `[B, K]` logits.
fn log_softmax_rows<T: Element>(logits: &[T], k: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(k) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
        out.extend(row.iter().map(|&v| v - lse));
    }
    out
}

impl<'t, T: Element> Var<'t, T> {
    /// Mean cross-entropy of `[B, K]` logits against label-smoothed targets
    /// `(1 - eps) · onehot(label) + eps / K`.
    pub fn cross_entropy_smoothed(self, labels: &[usize], eps: f64) -> Result<Var<'t, T>> {
        let x = self.value();
        if x.rank() != 2 || x.shape()[0] != labels.len() {
            return Err(Error::dim("cross_entropy", x.shape(), &[labels.len()]));
        }
        if !(0.0..1.0).contains(&eps) {
            return Err(Error::Domain(format!(
                "label smoothing must be in [0, 1), got {eps}"
            )));
        }
        let (b, k) = (x.shape()[0], x.shape()[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Validation(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        let target = |row: usize, j: usize| -> T {
            let base = cst::<T>(eps / k as f64);
            if labels[row] == j {
                base + cst(1.0 - eps)
            } else {
                base
            }
        };
        let logp = log_softmax_rows(x.data(), k);
        let mut total = T::zero();
        for (i, row) in logp.chunks(k).enumerate() {
            for (j, &lp) in row.iter().enumerate() {
                total -= target(i, j) * lp;
            }
        }
        let inv_b = T::one() / cst::<T>(b.max(1) as f64);
        let out = Tensor::scalar(total * inv_b);
        let labels = labels.to_vec();
        Ok(self.tape.push(out, &[self], move |ctx| {
            vec![ctx.needs[0].then(|| {
                let g = ctx.grad[0] * inv_b;
                let base = cst::<T>(eps / k as f64);
                let mut dx = Vec::with_capacity(b * k);
                for (i, row) in logp.chunks(k).enumerate() {
                    for (j, &lp) in row.iter().enumerate() {
                        let t = if labels[i] == j {
                            base + cst(1.0 - eps)
                        } else {
                            base
                        };
                        dx.push(g * (lp.exp() - t));
                    }
                }
                dx
            })]
        }))
    }
}

#[cfg(test)]
mod tests {
    use crate::autodiff::Tape;
    use crate::tensor::Tensor;

    #[test]
    fn uniform_logits_give_log_k() {
        for eps in [0.0, 0.1, 0.5] {
            let tape = Tape::<f64>::new();
            let x = tape.param(Tensor::full(&[3, 10], 0.7));
            let l = x.cross_entropy_smoothed(&[0, 4, 9], eps).unwrap();
            assert!((l.value().item() - 10f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_smoothing_is_plain_cross_entropy() {
        let tape = Tape::<f64>::new();
        let logits = [1.0, 2.0, 0.5];
        let x = tape.param(Tensor::from_f64(&[1, 3], &logits).unwrap());
        let l = x.cross_entropy_smoothed(&[1], 0.0).unwrap().value().item();
        let lse = logits.iter().map(|v: &f64| v.exp()).sum::<f64>().ln();
        assert!((l - (lse - 2.0)).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_labels() {
        let tape = Tape::<f64>::new();
        let x = tape.param(Tensor::zeros(&[1, 3]));
        assert!(x.cross_entropy_smoothed(&[3], 0.1).is_err());
        assert!(x.cross_entropy_smoothed(&[0], 1.0).is_err());
    }
}
