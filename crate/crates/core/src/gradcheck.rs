//! Central finite-difference verification of tape gradients.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Default for [`GradCheckOptions::floor`].
pub const ANALYTIC_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub h: f64,
    /// Check at most this many elements per leaf, chosen at random.
    pub max_per_leaf: Option<usize>,
    pub seed: u64,
    /// Elements whose analytic gradient is at most `floor · max(1, |f|)`
    /// are skipped. Central differences carry an absolute rounding error
    /// proportional to `ε·|f|/h`, so the relative error of much smaller
    /// elements measures the stencil rather than the gradient.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            max_per_leaf: None,
            seed: 0,
            floor: ANALYTIC_FLOOR,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (leaf, element) where `max_rel_err` occurred.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

/// Evaluates `f` on a fresh tape whose leaves are `leaves`.
fn eval<F>(f: &F, leaves: &[Tensor<f64>]) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = leaves.iter().map(|l| tape.constant(l.clone())).collect();
    let v = f(&tape, &vars)?.value();
    if v.numel() != 1 {
        return Err(Error::Validation(format!(
            "grad_check needs a scalar, got {:?}",
            v.shape()
        )));
    }
    let y = v.item();
    if !y.is_finite() {
        return Err(Error::Evaluation(format!("objective evaluated to {y}")));
    }
    Ok(y)
}

/// Worst relative error between tape gradients and central differences.
pub fn grad_check<F>(
    f: F,
    leaves: &[Tensor<f64>],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let (analytic, f0): (Vec<Tensor<f64>>, f64) = {
        let tape = Tape::new();
        let vars: Vec<_> = leaves.iter().map(|l| tape.param(l.clone())).collect();
        let loss = f(&tape, &vars)?;
        let y = loss.value();
        if y.numel() == 1 && !y.item().is_finite() {
            return Err(Error::Evaluation(format!(
                "objective evaluated to {}",
                y.item()
            )));
        }
        let f0 = if y.numel() == 1 { y.item() } else { 0.0 };
        let grads = tape.backward(loss)?;
        (vars.iter().map(|&v| grads.wrt(v)).collect(), f0)
    };
    let floor = opts.floor * f0.abs().max(1.0);

    let mut rng = Rng::new(opts.seed);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
    };
    let mut probe: Vec<Tensor<f64>> = leaves.to_vec();
    for (li, leaf) in leaves.iter().enumerate() {
        let n = leaf.numel();
        let indices: Vec<usize> = match opts.max_per_leaf {
            Some(k) if k < n => {
                let mut p = rng.permutation(n);
                p.truncate(k);
                p.sort_unstable();
                p
            }
            _ => (0..n).collect(),
        };
        for i in indices {
            let a = analytic[li].data()[i];
            if a.abs() <= floor {
                continue;
            }
            let x0 = leaf.data()[i];
            probe[li].data_mut()[i] = x0 + opts.h;
            let fp = eval(&f, &probe)?;
            probe[li].data_mut()[i] = x0 - opts.h;
            let fm = eval(&f, &probe)?;
            probe[li].data_mut()[i] = x0;
            let numeric = (fp - fm) / (2.0 * opts.h);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs());
            report.checked += 1;
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = rel;
                report.worst = Some((li, i));
            }
        }
    }
    Ok(report)
}
