//! Correctness suites behind the `check` command.
//!
//! Instance `i` of a run seeded with `s` draws from `Rng::new(s + i)`, so a
//! failing instance is reproduced as instance 0 of a run seeded with the
//! reported instance seed.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::gradcheck::{grad_check, GradCheckOptions};
use crate::model::{Bound, Forward, Model, ModelConfig};
use crate::ncssd::{self, kernel as nck, NcssdInputs, RouteKind, ScanRoute};
use crate::rng::Rng;
use crate::ssd::{self, kernel as ssk, Dims, SsdSequenceInputs};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Suite {
    CausalEquivalence,
    Lti,
    Mask,
    NcssdForms,
    HiddenState,
    ScanRoute,
    Kernels,
    Gradient,
}

impl Suite {
    pub const ALL: [Suite; 8] = [
        Suite::CausalEquivalence,
        Suite::Lti,
        Suite::Mask,
        Suite::NcssdForms,
        Suite::HiddenState,
        Suite::ScanRoute,
        Suite::Kernels,
        Suite::Gradient,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::CausalEquivalence => "causal-equivalence",
            Suite::Lti => "lti",
            Suite::Mask => "mask",
            Suite::NcssdForms => "ncssd-forms",
            Suite::HiddenState => "hidden-state",
            Suite::ScanRoute => "scan-route",
            Suite::Kernels => "kernels",
            Suite::Gradient => "gradient",
        }
    }

    pub fn tolerance(self) -> f64 {
        match self {
            Suite::CausalEquivalence | Suite::Kernels => 1e-10,
            Suite::Lti | Suite::NcssdForms | Suite::HiddenState => 1e-12,
            // products taken in another order may differ in the last bit
            Suite::Mask => 1e-15,
            Suite::ScanRoute => 0.0,
            Suite::Gradient => 1e-5,
        }
    }

    pub fn default_instances(self) -> usize {
        match self {
            Suite::CausalEquivalence | Suite::NcssdForms => 200,
            Suite::HiddenState | Suite::Mask => 100,
            Suite::Lti | Suite::Kernels => 50,
            Suite::ScanRoute => 20,
            Suite::Gradient => 3,
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Suite::ALL.iter().map(|k| k.name()).collect();
                Error::Config(format!(
                    "unknown suite {s:?}; expected one of {}",
                    names.join(", ")
                ))
            })
    }
}

/// Test hooks that deliberately corrupt a computation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Negates mask entry (1, 0) of the first head before validation.
    FlipMaskSign,
}

#[derive(Debug, Clone, Default)]
pub struct CheckOptions {
    pub seed: u64,
    /// Overrides every suite's instance count.
    pub instances: Option<usize>,
    pub fault: Option<Fault>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Failure {
    pub instance: usize,
    pub seed: u64,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub suite: Suite,
    pub passed: bool,
    pub worst: f64,
    pub tolerance: f64,
    pub instances: usize,
    pub failure: Option<Failure>,
    pub note: String,
    pub seconds: f64,
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<18} instances={:<4} worst={:.3e} tol={:.0e} time={:.2}s",
            if self.passed { "PASS" } else { "FAIL" },
            self.suite.name(),
            self.instances,
            self.worst,
            self.tolerance,
            self.seconds
        )?;
        if !self.note.is_empty() {
            write!(f, " ({})", self.note)?;
        }
        if let Some(x) = &self.failure {
            write!(
                f,
                "\n     instance {} seed {}: {}",
                x.instance, x.seed, x.detail
            )?;
        }
        Ok(())
    }
}

/// Outcome of one instance: its error measure, or an outright failure.
type Outcome = std::result::Result<f64, String>;

fn instance_rng(seed: u64) -> Rng {
    Rng::new(seed)
}

fn between(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    lo + rng.below(hi - lo + 1)
}

fn diff(a: &Tensor<f64>, b: &Tensor<f64>) -> std::result::Result<f64, String> {
    a.max_abs_diff(b).map_err(|e| e.to_string())
}

fn s<T>(r: Result<T>) -> std::result::Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn causal_equivalence(rng: &mut Rng) -> Outcome {
    let d = Dims {
        l: between(rng, 1, 64),
        hd: between(rng, 1, 3),
        p: between(rng, 1, 8),
        n: between(rng, 1, 16),
    };
    let inp = ssd::random_inputs::<f64>(d, rng);
    let rec = s(ssd::ssd_recurrent(&inp))?;
    let quad = s(ssd::ssd_quadratic(&inp))?;
    let mat = s(ssd::ssd_matrix_apply(&inp))?;
    Ok(diff(&rec, &quad)?.max(diff(&rec, &mat)?))
}

/// Constant `a`, `B`, `C` over time against the convolution with `K`.
fn lti(rng: &mut Rng) -> Outcome {
    let (l, n, p) = (between(rng, 1, 128), between(rng, 1, 8), between(rng, 1, 4));
    let a = rng.uniform_range(0.5, 1.0);
    let b: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
    let c: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
    let x = Tensor::randn(&[l, 1, p], 1.0, rng);
    let inp = s(SsdSequenceInputs::new(
        x.clone(),
        Tensor::from_fn(&[l, n], |i| b[i % n]),
        Tensor::from_fn(&[l, n], |i| c[i % n]),
        Tensor::full(&[l, 1], a),
    ))?;
    let y = s(ssd::ssd_recurrent(&inp))?;
    let k = s(ssd::lti_conv_kernel(a, &b, &c, l))?;
    let mut worst = 0.0f64;
    for q in 0..p {
        let xs: Vec<f64> = (0..l).map(|t| x.data()[t * p + q]).collect();
        for (t, v) in ssd::causal_conv(&xs, &k).into_iter().enumerate() {
            worst = worst.max((v - y.data()[t * p + q]).abs());
        }
    }
    Ok(worst)
}

fn mask(rng: &mut Rng, fault: Option<Fault>) -> Outcome {
    let (l, hd) = (between(rng, 2, 48), between(rng, 1, 3));
    let a: Tensor<f64> = Tensor::uniform(&[l, hd], 0.3, 1.0, rng);
    let mut masks = s(ssd::build_mask_m(&a))?;
    if fault == Some(Fault::FlipMaskSign) {
        let v = masks[0].values.data_mut();
        v[l] = -v[l];
    }
    let mut worst = 0.0f64;
    for (h, m) in masks.iter().enumerate() {
        let ah: Vec<f64> = (0..l).map(|t| a.data()[t * hd + h]).collect();
        m.validate(&ah).map_err(|e| format!("head {h}: {e}"))?;
        // independent recheck against the explicit products
        let v = m.values.data();
        for i in 0..l {
            for j in 0..i {
                let prod: f64 = ah[j + 1..=i].iter().product();
                worst = worst.max((v[i * l + j] - prod).abs());
            }
        }
    }
    Ok(worst)
}

fn random_nc(rng: &mut Rng, max_l: usize) -> NcssdInputs<f64> {
    let d = Dims {
        l: between(rng, 1, max_l),
        hd: between(rng, 1, 3),
        p: between(rng, 1, 8),
        n: between(rng, 1, 16),
    };
    ncssd::random_inputs(d, rng)
}

fn ncssd_forms(rng: &mut Rng) -> Outcome {
    let inp = random_nc(rng, 256);
    diff(
        &s(ncssd::ncssd_contraction(&inp))?,
        &s(ncssd::ncssd_fused(&inp))?,
    )
}

fn hidden_state(rng: &mut Rng) -> Outcome {
    let inp = random_nc(rng, 96);
    let Dims { l, hd, p, n } = s(inp.validate())?;
    let states = s(ncssd::ncssd_rewritten_recurrence(&inp))?;
    let last = s(s(states.narrow(0, l - 1, 1))?.reshape(&[hd, n, p]))?;
    let global = s(ncssd::ncssd_hidden_state(&inp))?.h;
    let mut worst = diff(&last, &global)?;
    for i in 1..=l {
        let both = s(ncssd::bidir_hidden_identity(&inp, i))?;
        // H + m_i Z_i
        let want = Tensor::from_fn(&[hd, n, p], |k| {
            let (h, kk, q) = (k / (n * p), (k / p) % n, k % p);
            let t = i - 1;
            global.data()[k]
                + inp.m.data()[t * hd + h]
                    * inp.b.data()[t * n + kk]
                    * inp.x.data()[(t * hd + h) * p + q]
        });
        worst = worst.max(diff(&both, &want)?);
    }
    Ok(worst)
}

/// NC-SSD diff under every route (must be exactly zero) and the smallest
/// causal diff over the non-identity routes (must be nonzero).
fn scan_route(rng: &mut Rng) -> std::result::Result<(f64, f64), String> {
    let (h, w) = (between(rng, 2, 8), between(rng, 2, 8));
    let d = Dims {
        l: h * w,
        hd: between(rng, 1, 3),
        p: between(rng, 1, 6),
        n: between(rng, 1, 8),
    };
    let inp = ncssd::random_inputs::<f64>(d, rng);
    let y = s(ncssd::ncssd_fused(&inp))?;
    let yc = s(ncssd::ncssd_contraction(&inp))?;
    let hs = s(ncssd::ncssd_hidden_state(&inp))?.h;
    let causal = s(ssd::ssd_recurrent(&s(inp.to_causal())?))?;
    let (mut nc_worst, mut causal_min) = (0.0f64, f64::INFINITY);
    for kind in RouteKind::ALL {
        let r = ScanRoute::of_kind(kind, h, w, rng);
        let routed = s(ncssd::apply_scan_route(&inp, &r))?;
        let ry = s(ncssd::ncssd_fused(&routed))?;
        let ryc = s(ncssd::ncssd_contraction(&routed))?;
        let rh = s(ncssd::ncssd_hidden_state(&routed))?.h;
        let want = s(r.apply(&y, 0))?;
        let want_c = s(r.apply(&yc, 0))?;
        if !ry.bitwise_eq(&want) || !ryc.bitwise_eq(&want_c) || !rh.bitwise_eq(&hs) {
            let e = diff(&ry, &want)?
                .max(diff(&ryc, &want_c)?)
                .max(diff(&rh, &hs)?);
            return Err(format!(
                "route {kind}: NC-SSD not bitwise equivariant (max diff {e:e})"
            ));
        }
        nc_worst = nc_worst.max(diff(&ry, &want)?);
        if r.perm().iter().enumerate().any(|(t, &i)| t != i) {
            let rc = s(ssd::ssd_recurrent(&s(routed.to_causal())?))?;
            let dc = diff(&rc, &s(r.apply(&causal, 0))?)?;
            if dc == 0.0 {
                return Err(format!("route {kind}: causal SSD unexpectedly equivariant"));
            }
            causal_min = causal_min.min(dc);
        }
    }
    Ok((nc_worst, causal_min))
}

/// Batched tape kernels against the per-sequence oracles, two sequences per
/// batch.
fn kernels(rng: &mut Rng) -> Outcome {
    let d = Dims {
        l: between(rng, 1, 48),
        hd: between(rng, 1, 3),
        p: 2 * between(rng, 1, 4),
        n: between(rng, 1, 12),
    };
    let c0 = ssd::random_inputs::<f64>(d, rng);
    let c1 = ssd::random_inputs::<f64>(d, rng);
    let n0 = ncssd::random_inputs::<f64>(d, rng);
    let n1 = ncssd::random_inputs::<f64>(d, rng);
    let stack = |a: &Tensor<f64>, b: &Tensor<f64>| -> std::result::Result<Tensor<f64>, String> {
        let mut shape = vec![1];
        shape.extend_from_slice(a.shape());
        s(Tensor::concat(
            &[&s(a.reshape(&shape))?, &s(b.reshape(&shape))?],
            0,
        ))
    };
    let tape = Tape::new();
    let cst = |t: Tensor<f64>| tape.constant(t);
    let (x, b, c, a) = (
        cst(stack(&c0.x, &c1.x)?),
        cst(stack(&c0.b, &c1.b)?),
        cst(stack(&c0.c, &c1.c)?),
        cst(stack(&c0.a, &c1.a)?),
    );
    let want = stack(&s(ssd::ssd_recurrent(&c0))?, &s(ssd::ssd_recurrent(&c1))?)?;
    let mut worst = diff(&s(ssk::ssd_scan(x, b, c, a))?.value(), &want)?;
    let want = stack(&s(ssd::bi_ssd(&c0))?, &s(ssd::bi_ssd(&c1))?)?;
    worst = worst.max(diff(&s(ssk::bi_ssd_scan(x, b, c, a))?.value(), &want)?);
    let (x, b, c, m) = (
        cst(stack(&n0.x, &n1.x)?),
        cst(stack(&n0.b, &n1.b)?),
        cst(stack(&n0.c, &n1.c)?),
        cst(stack(&n0.m, &n1.m)?),
    );
    let want = stack(&s(ncssd::ncssd_fused(&n0))?, &s(ncssd::ncssd_fused(&n1))?)?;
    worst = worst.max(diff(&s(nck::ncssd_fused(x, b, c, m))?.value(), &want)?);
    worst = worst.max(diff(
        &s(nck::ncssd_contraction(x, b, c, m))?.value(),
        &want,
    )?);
    Ok(worst)
}

fn gradient_config(classes: usize) -> ModelConfig {
    ModelConfig {
        blocks: vec![1, 1],
        channels: vec![8, 16],
        heads: vec![2, 4],
        state_dim: 4,
        num_classes: classes,
        ..ModelConfig::reduced(classes)
    }
}

/// Instance 0: the fused kernel; 1: one VSSD block; 2: the smoothed loss of
/// a reduced model. Later instances cycle with fresh draws.
fn gradient(rng: &mut Rng, which: usize) -> Outcome {
    let opts = GradCheckOptions {
        h: 1e-5,
        max_per_leaf: Some(6),
        seed: rng.next_u64(),
        // keeps the rounding error of the stencil well below the tolerance
        floor: 1e-5,
    };
    let r = match which % 3 {
        0 => {
            let (bt, l, hd, p, n) = (2, between(rng, 2, 12), 2, 3, 4);
            let leaves = vec![
                Tensor::randn(&[bt, l, hd, p], 1.0, rng),
                Tensor::randn(&[bt, l, n], 1.0, rng),
                Tensor::randn(&[bt, l, n], 1.0, rng),
                Tensor::uniform(&[bt, l, hd], 0.05, 1.0, rng),
            ];
            grad_check(
                |_, v| Ok(nck::ncssd_fused(v[0], v[1], v[2], v[3])?.square().sum()),
                &leaves,
                &GradCheckOptions {
                    max_per_leaf: None,
                    ..opts
                },
            )
        }
        1 => {
            let cfg = gradient_config(2);
            let (model, params) = s(Model::build::<f64>(&cfg, rng))?;
            let block = &model.stages[0].blocks[0];
            let mut leaves = params.values().to_vec();
            leaves.push(Tensor::randn(&[2, 8, 4, 4], 1.0, rng));
            let k = params.len();
            grad_check(
                |_, v| {
                    let b = Bound::from_vars(v[..k].to_vec());
                    let (y, _) = block.forward(&b, v[k], &mut Forward::default())?;
                    Ok(y.square().sum())
                },
                &leaves,
                &opts,
            )
        }
        _ => {
            let cfg = gradient_config(3);
            let (model, params) = s(Model::build::<f64>(&cfg, rng))?;
            let mut leaves = params.values().to_vec();
            leaves.push(Tensor::randn(&[2, 3, 16, 16], 1.0, rng));
            let labels = [rng.below(3), rng.below(3)];
            let k = params.len();
            grad_check(
                |_, v| {
                    let b = Bound::from_vars(v[..k].to_vec());
                    let logits = model.forward(&b, v[k], &mut Forward::default())?;
                    logits.cross_entropy_smoothed(&labels, 0.1)
                },
                &leaves,
                &opts,
            )
        }
    };
    Ok(s(r)?.max_rel_err)
}

/// Runs one suite.
pub fn run_suite(suite: Suite, opts: &CheckOptions) -> SuiteReport {
    let start = Instant::now();
    let count = opts.instances.unwrap_or(suite.default_instances());
    let tol = suite.tolerance();
    let mut worst = 0.0f64;
    let mut failure = None;
    let mut causal_min = f64::INFINITY;
    for i in 0..count {
        let seed = opts.seed.wrapping_add(i as u64);
        let mut rng = instance_rng(seed);
        let outcome = match suite {
            Suite::CausalEquivalence => causal_equivalence(&mut rng),
            Suite::Lti => lti(&mut rng),
            Suite::Mask => mask(&mut rng, opts.fault),
            Suite::NcssdForms => ncssd_forms(&mut rng),
            Suite::HiddenState => hidden_state(&mut rng),
            Suite::ScanRoute => scan_route(&mut rng).map(|(nc, c)| {
                causal_min = causal_min.min(c);
                nc
            }),
            Suite::Kernels => kernels(&mut rng),
            Suite::Gradient => gradient(&mut rng, i),
        };
        let err = match outcome {
            Ok(e) if e.is_nan() => Err("error measure is NaN".to_string()),
            Ok(e) if e > tol => Err(format!("error {e:e} exceeds {tol:e}")),
            other => other,
        };
        match err {
            Ok(e) => worst = worst.max(e),
            Err(detail) => {
                failure = Some(Failure {
                    instance: i,
                    seed,
                    detail,
                });
                break;
            }
        }
    }
    let note = match suite {
        Suite::ScanRoute if causal_min.is_finite() => {
            format!("smallest causal diff {causal_min:.3e}")
        }
        _ => String::new(),
    };
    SuiteReport {
        suite,
        passed: failure.is_none(),
        worst,
        tolerance: tol,
        instances: count,
        failure,
        note,
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// Runs `suites`, or all of them when empty.
pub fn run_checks(suites: &[Suite], opts: &CheckOptions) -> Vec<SuiteReport> {
    let list: &[Suite] = if suites.is_empty() {
        &Suite::ALL
    } else {
        suites
    };
    list.iter().map(|&k| run_suite(k, opts)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(seed: u64) -> CheckOptions {
        CheckOptions {
            seed,
            instances: Some(5),
            fault: None,
        }
    }

    #[test]
    fn names_round_trip() {
        for k in Suite::ALL {
            assert_eq!(k.name().parse::<Suite>().unwrap(), k);
        }
        assert!("nope".parse::<Suite>().is_err());
    }

    #[test]
    fn flipped_mask_entry_fails_the_mask_suite() {
        let ok = run_suite(Suite::Mask, &quick(3));
        assert!(ok.passed, "{ok}");
        let bad = run_suite(
            Suite::Mask,
            &CheckOptions {
                fault: Some(Fault::FlipMaskSign),
                ..quick(3)
            },
        );
        assert!(!bad.passed);
        let f = bad.failure.unwrap();
        assert_eq!((f.instance, f.seed), (0, 3));
    }

    #[test]
    fn same_seed_same_worst_error() {
        let a = run_suite(Suite::NcssdForms, &quick(42));
        let b = run_suite(Suite::NcssdForms, &quick(42));
        assert!(a.passed);
        assert_eq!(a.worst.to_bits(), b.worst.to_bits());
    }
}
