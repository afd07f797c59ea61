//! Causal state space duality: discretization, recurrence, masked quadratic
//! form, matrix form, time-invariant convolution and the split-direction
//! Bi-SSD variant.
//!
//! Everything here works on one sequence and serves as an oracle for the
//! batched kernels in [`kernel`].

pub mod kernel;

use crate::element::{cst, Element};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Continuous parameters before discretization.
#[derive(Debug, Clone)]
pub struct ContinuousParams<T: Element> {
    /// One negative scalar per head.
    pub a_ring: Vec<T>,
    /// `[L, N]`.
    pub b_ring: Tensor<T>,
    /// `[L, Hd]`, non-negative step sizes.
    pub delta: Tensor<T>,
}

/// Discretized inputs of one sequence.
#[derive(Debug, Clone)]
pub struct SsdSequenceInputs<T: Element> {
    /// `[L, Hd, P]`.
    pub x: Tensor<T>,
    /// `[L, N]`, shared by all heads.
    pub b: Tensor<T>,
    /// `[L, N]`, shared by all heads.
    pub c: Tensor<T>,
    /// `[L, Hd]`, decay per token and head.
    pub a: Tensor<T>,
}

/// Sizes of a sequence instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub l: usize,
    pub hd: usize,
    pub p: usize,
    pub n: usize,
}

impl<T: Element> SsdSequenceInputs<T> {
    pub fn new(x: Tensor<T>, b: Tensor<T>, c: Tensor<T>, a: Tensor<T>) -> Result<Self> {
        let inp = Self { x, b, c, a };
        inp.validate()?;
        Ok(inp)
    }

    /// Checks shapes and that every decay lies in `[0, 1]`.
    ///
    /// The endpoints are admitted so that the memoryless and accumulator
    /// limits can be evaluated.
    pub fn validate(&self) -> Result<Dims> {
        let d = check_shapes(&self.x, &self.b, &self.c, &self.a, "ssd")?;
        if let Some(v) = self
            .a
            .data()
            .iter()
            .find(|v| !(**v >= T::zero() && **v <= T::one()))
        {
            return Err(Error::Domain(format!(
                "decay A must lie in [0, 1], found {v}"
            )));
        }
        Ok(d)
    }

    pub fn dims(&self) -> Dims {
        Dims {
            l: self.x.shape()[0],
            hd: self.x.shape()[1],
            p: self.x.shape()[2],
            n: self.b.shape()[1],
        }
    }
}

/// Shape checks shared with the non-causal inputs; `a` is `[L, Hd]`.
pub(crate) fn check_shapes<T: Element>(
    x: &Tensor<T>,
    b: &Tensor<T>,
    c: &Tensor<T>,
    a: &Tensor<T>,
    op: &'static str,
) -> Result<Dims> {
    if x.rank() != 3 {
        return Err(Error::Validation(format!(
            "{op}: X must be [L, Hd, P], got {:?}",
            x.shape()
        )));
    }
    let (l, hd, p) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if l == 0 || hd == 0 || p == 0 {
        return Err(Error::Validation(format!(
            "{op}: empty extent in X {:?}",
            x.shape()
        )));
    }
    if b.rank() != 2 || b.shape()[0] != l || b.shape()[1] == 0 {
        return Err(Error::dim(op, x.shape(), b.shape()));
    }
    if c.shape() != b.shape() {
        return Err(Error::dim(op, b.shape(), c.shape()));
    }
    if a.shape() != [l, hd] {
        return Err(Error::dim(op, &[l, hd], a.shape()));
    }
    Ok(Dims {
        l,
        hd,
        p,
        n: b.shape()[1],
    })
}

/// Zero-order-hold discretization.
///
/// Returns `A = exp(Δ·Å)` as `[L, Hd]` and the discrete input matrix as
/// `[L, Hd, N]`. Because Δ varies per head while `B̊` is shared, the discrete
/// `B` carries a head axis. By default `B = Δ·B̊`; with `exact` set it is
/// `(exp(Δ·Å) − 1)/Å · B̊`, the unapproximated hold.
pub fn discretize_zoh<T: Element>(
    p: &ContinuousParams<T>,
    exact: bool,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let hd = p.a_ring.len();
    if p.b_ring.rank() != 2 || p.delta.rank() != 2 {
        return Err(Error::dim(
            "discretize_zoh",
            p.b_ring.shape(),
            p.delta.shape(),
        ));
    }
    let (l, n) = (p.b_ring.shape()[0], p.b_ring.shape()[1]);
    if p.delta.shape() != [l, hd] {
        return Err(Error::dim("discretize_zoh", &[l, hd], p.delta.shape()));
    }
    if let Some(a) = p.a_ring.iter().find(|a| !(**a < T::zero())) {
        return Err(Error::Domain(format!(
            "continuous A must be negative, found {a}"
        )));
    }
    if let Some(d) = p.delta.data().iter().find(|d| !(**d >= T::zero())) {
        return Err(Error::Domain(format!(
            "step size must be non-negative, found {d}"
        )));
    }
    let dl = p.delta.data();
    let a = Tensor::from_fn(&[l, hd], |i| (dl[i] * p.a_ring[i % hd]).exp());
    let br = p.b_ring.data();
    let b = Tensor::from_fn(&[l, hd, n], |i| {
        let (t, h, k) = (i / (hd * n), (i / n) % hd, i % n);
        let delta = dl[t * hd + h];
        let scale = if exact {
            let ar = p.a_ring[h];
            (delta * ar).exp_m1() / ar
        } else {
            delta
        };
        scale * br[t * n + k]
    });
    Ok((a, b))
}

/// `y(t) = C_t h(t)` with `h(t) = A_t h(t−1) + B_t x(t)`, evaluated
/// sequentially. Returns `[L, Hd, P]`.
pub fn ssd_recurrent<T: Element>(inp: &SsdSequenceInputs<T>) -> Result<Tensor<T>> {
    let Dims { l, hd, p, n } = inp.validate()?;
    let (x, b, c, a) = (inp.x.data(), inp.b.data(), inp.c.data(), inp.a.data());
    let mut y = vec![T::zero(); l * hd * p];
    let mut h = vec![T::zero(); n * p];
    for head in 0..hd {
        h.iter_mut().for_each(|v| *v = T::zero());
        for t in 0..l {
            let at = a[t * hd + head];
            let xt = &x[(t * hd + head) * p..][..p];
            for k in 0..n {
                let bk = b[t * n + k];
                for (hv, &xv) in h[k * p..(k + 1) * p].iter_mut().zip(xt) {
                    *hv = at * *hv + bk * xv;
                }
            }
            let yt = &mut y[(t * hd + head) * p..][..p];
            for k in 0..n {
                let ck = c[t * n + k];
                for (yv, &hv) in yt.iter_mut().zip(&h[k * p..(k + 1) * p]) {
                    *yv += ck * hv;
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![l, hd, p], y))
}

/// Lower-triangular decay mask of one head.
#[derive(Debug, Clone)]
pub struct CausalMaskM<T: Element> {
    /// `[L, L]`.
    pub values: Tensor<T>,
}

impl<T: Element> CausalMaskM<T> {
    /// Checks the structural invariants against the decays `a` of this head.
    pub fn validate(&self, a: &[T]) -> Result<()> {
        let l = a.len();
        if self.values.shape() != [l, l] {
            return Err(Error::dim("mask", self.values.shape(), &[l, l]));
        }
        let m = self.values.data();
        for i in 0..l {
            if m[i * l + i] != T::one() {
                return Err(Error::Consistency(format!(
                    "mask diagonal ({i},{i}) is {}",
                    m[i * l + i]
                )));
            }
            for j in i + 1..l {
                if m[i * l + j] != T::zero() {
                    return Err(Error::Consistency(format!(
                        "mask entry ({i},{j}) above the diagonal is nonzero"
                    )));
                }
            }
            for j in 0..i {
                let want = m[i * l + j + 1] * a[j + 1];
                if m[i * l + j] != want {
                    return Err(Error::Consistency(format!(
                        "mask entry ({i},{j}) is {} but M[{i},{}]·A[{}] is {want}",
                        m[i * l + j],
                        j + 1,
                        j + 1
                    )));
                }
            }
        }
        Ok(())
    }
}

fn head_decays<T: Element>(a: &Tensor<T>, head: usize) -> Vec<T> {
    let hd = a.shape()[1];
    a.data().iter().skip(head).step_by(hd).copied().collect()
}

/// One mask per head: `M[i, j] = A_{j+1} ⋯ A_i` for `i > j`, 1 on the
/// diagonal, 0 above. `a` is `[L, Hd]`.
pub fn build_mask_m<T: Element>(a: &Tensor<T>) -> Result<Vec<CausalMaskM<T>>> {
    if a.rank() != 2 {
        return Err(Error::Validation(format!(
            "decays must be [L, Hd], got {:?}",
            a.shape()
        )));
    }
    let (l, hd) = (a.shape()[0], a.shape()[1]);
    Ok((0..hd)
        .map(|head| {
            let ah = head_decays(a, head);
            let mut m = vec![T::zero(); l * l];
            for i in 0..l {
                m[i * l + i] = T::one();
                for j in (0..i).rev() {
                    m[i * l + j] = m[i * l + j + 1] * ah[j + 1];
                }
            }
            CausalMaskM {
                values: Tensor::from_parts(vec![l, l], m),
            }
        })
        .collect())
}

/// Applies per-head `[L, L]` mixing matrices to `X` (`[L, Hd, P]`).
fn apply_mixing<T: Element>(mats: &[Tensor<T>], x: &Tensor<T>) -> Tensor<T> {
    let (l, hd, p) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let xd = x.data();
    let mut y = vec![T::zero(); l * hd * p];
    for (head, f) in mats.iter().enumerate() {
        let f = f.data();
        for i in 0..l {
            let yi = &mut y[(i * hd + head) * p..][..p];
            for j in 0..l {
                let w = f[i * l + j];
                if w == T::zero() {
                    continue;
                }
                for (yv, &xv) in yi.iter_mut().zip(&xd[(j * hd + head) * p..][..p]) {
                    *yv += w * xv;
                }
            }
        }
    }
    Tensor::from_parts(vec![l, hd, p], y)
}

/// `Y = (M ⊙ C Bᵀ) X` per head.
pub fn ssd_quadratic<T: Element>(inp: &SsdSequenceInputs<T>) -> Result<Tensor<T>> {
    let Dims { l, n, .. } = inp.validate()?;
    let (b, c) = (inp.b.data(), inp.c.data());
    let mats: Vec<Tensor<T>> = build_mask_m(&inp.a)?
        .into_iter()
        .map(|mask| {
            let mut f = mask.values.into_vec();
            for i in 0..l {
                for j in 0..=i {
                    let cb: T = (0..n).map(|k| c[i * n + k] * b[j * n + k]).sum();
                    f[i * l + j] *= cb;
                }
            }
            Tensor::from_parts(vec![l, l], f)
        })
        .collect();
    Ok(apply_mixing(&mats, &inp.x))
}

/// Per-head transfer matrices `F[j, i] = C_jᵀ A_{j:i} B_i` for `i ≤ j`,
/// where `A_{j:i} = A_j ⋯ A_{i+1}`.
///
/// The decay products are accumulated independently of [`build_mask_m`].
pub fn ssd_matrix_form<T: Element>(inp: &SsdSequenceInputs<T>) -> Result<Vec<Tensor<T>>> {
    let Dims { l, hd, n, .. } = inp.validate()?;
    let (b, c) = (inp.b.data(), inp.c.data());
    Ok((0..hd)
        .map(|head| {
            let ah = head_decays(&inp.a, head);
            let mut f = vec![T::zero(); l * l];
            for i in 0..l {
                let mut decay = T::one();
                for j in i..l {
                    if j > i {
                        decay *= ah[j];
                    }
                    let cb: T = (0..n).map(|k| c[j * n + k] * b[i * n + k]).sum();
                    f[j * l + i] = cb * decay;
                }
            }
            Tensor::from_parts(vec![l, l], f)
        })
        .collect())
}

/// `y = F x` for the matrices of [`ssd_matrix_form`].
pub fn ssd_matrix_apply<T: Element>(inp: &SsdSequenceInputs<T>) -> Result<Tensor<T>> {
    let mats = ssd_matrix_form(inp)?;
    Ok(apply_mixing(&mats, &inp.x))
}

/// Convolution kernel `K = (CB, CAB, …, CA^{L−1}B)` of a time-invariant
/// system with scalar `a`.
pub fn lti_conv_kernel<T: Element>(a: T, b: &[T], c: &[T], l: usize) -> Result<Vec<T>> {
    if b.len() != c.len() {
        return Err(Error::dim("lti_conv_kernel", &[b.len()], &[c.len()]));
    }
    let cb: T = b.iter().zip(c).map(|(&x, &y)| x * y).sum();
    let mut k = Vec::with_capacity(l);
    let mut pow = T::one();
    for _ in 0..l {
        k.push(cb * pow);
        pow *= a;
    }
    Ok(k)
}

/// Causal convolution `y_t = Σ_{s ≤ t} K_{t−s} x_s`.
pub fn causal_conv<T: Element>(x: &[T], k: &[T]) -> Vec<T> {
    (0..x.len())
        .map(|t| {
            (0..=t)
                .map(|s| k.get(t - s).copied().unwrap_or_else(T::zero) * x[s])
                .sum()
        })
        .collect()
}

/// Reverses the token axis of every per-token array.
pub fn reverse_tokens<T: Element>(inp: &SsdSequenceInputs<T>) -> Result<SsdSequenceInputs<T>> {
    Ok(SsdSequenceInputs {
        x: inp.x.flip(0)?,
        b: inp.b.flip(0)?,
        c: inp.c.flip(0)?,
        a: inp.a.flip(0)?,
    })
}

/// Splits the head channels in two halves; the first is scanned forward,
/// the second over the reversed sequence with its output reversed back.
pub fn bi_ssd<T: Element>(inp: &SsdSequenceInputs<T>) -> Result<Tensor<T>> {
    let Dims { p, .. } = inp.validate()?;
    if p % 2 != 0 {
        return Err(Error::Unsupported(format!(
            "Bi-SSD needs an even head width, got {p}"
        )));
    }
    let half = p / 2;
    let fwd = SsdSequenceInputs {
        x: inp.x.narrow(2, 0, half)?,
        ..inp.clone()
    };
    let bwd = reverse_tokens(&SsdSequenceInputs {
        x: inp.x.narrow(2, half, half)?,
        ..inp.clone()
    })?;
    let yf = ssd_recurrent(&fwd)?;
    let yb = ssd_recurrent(&bwd)?.flip(0)?;
    Tensor::concat(&[&yf, &yb], 2)
}

/// Random causal instance with decays in `(lo, 1)`.
pub fn random_inputs<T: Element>(dims: Dims, rng: &mut crate::rng::Rng) -> SsdSequenceInputs<T> {
    let Dims { l, hd, p, n } = dims;
    SsdSequenceInputs {
        x: Tensor::randn(&[l, hd, p], 1.0, rng),
        b: Tensor::randn(&[l, n], 1.0, rng),
        c: Tensor::randn(&[l, n], 1.0, rng),
        a: Tensor::from_fn(&[l, hd], |_| cst(rng.uniform_range(0.5, 1.0))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    fn tiny() -> SsdSequenceInputs<f64> {
        SsdSequenceInputs::new(
            t(&[2, 1, 1], &[1.0, 2.0]),
            t(&[2, 1], &[1.0, 1.0]),
            t(&[2, 1], &[1.0, 1.0]),
            t(&[2, 1], &[0.9, 0.5]),
        )
        .unwrap()
    }

    #[test]
    fn zoh_values() {
        let p = ContinuousParams {
            a_ring: vec![-1.0],
            b_ring: t(&[3, 2], &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]),
            delta: t(&[3, 1], &[0.0, 2f64.ln(), 0.5]),
        };
        let (a, b) = discretize_zoh(&p, false).unwrap();
        assert_eq!(a.data()[0], 1.0);
        assert!((a.data()[1] - 0.5).abs() < 1e-15);
        assert_eq!(&b.data()[4..6], &[0.5, 1.0]);
        let (_, be) = discretize_zoh(&p, true).unwrap();
        // (e^{-ln 2} - 1) / -1 = 0.5
        assert!((be.data()[2] - 0.5).abs() < 1e-15);
        let bad = ContinuousParams {
            a_ring: vec![0.0],
            ..p
        };
        assert!(matches!(discretize_zoh(&bad, false), Err(Error::Domain(_))));
    }

    #[test]
    fn exact_hold_approaches_first_order_for_small_steps() {
        let p = ContinuousParams {
            a_ring: vec![-0.7],
            b_ring: t(&[1, 1], &[1.0]),
            delta: t(&[1, 1], &[1e-6]),
        };
        let (_, b0) = discretize_zoh(&p, false).unwrap();
        let (_, b1) = discretize_zoh(&p, true).unwrap();
        assert!((b0.data()[0] - b1.data()[0]).abs() < 1e-12);
    }

    #[test]
    fn hand_recurrence() {
        let y = ssd_recurrent(&tiny()).unwrap();
        assert_eq!(y.data(), &[1.0, 2.5]);
        let q = ssd_quadratic(&tiny()).unwrap();
        assert_eq!(q.data(), &[1.0, 2.5]);
    }

    #[test]
    fn accumulator_gives_prefix_sums() {
        let inp = SsdSequenceInputs::new(
            t(&[4, 1, 1], &[1.0, 2.0, 3.0, 4.0]),
            Tensor::ones(&[4, 1]),
            Tensor::ones(&[4, 1]),
            Tensor::ones(&[4, 1]),
        )
        .unwrap();
        assert_eq!(ssd_recurrent(&inp).unwrap().data(), &[1.0, 3.0, 6.0, 10.0]);
    }

    #[test]
    fn mask_example() {
        let a = t(&[3, 1], &[0.3, 0.5, 0.25]);
        let m = &build_mask_m(&a).unwrap()[0];
        assert_eq!(
            m.values.data(),
            &[1.0, 0.0, 0.0, 0.5, 1.0, 0.0, 0.125, 0.25, 1.0]
        );
        m.validate(&[0.3, 0.5, 0.25]).unwrap();
        let ones = &build_mask_m(&Tensor::<f64>::ones(&[3, 1])).unwrap()[0];
        assert_eq!(
            ones.values.data(),
            &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0]
        );
    }

    #[test]
    fn corrupted_mask_fails_validation() {
        let a = t(&[3, 1], &[0.3, 0.5, 0.25]);
        let mut m = build_mask_m(&a).unwrap().remove(0);
        m.values.data_mut()[3] = -0.5;
        assert!(matches!(
            m.validate(&[0.3, 0.5, 0.25]),
            Err(Error::Consistency(_))
        ));
    }

    #[test]
    fn single_token_forms_agree() {
        let mut rng = Rng::new(3);
        let inp = random_inputs::<f64>(
            Dims {
                l: 1,
                hd: 2,
                p: 4,
                n: 4,
            },
            &mut rng,
        );
        let r = ssd_recurrent(&inp).unwrap();
        let q = ssd_quadratic(&inp).unwrap();
        let f = ssd_matrix_form(&inp).unwrap();
        let cb: f64 = (0..4).map(|k| inp.b.data()[k] * inp.c.data()[k]).sum();
        assert_eq!(f[0].data(), &[cb]);
        for i in 0..8 {
            assert!((r.data()[i] - cb * inp.x.data()[i]).abs() < 1e-15);
            assert!((q.data()[i] - cb * inp.x.data()[i]).abs() < 1e-15);
        }
        assert!(bi_ssd(&inp).unwrap().max_abs_diff(&r).unwrap() < 1e-15);
    }

    #[test]
    fn lti_examples() {
        assert_eq!(
            lti_conv_kernel(0.5, &[1.0], &[1.0], 3).unwrap(),
            vec![1.0, 0.5, 0.25]
        );
        assert_eq!(
            lti_conv_kernel(0.0, &[2.0], &[3.0], 3).unwrap(),
            vec![6.0, 0.0, 0.0]
        );
    }

    #[test]
    fn odd_width_bi_ssd_is_unsupported() {
        let mut rng = Rng::new(4);
        let inp = random_inputs::<f64>(
            Dims {
                l: 3,
                hd: 1,
                p: 3,
                n: 2,
            },
            &mut rng,
        );
        assert!(matches!(bi_ssd(&inp), Err(Error::Unsupported(_))));
    }

    #[test]
    fn rejects_decay_outside_unit_interval() {
        let r = SsdSequenceInputs::new(
            Tensor::<f64>::ones(&[1, 1, 1]),
            Tensor::ones(&[1, 1]),
            Tensor::ones(&[1, 1]),
            Tensor::full(&[1, 1], 1.5),
        );
        assert!(matches!(r, Err(Error::Domain(_))));
    }
}
