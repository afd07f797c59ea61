//! Non-causal state space duality.
//!
//! Every token contributes `m_t · B_t x_tᵀ` to one global hidden state per
//! head and reads it back through `C_t`, so `Y = C (Bᵀ (X·m))`. The
//! per-sequence functions here are oracles; [`kernel`] holds the batched
//! versions recorded on the tape.

pub mod kernel;
pub mod route;

pub use route::{RouteKind, ScanRoute};

use crate::element::Element;
use crate::error::{Error, Result};
use crate::linalg::{gemm, MatMut, MatRef};
use crate::ops::softplus;
use crate::rng::Rng;
use crate::ssd::{check_shapes, Dims, SsdSequenceInputs};
use crate::tensor::Tensor;

/// Inputs of one sequence.
#[derive(Debug, Clone)]
pub struct NcssdInputs<T: Element> {
    /// `[L, Hd, P]`.
    pub x: Tensor<T>,
    /// `[L, N]`.
    pub b: Tensor<T>,
    /// `[L, N]`.
    pub c: Tensor<T>,
    /// `[L, Hd]`, positive token weights.
    pub m: Tensor<T>,
    /// Index each position had before any scan route was applied. Hidden
    /// state sums run in ascending origin order.
    pub origin: Vec<usize>,
}

/// One `[Hd, N, P]` state shared by all tokens.
#[derive(Debug, Clone)]
pub struct GlobalHiddenState<T: Element> {
    pub h: Tensor<T>,
}

/// Diagnostic switches.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct NcssdOptions {
    /// Adds the self term `m_t Z_t` back to each token's state.
    pub self_bias: bool,
}

impl<T: Element> NcssdInputs<T> {
    pub fn new(x: Tensor<T>, b: Tensor<T>, c: Tensor<T>, m: Tensor<T>) -> Result<Self> {
        let l = x.shape().first().copied().unwrap_or(0);
        let inp = Self {
            x,
            b,
            c,
            m,
            origin: (0..l).collect(),
        };
        inp.validate()?;
        Ok(inp)
    }

    pub fn validate(&self) -> Result<Dims> {
        let d = check_shapes(&self.x, &self.b, &self.c, &self.m, "ncssd")?;
        if let Some(v) = self.m.data().iter().find(|v| !(**v > T::zero())) {
            return Err(Error::Domain(format!(
                "token weight m must be positive, found {v}"
            )));
        }
        if self.origin.len() != d.l || ScanRoute::new(self.origin.clone()).is_err() {
            return Err(Error::Validation(
                "origin indices must be a permutation of the tokens".into(),
            ));
        }
        Ok(d)
    }

    /// Causal counterpart with `A = m`.
    pub fn to_causal(&self) -> Result<SsdSequenceInputs<T>> {
        SsdSequenceInputs::new(
            self.x.clone(),
            self.b.clone(),
            self.c.clone(),
            self.m.clone(),
        )
    }

    /// Positions sorted by origin index.
    fn canonical_order(&self) -> Vec<usize> {
        let mut pos = vec![0; self.origin.len()];
        for (t, &o) in self.origin.iter().enumerate() {
            pos[o] = t;
        }
        pos
    }
}

/// Random instance with `m` in `(0.05, 1)`.
pub fn random_inputs<T: Element>(dims: Dims, rng: &mut Rng) -> NcssdInputs<T> {
    let Dims { l, hd, p, n } = dims;
    NcssdInputs {
        x: Tensor::randn(&[l, hd, p], 1.0, rng),
        b: Tensor::randn(&[l, n], 1.0, rng),
        c: Tensor::randn(&[l, n], 1.0, rng),
        m: Tensor::uniform(&[l, hd], 0.05, 1.0, rng),
        origin: (0..l).collect(),
    }
}

/// `m_t B_t x_tᵀ` added into `acc` (`[N, P]`) for head `h`.
fn add_token<T: Element>(acc: &mut [T], inp: &NcssdInputs<T>, d: &Dims, t: usize, h: usize) {
    let Dims { hd, p, n, .. } = *d;
    let w = inp.m.data()[t * hd + h];
    let xt = &inp.x.data()[(t * hd + h) * p..][..p];
    for k in 0..n {
        let bk = w * inp.b.data()[t * n + k];
        for (a, &xv) in acc[k * p..(k + 1) * p].iter_mut().zip(xt) {
            *a += bk * xv;
        }
    }
}

/// Per-token states `h(t) = h(t−1) + m_t B_t x_tᵀ` in sequence order,
/// `[L, Hd, N, P]`.
pub fn ncssd_rewritten_recurrence<T: Element>(inp: &NcssdInputs<T>) -> Result<Tensor<T>> {
    let d = inp.validate()?;
    let Dims { l, hd, p, n } = d;
    let np = n * p;
    let mut out = vec![T::zero(); l * hd * np];
    for h in 0..hd {
        let mut state = vec![T::zero(); np];
        for t in 0..l {
            add_token(&mut state, inp, &d, t, h);
            out[(t * hd + h) * np..][..np].copy_from_slice(&state);
        }
    }
    Ok(Tensor::from_parts(vec![l, hd, n, p], out))
}

/// Sum of the two directional prefixes at 1-based token `i`, checked
/// against `Σ_j m_j Z_j + m_i Z_i`. Returns `[Hd, N, P]`.
pub fn bidir_hidden_identity<T: Element>(inp: &NcssdInputs<T>, i: usize) -> Result<Tensor<T>> {
    let d = inp.validate()?;
    let Dims { l, hd, p, n } = d;
    if i == 0 || i > l {
        return Err(Error::Validation(format!(
            "token index {i} outside 1..={l}"
        )));
    }
    let np = n * p;
    let mut both = vec![T::zero(); hd * np];
    let mut want = vec![T::zero(); hd * np];
    for h in 0..hd {
        let (mut fwd, mut bwd) = (vec![T::zero(); np], vec![T::zero(); np]);
        for t in 0..i {
            add_token(&mut fwd, inp, &d, t, h);
        }
        for t in (i - 1..l).rev() {
            add_token(&mut bwd, inp, &d, t, h);
        }
        let dst = &mut both[h * np..(h + 1) * np];
        for ((o, f), b) in dst.iter_mut().zip(&fwd).zip(&bwd) {
            *o = *f + *b;
        }
        let w = &mut want[h * np..(h + 1) * np];
        for t in 0..l {
            add_token(w, inp, &d, t, h);
        }
        add_token(w, inp, &d, i - 1, h);
    }
    let tol = crate::element::cst::<T>(1e-12);
    let worst = both
        .iter()
        .zip(&want)
        .map(|(a, b)| (*a - *b).abs())
        .fold(T::zero(), T::max);
    if !(worst <= tol) {
        return Err(Error::Consistency(format!(
            "bidirectional identity violated at token {i}: max diff {worst}"
        )));
    }
    Ok(Tensor::from_parts(vec![hd, n, p], both))
}

/// `H = Σ_j m_j B_j x_jᵀ` per head, summed in ascending origin order.
pub fn ncssd_hidden_state<T: Element>(inp: &NcssdInputs<T>) -> Result<GlobalHiddenState<T>> {
    let d = inp.validate()?;
    let Dims { hd, p, n, .. } = d;
    let np = n * p;
    let order = inp.canonical_order();
    let mut h = vec![T::zero(); hd * np];
    for head in 0..hd {
        let acc = &mut h[head * np..(head + 1) * np];
        for &t in &order {
            add_token(acc, inp, &d, t, head);
        }
    }
    Ok(GlobalHiddenState {
        h: Tensor::from_parts(vec![hd, n, p], h),
    })
}

/// Three explicit steps: expand `Z_t = B_t ⊗ x_t`, weight and sum into `H`,
/// read out `y_t = C_tᵀ H`.
pub fn ncssd_contraction<T: Element>(inp: &NcssdInputs<T>) -> Result<Tensor<T>> {
    let Dims { l, hd, p, n } = inp.validate()?;
    let (x, b, c, m) = (inp.x.data(), inp.b.data(), inp.c.data(), inp.m.data());
    let np = n * p;
    let mut z = vec![T::zero(); l * hd * np];
    for t in 0..l {
        for h in 0..hd {
            for k in 0..n {
                for q in 0..p {
                    z[((t * hd + h) * n + k) * p + q] = b[t * n + k] * x[(t * hd + h) * p + q];
                }
            }
        }
    }
    let mut hs = vec![T::zero(); hd * np];
    for &t in &inp.canonical_order() {
        for h in 0..hd {
            let w = m[t * hd + h];
            for (a, &zv) in hs[h * np..(h + 1) * np]
                .iter_mut()
                .zip(&z[(t * hd + h) * np..][..np])
            {
                *a += w * zv;
            }
        }
    }
    let mut y = vec![T::zero(); l * hd * p];
    for t in 0..l {
        for h in 0..hd {
            for q in 0..p {
                y[(t * hd + h) * p + q] =
                    (0..n).map(|k| c[t * n + k] * hs[(h * n + k) * p + q]).sum();
            }
        }
    }
    Ok(Tensor::from_parts(vec![l, hd, p], y))
}

/// `Y = C (Bᵀ (X·m))` as two matrix products per head.
pub fn ncssd_fused<T: Element>(inp: &NcssdInputs<T>) -> Result<Tensor<T>> {
    ncssd_fused_with(inp, NcssdOptions::default())
}

pub fn ncssd_fused_with<T: Element>(inp: &NcssdInputs<T>, opts: NcssdOptions) -> Result<Tensor<T>> {
    let Dims { l, hd, p, n } = inp.validate()?;
    let (x, b, c, m) = (inp.x.data(), inp.b.data(), inp.c.data(), inp.m.data());
    // Rows gathered in origin order so H never depends on the route.
    let order = inp.canonical_order();
    let bg: Vec<T> = order
        .iter()
        .flat_map(|&t| b[t * n..(t + 1) * n].iter().copied())
        .collect();
    let mut y = vec![T::zero(); l * hd * p];
    for h in 0..hd {
        let xm: Vec<T> = order
            .iter()
            .flat_map(|&t| {
                x[(t * hd + h) * p..][..p]
                    .iter()
                    .map(move |&v| v * m[t * hd + h])
            })
            .collect();
        let mut hs = vec![T::zero(); n * p];
        gemm(
            T::one(),
            MatRef::new(&bg, l, n).t(),
            MatRef::new(&xm, l, p),
            T::zero(),
            MatMut::new(&mut hs, n, p),
        );
        gemm(
            T::one(),
            MatRef::new(c, l, n),
            MatRef::new(&hs, n, p),
            T::zero(),
            MatMut::strided(&mut y[h * p..], l, p, hd * p, 1),
        );
    }
    if opts.self_bias {
        for t in 0..l {
            let cb: T = (0..n).map(|k| c[t * n + k] * b[t * n + k]).sum();
            for h in 0..hd {
                let w = cb * m[t * hd + h];
                for q in 0..p {
                    y[(t * hd + h) * p + q] += w * x[(t * hd + h) * p + q];
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![l, hd, p], y))
}

/// Parameters producing `m` from tokens.
#[derive(Debug, Clone)]
pub struct MParams<T: Element> {
    /// `[D, Hd]`.
    pub w_dt: Tensor<T>,
    /// `[Hd]`.
    pub b_dt: Tensor<T>,
    /// `[Hd]`.
    pub a_log: Tensor<T>,
}

/// `m_t = exp(−softplus(w_Δᵀ x_t + b_Δ) · exp(a_log))`, `[L, Hd]`.
pub fn compute_m<T: Element>(tokens: &Tensor<T>, p: &MParams<T>) -> Result<Tensor<T>> {
    let dt = crate::linalg::matmul(tokens, &p.w_dt)?;
    let hd = p.w_dt.shape()[1];
    if p.b_dt.shape() != [hd] || p.a_log.shape() != [hd] {
        return Err(Error::dim("compute_m", p.b_dt.shape(), p.a_log.shape()));
    }
    let (bd, al) = (p.b_dt.data(), p.a_log.data());
    Ok(Tensor::from_fn(dt.shape(), |i| {
        let h = i % hd;
        (-softplus(dt.data()[i] + bd[h]) * al[h].exp()).exp()
    }))
}

/// Reorders every per-token array along `r`.
pub fn apply_scan_route<T: Element>(inp: &NcssdInputs<T>, r: &ScanRoute) -> Result<NcssdInputs<T>> {
    let d = inp.validate()?;
    if r.len() != d.l {
        return Err(Error::Validation(format!(
            "route over {} tokens applied to {}",
            r.len(),
            d.l
        )));
    }
    Ok(NcssdInputs {
        x: r.apply(&inp.x, 0)?,
        b: r.apply(&inp.b, 0)?,
        c: r.apply(&inp.c, 0)?,
        m: r.apply(&inp.m, 0)?,
        origin: r.perm().iter().map(|&i| inp.origin[i]).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    fn two_tokens(m: [f64; 2]) -> NcssdInputs<f64> {
        NcssdInputs::new(
            t(&[2, 1, 1], &[1.0, 2.0]),
            t(&[2, 1], &[1.0, 1.0]),
            t(&[2, 1], &[1.0, 1.0]),
            t(&[2, 1], &m),
        )
        .unwrap()
    }

    #[test]
    fn hidden_state_examples() {
        assert_eq!(
            ncssd_hidden_state(&two_tokens([1.0, 1.0]))
                .unwrap()
                .h
                .data(),
            &[3.0]
        );
        assert_eq!(
            ncssd_hidden_state(&two_tokens([2.0, 1.0]))
                .unwrap()
                .h
                .data(),
            &[4.0]
        );
        assert_eq!(
            ncssd_contraction(&two_tokens([1.0, 1.0])).unwrap().data(),
            &[3.0, 3.0]
        );
        assert_eq!(
            ncssd_fused(&two_tokens([2.0, 1.0])).unwrap().data(),
            &[4.0, 4.0]
        );
    }

    #[test]
    fn recurrence_examples() {
        let inp = NcssdInputs::new(
            t(&[4, 1, 1], &[1.0, 2.0, 3.0, 4.0]),
            Tensor::ones(&[4, 1]),
            Tensor::ones(&[4, 1]),
            Tensor::ones(&[4, 1]),
        )
        .unwrap();
        assert_eq!(
            ncssd_rewritten_recurrence(&inp).unwrap().data(),
            &[1.0, 3.0, 6.0, 10.0]
        );
        let one = NcssdInputs::new(
            t(&[1, 1, 2], &[1.0, -2.0]),
            t(&[1, 2], &[3.0, 0.5]),
            t(&[1, 2], &[1.0, 1.0]),
            t(&[1, 1], &[0.5]),
        )
        .unwrap();
        // m B xᵀ = 0.5 · [3, 0.5]ᵀ [1, −2]
        assert_eq!(
            ncssd_rewritten_recurrence(&one).unwrap().data(),
            &[1.5, -3.0, 0.25, -0.5]
        );
    }

    #[test]
    fn bidirectional_example() {
        let inp = NcssdInputs::new(
            Tensor::ones(&[3, 1, 1]),
            Tensor::ones(&[3, 1]),
            Tensor::ones(&[3, 1]),
            t(&[3, 1], &[1.0, 2.0, 3.0]),
        )
        .unwrap();
        assert_eq!(bidir_hidden_identity(&inp, 2).unwrap().data(), &[8.0]);
        assert_eq!(bidir_hidden_identity(&inp, 1).unwrap().data(), &[7.0]);
        assert_eq!(bidir_hidden_identity(&inp, 3).unwrap().data(), &[9.0]);
        assert!(bidir_hidden_identity(&inp, 0).is_err());
        assert!(bidir_hidden_identity(&inp, 4).is_err());
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let mut rng = Rng::new(1);
        let mut inp = random_inputs::<f64>(
            Dims {
                l: 5,
                hd: 2,
                p: 3,
                n: 4,
            },
            &mut rng,
        );
        inp.x = Tensor::zeros(&[5, 2, 3]);
        assert!(ncssd_fused(&inp).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn self_bias_adds_own_contribution() {
        let inp = two_tokens([2.0, 1.0]);
        let y = ncssd_fused_with(&inp, NcssdOptions { self_bias: true }).unwrap();
        assert_eq!(y.data(), &[6.0, 6.0]);
    }

    #[test]
    fn m_examples() {
        let p = MParams {
            w_dt: Tensor::zeros(&[2, 1]),
            b_dt: t(&[1], &[-60.0]),
            a_log: t(&[1], &[0.0]),
        };
        let tokens = Tensor::ones(&[3, 2]);
        let m = compute_m(&tokens, &p).unwrap();
        assert!(m
            .data()
            .iter()
            .all(|&v| (1.0 - v).abs() < 1e-20 && v <= 1.0));
        // softplus(b) = ln 2 requires b = ln(e^{ln 2} − 1) = 0.
        let half = MParams {
            b_dt: t(&[1], &[0.0]),
            ..p
        };
        let m = compute_m(&tokens, &half).unwrap();
        assert!(m.data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn route_round_trip() {
        let mut rng = Rng::new(2);
        let inp = random_inputs::<f64>(
            Dims {
                l: 6,
                hd: 1,
                p: 2,
                n: 2,
            },
            &mut rng,
        );
        let id = apply_scan_route(&inp, &ScanRoute::identity(6)).unwrap();
        assert!(id.x.bitwise_eq(&inp.x) && id.m.bitwise_eq(&inp.m));
        let r = ScanRoute::random(6, &mut rng);
        let back = apply_scan_route(&apply_scan_route(&inp, &r).unwrap(), &r.inverse()).unwrap();
        assert!(
            back.x.bitwise_eq(&inp.x) && back.b.bitwise_eq(&inp.b) && back.c.bitwise_eq(&inp.c)
        );
        assert_eq!(back.origin, inp.origin);
        assert!(apply_scan_route(&inp, &ScanRoute::identity(5)).is_err());
    }

    #[test]
    fn non_positive_m_rejected() {
        let r = NcssdInputs::new(
            Tensor::<f64>::ones(&[1, 1, 1]),
            Tensor::ones(&[1, 1]),
            Tensor::ones(&[1, 1]),
            Tensor::zeros(&[1, 1]),
        );
        assert!(matches!(r, Err(Error::Domain(_))));
    }
}
