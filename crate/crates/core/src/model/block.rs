//! VSSD and attention blocks.

use super::config::Mixer;
use super::layers::{from_tokens, to_tokens, DwConv, Init, Linear, Norm};
use super::params::{Bound, ParamId};
use crate::autodiff::Var;
use crate::element::{cst, Element};
use crate::error::Result;
use crate::ncssd::kernel::{ncssd_contraction, ncssd_fused};
use crate::rng::Rng;
use crate::ssd::kernel::{bi_ssd_scan, ssd_scan};
use crate::tensor::Tensor;

/// Which NC-SSD evaluation the mixers use.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum NcssdForm {
    #[default]
    Fused,
    Contraction,
}

/// Per-block statistics collected during a forward pass.
#[derive(Debug, Clone)]
pub struct BlockRecord {
    pub stage: usize,
    pub block: usize,
    /// Mean and max over tokens of the per-token L2 norm of the block output.
    pub mean_norm: f64,
    pub max_norm: f64,
    /// `m` as `[B, L, Hd]` for SSD-family mixers, if requested.
    pub m: Option<Tensor<f64>>,
    pub grid: (usize, usize),
}

#[derive(Debug, Clone, Default)]
pub struct Probe {
    pub record_m: bool,
    pub blocks: Vec<BlockRecord>,
}

/// Forward-pass switches.
#[derive(Default)]
pub struct Forward<'a> {
    /// Enables stochastic depth, sampled from this generator.
    pub rng: Option<&'a mut Rng>,
    pub probe: Option<&'a mut Probe>,
    pub form: NcssdForm,
}

/// SSD-family mixer: gated state space kernel between two projections.
#[derive(Debug, Clone)]
pub struct SsdMixer {
    pub kind: Mixer,
    pub in_proj: Linear,
    pub conv: DwConv,
    pub x_proj: Linear,
    pub dt_bias: ParamId,
    pub a_log: ParamId,
    pub out_proj: Linear,
    pub heads: usize,
    pub inner: usize,
    pub state: usize,
    pub gate: bool,
}

/// Inverse of softplus.
fn inv_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

impl SsdMixer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Element>(
        init: &mut Init<'_, T>,
        name: &str,
        kind: Mixer,
        c: usize,
        heads: usize,
        expand: usize,
        state: usize,
        gate: bool,
    ) -> Self {
        let inner = expand * c;
        let in_proj = Linear::new(
            init,
            &format!("{name}.in_proj"),
            c,
            if gate { 2 * inner } else { inner },
            false,
        );
        let conv = DwConv::new(init, &format!("{name}.conv"), inner);
        let x_proj = Linear::new(
            init,
            &format!("{name}.x_proj"),
            inner,
            2 * state + heads,
            false,
        );
        let (lo, hi) = (0.001f64.ln(), 0.1f64.ln());
        let dt: Vec<f64> = (0..heads)
            .map(|_| init.rng.uniform_range(lo, hi).exp())
            .collect();
        let dt_bias = init.fixed(
            &format!("{name}.dt_bias"),
            Tensor::from_fn(&[heads], |h| cst(inv_softplus(dt[h]))),
        );
        let a: Vec<f64> = (0..heads)
            .map(|_| init.rng.uniform_range(1.0, 16.0))
            .collect();
        let a_log = init.fixed(
            &format!("{name}.a_log"),
            Tensor::from_fn(&[heads], |h| cst(a[h].ln())),
        );
        let out_proj = Linear::new(init, &format!("{name}.out_proj"), inner, c, false);
        Self {
            kind,
            in_proj,
            conv,
            x_proj,
            dt_bias,
            a_log,
            out_proj,
            heads,
            inner,
            state,
            gate,
        }
    }

    /// `u` is `[B, L, C]` on an `h × w` grid. Returns the mixer output and
    /// the token weights `m` `[B, L, Hd]`.
    pub fn forward<'t, T: Element>(
        &self,
        p: &Bound<'t, T>,
        u: Var<'t, T>,
        h: usize,
        w: usize,
        form: NcssdForm,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let s = u.shape();
        let (b, l) = (s[0], s[1]);
        let (e, n, hd) = (self.inner, self.state, self.heads);
        let xz = self.in_proj.forward(p, u)?;
        let xv = if self.gate { xz.narrow(2, 0, e)? } else { xz };
        let xc = from_tokens(xv, h, w)?;
        let xc = to_tokens(self.conv.forward(p, xc)?.silu())?;
        let proj = self.x_proj.forward(p, xc)?;
        let bm = proj.narrow(2, 0, n)?;
        let cm = proj.narrow(2, n, n)?;
        let dt = proj
            .narrow(2, 2 * n, hd)?
            .add_last(p.var(self.dt_bias))?
            .softplus();
        let m = dt.mul_last(p.var(self.a_log).exp())?.neg().exp();
        let x = xc.reshape(&[b, l, hd, e / hd])?;
        let y = match self.kind {
            Mixer::Ncssd => match form {
                NcssdForm::Fused => ncssd_fused(x, bm, cm, m)?,
                NcssdForm::Contraction => ncssd_contraction(x, bm, cm, m)?,
            },
            Mixer::NcssdNoM => {
                let ones = u.tape().constant(Tensor::ones(&[b, l, hd]));
                match form {
                    NcssdForm::Fused => ncssd_fused(x, bm, cm, ones)?,
                    NcssdForm::Contraction => ncssd_contraction(x, bm, cm, ones)?,
                }
            }
            Mixer::Ssd => ssd_scan(x, bm, cm, m)?,
            Mixer::BiSsd => bi_ssd_scan(x, bm, cm, m)?,
            Mixer::Msa => unreachable!("attention is not an SSD mixer"),
        };
        let mut y = y.reshape(&[b, l, e])?;
        if self.gate {
            y = y.mul(xz.narrow(2, e, e)?.silu())?;
        }
        Ok((self.out_proj.forward(p, y)?, m))
    }
}

/// Multi-head softmax self-attention without positional encoding.
#[derive(Debug, Clone)]
pub struct MsaMixer {
    pub qkv: Linear,
    pub proj: Linear,
    pub heads: usize,
}

impl MsaMixer {
    pub fn new<T: Element>(init: &mut Init<'_, T>, name: &str, c: usize, heads: usize) -> Self {
        Self {
            qkv: Linear::new(init, &format!("{name}.qkv"), c, 3 * c, true),
            proj: Linear::new(init, &format!("{name}.proj"), c, c, true),
            heads,
        }
    }

    /// Attention weights `[B·Hd, L, L]` and output `[B, L, C]`.
    pub fn attend<'t, T: Element>(
        &self,
        p: &Bound<'t, T>,
        u: Var<'t, T>,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let s = u.shape();
        let (b, l, c) = (s[0], s[1], s[2]);
        let (hd, dh) = (self.heads, c / self.heads);
        let qkv = self
            .qkv
            .forward(p, u)?
            .reshape(&[b, l, 3, hd, dh])?
            .permute(&[2, 0, 3, 1, 4])?;
        let pick =
            |i: usize| -> Result<Var<'t, T>> { qkv.narrow(0, i, 1)?.reshape(&[b * hd, l, dh]) };
        let (q, k, v) = (pick(0)?, pick(1)?, pick(2)?);
        let scale = cst::<T>(1.0 / (dh as f64).sqrt());
        let attn = q.bmm(k, false, true)?.scale(scale).softmax_last()?;
        let y = attn
            .bmm(v, false, false)?
            .reshape(&[b, hd, l, dh])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b, l, c])?;
        Ok((attn, self.proj.forward(p, y)?))
    }
}

#[derive(Debug, Clone)]
pub enum TokenMixer {
    Ssd(SsdMixer),
    Msa(MsaMixer),
}

/// `x₁ = x + LPU(x)`, `x₂ = x₁ + mixer(norm(x₁))`, `x₃ = x₂ + LPU(x₂)`,
/// `y = x₃ + FFN(norm(x₃))`.
#[derive(Debug, Clone)]
pub struct Block {
    pub lpu1: Option<DwConv>,
    pub norm1: Norm,
    pub mixer: TokenMixer,
    pub lpu2: Option<DwConv>,
    pub norm2: Norm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub drop_path: f64,
}

/// Stochastic depth on the leading axis.
fn drop_path<'t, T: Element>(
    x: Var<'t, T>,
    rate: f64,
    rng: Option<&mut Rng>,
) -> Result<Var<'t, T>> {
    match rng {
        Some(rng) if rate > 0.0 => {
            let keep = 1.0 - rate;
            let b = x.shape()[0];
            let f: Vec<T> = (0..b)
                .map(|_| {
                    if rng.bernoulli(keep) {
                        cst(1.0 / keep)
                    } else {
                        T::zero()
                    }
                })
                .collect();
            x.scale_leading(&f)
        }
        _ => Ok(x),
    }
}

impl Block {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Element>(
        init: &mut Init<'_, T>,
        name: &str,
        c: usize,
        heads: usize,
        kind: Mixer,
        cfg: &super::ModelConfig,
        drop_path: f64,
    ) -> Self {
        let lpu1 = cfg
            .lpu
            .then(|| DwConv::new(init, &format!("{name}.lpu1"), c));
        let norm1 = Norm::new(init, &format!("{name}.norm1"), c, cfg.norm_eps);
        let mixer = match kind {
            Mixer::Msa => TokenMixer::Msa(MsaMixer::new(init, &format!("{name}.attn"), c, heads)),
            _ => TokenMixer::Ssd(SsdMixer::new(
                init,
                &format!("{name}.mixer"),
                kind,
                c,
                heads,
                cfg.expand,
                cfg.state_dim,
                cfg.gate,
            )),
        };
        let lpu2 = cfg
            .lpu
            .then(|| DwConv::new(init, &format!("{name}.lpu2"), c));
        let norm2 = Norm::new(init, &format!("{name}.norm2"), c, cfg.norm_eps);
        let hidden = cfg.ffn_ratio * c;
        let fc1 = Linear::new(init, &format!("{name}.fc1"), c, hidden, true);
        let fc2 = Linear::new(init, &format!("{name}.fc2"), hidden, c, true);
        Self {
            lpu1,
            norm1,
            mixer,
            lpu2,
            norm2,
            fc1,
            fc2,
            drop_path,
        }
    }

    fn lpu<'t, T: Element>(
        lpu: &Option<DwConv>,
        p: &Bound<'t, T>,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        match lpu {
            Some(conv) => x.add(conv.forward(p, x)?),
            None => Ok(x),
        }
    }

    /// Mixer sub-block on tokens: returns `x + mixer(norm(x))` and `m`.
    pub fn mix<'t, T: Element>(
        &self,
        p: &Bound<'t, T>,
        tokens: Var<'t, T>,
        h: usize,
        w: usize,
        fwd: &mut Forward<'_>,
    ) -> Result<(Var<'t, T>, Option<Var<'t, T>>)> {
        let u = self.norm1.forward(p, tokens)?;
        let (y, m) = match &self.mixer {
            TokenMixer::Ssd(mx) => {
                let (y, m) = mx.forward(p, u, h, w, fwd.form)?;
                (y, Some(m))
            }
            TokenMixer::Msa(mx) => (mx.attend(p, u)?.1, None),
        };
        let y = drop_path(y, self.drop_path, fwd.rng.as_deref_mut())?;
        Ok((tokens.add(y)?, m))
    }

    /// `x` is `[B, C, H, W]`.
    pub fn forward<'t, T: Element>(
        &self,
        p: &Bound<'t, T>,
        x: Var<'t, T>,
        fwd: &mut Forward<'_>,
    ) -> Result<(Var<'t, T>, Option<Var<'t, T>>)> {
        let s = x.shape();
        let (h, w) = (s[2], s[3]);
        let x1 = Self::lpu(&self.lpu1, p, x)?;
        let (t2, m) = self.mix(p, to_tokens(x1)?, h, w, fwd)?;
        let x3 = Self::lpu(&self.lpu2, p, from_tokens(t2, h, w)?)?;
        let t3 = to_tokens(x3)?;
        let f = self.norm2.forward(p, t3)?;
        let f = self.fc2.forward(p, self.fc1.forward(p, f)?.gelu())?;
        let f = drop_path(f, self.drop_path, fwd.rng.as_deref_mut())?;
        Ok((from_tokens(t3.add(f)?, h, w)?, m))
    }

    /// Zeroes the residual depthwise paths and turns the mixer's inner
    /// convolution into the identity.
    pub fn zero_local_paths<T: Element>(&self, store: &mut super::ParamStore<T>) {
        for lpu in [&self.lpu1, &self.lpu2].into_iter().flatten() {
            lpu.set_delta(store, 0.0);
        }
        if let TokenMixer::Ssd(mx) = &self.mixer {
            mx.conv.set_delta(store, 1.0);
        }
    }
}
