//! Analytic parameter and operation counts.

use super::config::{Mixer, ModelConfig};
use crate::error::{Error, Result};

/// Counts for one configuration at one input resolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamFlopReport {
    pub params: u64,
    /// Multiply-accumulates of convolutions, linear layers and the mixer
    /// contractions.
    pub macs: u64,
    /// `2 · macs`.
    pub flops: u64,
    pub resolution: (usize, usize),
    /// Token-mixer multiply-accumulates per stage, projections included.
    pub mixer_macs: Vec<u64>,
}

impl ParamFlopReport {
    pub fn params_m(&self) -> f64 {
        self.params as f64 / 1e6
    }

    pub fn gmacs(&self) -> f64 {
        self.macs as f64 / 1e9
    }

    pub fn gflops(&self) -> f64 {
        self.flops as f64 / 1e9
    }
}

/// Counts at 224×224.
pub fn count_params_flops(cfg: &ModelConfig) -> Result<ParamFlopReport> {
    count_params_flops_at(cfg, 224, 224)
}

fn conv(c_in: u64, c_out: u64, hw: u64) -> (u64, u64) {
    (9 * c_in * c_out + c_out + 2 * c_out, 9 * c_in * c_out * hw)
}

pub fn count_params_flops_at(cfg: &ModelConfig, h: usize, w: usize) -> Result<ParamFlopReport> {
    cfg.validate()?;
    let stride = cfg.total_stride();
    if !h.is_multiple_of(stride) || !w.is_multiple_of(stride) {
        return Err(Error::Config(format!(
            "{h}×{w} is not divisible by the total stride {stride}"
        )));
    }
    let (mut gh, mut gw) = (h as u64 / 2, w as u64 / 2);
    let c0 = cfg.channels[0] as u64;
    let (mut params, mut macs) = conv(cfg.in_chans as u64, c0 / 2, gh * gw);
    gh /= 2;
    gw /= 2;
    let (p, m) = conv(c0 / 2, c0, gh * gw);
    params += p;
    macs += m;
    let n = cfg.state_dim as u64;
    let r = cfg.ffn_ratio as u64;
    let mut mixer_macs = Vec::new();
    for (i, s) in cfg.stages().into_iter().enumerate() {
        let c = s.channels as u64;
        if i > 0 {
            gh /= 2;
            gw /= 2;
            let (p, m) = conv(cfg.channels[i - 1] as u64, c, gh * gw);
            params += p;
            macs += m;
        }
        let l = gh * gw;
        let hd = s.heads as u64;
        let mut stage_mixer = 0;
        for _ in 0..s.blocks {
            if cfg.lpu {
                params += 2 * 10 * c;
                macs += 2 * 9 * c * l;
            }
            params += 2 * 2 * c;
            params += c * r * c + r * c + r * c * c + c;
            macs += 2 * r * c * c * l;
            let (p, m) = if s.mixer == Mixer::Msa {
                (4 * c * c + 4 * c, 4 * c * c * l + 2 * l * l * c)
            } else {
                let e = cfg.expand as u64 * c;
                let head_dim = e / hd;
                let inp = if cfg.gate { 2 * e } else { e };
                let p = inp * c + 10 * e + e * (2 * n + hd) + 2 * hd + e * c;
                let m =
                    (inp * c + 9 * e + e * (2 * n + hd) + e * c) * l + hd * 2 * l * n * head_dim;
                (p, m)
            };
            params += p;
            macs += m;
            stage_mixer += m;
        }
        mixer_macs.push(stage_mixer);
    }
    if cfg.num_classes > 0 {
        let c = *cfg.channels.last().unwrap() as u64;
        let k = cfg.num_classes as u64;
        params += 2 * c + c * k + k;
        macs += c * k;
    }
    Ok(ParamFlopReport {
        params,
        macs,
        flops: 2 * macs,
        resolution: (h, w),
        mixer_macs,
    })
}
