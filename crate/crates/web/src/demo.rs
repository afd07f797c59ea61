use std::str::FromStr;

use vssd_core::analysis::erf::random_images;
use vssd_core::analysis::{erf_map, erf_model, DwConvStack};
use vssd_core::model::{Mixer, Model, ModelConfig};
use vssd_core::ncssd::{self, NcssdInputs, RouteKind, ScanRoute};
use vssd_core::ssd::{self, Dims, SsdSequenceInputs};
use vssd_core::{Result, Rng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErfKind {
    Ncssd,
    DwConv,
}

impl FromStr for ErfKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "ncssd" => Ok(ErfKind::Ncssd),
            "dwconv" => Ok(ErfKind::DwConv),
            _ => Err(format!("unknown ERF source {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MixKind {
    Causal,
    Ncssd,
}

impl FromStr for MixKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "causal" => Ok(MixKind::Causal),
            "ncssd" => Ok(MixKind::Ncssd),
            _ => Err(format!("unknown mixer {s:?}")),
        }
    }
}

/// Two NC-SSD stages with the local paths zeroed, or three stacked 3×3
/// depthwise convolutions.
pub fn erf_grid(kind: ErfKind, side: usize, seed: u64) -> Result<Vec<f64>> {
    let images = random_images(2, 3, side, seed);
    let map = match kind {
        ErfKind::Ncssd => {
            let cfg = ModelConfig {
                blocks: vec![1, 1],
                channels: vec![8, 16],
                heads: vec![2, 2],
                mixers: vec![Mixer::Ncssd, Mixer::Ncssd],
                state_dim: 4,
                num_classes: 0,
                ..ModelConfig::reduced(0)
            };
            let (model, mut params) = Model::build::<f64>(&cfg, &mut Rng::new(seed))?;
            model.zero_local_paths(&mut params);
            erf_model(&model, &params, &images, 1, None)?
        }
        ErfKind::DwConv => {
            let stack = DwConvStack::new(3, 3, &mut Rng::new(seed));
            erf_map(|t, x| stack.forward(t, x), &images, None)?
        }
    };
    Ok(map.grid.into_vec())
}

/// Recovers the mixing matrix column by column by feeding one-hot token
/// sequences through the oracle. Returns `|F|`.
pub fn mixing_matrix(kind: MixKind, len: usize, seed: u64) -> Result<Vec<f64>> {
    let mut rng = Rng::new(seed);
    let d = Dims {
        l: len,
        hd: 1,
        p: 1,
        n: 4,
    };
    let base = ncssd::random_inputs::<f64>(d, &mut rng);
    let mut f = vec![0.0; len * len];
    for j in 0..len {
        let x = Tensor::from_fn(&[len, 1, 1], |t| if t == j { 1.0 } else { 0.0 });
        let y = match kind {
            MixKind::Causal => ssd::ssd_recurrent(&SsdSequenceInputs::new(
                x,
                base.b.clone(),
                base.c.clone(),
                base.m.clone(),
            )?)?,
            MixKind::Ncssd => ncssd::ncssd_fused(&NcssdInputs::new(
                x,
                base.b.clone(),
                base.c.clone(),
                base.m.clone(),
            )?)?,
        };
        for (i, v) in y.data().iter().enumerate() {
            f[i * len + j] = v.abs();
        }
    }
    Ok(f)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RouteRow {
    pub route: &'static str,
    /// Max difference between the routed NC-SSD output and the routed
    /// reference output.
    pub ncssd_diff: f64,
    /// The same for the causal scan.
    pub causal_diff: f64,
}

pub fn route_consistency(h: usize, w: usize, seed: u64) -> Result<Vec<RouteRow>> {
    let mut rng = Rng::new(seed);
    let inp = ncssd::random_inputs::<f64>(
        Dims {
            l: h * w,
            hd: 2,
            p: 3,
            n: 4,
        },
        &mut rng,
    );
    let y = ncssd::ncssd_fused(&inp)?;
    let yc = ssd::ssd_recurrent(&inp.to_causal()?)?;
    RouteKind::ALL
        .iter()
        .map(|&kind| {
            let r = ScanRoute::of_kind(kind, h, w, &mut rng);
            let routed = ncssd::apply_scan_route(&inp, &r)?;
            Ok(RouteRow {
                route: kind.name(),
                ncssd_diff: ncssd::ncssd_fused(&routed)?.max_abs_diff(&r.apply(&y, 0)?)?,
                causal_diff: ssd::ssd_recurrent(&routed.to_causal()?)?
                    .max_abs_diff(&r.apply(&yc, 0)?)?,
            })
        })
        .collect()
}
