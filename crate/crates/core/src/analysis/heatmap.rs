//! Spatial maps of the token weights `m`.

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::model::{Forward, Model, ParamStore, Probe};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct MHeatmap {
    /// Head-averaged `m` on the stage grid, `[h, w]`, values in (0, 1).
    pub raw: Tensor<f64>,
    /// `raw` min-max normalized to `[0, 1]`; all zeros when constant.
    pub grid: Tensor<f64>,
    /// 1-based stage.
    pub stage: usize,
    /// Block within the stage whose `m` is shown.
    pub block: usize,
}

/// Min-max normalization; a constant input maps to zeros.
pub fn min_max(t: &Tensor<f64>) -> Tensor<f64> {
    let lo = t.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = t.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        t.map(|v| (v - lo) / (hi - lo))
    } else {
        Tensor::zeros(t.shape())
    }
}

/// Heatmap of the last block of `stage` (1-based) for one `[C, H, W]` image.
pub fn m_heatmap<T: crate::Element>(
    model: &Model,
    params: &ParamStore<T>,
    image: &Tensor<T>,
    stage: usize,
) -> Result<MHeatmap> {
    if stage == 0 || stage > model.stages.len() {
        return Err(Error::Config(format!(
            "stage {stage} outside 1..={}",
            model.stages.len()
        )));
    }
    if !model.cfg.mixer(stage - 1).is_ssd_family() {
        return Err(Error::Config(format!(
            "stage {stage} uses attention and has no m"
        )));
    }
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::dim("heatmap image", &[0, 0, 0], s));
    }
    let tape = Tape::new();
    let b = params.bind(&tape, false);
    let mut probe = Probe {
        record_m: true,
        ..Probe::default()
    };
    let mut fwd = Forward {
        probe: Some(&mut probe),
        ..Forward::default()
    };
    let x = tape.constant(image.reshape(&[1, s[0], s[1], s[2]])?);
    model.forward_features(&b, x, stage - 1, &mut fwd)?;
    let rec = probe
        .blocks
        .iter()
        .rev()
        .find(|r| r.stage == stage - 1)
        .ok_or_else(|| Error::Config(format!("stage {stage} has no blocks")))?;
    let m = rec.m.as_ref().expect("SSD mixers record m");
    let (h, w) = rec.grid;
    let heads = m.shape()[2];
    let raw = Tensor::from_fn(&[h, w], |t| {
        m.data()[t * heads..(t + 1) * heads].iter().sum::<f64>() / heads as f64
    });
    Ok(MHeatmap {
        grid: min_max(&raw),
        raw,
        stage,
        block: rec.block,
    })
}

/// Bilinear resize of `[h, w]` to `[oh, ow]` with corner-aligned sampling:
/// output pixel `o` reads source coordinate `o · (h − 1) / (oh − 1)`. When
/// `oh − 1` is a multiple of `h − 1` every source value lands on an output
/// pixel, so the maximum and its cell are preserved.
pub fn bilinear_upsample(grid: &Tensor<f64>, oh: usize, ow: usize) -> Result<Tensor<f64>> {
    let s = grid.shape();
    if s.len() != 2 || s[0] == 0 || s[1] == 0 {
        return Err(Error::dim("bilinear_upsample", &[0, 0], s));
    }
    let (h, w) = (s[0], s[1]);
    let src = |o: usize, out: usize, inp: usize| -> (usize, usize, f64) {
        let p = if out > 1 {
            (o * (inp - 1)) as f64 / (out - 1) as f64
        } else {
            0.0
        };
        let i0 = p.floor() as usize;
        let i1 = (i0 + 1).min(inp - 1);
        (i0, i1, p - i0 as f64)
    };
    let d = grid.data();
    Ok(Tensor::from_fn(&[oh, ow], |k| {
        let (y0, y1, fy) = src(k / ow, oh, h);
        let (x0, x1, fx) = src(k % ow, ow, w);
        let top = d[y0 * w + x0] * (1.0 - fx) + d[y0 * w + x1] * fx;
        let bot = d[y1 * w + x0] * (1.0 - fx) + d[y1 * w + x1] * fx;
        top * (1.0 - fy) + bot * fy
    }))
}

/// Row-major index of the first maximum.
pub fn argmax(t: &Tensor<f64>) -> usize {
    let d = t.data();
    (0..d.len()).fold(0, |best, i| if d[i] > d[best] { i } else { best })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn min_max_range_and_constant_case() {
        let t = Tensor::from_f64(&[2, 2], &[0.2, 0.4, 0.3, 0.6]).unwrap();
        let n = min_max(&t);
        assert_eq!(n.data()[0], 0.0);
        assert_eq!(n.data()[3], 1.0);
        assert!(min_max(&Tensor::full(&[2, 2], 0.5))
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn upsample_on_the_node_lattice_preserves_argmax() {
        let mut rng = Rng::new(3);
        for _ in 0..50 {
            let (h, w, s) = (2 + rng.below(6), 2 + rng.below(6), 2 + rng.below(4));
            let g = Tensor::uniform(&[h, w], 0.0, 1.0, &mut rng);
            let (oh, ow) = ((h - 1) * s + 1, (w - 1) * s + 1);
            let up = bilinear_upsample(&g, oh, ow).unwrap();
            let k = argmax(&up);
            assert_eq!((k / ow) % s, 0);
            assert_eq!((k % ow) % s, 0);
            assert_eq!((k / ow / s) * w + (k % ow) / s, argmax(&g));
            assert_eq!(up.data()[k], g.data()[argmax(&g)]);
        }
    }

    #[test]
    fn upsample_of_constant_is_constant() {
        let up = bilinear_upsample(&Tensor::full(&[3, 2], 0.7), 9, 8).unwrap();
        assert!(up.data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
    }
}
