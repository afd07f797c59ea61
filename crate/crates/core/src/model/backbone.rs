//! Four-stage hierarchical backbone.

use super::block::{Block, BlockRecord, Forward};
use super::config::ModelConfig;
use super::layers::{to_tokens, Conv, Init, Linear, Norm};
use super::params::{Bound, ParamStore};
use crate::autodiff::{Tape, Var};
use crate::element::Element;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// 3×3 stride-2 convolution followed by channel normalization.
#[derive(Debug, Clone)]
pub struct Downsample {
    pub conv: Conv,
    pub norm: Norm,
}

impl Downsample {
    fn new<T: Element>(
        init: &mut Init<'_, T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        eps: f64,
    ) -> Self {
        Self {
            conv: Conv::new(init, &format!("{name}.conv"), c_in, c_out, 3, 2),
            norm: Norm::new(init, &format!("{name}.norm"), c_out, eps),
        }
    }

    pub fn forward<'t, T: Element>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let s = x.shape();
        if !s[2].is_multiple_of(2) || !s[3].is_multiple_of(2) {
            return Err(Error::Config(format!(
                "downsampling needs even extents, got {}×{}",
                s[2], s[3]
            )));
        }
        self.norm.forward_nchw(p, self.conv.forward(p, x)?)
    }
}

#[derive(Debug, Clone)]
pub struct Stage {
    /// Present for every stage after the first.
    pub down: Option<Downsample>,
    pub blocks: Vec<Block>,
}

#[derive(Debug, Clone)]
pub struct Head {
    pub norm: Norm,
    pub fc: Linear,
}

/// Layer structure; parameter values live in a separate [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub stem: [Downsample; 2],
    pub stages: Vec<Stage>,
    pub head: Option<Head>,
}

impl Model {
    /// Builds the layers and draws initial parameters from `rng`.
    pub fn build<T: Element>(cfg: &ModelConfig, rng: &mut Rng) -> Result<(Model, ParamStore<T>)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init {
            store: &mut store,
            rng,
        };
        let eps = cfg.norm_eps;
        let c0 = cfg.channels[0];
        let stem = [
            Downsample::new(&mut init, "stem.0", cfg.in_chans, c0 / 2, eps),
            Downsample::new(&mut init, "stem.1", c0 / 2, c0, eps),
        ];
        let total = cfg.total_blocks();
        let mut index = 0;
        let mut stages = Vec::new();
        for (i, spec) in cfg.stages().into_iter().enumerate() {
            let down = (i > 0).then(|| {
                Downsample::new(
                    &mut init,
                    &format!("down.{i}"),
                    cfg.channels[i - 1],
                    spec.channels,
                    eps,
                )
            });
            let mut blocks = Vec::new();
            for j in 0..spec.blocks {
                let rate = if total > 1 {
                    cfg.drop_path * index as f64 / (total - 1) as f64
                } else {
                    0.0
                };
                let name = format!("stages.{i}.{j}");
                blocks.push(Block::new(
                    &mut init,
                    &name,
                    spec.channels,
                    spec.heads,
                    spec.mixer,
                    cfg,
                    rate,
                ));
                index += 1;
            }
            stages.push(Stage { down, blocks });
        }
        let head = (cfg.num_classes > 0).then(|| {
            let c = *cfg.channels.last().unwrap();
            Head {
                norm: Norm::new(&mut init, "head.norm", c, eps),
                fc: Linear::new(&mut init, "head.fc", c, cfg.num_classes, true),
            }
        });
        let model = Model {
            cfg: cfg.clone(),
            stem,
            stages,
            head,
        };
        Ok((model, store))
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1] != self.cfg.in_chans {
            return Err(Error::dim(
                "model input",
                &[0, self.cfg.in_chans, 0, 0],
                shape,
            ));
        }
        let s = self.cfg.total_stride();
        if !shape[2].is_multiple_of(s) || !shape[3].is_multiple_of(s) {
            return Err(Error::Config(format!(
                "input {}×{} is not divisible by the total stride {s}",
                shape[2], shape[3]
            )));
        }
        Ok(())
    }

    /// NCHW features after stage `last` (inclusive).
    pub fn forward_features<'t, T: Element>(
        &self,
        p: &Bound<'t, T>,
        x: Var<'t, T>,
        last: usize,
        fwd: &mut Forward<'_>,
    ) -> Result<Var<'t, T>> {
        self.check_input(&x.shape())?;
        if last >= self.stages.len() {
            return Err(Error::Config(format!(
                "stage {last} of {}",
                self.stages.len()
            )));
        }
        let mut x = x;
        for d in &self.stem {
            x = d.forward(p, x)?.gelu();
        }
        for (i, stage) in self.stages.iter().enumerate().take(last + 1) {
            if let Some(d) = &stage.down {
                x = d.forward(p, x)?;
            }
            for (j, block) in stage.blocks.iter().enumerate() {
                let (y, m) = block.forward(p, x, fwd)?;
                if let Some(probe) = fwd.probe.as_deref_mut() {
                    probe.blocks.push(record(
                        i,
                        j,
                        &y.value(),
                        m.map(|m| m.value()),
                        probe.record_m,
                    ));
                }
                x = y;
            }
        }
        Ok(x)
    }

    /// Logits `[B, K]`, or last-stage NCHW features when headless.
    pub fn forward<'t, T: Element>(
        &self,
        p: &Bound<'t, T>,
        x: Var<'t, T>,
        fwd: &mut Forward<'_>,
    ) -> Result<Var<'t, T>> {
        let f = self.forward_features(p, x, self.stages.len() - 1, fwd)?;
        match &self.head {
            None => Ok(f),
            Some(head) => {
                let pooled = to_tokens(f)?.mean_axis(1)?;
                head.fc.forward(p, head.norm.forward(p, pooled)?)
            }
        }
    }

    /// Evaluation-mode forward without gradients.
    pub fn infer<T: Element>(&self, params: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let p = params.bind(&tape, false);
        let input = tape.constant(x.clone());
        Ok(self.forward(&p, input, &mut Forward::default())?.value())
    }

    /// Zeroes every residual depthwise path and makes each mixer convolution
    /// the identity.
    pub fn zero_local_paths<T: Element>(&self, store: &mut ParamStore<T>) {
        for block in self.stages.iter().flat_map(|s| &s.blocks) {
            block.zero_local_paths(store);
        }
    }

    pub fn blocks(&self) -> impl Iterator<Item = &Block> {
        self.stages.iter().flat_map(|s| &s.blocks)
    }
}

fn record<T: Element>(
    stage: usize,
    block: usize,
    y: &Tensor<T>,
    m: Option<Tensor<T>>,
    keep_m: bool,
) -> BlockRecord {
    let s = y.shape();
    let (b, c, l) = (s[0], s[1], s[2] * s[3]);
    let d = y.data();
    let mut sq = vec![0.0f64; b * l];
    for bi in 0..b {
        for ci in 0..c {
            let row = &d[(bi * c + ci) * l..(bi * c + ci + 1) * l];
            for (acc, &v) in sq[bi * l..(bi + 1) * l].iter_mut().zip(row) {
                let v = v.to_f64().unwrap_or(f64::NAN);
                *acc += v * v;
            }
        }
    }
    let norms: Vec<f64> = sq.iter().map(|v| v.sqrt()).collect();
    let mean_norm = norms.iter().sum::<f64>() / norms.len() as f64;
    let max_norm = if norms.iter().any(|v| v.is_nan()) {
        f64::NAN
    } else {
        norms.iter().copied().fold(0.0, f64::max)
    };
    BlockRecord {
        stage,
        block,
        mean_norm,
        max_norm,
        m: if keep_m { m.map(|m| m.cast()) } else { None },
        grid: (s[2], s[3]),
    }
}
