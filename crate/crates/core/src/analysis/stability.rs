//! Activation-norm traces for training with and without `m`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::element::DType;
use crate::error::{Error, Result};
use crate::model::{Mixer, Model, ModelConfig};
use crate::rng::Rng;
use crate::train::{train_loop, DivergenceEvent, Splits, TrainConfig};

pub const TRACE_HEADER: &str = "with_m,epoch,step,stage,block,mean_norm,max_norm,train_loss";

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub epoch: usize,
    pub step: usize,
    pub stage: usize,
    pub block: usize,
    pub mean_norm: f64,
    pub max_norm: f64,
    pub train_loss: f64,
}

#[derive(Debug, Clone)]
pub struct StabilityTrace {
    pub with_m: bool,
    pub blocks: usize,
    pub rows: Vec<TraceRow>,
    pub diverged: Option<DivergenceEvent>,
}

impl StabilityTrace {
    pub fn logged_steps(&self) -> usize {
        self.rows.len() / self.blocks.max(1)
    }

    /// Every logged step carries one row per block.
    pub fn is_complete(&self, epochs: usize) -> bool {
        self.rows.len() == self.blocks * epochs
    }

    pub fn final_max_norm(&self) -> Option<f64> {
        let last = self.rows.last()?.epoch;
        self.rows
            .iter()
            .filter(|r| r.epoch == last)
            .map(|r| r.max_norm)
            .reduce(f64::max)
    }

    pub fn csv_lines(&self) -> Vec<String> {
        self.rows
            .iter()
            .map(|r| {
                format!(
                    "{},{},{},{},{},{},{},{}",
                    self.with_m,
                    r.epoch,
                    r.step,
                    r.stage,
                    r.block,
                    r.mean_norm,
                    r.max_norm,
                    r.train_loss
                )
            })
            .collect()
    }
}

/// Replaces every NC-SSD stage by its `m ≡ 1` counterpart.
pub fn without_m(cfg: &ModelConfig) -> ModelConfig {
    let mut c = cfg.clone();
    c.mixers = (0..c.num_stages())
        .map(|i| match c.mixer(i) {
            Mixer::Ncssd => Mixer::NcssdNoM,
            m => m,
        })
        .collect();
    c
}

/// Trains one arm and logs per-block norms after every epoch.
pub fn stability_probe(cfg: &TrainConfig, data: &Splits, with_m: bool) -> Result<StabilityTrace> {
    let mut cfg = cfg.clone();
    cfg.probe_norms = true;
    let base = cfg.model_config()?;
    let mcfg = if with_m { base } else { without_m(&base) };
    cfg.model = Some(mcfg.clone());
    let blocks = mcfg.total_blocks();
    let mut rng = Rng::new(cfg.seed);
    macro_rules! run {
        ($t:ty) => {{
            let (model, params) = Model::build::<$t>(&mcfg, &mut rng)?;
            let o = train_loop(&model, params, &cfg, data, None)?;
            (o.metrics, o.norms, o.diverged)
        }};
    }
    let (metrics, norms, diverged) = match cfg.dtype {
        DType::F32 => run!(f32),
        DType::F64 => run!(f64),
    };
    let mut rows = Vec::new();
    for (m, n) in metrics.iter().zip(&norms) {
        for &(stage, block, mean_norm, max_norm) in &n.blocks {
            rows.push(TraceRow {
                epoch: m.epoch,
                step: m.step,
                stage,
                block,
                mean_norm,
                max_norm,
                train_loss: m.train_loss,
            });
        }
    }
    Ok(StabilityTrace {
        with_m,
        blocks,
        rows,
        diverged,
    })
}

/// Writes the header and the rows of every trace.
pub fn write_traces(path: impl AsRef<Path>, traces: &[&StabilityTrace]) -> Result<()> {
    let mut text = format!("{TRACE_HEADER}\n");
    for t in traces {
        for l in t.csv_lines() {
            text.push_str(&l);
            text.push('\n');
        }
    }
    fs::write(path, text)?;
    Ok(())
}

fn arm(out: &mut String, name: &str, t: &StabilityTrace, epochs: usize) {
    let _ = writeln!(out, "## {name}");
    let _ = writeln!(out, "blocks: {}", t.blocks);
    let _ = writeln!(out, "logged epochs: {} of {epochs}", t.logged_steps());
    let _ = writeln!(out, "trace complete: {}", t.is_complete(epochs));
    match t.final_max_norm() {
        Some(v) => {
            let _ = writeln!(out, "final max activation norm: {v:.4}");
        }
        None => {
            let _ = writeln!(out, "final max activation norm: n/a");
        }
    }
    if let Some(last) = t.rows.last() {
        let _ = writeln!(out, "final train loss: {:.4}", last.train_loss);
    }
    match &t.diverged {
        Some(d) => {
            let _ = writeln!(
                out,
                "divergence: epoch {} step {}: {}",
                d.epoch, d.step, d.reason
            );
        }
        None => {
            let _ = writeln!(out, "divergence: none");
        }
    }
    let _ = writeln!(out);
}

/// Side-by-side summary of the two arms.
pub fn comparative_report(
    with_m: &StabilityTrace,
    no_m: &StabilityTrace,
    epochs: usize,
) -> Result<String> {
    if !with_m.with_m || no_m.with_m {
        return Err(Error::Validation(
            "expected one trace with m and one without".into(),
        ));
    }
    let mut out = String::from("# m ablation stability report\n\n");
    arm(&mut out, "with m", with_m, epochs);
    arm(&mut out, "m = 1", no_m, epochs);
    if let (Some(a), Some(b)) = (with_m.final_max_norm(), no_m.final_max_norm()) {
        let _ = writeln!(out, "max-norm ratio (m = 1 / with m): {:.4}", b / a);
    }
    Ok(out)
}
