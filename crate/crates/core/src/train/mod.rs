//! Supervised training: data, AdamW with cosine schedule, EMA, checkpoints
//! and divergence detection.

pub mod data;
pub mod optim;

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::element::{DType, Element};
use crate::error::{Error, Result};
use crate::model::{save_checkpoint, Forward, Model, ModelConfig, ParamStore, Probe};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub use data::{load_cifar10_binary, synthetic, Dataset, Splits, SyntheticSpec};
pub use optim::{cosine_schedule, ema_update, AdamW, AdamWConfig};

pub const METRICS_FILE: &str = "metrics.csv";
pub const METRICS_HEADER: &str = "epoch,step,lr,train_loss,val_acc,wall_seconds";
pub const STATUS_FILE: &str = "status.toml";

/// Where examples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Directory holding the CIFAR-10 binary batches; `dir` may be supplied
    /// on the command line instead.
    Cifar10Binary {
        #[serde(default)]
        dir: Option<PathBuf>,
        /// Keep only the first `train` / `val` examples.
        #[serde(default)]
        train: Option<usize>,
        #[serde(default)]
        val: Option<usize>,
    },
    Synthetic(SyntheticSpec),
}

impl DatasetSpec {
    pub fn load(&self) -> Result<Splits> {
        match self {
            DatasetSpec::Cifar10Binary { dir, train, val } => {
                let dir = dir
                    .as_ref()
                    .ok_or_else(|| Error::Config("cifar10-binary needs a data directory".into()))?;
                let mut s = load_cifar10_binary(dir)?;
                if let Some(n) = train {
                    s.train = s.train.take(*n);
                }
                if let Some(n) = val {
                    s.val = s.val.take(*n);
                }
                Ok(s)
            }
            DatasetSpec::Synthetic(spec) => synthetic(spec),
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            DatasetSpec::Cifar10Binary { .. } => 10,
            DatasetSpec::Synthetic(s) => s.classes,
        }
    }
}

fn default_betas() -> [f64; 2] {
    [0.9, 0.999]
}
fn default_eps() -> f64 {
    1e-8
}
fn default_wd() -> f64 {
    0.05
}
fn default_smoothing() -> f64 {
    0.1
}
fn default_true() -> bool {
    true
}
fn default_eval_batch() -> usize {
    256
}
fn default_dtype() -> DType {
    DType::F32
}

/// Training recipe; serialized as TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    /// Peak learning rate.
    pub lr: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default = "default_betas")]
    pub betas: [f64; 2],
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_smoothing")]
    pub label_smoothing: f64,
    #[serde(default)]
    pub ema_decay: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    /// Overrides the model's stochastic-depth rate when set.
    #[serde(default)]
    pub drop_path: Option<f64>,
    #[serde(default = "default_true")]
    pub hflip: bool,
    /// Write a checkpoint every this many epochs; 0 keeps only the final one.
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default = "default_eval_batch")]
    pub eval_batch_size: usize,
    #[serde(default = "default_dtype")]
    pub dtype: DType,
    /// Stop after this many optimizer steps.
    #[serde(default)]
    pub max_steps: Option<usize>,
    /// Record per-block activation norms on a fixed batch after every epoch.
    #[serde(default)]
    pub probe_norms: bool,
    /// Defaults to the reduced two-stage configuration.
    #[serde(default)]
    pub model: Option<ModelConfig>,
    pub dataset: DatasetSpec,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::Config(
                "epochs and batch sizes must be positive".into(),
            ));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::Config(format!(
                "warmup_epochs {} must be below epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!(
                "label_smoothing {} outside [0, 1)",
                self.label_smoothing
            )));
        }
        if self.betas.iter().any(|b| !(0.0..1.0).contains(b))
            || self.weight_decay < 0.0
            || self.eps <= 0.0
        {
            return Err(Error::Config(
                "betas must lie in [0, 1), weight_decay ≥ 0, eps > 0".into(),
            ));
        }
        if let Some(d) = self.ema_decay {
            if !(0.0..=1.0).contains(&d) {
                return Err(Error::Config(format!("ema_decay {d} outside [0, 1]")));
            }
        }
        self.model_config()?.validate()
    }

    /// Model description with the dataset's class count and the drop-path
    /// override applied.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut m = self
            .model
            .clone()
            .unwrap_or_else(|| ModelConfig::reduced(self.dataset.classes()));
        if let Some(r) = self.drop_path {
            m.drop_path = r;
        }
        if m.num_classes != self.dataset.classes() {
            return Err(Error::Config(format!(
                "model has {} classes, dataset {}",
                m.num_classes,
                self.dataset.classes()
            )));
        }
        Ok(m)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("train config serializes")
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.betas[0],
            beta2: self.betas[1],
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_acc: f64,
    pub wall_seconds: f64,
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{:e},{},{},{:.3}",
            self.epoch, self.step, self.lr, self.train_loss, self.val_acc, self.wall_seconds
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 6 {
            return Err(Error::format(
                "metrics",
                format!("expected 6 columns, got {}", f.len()),
            ));
        }
        let num = |i: usize| -> Result<f64> {
            f[i].parse()
                .map_err(|_| Error::format("metrics", format!("column {i}: {:?}", f[i])))
        };
        Ok(Self {
            epoch: num(0)? as usize,
            step: num(1)? as usize,
            lr: num(2)?,
            train_loss: num(3)?,
            val_acc: num(4)?,
            wall_seconds: num(5)?,
        })
    }
}

/// Parses a metrics file written by [`train_loop`].
pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsRow>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::format("metrics", "missing header"));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(MetricsRow::parse)
        .collect()
}

/// Why a run halted early.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceEvent {
    pub epoch: usize,
    pub step: usize,
    pub reason: String,
}

/// Per-block activation norms after one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct NormTrace {
    pub epoch: usize,
    /// `(stage, block, mean norm, max norm)`.
    pub blocks: Vec<(usize, usize, f64, f64)>,
}

/// Mutable training state.
#[derive(Debug, Clone)]
pub struct TrainState<T: Element> {
    pub step: usize,
    pub params: ParamStore<T>,
    pub optimizer: AdamW<T>,
    pub ema: Option<ParamStore<T>>,
    pub rng: Rng,
}

#[derive(Debug)]
pub struct TrainOutcome<T: Element> {
    pub state: TrainState<T>,
    pub metrics: Vec<MetricsRow>,
    /// Mean loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
    pub norms: Vec<NormTrace>,
    pub diverged: Option<DivergenceEvent>,
}

/// Epoch-level divergence rule: NaN is immediate, otherwise the epoch mean
/// must exceed ten times the initial loss three epochs running.
#[derive(Debug, Clone, Default)]
pub struct DivergenceMonitor {
    initial: Option<f64>,
    over: usize,
}

impl DivergenceMonitor {
    pub const FACTOR: f64 = 10.0;
    pub const PATIENCE: usize = 3;

    /// Records the first loss seen.
    pub fn observe_step(&mut self, loss: f64) -> Option<String> {
        if !loss.is_finite() {
            return Some(format!("non-finite loss {loss}"));
        }
        self.initial.get_or_insert(loss);
        None
    }

    pub fn observe_epoch(&mut self, mean_loss: f64) -> Option<String> {
        if !mean_loss.is_finite() {
            return Some(format!("non-finite epoch loss {mean_loss}"));
        }
        let init = self.initial?;
        if mean_loss > Self::FACTOR * init {
            self.over += 1;
        } else {
            self.over = 0;
        }
        (self.over >= Self::PATIENCE).then(|| {
            format!(
                "epoch loss {mean_loss:.4} above {}× initial {init:.4} for {} epochs",
                Self::FACTOR,
                Self::PATIENCE
            )
        })
    }
}

/// Fraction of `data` classified correctly.
pub fn evaluate<T: Element>(
    model: &Model,
    params: &ParamStore<T>,
    data: &Dataset,
    batch: usize,
) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch) {
        let (x, labels) = data.batch::<T>(chunk, None);
        let logits = model.infer(params, &x)?;
        let k = logits.shape()[1];
        for (row, &l) in logits.data().chunks(k).zip(&labels) {
            let mut best = 0;
            for j in 1..k {
                if row[j] > row[best] {
                    best = j;
                }
            }
            correct += (best == l) as usize;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Loss and gradients for one batch.
pub fn loss_and_grads<T: Element>(
    model: &Model,
    params: &ParamStore<T>,
    x: &Tensor<T>,
    labels: &[usize],
    smoothing: f64,
    rng: Option<&mut Rng>,
) -> Result<(f64, Vec<Tensor<T>>)> {
    let tape = Tape::new();
    let bound = params.bind(&tape, true);
    let mut fwd = Forward {
        rng,
        ..Forward::default()
    };
    let logits = model.forward(&bound, tape.constant(x.clone()), &mut fwd)?;
    let loss = logits.cross_entropy_smoothed(labels, smoothing)?;
    let value = loss.value().item().to_f64().unwrap_or(f64::NAN);
    if !value.is_finite() {
        return Ok((value, Vec::new()));
    }
    let grads = tape.backward(loss)?;
    Ok((value, bound.vars().iter().map(|&v| grads.wrt(v)).collect()))
}

fn probe_norms<T: Element>(
    model: &Model,
    params: &ParamStore<T>,
    x: &Tensor<T>,
    epoch: usize,
) -> Result<NormTrace> {
    let tape = Tape::new();
    let b = params.bind(&tape, false);
    let mut probe = Probe::default();
    let mut fwd = Forward {
        probe: Some(&mut probe),
        ..Forward::default()
    };
    model.forward(&b, tape.constant(x.clone()), &mut fwd)?;
    Ok(NormTrace {
        epoch,
        blocks: probe
            .blocks
            .iter()
            .map(|r| (r.stage, r.block, r.mean_norm, r.max_norm))
            .collect(),
    })
}

/// Status written next to the metrics when a run ends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStatus {
    pub status: String,
    pub epochs_completed: usize,
    pub steps: usize,
    #[serde(default)]
    pub divergence: Option<DivergenceEvent>,
}

/// Trains `model` from `params` on `data`. When `out` is given, metrics,
/// checkpoints and the run status are written there.
pub fn train_loop<T: Element>(
    model: &Model,
    params: ParamStore<T>,
    cfg: &TrainConfig,
    data: &Splits,
    out: Option<&Path>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let d = &data.train;
    if d.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    if d.channels != model.cfg.in_chans
        || d.classes != model.cfg.num_classes
        || !d.side.is_multiple_of(model.cfg.total_stride())
    {
        return Err(Error::Config(format!(
            "dataset {}×{}×{} with {} classes does not fit model ({} channels, {} classes, stride {})",
            d.channels,
            d.side,
            d.side,
            d.classes,
            model.cfg.in_chans,
            model.cfg.num_classes,
            model.cfg.total_stride()
        )));
    }
    let mut csv = match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let mut f = File::create(dir.join(METRICS_FILE))?;
            writeln!(f, "{METRICS_HEADER}")?;
            Some(f)
        }
        None => None,
    };
    let steps_per_epoch = d.len().div_ceil(cfg.batch_size);
    let total = cfg.epochs * steps_per_epoch;
    let warmup = cfg.warmup_epochs * steps_per_epoch;
    let mut state = TrainState {
        step: 0,
        optimizer: AdamW::new(&params, cfg.adamw()),
        ema: cfg.ema_decay.map(|_| params.clone()),
        params,
        rng: Rng::new(cfg.seed).fork(1),
    };
    let probe_x = cfg.probe_norms.then(|| {
        let n = d.len().min(16);
        d.batch::<T>(&(0..n).collect::<Vec<_>>(), None).0
    });
    let mut monitor = DivergenceMonitor::default();
    let mut metrics = Vec::new();
    let mut step_losses = Vec::new();
    let mut norms = Vec::new();
    let mut diverged = None;
    let mut epochs_completed = 0;
    let start = Instant::now();
    'epochs: for epoch in 1..=cfg.epochs {
        let order = state.rng.permutation(d.len());
        let (mut sum, mut count) = (0.0, 0usize);
        let mut lr = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| state.step >= m) {
                break;
            }
            let flips: Vec<bool> = idx
                .iter()
                .map(|_| cfg.hflip && state.rng.bernoulli(0.5))
                .collect();
            let (x, labels) = d.batch::<T>(idx, Some(&flips));
            lr = cosine_schedule(state.step, warmup, total, cfg.lr);
            let (loss, grads) = loss_and_grads(
                model,
                &state.params,
                &x,
                &labels,
                cfg.label_smoothing,
                Some(&mut state.rng),
            )?;
            step_losses.push(loss);
            if let Some(reason) = monitor.observe_step(loss) {
                diverged = Some(DivergenceEvent {
                    epoch,
                    step: state.step,
                    reason,
                });
                break 'epochs;
            }
            if let Err(e) = state.optimizer.step(&mut state.params, &grads, lr) {
                match e {
                    Error::Evaluation(reason) => {
                        diverged = Some(DivergenceEvent {
                            epoch,
                            step: state.step,
                            reason,
                        });
                        break 'epochs;
                    }
                    other => return Err(other),
                }
            }
            if let (Some(shadow), Some(decay)) = (state.ema.as_mut(), cfg.ema_decay) {
                ema_update(shadow, &state.params, decay)?;
            }
            state.step += 1;
            sum += loss;
            count += 1;
        }
        if count == 0 {
            break;
        }
        let train_loss = sum / count as f64;
        let eval_params = state.ema.as_ref().unwrap_or(&state.params);
        let val_acc = evaluate(model, eval_params, &data.val, cfg.eval_batch_size)?;
        let row = MetricsRow {
            epoch,
            step: state.step,
            lr,
            train_loss,
            val_acc,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        if let Some(f) = csv.as_mut() {
            writeln!(f, "{}", row.to_csv())?;
            f.flush()?;
        }
        metrics.push(row);
        epochs_completed = epoch;
        if let Some(x) = &probe_x {
            norms.push(probe_norms(model, &state.params, x, epoch)?);
        }
        if let Some(dir) = out {
            if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
                save_checkpoint(
                    dir.join(format!("epoch-{epoch:03}")),
                    &model.cfg,
                    &state.params,
                    epoch,
                    state.step,
                )?;
            }
        }
        if let Some(reason) = monitor.observe_epoch(train_loss) {
            diverged = Some(DivergenceEvent {
                epoch,
                step: state.step,
                reason,
            });
            break;
        }
    }
    if let Some(dir) = out {
        save_checkpoint(
            dir.join("final"),
            &model.cfg,
            &state.params,
            epochs_completed,
            state.step,
        )?;
        if let Some(ema) = &state.ema {
            save_checkpoint(
                dir.join("ema"),
                &model.cfg,
                ema,
                epochs_completed,
                state.step,
            )?;
        }
        let status = RunStatus {
            status: if diverged.is_some() {
                "diverged"
            } else {
                "completed"
            }
            .into(),
            epochs_completed,
            steps: state.step,
            divergence: diverged.clone(),
        };
        let text = toml::to_string(&status).map_err(|e| Error::format("status", e.to_string()))?;
        fs::write(dir.join(STATUS_FILE), text)?;
    }
    Ok(TrainOutcome {
        state,
        metrics,
        step_losses,
        norms,
        diverged,
    })
}

/// Builds the model from `cfg` and trains it in the configured precision.
/// Returns the metrics and any divergence event.
pub fn run_training(
    cfg: &TrainConfig,
    data: &Splits,
    out: Option<&Path>,
) -> Result<(Vec<MetricsRow>, Option<DivergenceEvent>)> {
    let mcfg = cfg.model_config()?;
    let mut rng = Rng::new(cfg.seed);
    match cfg.dtype {
        DType::F32 => {
            let (model, params) = Model::build::<f32>(&mcfg, &mut rng)?;
            let o = train_loop(&model, params, cfg, data, out)?;
            Ok((o.metrics, o.diverged))
        }
        DType::F64 => {
            let (model, params) = Model::build::<f64>(&mcfg, &mut rng)?;
            let o = train_loop(&model, params, cfg, data, out)?;
            Ok((o.metrics, o.diverged))
        }
    }
}
