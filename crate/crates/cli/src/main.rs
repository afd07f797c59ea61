use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use vssd_core::analysis::erf::erf_model;
use vssd_core::analysis::heatmap::bilinear_upsample;
use vssd_core::analysis::image::{read_netpbm, write_pgm};
use vssd_core::analysis::stability::write_traces;
use vssd_core::analysis::{comparative_report, m_heatmap, stability_probe};
use vssd_core::bench::{append_csv, run_bench, BenchSpec, Mode, Variant};
use vssd_core::check::{run_checks, CheckOptions, Fault, Suite};
use vssd_core::io::{read_tensor, write_tensor, AnyTensor};
use vssd_core::model::load_checkpoint;
use vssd_core::ncssd::{self, NcssdInputs};
use vssd_core::parallel::{current_threads, init_threads, THREADS_ENV};
use vssd_core::ssd::{self, Dims, SsdSequenceInputs};
use vssd_core::train::data::{CIFAR_MEAN, CIFAR_STD};
use vssd_core::train::{run_training, DatasetSpec, TrainConfig};
use vssd_core::{DType, Rng, Tensor};

const EXIT_FAILURE: u8 = 1;
const EXIT_DIVERGED: u8 = 3;

/// Non-causal SSD kernels and the VSSD backbone: checks, benchmarks,
/// training and analysis.
#[derive(Parser)]
#[command(name = "vssd", version)]
struct Cli {
    /// Worker threads for kernels and training.
    #[arg(long, global = true, env = THREADS_ENV)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the correctness suites.
    Check(CheckArgs),
    /// Time one kernel variant and append a CSV row.
    Bench(BenchArgs),
    /// Train a model from a TOML config.
    Train(TrainArgs),
    /// Effective receptive field of a checkpoint as a PGM image.
    Erf(ErfArgs),
    /// Token-weight heatmap of one stage as a PGM image.
    HeatmapM(HeatmapArgs),
    /// Activation-norm traces with and without the token weights.
    Stability(StabilityArgs),
    /// Write an NCTD tensor file.
    ExportTensor(ExportArgs),
    /// Read NCTD tensor files and compare them.
    ImportTensor(ImportArgs),
}

#[derive(Args)]
struct CheckArgs {
    /// Suite to run; repeatable. All suites when omitted.
    #[arg(long)]
    suite: Vec<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Instances per suite instead of each suite's default.
    #[arg(long)]
    instances: Option<usize>,
    /// Corrupt a computation on purpose.
    #[arg(long, value_enum, hide = true)]
    inject_fault: Option<FaultArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum FaultArg {
    FlipMaskSign,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    variant: String,
    #[arg(long, default_value_t = 3136)]
    len: usize,
    #[arg(long, default_value_t = 16)]
    state: usize,
    #[arg(long, default_value_t = 24)]
    headdim: usize,
    #[arg(long, default_value_t = 2)]
    heads: usize,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value = "float32")]
    dtype: DType,
    #[arg(long, default_value = "forward+backward")]
    mode: String,
    #[arg(long, default_value_t = 3)]
    warmup: usize,
    #[arg(long, default_value_t = 10)]
    iters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Memory budget in MiB.
    #[arg(long, default_value_t = 2048)]
    budget_mib: u64,
    /// Time the variant even if its correctness suites fail.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// CIFAR-10 binary directory for a `cifar10-binary` dataset.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ErfArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Directory of PPM/PGM or NCTD images.
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    log_scale: bool,
    /// 1-based stage whose output is probed; the last stage by default.
    #[arg(long)]
    stage: Option<usize>,
    /// Zero the residual depthwise paths before probing.
    #[arg(long)]
    zero_local: bool,
}

#[derive(Args)]
struct HeatmapArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    stage: usize,
    #[arg(long)]
    out: PathBuf,
    /// Resize to the input resolution.
    #[arg(long)]
    upsample: bool,
}

#[derive(Args)]
struct StabilityArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Train the `m = 1` arm instead of the learned one.
    #[arg(long)]
    no_m: bool,
    #[arg(long)]
    out: PathBuf,
    /// Train both arms and write a comparative report here.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum OracleKind {
    Ssd,
    Ncssd,
}

#[derive(Args)]
struct ExportArgs {
    /// Output file, or directory for `--oracle`.
    #[arg(long)]
    out: PathBuf,
    /// Parameter `--name` of this checkpoint.
    #[arg(long, requires = "name")]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    name: Option<String>,
    /// Comma-separated shape of a standard-normal tensor.
    #[arg(long, conflicts_with_all = ["ckpt", "oracle"])]
    random: Option<String>,
    /// Inputs and output of a reference computation.
    #[arg(long, value_enum, conflicts_with = "ckpt")]
    oracle: Option<OracleKind>,
    #[arg(long, default_value = "float64")]
    dtype: DType,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 16)]
    len: usize,
    #[arg(long, default_value_t = 2)]
    heads: usize,
    #[arg(long, default_value_t = 4)]
    headdim: usize,
    #[arg(long, default_value_t = 8)]
    state: usize,
}

#[derive(Args)]
struct ImportArgs {
    file: Option<PathBuf>,
    /// Second file to difference against.
    #[arg(long)]
    compare: Option<PathBuf>,
    /// Recompute the output of an exported oracle directory.
    #[arg(long, value_enum, requires = "dir")]
    oracle: Option<OracleKind>,
    #[arg(long)]
    dir: Option<PathBuf>,
    /// Largest accepted max-abs difference.
    #[arg(long, default_value_t = 0.0)]
    tol: f64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        init_threads(n);
    }
    let res = match cli.cmd {
        Cmd::Check(a) => check(a),
        Cmd::Bench(a) => bench(a),
        Cmd::Train(a) => train(a),
        Cmd::Erf(a) => erf(a),
        Cmd::HeatmapM(a) => heatmap(a),
        Cmd::Stability(a) => stability(a),
        Cmd::ExportTensor(a) => export(a),
        Cmd::ImportTensor(a) => import(a),
    };
    match res {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_FAILURE)
        }
    }
}

fn check(a: CheckArgs) -> Result<u8> {
    let suites = a
        .suite
        .iter()
        .map(|s| s.parse())
        .collect::<Result<Vec<Suite>, _>>()?;
    let opts = CheckOptions {
        seed: a.seed,
        instances: a.instances,
        fault: a
            .inject_fault
            .map(|FaultArg::FlipMaskSign| Fault::FlipMaskSign),
    };
    println!("check seed={} threads={}", a.seed, current_threads());
    let reports = run_checks(&suites, &opts);
    let mut failed = 0;
    for r in &reports {
        println!("{r}");
        if !r.passed {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("{failed} of {} suites failed", reports.len());
        return Ok(EXIT_FAILURE);
    }
    println!("all {} suites passed", reports.len());
    Ok(0)
}

fn bench(a: BenchArgs) -> Result<u8> {
    let spec = BenchSpec {
        variant: a.variant.parse::<Variant>()?,
        len: a.len,
        state: a.state,
        headdim: a.headdim,
        heads: a.heads,
        batch: a.batch,
        dtype: a.dtype,
        mode: a.mode.parse::<Mode>()?,
        warmup: a.warmup,
        iters: a.iters,
        seed: a.seed,
    };
    spec.validate()?;
    println!("bench {spec:?} threads={}", current_threads());
    let gate = run_checks(spec.variant.required_suites(), &CheckOptions::default());
    for r in &gate {
        println!("{r}");
    }
    if gate.iter().any(|r| !r.passed) {
        if !a.force {
            eprintln!(
                "refusing to time {}: its correctness suites failed (use --force)",
                spec.variant
            );
            return Ok(EXIT_FAILURE);
        }
        eprintln!("warning: timing {} despite failing suites", spec.variant);
    }
    let rec = run_bench(&spec, a.budget_mib << 20)?;
    println!(
        "{} {}: median {:.6} s, IQR {:.6} s, {:.2} seq/s, inputs {}",
        spec.variant,
        spec.mode,
        rec.median_s,
        rec.iqr_s(),
        rec.throughput,
        &rec.input_hash[..16]
    );
    if let Some(path) = &a.csv {
        append_csv(path, &rec)?;
        println!("appended to {}", path.display());
    }
    Ok(0)
}

fn load_config(path: &Path, data: Option<PathBuf>) -> Result<TrainConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut cfg = TrainConfig::from_toml(&text)?;
    if let Some(d) = data {
        match &mut cfg.dataset {
            DatasetSpec::Cifar10Binary { dir, .. } => *dir = Some(d),
            DatasetSpec::Synthetic(_) => {
                bail!("--data given but the config uses a synthetic dataset")
            }
        }
    }
    Ok(cfg)
}

fn train(a: TrainArgs) -> Result<u8> {
    let cfg = load_config(&a.config, a.data)?;
    let data = cfg.dataset.load()?;
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("config.toml"), cfg.to_toml())?;
    println!(
        "training {} train / {} val images, {} epochs, threads={}",
        data.train.len(),
        data.val.len(),
        cfg.epochs,
        current_threads()
    );
    let (metrics, diverged) = run_training(&cfg, &data, Some(&a.out))?;
    for m in &metrics {
        println!(
            "epoch {} step {} loss {:.4} val_acc {:.4}",
            m.epoch, m.step, m.train_loss, m.val_acc
        );
    }
    if let Some(d) = diverged {
        println!(
            "diverged at epoch {} step {}: {}",
            d.epoch, d.step, d.reason
        );
        return Ok(EXIT_DIVERGED);
    }
    Ok(0)
}

/// Reads a PPM/PGM (normalized with the CIFAR statistics when it has three
/// channels) or an NCTD `[C, H, W]` file.
fn read_image(path: &Path) -> Result<Tensor<f64>> {
    let is_nctd = path.extension().is_some_and(|e| e == "nctd");
    if is_nctd {
        let t = read_tensor(path)?.into_dtype::<f64>();
        if t.rank() != 3 {
            bail!(
                "{}: expected a [C, H, W] tensor, got {:?}",
                path.display(),
                t.shape()
            );
        }
        return Ok(t);
    }
    let img = read_netpbm(path).with_context(|| format!("reading {}", path.display()))?;
    if img.shape()[0] != 3 {
        return Ok(img);
    }
    let plane = img.shape()[1] * img.shape()[2];
    Ok(Tensor::from_fn(img.shape(), |i| {
        let c = i / plane;
        (img.data()[i] - CIFAR_MEAN[c] as f64) / CIFAR_STD[c] as f64
    }))
}

fn read_images(dir: &Path) -> Result<Vec<Tensor<f64>>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .is_some_and(|e| e == "ppm" || e == "pgm" || e == "nctd")
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("no .ppm, .pgm or .nctd images in {}", dir.display());
    }
    paths.iter().map(|p| read_image(p)).collect()
}

fn erf(a: ErfArgs) -> Result<u8> {
    let (model, mut params, _) = load_checkpoint::<f64>(&a.ckpt)?;
    if a.zero_local {
        model.zero_local_paths(&mut params);
    }
    let images = read_images(&a.images)?;
    let stage = a.stage.unwrap_or(model.stages.len());
    if stage == 0 || stage > model.stages.len() {
        bail!("stage {stage} outside 1..={}", model.stages.len());
    }
    let mut map = erf_model(&model, &params, &images, stage - 1, None)?;
    map.source = a.ckpt.display().to_string();
    if map.degenerate {
        eprintln!("warning: all input gradients are zero");
    }
    let grid = if a.log_scale {
        map.log_scaled()
    } else {
        map.grid.clone()
    };
    write_pgm(&a.out, &grid)?;
    println!(
        "erf over {} images at stage {stage}: coverage {:.4}, written to {}",
        map.images,
        map.coverage(),
        a.out.display()
    );
    Ok(0)
}

fn heatmap(a: HeatmapArgs) -> Result<u8> {
    let (model, params, _) = load_checkpoint::<f64>(&a.ckpt)?;
    let img = read_image(&a.image)?;
    let hm = m_heatmap(&model, &params, &img, a.stage)?;
    let grid = if a.upsample {
        bilinear_upsample(&hm.grid, img.shape()[1], img.shape()[2])?
    } else {
        hm.grid.clone()
    };
    write_pgm(&a.out, &grid)?;
    let (lo, hi) = hm
        .raw
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| {
            (l.min(v), h.max(v))
        });
    println!(
        "m of stage {} block {}: range [{lo:.6}, {hi:.6}], written to {}",
        hm.stage,
        hm.block,
        a.out.display()
    );
    Ok(0)
}

fn stability(a: StabilityArgs) -> Result<u8> {
    let cfg = load_config(&a.config, a.data)?;
    let data = cfg.dataset.load()?;
    let arms: Vec<bool> = if a.report.is_some() {
        vec![true, false]
    } else {
        vec![!a.no_m]
    };
    let mut traces = Vec::new();
    for with_m in arms {
        let t = stability_probe(&cfg, &data, with_m)?;
        match &t.diverged {
            Some(d) => println!(
                "with_m={with_m}: diverged at epoch {} step {}: {}",
                d.epoch, d.step, d.reason
            ),
            None => println!(
                "with_m={with_m}: {} epochs logged over {} blocks",
                t.logged_steps(),
                t.blocks
            ),
        }
        traces.push(t);
    }
    write_traces(&a.out, &traces.iter().collect::<Vec<_>>())?;
    if let Some(path) = &a.report {
        fs::write(
            path,
            comparative_report(&traces[0], &traces[1], cfg.epochs)?,
        )?;
        println!("report written to {}", path.display());
    }
    Ok(0)
}

fn oracle_dims(a: &ExportArgs) -> Dims {
    Dims {
        l: a.len,
        hd: a.heads,
        p: a.headdim,
        n: a.state,
    }
}

const SSD_FILES: [&str; 5] = ["x", "b", "c", "a", "y"];
const NCSSD_FILES: [&str; 5] = ["x", "b", "c", "m", "y"];

fn export(a: ExportArgs) -> Result<u8> {
    if let Some(kind) = a.oracle {
        let mut rng = Rng::new(a.seed);
        fs::create_dir_all(&a.out)?;
        let (names, tensors) = match kind {
            OracleKind::Ssd => {
                let inp = ssd::random_inputs::<f64>(oracle_dims(&a), &mut rng);
                let y = ssd::ssd_recurrent(&inp)?;
                (SSD_FILES, [inp.x, inp.b, inp.c, inp.a, y])
            }
            OracleKind::Ncssd => {
                let inp = ncssd::random_inputs::<f64>(oracle_dims(&a), &mut rng);
                let y = ncssd::ncssd_fused(&inp)?;
                (NCSSD_FILES, [inp.x, inp.b, inp.c, inp.m, y])
            }
        };
        for (n, t) in names.iter().zip(&tensors) {
            write_typed(&a.out.join(format!("{n}.nctd")), t, a.dtype)?;
        }
        println!("wrote {} tensors to {}", names.len(), a.out.display());
        return Ok(0);
    }
    let t: Tensor<f64> = if let (Some(dir), Some(name)) = (&a.ckpt, &a.name) {
        let (_, params, _) = load_checkpoint::<f64>(dir)?;
        params
            .by_name(name)
            .with_context(|| format!("no parameter named {name}"))?
            .clone()
    } else if let Some(shape) = &a.random {
        let shape = shape
            .split(',')
            .map(|s| s.trim().parse::<usize>())
            .collect::<Result<Vec<_>, _>>()
            .context("shape must be comma-separated sizes")?;
        Tensor::randn(&shape, 1.0, &mut Rng::new(a.seed))
    } else {
        bail!("one of --ckpt/--name, --random or --oracle is required");
    };
    write_typed(&a.out, &t, a.dtype)?;
    println!("wrote {:?} {} to {}", t.shape(), a.dtype, a.out.display());
    Ok(0)
}

fn write_typed(path: &Path, t: &Tensor<f64>, dtype: DType) -> Result<()> {
    match dtype {
        DType::F32 => write_tensor(path, &t.cast::<f32>())?,
        DType::F64 => write_tensor(path, t)?,
    }
    Ok(())
}

fn describe(path: &Path, t: &AnyTensor) {
    let v = t.clone().into_dtype::<f64>();
    let (lo, hi) = v
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &x| {
            (l.min(x), h.max(x))
        });
    let mean = v.data().iter().sum::<f64>() / v.numel().max(1) as f64;
    println!(
        "{}: {} {:?} min {lo:.6e} max {hi:.6e} mean {mean:.6e}",
        path.display(),
        t.dtype(),
        t.shape()
    );
}

fn verdict(diff: f64, tol: f64) -> u8 {
    println!("max abs diff {diff:.3e} (tol {tol:.0e})");
    if diff <= tol {
        0
    } else {
        EXIT_FAILURE
    }
}

fn import(a: ImportArgs) -> Result<u8> {
    if let (Some(kind), Some(dir)) = (a.oracle, &a.dir) {
        let load = |n: &str| -> Result<Tensor<f64>> {
            let p = dir.join(format!("{n}.nctd"));
            Ok(read_tensor(&p)
                .with_context(|| format!("reading {}", p.display()))?
                .into_dtype())
        };
        let (x, b, c, w, y) = (
            load("x")?,
            load("b")?,
            load("c")?,
            load(match kind {
                OracleKind::Ssd => "a",
                OracleKind::Ncssd => "m",
            })?,
            load("y")?,
        );
        let ours = match kind {
            OracleKind::Ssd => ssd::ssd_recurrent(&SsdSequenceInputs::new(x, b, c, w)?)?,
            OracleKind::Ncssd => ncssd::ncssd_fused(&NcssdInputs::new(x, b, c, w)?)?,
        };
        return Ok(verdict(ours.max_abs_diff(&y)?, a.tol));
    }
    let Some(file) = &a.file else {
        bail!("a tensor file or --oracle with --dir is required");
    };
    let t = read_tensor(file).with_context(|| format!("reading {}", file.display()))?;
    describe(file, &t);
    if let Some(other) = &a.compare {
        let u = read_tensor(other).with_context(|| format!("reading {}", other.display()))?;
        describe(other, &u);
        if t.shape() != u.shape() {
            println!("shapes differ");
            return Ok(EXIT_FAILURE);
        }
        let bitwise = t.to_bytes() == u.to_bytes();
        println!("bitwise identical: {bitwise}");
        let d = t.into_dtype::<f64>().max_abs_diff(&u.into_dtype::<f64>())?;
        return Ok(verdict(d, a.tol));
    }
    Ok(0)
}
