//! Kernel timing with a fixed CSV schema, and mixer scaling fits.

use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::check::Suite;
use crate::element::{DType, Element};
use crate::error::{Error, Result};
use crate::model::block::{MsaMixer, SsdMixer};
use crate::model::layers::Init;
use crate::model::{Mixer, NcssdForm, ParamStore};
use crate::ncssd::kernel as nck;
use crate::parallel::current_threads;
use crate::rng::Rng;
use crate::ssd::kernel as ssk;
use crate::tensor::Tensor;

/// Default memory budget for one benchmark call.
pub const DEFAULT_BUDGET_BYTES: u64 = 2 << 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Ssd,
    BiSsd,
    NcssdContraction,
    NcssdFused,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Ssd,
        Variant::BiSsd,
        Variant::NcssdContraction,
        Variant::NcssdFused,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Ssd => "ssd",
            Variant::BiSsd => "bi-ssd",
            Variant::NcssdContraction => "nc-ssd-contraction",
            Variant::NcssdFused => "nc-ssd-fused",
        }
    }

    /// Suites that must pass before this variant is timed.
    pub fn required_suites(self) -> &'static [Suite] {
        match self {
            Variant::Ssd => &[Suite::CausalEquivalence, Suite::Kernels],
            Variant::BiSsd => &[Suite::Kernels],
            Variant::NcssdContraction | Variant::NcssdFused => &[Suite::NcssdForms, Suite::Kernels],
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Forward,
    ForwardBackward,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Forward => "forward",
            Mode::ForwardBackward => "forward+backward",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "forward" => Ok(Mode::Forward),
            "forward+backward" | "train" => Ok(Mode::ForwardBackward),
            _ => Err(Error::Config(format!(
                "unknown mode {s:?}; expected forward or forward+backward"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchSpec {
    pub variant: Variant,
    pub len: usize,
    /// State size N.
    pub state: usize,
    /// Head width P.
    pub headdim: usize,
    pub heads: usize,
    pub batch: usize,
    pub dtype: DType,
    pub mode: Mode,
    pub warmup: usize,
    pub iters: usize,
    /// Seed of the shared inputs.
    pub seed: u64,
}

impl BenchSpec {
    /// The matched shape used to compare variants.
    pub fn matched(variant: Variant) -> Self {
        Self {
            variant,
            len: 3136,
            state: 16,
            headdim: 24,
            heads: 2,
            batch: 8,
            dtype: DType::F32,
            mode: Mode::ForwardBackward,
            warmup: 3,
            iters: 10,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("len", self.len),
            ("state", self.state),
            ("headdim", self.headdim),
            ("heads", self.heads),
            ("batch", self.batch),
        ] {
            if v == 0 {
                return Err(Error::Validation(format!("{name} must be positive")));
            }
        }
        if self.warmup < 1 {
            return Err(Error::Validation(
                "at least one warmup iteration is required".into(),
            ));
        }
        if self.iters < 5 {
            return Err(Error::Validation(format!(
                "at least 5 timed iterations are required, got {}",
                self.iters
            )));
        }
        if self.variant == Variant::BiSsd && !self.headdim.is_multiple_of(2) {
            return Err(Error::Validation(format!(
                "bi-ssd needs an even headdim, got {}",
                self.headdim
            )));
        }
        Ok(())
    }

    /// Upper estimate of the bytes live during one call.
    pub fn estimate_bytes(&self) -> u64 {
        let (b, l, n, p, h) = (
            self.batch as u64,
            self.len as u64,
            self.state as u64,
            self.headdim as u64,
            self.heads as u64,
        );
        let x = b * l * h * p;
        let inputs = x + 2 * b * l * n + b * l * h;
        let work = match self.variant {
            // hidden states kept for the adjoint pass
            Variant::Ssd | Variant::BiSsd => b * h * l * n * p,
            // the explicit expansion
            Variant::NcssdContraction => b * l * h * n * p,
            Variant::NcssdFused => b * h * (l * p + n * p),
        };
        let factor = if self.mode == Mode::ForwardBackward {
            3
        } else {
            1
        };
        (inputs + x + work) * factor * self.dtype.size_of() as u64
    }
}

/// Host description stored with every record.
#[derive(Debug, Clone, PartialEq)]
pub struct HostInfo {
    pub os: String,
    pub arch: String,
    pub cpus: usize,
    pub threads: usize,
    pub version: String,
}

impl HostInfo {
    pub fn current() -> Self {
        Self {
            os: std::env::consts::OS.to_string(),
            arch: std::env::consts::ARCH.to_string(),
            cpus: std::thread::available_parallelism().map_or(1, |n| n.get()),
            threads: current_threads(),
            version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRecord {
    pub spec: BenchSpec,
    pub median_s: f64,
    pub q1_s: f64,
    pub q3_s: f64,
    /// Sequences per second at the median.
    pub throughput: f64,
    /// SHA-256 of the NCTD encoding of the inputs.
    pub input_hash: String,
    pub host: HostInfo,
    pub samples: Vec<f64>,
}

impl BenchRecord {
    pub fn iqr_s(&self) -> f64 {
        self.q3_s - self.q1_s
    }

    pub fn csv_row(&self) -> String {
        let s = &self.spec;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{:.9},{:.9},{:.9},{:.9},{:.6},{},{},{},{},{}",
            s.variant,
            s.mode,
            s.dtype.name(),
            s.len,
            s.state,
            s.headdim,
            s.heads,
            s.batch,
            s.warmup,
            s.iters,
            s.seed,
            self.median_s,
            self.q1_s,
            self.q3_s,
            self.iqr_s(),
            self.throughput,
            self.input_hash,
            self.host.threads,
            self.host.cpus,
            format_args!("{}-{}", self.host.os, self.host.arch),
            self.host.version,
        )
    }
}

/// Column set and order of the benchmark CSV.
pub const CSV_HEADER: &str = "variant,mode,dtype,len,state,headdim,heads,batch,warmup,iters,seed,\
median_s,q1_s,q3_s,iqr_s,throughput_seq_per_s,input_sha256,threads,cpus,host,version";

/// Appends `rec`, writing the header first when the file is new or empty.
/// An existing file with a different header is refused.
pub fn append_csv(path: impl AsRef<Path>, rec: &BenchRecord) -> Result<()> {
    let path = path.as_ref();
    let existing = fs::read_to_string(path).unwrap_or_default();
    let mut out = String::new();
    match existing.lines().next() {
        None => out.push_str(&format!("{CSV_HEADER}\n")),
        Some(h) if h == CSV_HEADER => {}
        Some(h) => {
            return Err(Error::format(
                "csv header",
                format!("expected {CSV_HEADER:?}, found {h:?}"),
            ));
        }
    }
    out.push_str(&rec.csv_row());
    out.push('\n');
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

/// Shared inputs `x [B,L,H,P]`, `b, c [B,L,N]`, `w [B,L,H]` in `(0.5, 1)`,
/// drawn in float64 and rounded to `T`, so every variant and dtype sees the
/// same values.
pub fn bench_inputs<T: Element>(spec: &BenchSpec) -> [Tensor<T>; 4] {
    let mut rng = Rng::new(spec.seed);
    let (b, l, n, p, h) = (spec.batch, spec.len, spec.state, spec.headdim, spec.heads);
    let scale = 1.0 / (n as f64).sqrt();
    let x = Tensor::<f64>::randn(&[b, l, h, p], 1.0, &mut rng);
    let bm = Tensor::<f64>::randn(&[b, l, n], scale, &mut rng);
    let cm = Tensor::<f64>::randn(&[b, l, n], scale, &mut rng);
    let w = Tensor::<f64>::uniform(&[b, l, h], 0.5, 1.0, &mut rng);
    [x.cast(), bm.cast(), cm.cast(), w.cast()]
}

pub fn hash_inputs<T: Element>(inputs: &[Tensor<T>]) -> String {
    let mut h = Sha256::new();
    for t in inputs {
        h.update(crate::io::encode(t));
    }
    hex::encode(h.finalize())
}

fn call<'t, T: Element>(
    v: Variant,
    x: Var<'t, T>,
    b: Var<'t, T>,
    c: Var<'t, T>,
    w: Var<'t, T>,
) -> Result<Var<'t, T>> {
    match v {
        Variant::Ssd => ssk::ssd_scan(x, b, c, w),
        Variant::BiSsd => ssk::bi_ssd_scan(x, b, c, w),
        Variant::NcssdContraction => nck::ncssd_contraction(x, b, c, w),
        Variant::NcssdFused => nck::ncssd_fused(x, b, c, w),
    }
}

/// One call of the kernel (and its adjoint in training mode).
fn step<T: Element>(spec: &BenchSpec, inputs: &[Tensor<T>; 4]) -> Result<()> {
    let tape = Tape::new();
    let train = spec.mode == Mode::ForwardBackward;
    let vars: Vec<Var<'_, T>> = inputs
        .iter()
        .map(|t| {
            if train {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
        .collect();
    let y = call(spec.variant, vars[0], vars[1], vars[2], vars[3])?;
    if train {
        let g = tape.backward(y.sum())?;
        std::hint::black_box(g.wrt(vars[0]));
    } else {
        std::hint::black_box(y.value());
    }
    Ok(())
}

/// Linear-interpolated quantile of sorted samples.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn run_typed<T: Element>(spec: &BenchSpec) -> Result<BenchRecord> {
    let inputs = bench_inputs::<T>(spec);
    let input_hash = hash_inputs(&inputs);
    for _ in 0..spec.warmup {
        step(spec, &inputs)?;
    }
    let mut samples = Vec::with_capacity(spec.iters);
    for _ in 0..spec.iters {
        let t0 = Instant::now();
        step(spec, &inputs)?;
        samples.push(t0.elapsed().as_secs_f64());
    }
    let mut sorted = samples.clone();
    sorted.sort_by(f64::total_cmp);
    let median_s = quantile(&sorted, 0.5);
    Ok(BenchRecord {
        spec: spec.clone(),
        median_s,
        q1_s: quantile(&sorted, 0.25),
        q3_s: quantile(&sorted, 0.75),
        throughput: spec.batch as f64 / median_s,
        input_hash,
        host: HostInfo::current(),
        samples,
    })
}

/// Validates, checks the memory budget, then times the kernel.
pub fn run_bench(spec: &BenchSpec, budget_bytes: u64) -> Result<BenchRecord> {
    spec.validate()?;
    let need = spec.estimate_bytes();
    if need > budget_bytes {
        return Err(Error::Resource(format!(
            "{} at L={} batch={} needs about {need} bytes, budget is {budget_bytes}",
            spec.variant, spec.len, spec.batch
        )));
    }
    match spec.dtype {
        DType::F32 => run_typed::<f32>(spec),
        DType::F64 => run_typed::<f64>(spec),
    }
}

/// Least-squares fit `t ≈ a + b·g(x)`; returns `(a, b, R²)`.
pub fn fit_r2(x: &[f64], t: &[f64], g: impl Fn(f64) -> f64) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let u: Vec<f64> = x.iter().map(|&v| g(v)).collect();
    let (mu, mt) = (u.iter().sum::<f64>() / n, t.iter().sum::<f64>() / n);
    let suu: f64 = u.iter().map(|v| (v - mu).powi(2)).sum();
    let sut: f64 = u.iter().zip(t).map(|(a, b)| (a - mu) * (b - mt)).sum();
    let b = sut / suu;
    let a = mt - b * mu;
    let ss_res: f64 = u
        .iter()
        .zip(t)
        .map(|(a0, tv)| (tv - (a + b * a0)).powi(2))
        .sum();
    let ss_tot: f64 = t.iter().map(|v| (v - mt).powi(2)).sum();
    (a, b, 1.0 - ss_res / ss_tot)
}

/// Median forward time of one token mixer over square grids.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalingPoint {
    pub len: usize,
    pub median_s: f64,
}

/// Times the NC-SSD or attention mixer (float32, batch 1) at each grid side
/// in `sides`; the sequence length is `side²`.
pub fn mixer_scaling(
    mixer: Mixer,
    sides: &[usize],
    channels: usize,
    heads: usize,
    iters: usize,
) -> Result<Vec<ScalingPoint>> {
    let mut store = ParamStore::<f32>::new();
    let mut rng = Rng::new(0);
    enum M {
        Ssd(SsdMixer),
        Msa(MsaMixer),
    }
    let m = {
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
        };
        match mixer {
            Mixer::Msa => M::Msa(MsaMixer::new(&mut init, "mixer", channels, heads)),
            kind => M::Ssd(SsdMixer::new(
                &mut init, "mixer", kind, channels, heads, 2, 16, true,
            )),
        }
    };
    let mut out = Vec::new();
    for &side in sides {
        let l = side * side;
        let u = Tensor::<f32>::randn(&[1, l, channels], 1.0, &mut rng);
        let run = || -> Result<f64> {
            let tape = Tape::new();
            let p = store.bind(&tape, false);
            let x = tape.constant(u.clone());
            let t0 = Instant::now();
            let y = match &m {
                M::Ssd(s) => s.forward(&p, x, side, side, NcssdForm::Fused)?.0,
                M::Msa(a) => a.attend(&p, x)?.1,
            };
            std::hint::black_box(y.value());
            Ok(t0.elapsed().as_secs_f64())
        };
        run()?;
        let mut t: Vec<f64> = (0..iters.max(1)).map(|_| run()).collect::<Result<_>>()?;
        t.sort_by(f64::total_cmp);
        out.push(ScalingPoint {
            len: l,
            median_s: quantile(&t, 0.5),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(variant: Variant) -> BenchSpec {
        BenchSpec {
            len: 64,
            state: 4,
            headdim: 4,
            batch: 2,
            iters: 5,
            warmup: 1,
            ..BenchSpec::matched(variant)
        }
    }

    #[test]
    fn spec_validation() {
        assert!(small(Variant::Ssd).validate().is_ok());
        assert!(BenchSpec {
            batch: 0,
            ..small(Variant::Ssd)
        }
        .validate()
        .is_err());
        assert!(BenchSpec {
            iters: 4,
            ..small(Variant::Ssd)
        }
        .validate()
        .is_err());
        assert!(BenchSpec {
            warmup: 0,
            ..small(Variant::Ssd)
        }
        .validate()
        .is_err());
        assert!(BenchSpec {
            headdim: 3,
            ..small(Variant::BiSsd)
        }
        .validate()
        .is_err());
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert_eq!(
            "forward+backward".parse::<Mode>().unwrap(),
            Mode::ForwardBackward
        );
    }

    #[test]
    fn oversized_shape_is_refused_before_timing() {
        let spec = BenchSpec {
            len: 1 << 20,
            ..small(Variant::NcssdContraction)
        };
        assert!(matches!(run_bench(&spec, 1 << 20), Err(Error::Resource(_))));
    }

    #[test]
    fn variants_share_inputs_and_records_are_consistent() {
        let recs: Vec<BenchRecord> = Variant::ALL
            .iter()
            .map(|&v| run_bench(&small(v), DEFAULT_BUDGET_BYTES).unwrap())
            .collect();
        assert!(recs.windows(2).all(|w| w[0].input_hash == w[1].input_hash));
        for r in &recs {
            assert_eq!(r.samples.len(), 5);
            assert!((r.throughput - 2.0 / r.median_s).abs() <= 1e-9 * r.throughput);
            assert!(r.q1_s <= r.median_s && r.median_s <= r.q3_s);
        }
    }

    #[test]
    fn csv_header_is_written_once_and_checked() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.csv");
        let rec = run_bench(&small(Variant::NcssdFused), DEFAULT_BUDGET_BYTES).unwrap();
        append_csv(&path, &rec).unwrap();
        append_csv(&path, &rec).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines[1].split(',').count(), CSV_HEADER.split(',').count());
        fs::write(&path, "a,b\n").unwrap();
        assert!(append_csv(&path, &rec).is_err());
    }

    #[test]
    fn fits_recover_exact_models() {
        let x = [1.0, 2.0, 4.0, 8.0];
        let t: Vec<f64> = x.iter().map(|v| 3.0 + 2.0 * v).collect();
        let (a, b, r2) = fit_r2(&x, &t, |v| v);
        assert!((a - 3.0).abs() < 1e-12 && (b - 2.0).abs() < 1e-12 && (r2 - 1.0).abs() < 1e-12);
        let q: Vec<f64> = x.iter().map(|v| v * v).collect();
        assert!(fit_r2(&x, &q, |v| v * v).2 > fit_r2(&x, &q, |v| v).2);
    }
}
