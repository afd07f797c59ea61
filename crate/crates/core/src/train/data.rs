//! Image classification datasets: CIFAR-10 binary batches and a synthetic
//! generator.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::element::{cst, Element};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Per-channel mean and standard deviation of the CIFAR-10 training set,
/// applied after scaling pixels to [0, 1].
pub const CIFAR_MEAN: [f32; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR_STD: [f32; 3] = [0.2470, 0.2435, 0.2616];

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_PIXELS: usize = 3 * CIFAR_SIDE * CIFAR_SIDE;
pub const CIFAR_RECORD: usize = 1 + CIFAR_PIXELS;
pub const CIFAR_PER_BATCH: usize = 10_000;
pub const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const CIFAR_TEST_FILE: &str = "test_batch.bin";

/// Images stored as `[N, C, S, S]` in `f32`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
    pub channels: usize,
    pub side: usize,
    pub classes: usize,
}

impl Dataset {
    pub fn new(
        images: Vec<f32>,
        labels: Vec<usize>,
        channels: usize,
        side: usize,
        classes: usize,
    ) -> Result<Self> {
        let per = channels * side * side;
        if images.len() != labels.len() * per {
            return Err(Error::dim(
                "dataset",
                &[labels.len(), channels, side, side],
                &[images.len()],
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Validation(format!(
                "label {bad} outside 0..{classes}"
            )));
        }
        Ok(Self {
            images,
            labels,
            channels,
            side,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.side * self.side
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    /// First `n` examples.
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            images: self.images[..n * self.image_len()].to_vec(),
            labels: self.labels[..n].to_vec(),
            ..*self
        }
    }

    /// Gathers `indices` into a `[B, C, S, S]` tensor, mirroring the images
    /// whose `flip` entry is set.
    pub fn batch<T: Element>(
        &self,
        indices: &[usize],
        flip: Option<&[bool]>,
    ) -> (Tensor<T>, Vec<usize>) {
        let n = self.image_len();
        let s = self.side;
        let mut data = Vec::with_capacity(indices.len() * n);
        for (k, &i) in indices.iter().enumerate() {
            let img = self.image(i);
            if flip.is_some_and(|f| f[k]) {
                for row in img.chunks(s) {
                    data.extend(row.iter().rev().map(|&v| cst::<T>(v as f64)));
                }
            } else {
                data.extend(img.iter().map(|&v| cst::<T>(v as f64)));
            }
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        let t = Tensor::new(&[indices.len(), self.channels, s, s], data).expect("batch shape");
        (t, labels)
    }
}

/// Training and validation splits.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
}

fn standardize(byte: u8, c: usize) -> f32 {
    (byte as f32 / 255.0 - CIFAR_MEAN[c]) / CIFAR_STD[c]
}

fn destandardize(v: f32, c: usize) -> u8 {
    ((v * CIFAR_STD[c] + CIFAR_MEAN[c]) * 255.0)
        .round()
        .clamp(0.0, 255.0) as u8
}

/// Parses one record: label byte then 1024 red, 1024 green, 1024 blue bytes.
pub fn parse_record(bytes: &[u8]) -> Result<(usize, Vec<f32>)> {
    if bytes.len() != CIFAR_RECORD {
        return Err(Error::format(
            "record",
            format!("expected {CIFAR_RECORD} bytes, got {}", bytes.len()),
        ));
    }
    let label = bytes[0] as usize;
    if label >= 10 {
        return Err(Error::format(
            "label",
            format!("label byte {label} outside 0..10"),
        ));
    }
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    let px = bytes[1..]
        .iter()
        .enumerate()
        .map(|(i, &b)| standardize(b, i / plane))
        .collect();
    Ok((label, px))
}

/// Inverse of [`parse_record`].
pub fn encode_record(label: usize, pixels: &[f32]) -> Vec<u8> {
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    let mut out = Vec::with_capacity(CIFAR_RECORD);
    out.push(label as u8);
    out.extend(
        pixels
            .iter()
            .enumerate()
            .map(|(i, &v)| destandardize(v, i / plane)),
    );
    out
}

fn read_batch(path: &Path, images: &mut Vec<f32>, labels: &mut Vec<usize>) -> Result<()> {
    let bytes =
        fs::read(path).map_err(|e| Error::format("cifar10", format!("{}: {e}", path.display())))?;
    let expected = CIFAR_PER_BATCH * CIFAR_RECORD;
    if bytes.len() != expected {
        return Err(Error::format(
            "cifar10",
            format!(
                "{}: expected {expected} bytes, got {}",
                path.display(),
                bytes.len()
            ),
        ));
    }
    for rec in bytes.chunks(CIFAR_RECORD) {
        let (l, px) = parse_record(rec)?;
        labels.push(l);
        images.extend(px);
    }
    Ok(())
}

/// Loads the five training batches and the test batch from `dir`.
pub fn load_cifar10_binary(dir: impl AsRef<Path>) -> Result<Splits> {
    let dir = dir.as_ref();
    let load = |files: &[&str]| -> Result<Dataset> {
        let mut images = Vec::with_capacity(files.len() * CIFAR_PER_BATCH * CIFAR_PIXELS);
        let mut labels = Vec::with_capacity(files.len() * CIFAR_PER_BATCH);
        for f in files {
            read_batch(&dir.join(f), &mut images, &mut labels)?;
        }
        Dataset::new(images, labels, 3, CIFAR_SIDE, 10)
    };
    Ok(Splits {
        train: load(&CIFAR_TRAIN_FILES)?,
        val: load(&[CIFAR_TEST_FILE])?,
    })
}

/// Writes `splits` as CIFAR-10 batch files; the training split must hold
/// exactly 50000 examples and the validation split 10000.
pub fn write_cifar10_binary(dir: impl AsRef<Path>, splits: &Splits) -> Result<()> {
    let dir = dir.as_ref();
    for (d, want) in [
        (&splits.train, 5 * CIFAR_PER_BATCH),
        (&splits.val, CIFAR_PER_BATCH),
    ] {
        if d.len() != want || d.side != CIFAR_SIDE || d.channels != 3 || d.classes > 10 {
            return Err(Error::Validation(format!(
                "CIFAR-10 layout needs {want} 3×32×32 examples, got {} {}×{}×{}",
                d.len(),
                d.channels,
                d.side,
                d.side
            )));
        }
    }
    fs::create_dir_all(dir)?;
    let write = |name: &str, d: &Dataset, start: usize| -> Result<()> {
        let mut bytes = Vec::with_capacity(CIFAR_PER_BATCH * CIFAR_RECORD);
        for i in start..start + CIFAR_PER_BATCH {
            bytes.extend(encode_record(d.labels[i], d.image(i)));
        }
        fs::write(dir.join(name), bytes)?;
        Ok(())
    };
    for (k, name) in CIFAR_TRAIN_FILES.iter().enumerate() {
        write(name, &splits.train, k * CIFAR_PER_BATCH)?;
    }
    write(CIFAR_TEST_FILE, &splits.val, 0)
}

/// Parameters of the synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub train: usize,
    pub val: usize,
    pub classes: usize,
    #[serde(default = "default_side")]
    pub side: usize,
    /// Standard deviation of the per-pixel noise added to class prototypes.
    #[serde(default = "default_noise")]
    pub noise: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_side() -> usize {
    32
}
fn default_noise() -> f64 {
    0.5
}

/// Class prototypes are smooth random patterns; examples add Gaussian noise
/// and a random horizontal shift of up to two pixels. Labels cycle through
/// the classes before shuffling, so every class is present.
pub fn synthetic(spec: &SyntheticSpec) -> Result<Splits> {
    if spec.classes == 0 || spec.side == 0 || spec.train == 0 {
        return Err(Error::Config(
            "synthetic data needs classes, side and train > 0".into(),
        ));
    }
    let mut rng = Rng::new(spec.seed);
    let s = spec.side;
    let plane = s * s;
    let protos: Vec<Vec<f32>> = (0..spec.classes)
        .map(|_| {
            let f: Vec<f64> = (0..12).map(|_| rng.uniform_range(0.5, 3.0)).collect();
            let ph: Vec<f64> = (0..12)
                .map(|_| rng.uniform_range(0.0, std::f64::consts::TAU))
                .collect();
            (0..3 * plane)
                .map(|i| {
                    let (c, y, x) = (i / plane, (i % plane) / s, i % s);
                    let (u, v) = (x as f64 / s as f64, y as f64 / s as f64);
                    let k = 4 * c;
                    let a = (std::f64::consts::TAU * (f[k] * u + f[k + 1] * v) + ph[k]).sin();
                    let b =
                        (std::f64::consts::TAU * (f[k + 2] * u - f[k + 3] * v) + ph[k + 1]).cos();
                    (a + b) as f32
                })
                .collect()
        })
        .collect();
    let make = |n: usize, rng: &mut Rng| -> Result<Dataset> {
        let mut labels: Vec<usize> = (0..n).map(|i| i % spec.classes).collect();
        rng.shuffle(&mut labels);
        let mut images = Vec::with_capacity(n * 3 * plane);
        for &l in &labels {
            let shift = rng.below(5) as isize - 2;
            for i in 0..3 * plane {
                let (row, x) = (i / s, (i % s) as isize);
                let sx = (x + shift).rem_euclid(s as isize) as usize;
                images.push(protos[l][row * s + sx] + (spec.noise * rng.normal()) as f32);
            }
        }
        Dataset::new(images, labels, 3, s, spec.classes)
    };
    let train = make(spec.train, &mut rng)?;
    let val = make(spec.val, &mut rng)?;
    Ok(Splits { train, val })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_round_trip() {
        let mut rng = Rng::new(0);
        let mut rec = vec![7u8];
        rec.extend((0..CIFAR_PIXELS).map(|_| rng.below(256) as u8));
        let (label, px) = parse_record(&rec).unwrap();
        assert_eq!(label, 7);
        assert_eq!(px.len(), CIFAR_PIXELS);
        assert_eq!(encode_record(label, &px), rec);
        for b in 0..=255u8 {
            for c in 0..3 {
                assert_eq!(destandardize(standardize(b, c), c), b);
            }
        }
    }

    #[test]
    fn short_record_reports_sizes() {
        let e = parse_record(&[0u8; 100]).unwrap_err().to_string();
        assert!(e.contains("3073") && e.contains("100"), "{e}");
    }

    #[test]
    fn wrong_batch_size_reports_sizes() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("data_batch_1.bin"), vec![0u8; 3073 * 3]).unwrap();
        let e = load_cifar10_binary(dir.path()).unwrap_err().to_string();
        assert!(e.contains("30730000") && e.contains("9219"), "{e}");
    }

    #[test]
    fn synthetic_is_deterministic_and_labelled() {
        let spec = SyntheticSpec {
            train: 30,
            val: 10,
            classes: 3,
            side: 8,
            noise: 0.1,
            seed: 4,
        };
        let a = synthetic(&spec).unwrap();
        let b = synthetic(&spec).unwrap();
        assert_eq!(a.train.images, b.train.images);
        assert_eq!(a.train.labels, b.train.labels);
        for c in 0..3 {
            assert_eq!(a.train.labels.iter().filter(|&&l| l == c).count(), 10);
        }
    }

    #[test]
    fn flip_mirrors_rows_and_keeps_labels() {
        let d = Dataset::new(
            (0..2 * 3 * 4 * 4).map(|v| v as f32).collect(),
            vec![1, 0],
            3,
            4,
            2,
        )
        .unwrap();
        let (x, l) = d.batch::<f32>(&[1, 0], Some(&[true, false]));
        assert_eq!(l, vec![0, 1]);
        assert_eq!(&x.data()[..4], &[51.0, 50.0, 49.0, 48.0]);
        let mut a = x.data()[..48].to_vec();
        let mut b = d.image(1).to_vec();
        a.sort_by(f32::total_cmp);
        b.sort_by(f32::total_cmp);
        assert_eq!(a, b);
        assert_eq!(&x.data()[48..], d.image(0));
    }
}
