use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use vssd_core::analysis::image::write_ppm;
use vssd_core::model::ModelConfig;
use vssd_core::train::{DatasetSpec, SyntheticSpec, TrainConfig};
use vssd_core::{DType, Rng, Tensor};

fn vssd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vssd"))
        .args(args)
        .env("VSSD_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn train_config(epochs: usize, lr: f64) -> TrainConfig {
    TrainConfig {
        epochs,
        warmup_epochs: 0,
        batch_size: 16,
        lr,
        weight_decay: 0.05,
        betas: [0.9, 0.999],
        eps: 1e-8,
        label_smoothing: 0.0,
        ema_decay: None,
        seed: 0,
        drop_path: None,
        hflip: false,
        checkpoint_every: 1,
        eval_batch_size: 32,
        dtype: DType::F32,
        max_steps: None,
        probe_norms: false,
        model: Some(ModelConfig {
            blocks: vec![1, 1],
            channels: vec![8, 16],
            heads: vec![2, 2],
            state_dim: 4,
            num_classes: 3,
            ..ModelConfig::reduced(3)
        }),
        dataset: DatasetSpec::Synthetic(SyntheticSpec {
            train: 32,
            val: 16,
            classes: 3,
            side: 16,
            noise: 0.5,
            seed: 0,
        }),
    }
}

#[test]
fn check_passes_and_injected_fault_fails_the_mask_suite() {
    let ok = vssd(&["check", "--suite", "mask", "--suite", "lti"]);
    assert!(ok.status.success(), "{}", stdout(&ok));
    assert!(stdout(&ok).contains("PASS mask"));
    let bad = vssd(&[
        "check",
        "--suite",
        "mask",
        "--seed",
        "7",
        "--inject-fault",
        "flip-mask-sign",
    ]);
    assert_eq!(bad.status.code(), Some(1));
    let out = stdout(&bad);
    assert!(out.contains("FAIL mask") && out.contains("seed 7"), "{out}");
    assert_eq!(vssd(&["check", "--suite", "bogus"]).status.code(), Some(1));
}

#[test]
fn check_is_deterministic_for_a_seed() {
    let worst = |o: &Output| -> Vec<String> {
        stdout(o)
            .split_whitespace()
            .filter(|w| w.starts_with("worst="))
            .map(String::from)
            .collect()
    };
    let args = [
        "check",
        "--suite",
        "ncssd-forms",
        "--suite",
        "causal-equivalence",
        "--seed",
        "42",
    ];
    let (a, b) = (vssd(&args), vssd(&args));
    assert!(a.status.success());
    assert_eq!(worst(&a).len(), 2);
    assert_eq!(worst(&a), worst(&b));
}

#[test]
fn bench_appends_rows_and_rejects_bad_specs() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("bench.csv");
    for v in ["nc-ssd-fused", "bi-ssd"] {
        let o = vssd(&[
            "bench",
            "--variant",
            v,
            "--len",
            "64",
            "--state",
            "4",
            "--headdim",
            "4",
            "--heads",
            "2",
            "--batch",
            "2",
            "--dtype",
            "float32",
            "--mode",
            "forward+backward",
            "--iters",
            "5",
            "--csv",
            p(&csv),
        ]);
        assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    }
    let text = fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0], vssd_core::bench::CSV_HEADER);
    // identical inputs across variants
    let hash = |l: &str| l.split(',').nth(16).unwrap().to_string();
    assert_eq!(hash(lines[1]), hash(lines[2]));
    let o = vssd(&["bench", "--variant", "ssd", "--batch", "0"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("batch"), "{}", stderr(&o));
    let o = vssd(&[
        "bench",
        "--variant",
        "ssd",
        "--len",
        "100000",
        "--budget-mib",
        "1",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("resource"), "{}", stderr(&o));
}

#[test]
fn tensor_export_import_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.nctd");
    let b = dir.path().join("b.nctd");
    assert!(vssd(&[
        "export-tensor",
        "--random",
        "3,4",
        "--seed",
        "5",
        "--out",
        p(&a)
    ])
    .status
    .success());
    assert!(vssd(&[
        "export-tensor",
        "--random",
        "3,4",
        "--seed",
        "5",
        "--out",
        p(&b)
    ])
    .status
    .success());
    let o = vssd(&["import-tensor", p(&a), "--compare", p(&b)]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("bitwise identical: true"));
    let o = vssd(&[
        "export-tensor",
        "--random",
        "3,4",
        "--seed",
        "6",
        "--out",
        p(&b),
    ]);
    assert!(o.status.success());
    assert_eq!(
        vssd(&["import-tensor", p(&a), "--compare", p(&b)])
            .status
            .code(),
        Some(1)
    );
    let bytes = fs::read(&a).unwrap();
    fs::write(&b, &bytes[..bytes.len() - 8]).unwrap();
    let o = vssd(&["import-tensor", p(&b)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(
        stderr(&o).contains("122") && stderr(&o).contains("114"),
        "{}",
        stderr(&o)
    );
}

#[test]
fn oracle_directories_are_recomputed_exactly() {
    let dir = tempfile::tempdir().unwrap();
    for kind in ["ssd", "ncssd"] {
        let d = dir.path().join(kind);
        let o = vssd(&[
            "export-tensor",
            "--oracle",
            kind,
            "--len",
            "12",
            "--seed",
            "3",
            "--out",
            p(&d),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        let o = vssd(&[
            "import-tensor",
            "--oracle",
            kind,
            "--dir",
            p(&d),
            "--tol",
            "1e-12",
        ]);
        assert!(o.status.success(), "{}", stdout(&o));
    }
    // a perturbed reference output is caught
    let y = dir.path().join("ncssd/y.nctd");
    let mut t = vssd_core::io::read_tensor(&y).unwrap().into_dtype::<f64>();
    t.data_mut()[0] += 1e-6;
    vssd_core::io::write_tensor(&y, &t).unwrap();
    let o = vssd(&[
        "import-tensor",
        "--oracle",
        "ncssd",
        "--dir",
        p(&dir.path().join("ncssd")),
        "--tol",
        "1e-12",
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn train_then_analyse_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("train.toml");
    fs::write(&cfg, train_config(2, 1e-3).to_toml()).unwrap();
    let out = dir.path().join("run");
    let o = vssd(&["train", "--config", p(&cfg), "--out", p(&out)]);
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("epoch,step,lr,train_loss,val_acc,wall_seconds\n"));
    assert_eq!(metrics.lines().count(), 3);
    assert!(out.join("config.toml").exists());

    let images = dir.path().join("images");
    fs::create_dir(&images).unwrap();
    let mut rng = Rng::new(0);
    for i in 0..2 {
        write_ppm(
            images.join(format!("{i}.ppm")),
            &Tensor::uniform(&[3, 16, 16], 0.0, 1.0, &mut rng),
        )
        .unwrap();
    }
    let ckpt = out.join("final");
    let pgm = dir.path().join("erf.pgm");
    let o = vssd(&[
        "erf",
        "--ckpt",
        p(&ckpt),
        "--images",
        p(&images),
        "--out",
        p(&pgm),
        "--log-scale",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(fs::read(&pgm).unwrap().starts_with(b"P5\n16 16\n255\n"));

    let hm = dir.path().join("m.pgm");
    let img = images.join("0.ppm");
    let o = vssd(&[
        "heatmap-m",
        "--ckpt",
        p(&ckpt),
        "--image",
        p(&img),
        "--stage",
        "1",
        "--out",
        p(&hm),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(fs::read(&hm).unwrap().starts_with(b"P5\n4 4\n255\n"));
    let o = vssd(&[
        "heatmap-m",
        "--ckpt",
        p(&ckpt),
        "--image",
        p(&img),
        "--stage",
        "1",
        "--out",
        p(&hm),
        "--upsample",
    ]);
    assert!(o.status.success());
    assert!(fs::read(&hm).unwrap().starts_with(b"P5\n16 16\n255\n"));
    assert_eq!(
        vssd(&[
            "heatmap-m",
            "--ckpt",
            p(&ckpt),
            "--image",
            p(&img),
            "--stage",
            "3",
            "--out",
            p(&hm)
        ])
        .status
        .code(),
        Some(1)
    );
}

#[test]
fn divergent_training_exits_with_code_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("train.toml");
    fs::write(&cfg, train_config(6, 1e6).to_toml()).unwrap();
    let o = vssd(&[
        "train",
        "--config",
        p(&cfg),
        "--out",
        p(&dir.path().join("run")),
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", stdout(&o));
    assert!(stdout(&o).contains("diverged"));
}

#[test]
fn stability_traces_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("s.toml");
    fs::write(&cfg, train_config(2, 1e-3).to_toml()).unwrap();
    let trace = dir.path().join("trace.csv");
    let o = vssd(&[
        "stability",
        "--config",
        p(&cfg),
        "--no-m",
        "--out",
        p(&trace),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(&trace).unwrap();
    assert_eq!(text.lines().count(), 1 + 2 * 2);
    assert!(text.lines().skip(1).all(|l| l.starts_with("false,")));
    let report = dir.path().join("report.md");
    let o = vssd(&[
        "stability",
        "--config",
        p(&cfg),
        "--out",
        p(&trace),
        "--report",
        p(&report),
    ]);
    assert!(o.status.success());
    assert_eq!(
        fs::read_to_string(&trace).unwrap().lines().count(),
        1 + 2 * 2 * 2
    );
    assert!(fs::read_to_string(&report).unwrap().contains("## m = 1"));
}
