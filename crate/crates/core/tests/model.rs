use vssd_core::gradcheck::{grad_check, GradCheckOptions};
use vssd_core::model::block::{Block, MsaMixer, TokenMixer};
use vssd_core::model::layers::{DwConv, Init};
use vssd_core::model::{
    count_params_flops, count_params_flops_at, load_checkpoint, save_checkpoint, Bound, Forward,
    Mixer, Model, ModelConfig, NcssdForm, ParamStore, Probe,
};
use vssd_core::ncssd::route::ScanRoute;
use vssd_core::{Rng, Tape, Tensor};

fn tiny_cfg(classes: usize) -> ModelConfig {
    ModelConfig {
        blocks: vec![1, 1],
        channels: vec![8, 16],
        heads: vec![2, 2],
        state_dim: 4,
        num_classes: classes,
        ..ModelConfig::reduced(classes)
    }
}

fn within(value: f64, target: f64, tol: f64) -> bool {
    (value - target).abs() <= tol * target
}

#[test]
fn table_one_counts() {
    let micro = count_params_flops(&ModelConfig::micro()).unwrap();
    assert!(within(micro.params_m(), 14.0, 0.10), "{}", micro.params_m());
    assert!(within(micro.gmacs(), 2.3, 0.15), "{}", micro.gmacs());
    assert_eq!(micro.flops, 2 * micro.macs);
    let tiny = count_params_flops(&ModelConfig::tiny()).unwrap();
    assert!(within(tiny.params_m(), 24.0, 0.10), "{}", tiny.params_m());
    assert!(within(tiny.gmacs(), 4.5, 0.15), "{}", tiny.gmacs());
}

#[test]
fn built_parameter_count_matches_report() {
    for cfg in [ModelConfig::micro(), ModelConfig::reduced(10), tiny_cfg(2)] {
        let (_, store) = Model::build::<f32>(&cfg, &mut Rng::new(1)).unwrap();
        assert_eq!(
            store.numel() as u64,
            count_params_flops(&cfg).unwrap().params,
            "{}",
            cfg.name
        );
    }
    let mut cfg = tiny_cfg(2).with_uniform_mixer(Mixer::BiSsd);
    cfg.gate = false;
    cfg.lpu = false;
    let (_, store) = Model::build::<f32>(&cfg, &mut Rng::new(1)).unwrap();
    assert_eq!(
        store.numel() as u64,
        count_params_flops(&cfg).unwrap().params
    );
}

#[test]
fn doubling_widths_roughly_quadruples_parameters() {
    let a = ModelConfig::micro();
    let mut b = a.clone();
    b.channels = a.channels.iter().map(|c| 2 * c).collect();
    b.num_classes = 0;
    let mut a0 = a.clone();
    a0.num_classes = 0;
    let ratio = count_params_flops(&b).unwrap().params as f64
        / count_params_flops(&a0).unwrap().params as f64;
    assert!((3.7..4.0).contains(&ratio), "{ratio}");
}

#[test]
fn mixer_cost_is_linear_in_tokens_except_attention() {
    let cfg = ModelConfig::micro();
    let r: Vec<_> = [224, 448, 896]
        .iter()
        .map(|&s| count_params_flops_at(&cfg, s, s).unwrap())
        .collect();
    for stage in 0..3 {
        for w in r.windows(2) {
            assert_eq!(w[1].mixer_macs[stage], 4 * w[0].mixer_macs[stage]);
        }
    }
    for w in r.windows(2) {
        assert!(w[1].mixer_macs[3] > 4 * w[0].mixer_macs[3]);
    }
}

#[test]
fn rebuild_with_same_seed_is_bitwise_identical() {
    let cfg = tiny_cfg(3);
    let (m1, p1) = Model::build::<f64>(&cfg, &mut Rng::new(9)).unwrap();
    let (_, p2) = Model::build::<f64>(&cfg, &mut Rng::new(9)).unwrap();
    let (_, p3) = Model::build::<f64>(&cfg, &mut Rng::new(10)).unwrap();
    assert!(p1.bitwise_eq(&p2));
    assert!(!p1.bitwise_eq(&p3));
    let x = Tensor::randn(&[2, 3, 16, 16], 1.0, &mut Rng::new(2));
    let y1 = m1.infer(&p1, &x).unwrap();
    let y2 = m1.infer(&p2, &x).unwrap();
    assert_eq!(y1.shape(), &[2, 3]);
    assert!(y1.bitwise_eq(&y2));
}

#[test]
fn headless_model_emits_last_stage_features() {
    let cfg = tiny_cfg(0);
    let (m, p) = Model::build::<f32>(&cfg, &mut Rng::new(0)).unwrap();
    let y = m
        .infer(&p, &Tensor::randn(&[1, 3, 32, 32], 1.0, &mut Rng::new(1)))
        .unwrap();
    assert_eq!(y.shape(), &[1, 16, 4, 4]);
}

#[test]
fn input_extent_must_divide_stride() {
    let cfg = tiny_cfg(2);
    let (m, p) = Model::build::<f32>(&cfg, &mut Rng::new(0)).unwrap();
    assert!(m.infer(&p, &Tensor::zeros(&[1, 3, 12, 12])).is_err());
    assert!(m.infer(&p, &Tensor::zeros(&[1, 1, 16, 16])).is_err());
}

#[test]
fn every_mixer_variant_runs() {
    for mixer in Mixer::ALL {
        let cfg = tiny_cfg(4).with_uniform_mixer(mixer);
        let (m, p) = Model::build::<f64>(&cfg, &mut Rng::new(3)).unwrap();
        let y = m
            .infer(&p, &Tensor::randn(&[2, 3, 16, 16], 1.0, &mut Rng::new(4)))
            .unwrap();
        assert_eq!(y.shape(), &[2, 4]);
        assert!(y.all_finite(), "{mixer}");
    }
}

#[test]
fn fused_and_contraction_forms_agree_in_the_model() {
    let cfg = tiny_cfg(5);
    let (m, p) = Model::build::<f64>(&cfg, &mut Rng::new(3)).unwrap();
    let x = Tensor::randn(&[2, 3, 16, 16], 1.0, &mut Rng::new(4));
    let run = |form| {
        let tape = Tape::new();
        let b = p.bind(&tape, false);
        let mut fwd = Forward {
            form,
            ..Forward::default()
        };
        m.forward(&b, tape.constant(x.clone()), &mut fwd)
            .unwrap()
            .value()
    };
    let d = run(NcssdForm::Fused)
        .max_abs_diff(&run(NcssdForm::Contraction))
        .unwrap();
    assert!(d < 1e-10, "{d}");
}

fn block_of(model: &Model, stage: usize) -> &Block {
    &model.stages[stage].blocks[0]
}

fn run_block(block: &Block, p: &ParamStore<f64>, x: &Tensor<f64>) -> Tensor<f64> {
    let tape = Tape::new();
    let b = p.bind(&tape, false);
    block
        .forward(&b, tape.constant(x.clone()), &mut Forward::default())
        .unwrap()
        .0
        .value()
}

#[test]
fn zero_residual_branches_give_identity() {
    let cfg = tiny_cfg(2);
    let (m, mut p) = Model::build::<f64>(&cfg, &mut Rng::new(5)).unwrap();
    for stage in 0..2 {
        let block = block_of(&m, stage);
        for lpu in [&block.lpu1, &block.lpu2].into_iter().flatten() {
            lpu.set_delta(&mut p, 0.0);
        }
        let out = match &block.mixer {
            TokenMixer::Ssd(mx) => mx.out_proj.clone(),
            TokenMixer::Msa(mx) => mx.proj.clone(),
        };
        for id in [Some(out.w), out.b, Some(block.fc2.w), block.fc2.b]
            .into_iter()
            .flatten()
        {
            let shape = p.get(id).shape().to_vec();
            p.set(id, Tensor::zeros(&shape)).unwrap();
        }
        let c = cfg.channels[stage];
        let x = Tensor::randn(&[2, c, 4, 4], 1.0, &mut Rng::new(6));
        assert!(run_block(block, &p, &x).bitwise_eq(&x));
    }
}

#[test]
fn single_token_block_matches_causal_block() {
    let nc = tiny_cfg(2);
    let causal = nc.clone().with_uniform_mixer(Mixer::Ssd);
    let nc = ModelConfig {
        mixers: vec![Mixer::Ncssd, Mixer::Ncssd],
        allow_inner_msa: false,
        ..nc
    };
    let (ma, mut pa) = Model::build::<f64>(&nc, &mut Rng::new(8)).unwrap();
    let (mb, mut pb) = Model::build::<f64>(&causal, &mut Rng::new(8)).unwrap();
    assert!(pa.bitwise_eq(&pb));
    // Δ → 0 drives m → 1, so the single token carries unit weight in both.
    for p in [&mut pa, &mut pb] {
        let id = p.id("stages.0.0.mixer.dt_bias").unwrap();
        p.set(id, Tensor::full(&[2], -40.0)).unwrap();
    }
    let x = Tensor::randn(&[3, 8, 1, 1], 1.0, &mut Rng::new(1));
    let ya = run_block(block_of(&ma, 0), &pa, &x);
    let yb = run_block(block_of(&mb, 0), &pb, &x);
    assert!(ya.max_abs_diff(&yb).unwrap() < 1e-12);
}

#[test]
fn lpu_residual_with_delta_kernel_doubles() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = Rng::new(0);
    let conv = DwConv::new(
        &mut Init {
            store: &mut store,
            rng: &mut rng,
        },
        "lpu",
        3,
    );
    let x = Tensor::randn(&[2, 3, 5, 4], 1.0, &mut Rng::new(1));
    let apply = |store: &ParamStore<f64>| {
        let tape = Tape::new();
        let b = store.bind(&tape, false);
        let v = tape.constant(x.clone());
        v.add(conv.forward(&b, v).unwrap()).unwrap().value()
    };
    conv.set_delta(&mut store, 1.0);
    let y = apply(&store);
    assert!(y.bitwise_eq(&x.map(|v| 2.0 * v)));
    conv.set_delta(&mut store, 0.0);
    assert!(apply(&store).bitwise_eq(&x));
}

#[test]
fn lpu_gradient() {
    let x = Tensor::randn(&[1, 2, 4, 3], 1.0, &mut Rng::new(1));
    let w = Tensor::uniform(&[2, 3, 3], -0.3, 0.3, &mut Rng::new(2));
    let bias = Tensor::randn(&[2], 1.0, &mut Rng::new(3));
    let r = grad_check(
        |_, v| {
            let y = v[0].add(v[0].dwconv2d(v[1], Some(v[2]), 1)?)?;
            Ok(y.square().sum())
        },
        &[x, w, bias],
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(r.max_rel_err < 1e-6, "{r:?}");
}

fn msa(c: usize, heads: usize) -> (MsaMixer, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let mut rng = Rng::new(4);
    let m = MsaMixer::new(
        &mut Init {
            store: &mut store,
            rng: &mut rng,
        },
        "attn",
        c,
        heads,
    );
    (m, store)
}

fn attend(m: &MsaMixer, p: &ParamStore<f64>, x: &Tensor<f64>) -> (Tensor<f64>, Tensor<f64>) {
    let tape = Tape::new();
    let b = p.bind(&tape, false);
    let (a, y) = m.attend(&b, tape.constant(x.clone())).unwrap();
    (a.value(), y.value())
}

#[test]
fn attention_rows_sum_to_one() {
    let (m, p) = msa(8, 2);
    let (a, _) = attend(&m, &p, &Tensor::randn(&[2, 7, 8], 1.0, &mut Rng::new(0)));
    assert_eq!(a.shape(), &[4, 7, 7]);
    for row in a.data().chunks(7) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn attention_single_token_and_identical_tokens() {
    let (m, p) = msa(8, 4);
    let (a, _) = attend(&m, &p, &Tensor::randn(&[1, 1, 8], 1.0, &mut Rng::new(0)));
    assert!(a.data().iter().all(|&v| v == 1.0));
    let token = Tensor::randn(&[8], 1.0, &mut Rng::new(1));
    let x = Tensor::from_fn(&[1, 5, 8], |i| token.data()[i % 8]);
    let (a, _) = attend(&m, &p, &x);
    assert!(a.data().iter().all(|&v| (v - 0.2).abs() < 1e-12));
}

#[test]
fn overlapped_downsampling_differs_from_patchify_on_checkerboard() {
    let x = Tensor::from_fn(&[1, 1, 8, 8], |i| {
        if (i / 8 + i % 8) % 2 == 0 {
            1.0
        } else {
            -1.0
        }
    });
    let tape = Tape::new();
    let v = tape.constant(x);
    let over = v
        .conv2d(tape.constant(Tensor::ones(&[1, 1, 3, 3])), None, 2, 1)
        .unwrap()
        .value();
    let patch = v
        .conv2d(tape.constant(Tensor::ones(&[1, 1, 2, 2])), None, 2, 0)
        .unwrap()
        .value();
    assert_eq!(over.shape(), &[1, 1, 4, 4]);
    assert_eq!(patch.shape(), &[1, 1, 4, 4]);
    assert!(patch.data().iter().all(|&v| v == 0.0));
    assert!(over.data().iter().any(|&v| v != 0.0));
}

#[test]
fn mixer_is_equivariant_to_token_order_without_local_paths() {
    let mut cfg = tiny_cfg(2);
    cfg.lpu = false;
    let (m, mut p) = Model::build::<f64>(&cfg, &mut Rng::new(2)).unwrap();
    m.zero_local_paths(&mut p);
    let block = block_of(&m, 0);
    let TokenMixer::Ssd(mx) = &block.mixer else {
        panic!("expected an SSD mixer")
    };
    let (h, w, c) = (3, 4, 8);
    let u = Tensor::randn(&[2, h * w, c], 1.0, &mut Rng::new(3));
    let route = ScanRoute::random(h * w, &mut Rng::new(4));
    let run = |u: &Tensor<f64>| {
        let tape = Tape::new();
        let b = p.bind(&tape, false);
        mx.forward(&b, tape.constant(u.clone()), h, w, NcssdForm::Fused)
            .unwrap()
            .0
            .value()
    };
    let y = run(&u);
    let y_perm = run(&route.apply(&u, 1).unwrap());
    let d = route.apply(&y, 1).unwrap().max_abs_diff(&y_perm).unwrap();
    assert!(d < 1e-12, "{d}");
}

#[test]
fn probe_records_norms_and_m() {
    let cfg = tiny_cfg(2);
    let (m, p) = Model::build::<f32>(&cfg, &mut Rng::new(2)).unwrap();
    let tape = Tape::new();
    let b = p.bind(&tape, false);
    let mut probe = Probe {
        record_m: true,
        ..Probe::default()
    };
    let x = Tensor::randn(&[1, 3, 16, 16], 1.0, &mut Rng::new(0));
    let mut fwd = Forward {
        probe: Some(&mut probe),
        ..Forward::default()
    };
    m.forward(&b, tape.constant(x), &mut fwd).unwrap();
    assert_eq!(probe.blocks.len(), 2);
    let first = &probe.blocks[0];
    assert_eq!(first.grid, (4, 4));
    assert_eq!(first.m.as_ref().unwrap().shape(), &[1, 16, 2]);
    assert!(first
        .m
        .as_ref()
        .unwrap()
        .data()
        .iter()
        .all(|&v| v > 0.0 && v <= 1.0));
    assert!(probe.blocks[1].m.is_none());
    assert!(first.max_norm >= first.mean_norm && first.mean_norm > 0.0);
}

#[test]
fn drop_path_is_identity_without_rng_and_stochastic_with_it() {
    let mut cfg = tiny_cfg(2);
    cfg.drop_path = 0.5;
    cfg.blocks = vec![2, 2];
    let (m, p) = Model::build::<f64>(&cfg, &mut Rng::new(2)).unwrap();
    let x = Tensor::randn(&[4, 3, 16, 16], 1.0, &mut Rng::new(0));
    let run = |rng: Option<&mut Rng>| {
        let tape = Tape::new();
        let b = p.bind(&tape, false);
        let mut fwd = Forward {
            rng,
            ..Forward::default()
        };
        m.forward(&b, tape.constant(x.clone()), &mut fwd)
            .unwrap()
            .value()
    };
    let eval = run(None);
    assert!(eval.bitwise_eq(&m.infer(&p, &x).unwrap()));
    let mut r1 = Rng::new(7);
    let mut r2 = Rng::new(7);
    let a = run(Some(&mut r1));
    assert!(a.bitwise_eq(&run(Some(&mut r2))));
    assert!(!a.bitwise_eq(&eval));
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_cfg(2);
    let (m, p) = Model::build::<f32>(&cfg, &mut Rng::new(11)).unwrap();
    save_checkpoint(dir.path(), &cfg, &p, 3, 40).unwrap();
    let text = std::fs::read_to_string(dir.path().join("manifest.toml")).unwrap();
    assert!(text.contains("blocks = [1, 1]"), "{text}");
    let (m2, p2, manifest) = load_checkpoint::<f32>(dir.path()).unwrap();
    assert!(p.bitwise_eq(&p2));
    assert_eq!((manifest.epoch, manifest.step), (3, 40));
    let x = Tensor::randn(&[1, 3, 16, 16], 1.0, &mut Rng::new(0));
    assert!(m
        .infer(&p, &x)
        .unwrap()
        .bitwise_eq(&m2.infer(&p2, &x).unwrap()));
    let (_, p64, _) = load_checkpoint::<f64>(dir.path()).unwrap();
    assert!(p64.cast::<f32>().bitwise_eq(&p));
}

#[test]
fn corrupt_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_cfg(2);
    let (_, p) = Model::build::<f32>(&cfg, &mut Rng::new(11)).unwrap();
    save_checkpoint(dir.path(), &cfg, &p, 0, 0).unwrap();
    std::fs::write(dir.path().join("0000.nctd"), b"NCTD").unwrap();
    assert!(load_checkpoint::<f32>(dir.path()).is_err());
}

#[test]
fn reduced_model_gradient() {
    let cfg = ModelConfig {
        blocks: vec![1, 1],
        channels: vec![8, 16],
        heads: vec![2, 4],
        state_dim: 4,
        num_classes: 2,
        ..ModelConfig::reduced(2)
    };
    let (m, p) = Model::build::<f64>(&cfg, &mut Rng::new(1)).unwrap();
    let mut leaves: Vec<Tensor<f64>> = p.values().to_vec();
    leaves.push(Tensor::randn(&[2, 3, 16, 16], 1.0, &mut Rng::new(2)));
    let n = p.len();
    let opts = GradCheckOptions {
        max_per_leaf: Some(4),
        ..GradCheckOptions::default()
    };
    let r = grad_check(
        |_, v| {
            let b = Bound::from_vars(v[..n].to_vec());
            let logits = m.forward(&b, v[n], &mut Forward::default())?;
            logits.cross_entropy_smoothed(&[0, 1], 0.1)
        },
        &leaves,
        &opts,
    )
    .unwrap();
    assert!(r.max_rel_err < 1e-4, "{r:?}");
    assert!(r.checked > 100);
}
