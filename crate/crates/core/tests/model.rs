use ldct_core::framelet::BankKind;
use ldct_core::gradcheck::toy_geometry;
use ldct_core::inversion::BETA_FLOOR;
use ldct_core::io::read_checkpoint;
use ldct_core::model::check::{toy_batch, toy_model};
use ldct_core::model::{
    loss, train, ForwardOptions, ForwardTrace, HpMode, Model, ModelConfig, TrainConfig, TrainSample,
};
use ldct_core::nn::{AdamConfig, BnMode};
use ldct_core::sim::{generate_phantom, simulate_sinogram, NoiseModel, PhantomKind};
use ldct_core::{Error, FilterBank, Image, Sinogram, SystemMatrix};

fn small() -> ModelConfig {
    ModelConfig {
        stages: 2,
        cnn_depth: 3,
        cnn_channels: 4,
        ..ModelConfig::default()
    }
}

fn dataset(a: &SystemMatrix, n: usize, seed: u64) -> Vec<TrainSample> {
    (0..n as u64)
        .map(|i| {
            let ph = generate_phantom(&PhantomKind::RandomEllipses, (16, 16), seed + i).unwrap();
            let y = simulate_sinogram(a, &ph.image, &NoiseModel::new(1e4, 10.0, seed + 50 + i).unwrap()).unwrap();
            TrainSample {
                y,
                truth: ph.image,
                dose: 1e4,
            }
        })
        .collect()
}

#[test]
fn zero_norms_give_the_floor() {
    let m = Model::<f64>::new(small()).unwrap();
    let l = m.channels();
    let b = m.predict_betas(1, &vec![0.0; l + 1]).unwrap();
    assert_eq!(b, vec![BETA_FLOOR; l]);
    assert!(m.predict_betas(1, &vec![0.0; l]).is_err());
    assert!(m.predict_betas(3, &vec![0.0; l + 1]).is_err());
}

#[test]
fn untrained_predictor_sums_norms() {
    let m = Model::<f64>::new(small()).unwrap();
    let l = m.channels();
    let norms: Vec<f64> = (0..=l).map(|i| 0.1 * i as f64).collect();
    let s: f64 = norms.iter().sum();
    for b in m.predict_betas(2, &norms).unwrap() {
        assert!((b - 256.0 * s).abs() < 1e-9 * b);
    }
}

#[test]
fn loss_of_unit_errors() {
    let n = 25;
    let truth = Image::zeros(5, 5);
    let est: Vec<Vec<Image>> = (0..4).map(|_| vec![Image::filled(5, 5, 1.0)]).collect();
    let trace: ForwardTrace<f64> = ForwardTrace {
        estimates: est,
        stage0_reports: vec![],
        stages: vec![],
        bank: FilterBank::bspline(),
        bn_mode: BnMode::Train,
    };
    let v = loss(&trace, &[&truth], 0.8);
    assert!((v - n as f64 * (1.0 + 0.8 + 0.8)).abs() < 1e-12);
    let perfect = ForwardTrace {
        estimates: vec![vec![truth.clone()]; 4],
        ..trace
    };
    assert_eq!(loss(&perfect, &[&truth], 0.8), 0.0);
}

#[test]
fn loss_matches_recomputation_from_trace() {
    let (a, ys, truths) = toy_batch(3).unwrap();
    let m = toy_model(BankKind::BsplineLinear, HpMode::Mlp, true, 4).unwrap();
    let yr: Vec<&Sinogram> = ys.iter().collect();
    let tr: Vec<&Image> = truths.iter().collect();
    let t = m.forward(&a, &yr, None, &ForwardOptions::default()).unwrap();
    let mut expect = 0.0;
    for (k, w) in [(1, 0.8), (2, 1.0)] {
        for (x, g) in t.estimates[k].iter().zip(&truths) {
            expect += w * x.data.iter().zip(&g.data).map(|(p, q)| (p - q).powi(2)).sum::<f64>();
        }
    }
    expect /= 2.0;
    assert!((loss(&t, &tr, 0.8) - expect).abs() < 1e-12 * expect.max(1.0));
}

#[test]
fn forward_is_deterministic() {
    let (a, ys, _) = toy_batch(5).unwrap();
    let m = toy_model(BankKind::BsplineLinear, HpMode::Mlp, true, 6).unwrap();
    let yr: Vec<&Sinogram> = ys.iter().collect();
    let t1 = m.forward(&a, &yr, None, &ForwardOptions::default()).unwrap();
    let t2 = m.forward(&a, &yr, None, &ForwardOptions::default()).unwrap();
    assert_eq!(t1.estimates, t2.estimates);
    assert_eq!(
        t1.stages.iter().map(|s| &s.betas).collect::<Vec<_>>(),
        t2.stages.iter().map(|s| &s.betas).collect::<Vec<_>>()
    );
}

#[test]
fn stage0_ignores_weights_and_betas_stay_positive() {
    let (a, ys, _) = toy_batch(8).unwrap();
    let yr: Vec<&Sinogram> = ys.iter().collect();
    let m1 = toy_model(BankKind::BsplineLinear, HpMode::Mlp, true, 1).unwrap();
    let m2 = toy_model(BankKind::BsplineLinear, HpMode::Mlp, true, 2).unwrap();
    assert_ne!(m1.params, m2.params);
    let s1: Vec<Image> = m1.stage0(&a, &yr).unwrap().into_iter().map(|p| p.0).collect();
    let s2: Vec<Image> = m2.stage0(&a, &yr).unwrap().into_iter().map(|p| p.0).collect();
    assert_eq!(s1, s2);
    let t = m1.forward(&a, &yr, None, &ForwardOptions::default()).unwrap();
    assert!(t
        .stages
        .iter()
        .flat_map(|s| s.betas.iter().flatten())
        .all(|&b| b >= BETA_FLOOR));
}

#[test]
fn single_stage_model() {
    let (a, ys, _) = toy_batch(2).unwrap();
    let m = Model::<f64>::new(ModelConfig { stages: 1, ..small() }).unwrap();
    let t = m.forward(&a, &[&ys[0]], None, &ForwardOptions::default()).unwrap();
    assert_eq!(t.estimates.len(), 2);
    assert_eq!(t.stages.len(), 1);
}

/// Residual denoiser with a zero last layer, started at the truth on
/// noiseless data.
fn fixed_point_setup() -> (SystemMatrix, Sinogram, Image, Model<f64>) {
    let a = SystemMatrix::build(&toy_geometry(16)).unwrap();
    let truth = generate_phantom(&PhantomKind::RandomEllipses, (16, 16), 11)
        .unwrap()
        .image;
    let y = a.forward_project(&truth).unwrap();
    let m = Model::<f64>::new(ModelConfig {
        residual: true,
        zero_init_last: true,
        cg: ldct_core::CgSettings::verification(),
        ..small()
    })
    .unwrap();
    (a, y, truth, m)
}

#[test]
fn consistent_data_is_a_fixed_point() {
    let (a, y, truth, m) = fixed_point_setup();
    let t = m
        .forward(
            &a,
            &[&y],
            Some(std::slice::from_ref(&truth)),
            &ForwardOptions::default(),
        )
        .unwrap();
    for est in &t.estimates[1..] {
        let err: f64 = est[0]
            .data
            .iter()
            .zip(&truth.data)
            .map(|(p, q)| (p - q).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-9 * truth.max(), "max deviation {err}");
    }
}

#[test]
fn perfect_trace_has_vanishing_gradients() {
    let (a, y, truth, mut m) = fixed_point_setup();
    let t = m
        .forward(
            &a,
            &[&y],
            Some(std::slice::from_ref(&truth)),
            &ForwardOptions::default(),
        )
        .unwrap();
    m.params.zero_grad();
    let v = m.backward(&a, &[&y], &t, &[&truth]).unwrap();
    assert!(v < 1e-20);
    let worst = m
        .params
        .params
        .iter()
        .flat_map(|p| &p.grad)
        .fold(0.0_f64, |w, g| w.max(g.abs()));
    assert!(worst < 1e-10, "largest gradient {worst}");
}

#[test]
fn restricted_mode_changes_the_gradient() {
    let (a, ys, truths) = toy_batch(4).unwrap();
    let yr: Vec<&Sinogram> = ys.iter().collect();
    let tr: Vec<&Image> = truths.iter().collect();
    let mut grads = Vec::new();
    for full in [true, false] {
        let mut m = toy_model(BankKind::BsplineLinear, HpMode::Mlp, full, 9).unwrap();
        let t = m.forward(&a, &yr, None, &ForwardOptions::default()).unwrap();
        m.params.zero_grad();
        m.backward(&a, &yr, &t, &tr).unwrap();
        grads.push(
            m.params
                .params
                .iter()
                .flat_map(|p| p.grad.clone())
                .collect::<Vec<f64>>(),
        );
    }
    let diff: f64 = grads[0].iter().zip(&grads[1]).map(|(p, q)| (p - q).abs()).sum();
    assert!(diff > 1e-8);
}

#[test]
fn denoiser_contracts() {
    let m = Model::<f64>::new(ModelConfig {
        bank: BankKind::None,
        hp_mode: HpMode::LearnableConstant,
        zero_init_last: true,
        ..small()
    })
    .unwrap();
    let hist = vec![vec![Image::filled(8, 8, 0.02), Image::filled(8, 8, 0.03)]];
    let out = m.denoise_stage(2, &hist, BnMode::Train).unwrap();
    assert!(out[0].0.data.iter().all(|&v| v == 0.0));
    assert_eq!(out[0].1.data, out[0].0.data);
    assert!(m.denoise_stage(1, &hist, BnMode::Train).is_err());
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let a = SystemMatrix::build(&toy_geometry(16)).unwrap();
    let data = dataset(&a, 4, 20);
    let mut m = Model::<f32>::new(small()).unwrap();
    let before = m.params.clone();
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 2,
        adam: AdamConfig {
            lr: 0.0,
            ..AdamConfig::default()
        },
        ..TrainConfig::default()
    };
    let rep = train(&mut m, &a, &data, &[], &cfg, None).unwrap();
    assert_eq!(rep.epochs.len(), 1);
    for (p, q) in m.params.params.iter().zip(&before.params).filter(|(p, _)| p.trainable) {
        assert_eq!(p.value, q.value, "{}", p.name);
    }
}

#[test]
fn identical_seeds_give_identical_checkpoints() {
    let a = SystemMatrix::build(&toy_geometry(16)).unwrap();
    let data = dataset(&a, 4, 30);
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 2,
        seed: 5,
        ..TrainConfig::default()
    };
    let mut bytes = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        let mut m = Model::<f32>::new(small()).unwrap();
        let rep = train(&mut m, &a, &data, &data[..2], &cfg, Some(dir.path())).unwrap();
        assert!(rep.to_csv().starts_with("epoch,loss,val_psnr,wall_time"));
        assert!(rep.epochs.iter().all(|e| e.val_psnr.is_some()));
        bytes.push(std::fs::read(dir.path().join("final.ahpc")).unwrap());
        assert!(read_checkpoint(&dir.path().join("final.ahpc")).is_ok());
    }
    assert_eq!(bytes[0], bytes[1]);
}

#[test]
fn constant_weights_are_calibrated() {
    let a = SystemMatrix::build(&toy_geometry(16)).unwrap();
    let data = dataset(&a, 2, 40);
    let mut m = Model::<f64>::new(ModelConfig {
        hp_mode: HpMode::LearnableConstant,
        ..small()
    })
    .unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 2,
        ..TrainConfig::default()
    };
    let rep = train(&mut m, &a, &data, &[], &cfg, None).unwrap();
    let c = rep.calibrated_betas.unwrap();
    assert_eq!(c.len(), 2);
    assert!(c.iter().all(|&b| b > 0.0 && b.is_finite()));
}

#[test]
fn non_finite_loss_aborts_with_a_dump() {
    let a = SystemMatrix::build(&toy_geometry(16)).unwrap();
    let data = dataset(&a, 2, 50);
    let mut m = Model::<f64>::new(small()).unwrap();
    m.params.params[0].value.data[0] = f64::NAN;
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 2,
        ..TrainConfig::default()
    };
    let err = train(&mut m, &a, &data, &[], &cfg, Some(dir.path())).unwrap_err();
    assert!(matches!(err, Error::NonFiniteLoss { epoch: 1, batch: 0, .. }), "{err}");
    let dump = std::fs::read_to_string(dir.path().join("nonfinite_batch.json")).unwrap();
    assert!(dump.contains("sample_indices"));
}
