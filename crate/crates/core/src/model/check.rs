//! Finite-difference checks of the predictor, the denoiser and the whole
//! unrolled network on toy problems.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::mlp::{mlp_backward, mlp_forward};
use super::net::{loss, ForwardOptions};
use super::{HpIdx, HpMode, Model, ModelConfig};
use crate::error::Result;
use crate::framelet::{BankKind, SubbandStack};
use crate::geometry::SystemMatrix;
use crate::gradcheck::{
    central_diff, normal_vec, probe_indices, rel_err, rel_err_floored, tight_cg, toy_geometry, CheckResult,
    LOCAL_TOLERANCE, MODEL_TOLERANCE,
};
use crate::nn::{BnMode, Tensor4};
use crate::raster::vecops::dot;
use crate::raster::{Image, Sinogram};
use crate::sim::{generate_phantom, simulate_sinogram, NoiseModel, PhantomKind};

/// Two-stage model with three-block, four-channel CNNs and randomized
/// weights, so no gradient path is trivially zero.
pub fn toy_model(bank: BankKind, hp_mode: HpMode, full_gradient: bool, seed: u64) -> Result<Model<f64>> {
    let config = ModelConfig {
        stages: 2,
        bank,
        hp_mode,
        cnn_depth: 3,
        cnn_channels: 4,
        mlp_hidden: [8, 8],
        full_gradient,
        hp_init: Some(0.05),
        cg: tight_cg(),
        seed,
        ..ModelConfig::default()
    };
    let mut m = Model::<f64>::new(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    for p in m.params.params.iter_mut().filter(|p| p.trainable) {
        let name = p.name.clone();
        for v in p.value.data.iter_mut() {
            if name.contains(".mlp") && name.ends_with("weight") {
                *v = rng.gen_range(0.05..0.5);
            } else if name.contains(".mlp") {
                *v = rng.gen_range(0.0..0.01);
            } else if name.ends_with(".scale") {
                *v = rng.gen_range(0.8..1.2);
            } else if name.ends_with(".bias") || name.ends_with(".shift") {
                *v = rng.gen_range(-0.05..0.05);
            } else if name.ends_with("log_beta") {
                *v = rng.gen_range(0.5f64..5.0).ln();
            } else if name.starts_with("bank.") {
                *v += rng.gen_range(-0.02..0.02);
            }
        }
    }
    Ok(m)
}

/// Two 16x16 phantoms and their noisy sinograms on the toy scanner.
pub fn toy_batch(seed: u64) -> Result<(SystemMatrix, Vec<Sinogram>, Vec<Image>)> {
    let a = SystemMatrix::build(&toy_geometry(16))?;
    let mut ys = Vec::new();
    let mut truths = Vec::new();
    for i in 0..2 {
        let ph = generate_phantom(&PhantomKind::RandomEllipses, (16, 16), seed + i)?;
        ys.push(simulate_sinogram(
            &a,
            &ph.image,
            &NoiseModel::new(1e4, 10.0, seed + 100 + i)?,
        )?);
        truths.push(ph.image);
    }
    Ok((a, ys, truths))
}

/// Tensors whose gradient norm is below this fraction of the whole
/// gradient's norm are compared in absolute terms against that floor.
pub const ZERO_GRADIENT_FRACTION: f64 = 1e-3;

/// Worst per-tensor error of the analytic loss gradient over every
/// trainable tensor, probing up to `per_tensor` coordinates each.
pub fn end_to_end(
    model: &mut Model<f64>,
    a: &SystemMatrix,
    ys: &[Sinogram],
    truths: &[Image],
    per_tensor: usize,
    seed: u64,
) -> Result<(f64, String, usize)> {
    let ys: Vec<&Sinogram> = ys.iter().collect();
    let truths: Vec<&Image> = truths.iter().collect();
    let base = model.forward(a, &ys, None, &ForwardOptions::default())?;
    let frozen: Option<Vec<Vec<Vec<f64>>>> =
        (!model.config.full_gradient).then(|| base.stages.iter().map(|s| s.norms.clone()).collect());
    model.params.zero_grad();
    model.backward(a, &ys, &base, &truths)?;
    let mu = model.config.mu;
    let total: f64 = model
        .params
        .params
        .iter()
        .filter(|p| p.trainable)
        .flat_map(|p| &p.grad)
        .map(|g| g * g)
        .sum();
    let floor = ZERO_GRADIENT_FRACTION * total.sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst, mut worst_name, mut checked) = (0.0_f64, String::new(), 0);
    for pi in 0..model.params.params.len() {
        if !model.params.params[pi].trainable {
            continue;
        }
        let analytic = model.params.params[pi].grad.clone();
        let mut values = model.params.params[pi].value.data.clone();
        let idx = probe_indices(&mut rng, values.len(), per_tensor);
        let numeric = central_diff(&mut values, &idx, 1e-5, |v| {
            model.params.params[pi].value.data.copy_from_slice(v);
            let opts = ForwardOptions {
                bn_mode: BnMode::Train,
                frozen_norms: frozen.as_deref(),
            };
            let t = model.forward(a, &ys, None, &opts).expect("toy forward");
            loss(&t, &truths, mu)
        });
        model.params.params[pi].value.data.copy_from_slice(&values);
        let picked: Vec<f64> = idx.iter().map(|&i| analytic[i]).collect();
        let e = rel_err_floored(&picked, &numeric, floor);
        checked += idx.len();
        if e > worst {
            worst = e;
            worst_name = model.params.params[pi].name.clone();
        }
    }
    Ok((worst, worst_name, checked))
}

/// `<w, mlp(n)>` against its parameter gradients.
fn predictor_check(seed: u64) -> Result<CheckResult> {
    let mut m = toy_model(BankKind::BsplineLinear, HpMode::Mlp, true, seed)?;
    let idx = match &m.stages[0].hp {
        HpIdx::Mlp(i) => *i,
        HpIdx::Constant(_) => unreachable!("toy model uses an MLP"),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = m.channels();
    let x = Tensor4::from_vec(
        [3, l + 1, 1, 1],
        (0..3 * (l + 1)).map(|_| rng.gen_range(0.0..2.0)).collect(),
    )?;
    let w = Tensor4::from_vec([3, l, 1, 1], normal_vec(&mut rng, 3 * l))?;
    let (_, cache) = mlp_forward(&m.params, &idx, x.clone())?;
    m.params.zero_grad();
    mlp_backward(&mut m.params, &idx, &cache, w.clone())?;
    let (mut an, mut nu) = (Vec::new(), Vec::new());
    for pi in idx.iter().flat_map(|c| [c.w, c.b]) {
        let mut values = m.params.params[pi].value.data.clone();
        let probe: Vec<usize> = (0..values.len()).collect();
        let numeric = central_diff(&mut values, &probe, 1e-6, |v| {
            m.params.params[pi].value.data.copy_from_slice(v);
            let (y, _) = mlp_forward(&m.params, &idx, x.clone()).expect("predictor forward");
            dot(&y.data, &w.data)
        });
        m.params.params[pi].value.data.copy_from_slice(&values);
        an.extend_from_slice(&m.params.params[pi].grad);
        nu.extend(numeric);
    }
    Ok(CheckResult {
        suite: "model",
        name: "predictor parameters".into(),
        rel_err: rel_err(&an, &nu),
        threshold: LOCAL_TOLERANCE,
        checked: an.len(),
    })
}

/// Stage-2 denoiser on one 8x8 sample: input history and CNN weights.
fn denoiser_checks(seed: u64) -> Result<Vec<CheckResult>> {
    let mut m = toy_model(BankKind::BsplineLinear, HpMode::Mlp, true, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 8;
    let l = m.channels();
    let hist: Vec<Vec<Image>> = (0..2)
        .map(|_| {
            let d = normal_vec(&mut rng, n * n)
                .into_iter()
                .map(|v| 0.02 + 0.01 * v)
                .collect();
            vec![Image::from_vec(n, n, d).expect("8x8")]
        })
        .collect();
    let mut gz = SubbandStack::zeros(l, n, n);
    gz.data = normal_vec(&mut rng, l * n * n);
    let value = |m: &Model<f64>, hist: &[Vec<Image>]| -> f64 {
        let per_sample: Vec<Vec<Image>> = vec![hist.iter().map(|h| h[0].clone()).collect()];
        let out = m
            .denoise_stage(2, &per_sample, BnMode::Train)
            .expect("denoiser forward");
        dot(&out[0].1.data, &gz.data)
    };
    m.params.zero_grad();
    let g_hist = m.denoise_vjp(2, &hist, BnMode::Train, std::slice::from_ref(&gz))?;

    let mut flat: Vec<f64> = hist.iter().flat_map(|h| h[0].data.clone()).collect();
    let analytic: Vec<f64> = g_hist.iter().flat_map(|h| h[0].data.clone()).collect();
    let all: Vec<usize> = (0..flat.len()).collect();
    let numeric = central_diff(&mut flat, &all, 1e-7, |v| {
        let h: Vec<Vec<Image>> = v
            .chunks(n * n)
            .map(|c| vec![Image::from_vec(n, n, c.to_vec()).unwrap()])
            .collect();
        value(&m, &h)
    });
    let mut out = vec![CheckResult {
        suite: "model",
        name: "denoiser history".into(),
        rel_err: rel_err(&analytic, &numeric),
        threshold: LOCAL_TOLERANCE,
        checked: all.len(),
    }];

    let (mut an, mut nu) = (Vec::new(), Vec::new());
    let layout = m.stages[1].clone();
    let mut ids: Vec<usize> = layout.convs.iter().flat_map(|c| [c.w, c.b]).collect();
    ids.extend(layout.bns.iter().flatten().flat_map(|b| [b.scale, b.shift]));
    for pi in ids {
        let mut values = m.params.params[pi].value.data.clone();
        let probe = probe_indices(&mut rng, values.len(), 12);
        let analytic = m.params.params[pi].grad.clone();
        let numeric = central_diff(&mut values, &probe, 1e-6, |v| {
            m.params.params[pi].value.data.copy_from_slice(v);
            value(&m, &hist)
        });
        m.params.params[pi].value.data.copy_from_slice(&values);
        an.extend(probe.iter().map(|&i| analytic[i]));
        nu.extend(numeric);
    }
    out.push(CheckResult {
        suite: "model",
        name: "denoiser parameters".into(),
        rel_err: rel_err(&an, &nu),
        threshold: LOCAL_TOLERANCE,
        checked: an.len(),
    });
    Ok(out)
}

/// Predictor, denoiser and end-to-end checks in every gradient mode.
pub fn model_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = vec![predictor_check(seed)?];
    out.extend(denoiser_checks(seed + 1)?);
    let (a, ys, truths) = toy_batch(seed + 2)?;
    let modes = [
        ("end-to-end full", BankKind::BsplineLinear, HpMode::Mlp, true),
        ("end-to-end restricted", BankKind::BsplineLinear, HpMode::Mlp, false),
        (
            "end-to-end learnable-hp",
            BankKind::BsplineLinear,
            HpMode::LearnableConstant,
            true,
        ),
        ("end-to-end learnable-filters", BankKind::Learnable, HpMode::Mlp, true),
    ];
    for (name, bank, hp, full) in modes {
        let mut m = toy_model(bank, hp, full, seed + 3)?;
        let (worst, at, checked) = end_to_end(&mut m, &a, &ys, &truths, 4, seed + 4)?;
        out.push(CheckResult {
            suite: "model",
            name: format!("{name} [{at}]"),
            rel_err: worst,
            threshold: MODEL_TOLERANCE,
            checked,
        });
    }
    Ok(out)
}
