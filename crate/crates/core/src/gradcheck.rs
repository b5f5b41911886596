//! Central finite-difference checks of every hand-written backward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::framelet::{FilterBank, SubbandStack};
use crate::geometry::{FanBeamGeometry, SystemMatrix};
use crate::inversion::{backward_inversion, solve_inversion, CgSettings, InversionProblem};
use crate::nn::{
    batchnorm_backward, batchnorm_forward, conv2d_backward, conv2d_forward, dense_backward, dense_forward,
    relu_backward, relu_forward, BnMode, Tensor4,
};
use crate::raster::vecops::{dot, norm};
use crate::raster::{Image, Sinogram};

/// Threshold for layer and inversion checks.
pub const LOCAL_TOLERANCE: f64 = 1e-5;
/// Threshold for the end-to-end model check.
pub const MODEL_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub suite: &'static str,
    pub name: String,
    pub rel_err: f64,
    pub threshold: f64,
    /// Coordinates compared.
    pub checked: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.rel_err < self.threshold
    }
}

/// `||a - b|| / max(||a||, ||b||)`, zero when both vanish.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    rel_err_floored(analytic, numeric, 0.0)
}

/// [`rel_err`] with the denominator raised to at least `floor`, for
/// gradients that vanish exactly, such as a bias feeding batch norm.
pub fn rel_err_floored(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    let scale = norm(analytic).max(norm(numeric)).max(floor);
    if scale < 1e-300 {
        return 0.0;
    }
    norm(&diff) / scale
}

pub fn format_table(results: &[CheckResult]) -> String {
    let w = results.iter().map(|r| r.name.len()).max().unwrap_or(0).max(5);
    let mut s = format!(
        "{:<10} {:<w$} {:>8} {:>12} {:>10}  status\n",
        "suite", "check", "coords", "rel_err", "threshold"
    );
    for r in results {
        s.push_str(&format!(
            "{:<10} {:<w$} {:>8} {:>12.3e} {:>10.0e}  {}\n",
            r.suite,
            r.name,
            r.checked,
            r.rel_err,
            r.threshold,
            if r.passed() { "ok" } else { "FAIL" }
        ));
    }
    s
}

/// Small scanner whose field of view just covers an `n x n` image of 1 mm pixels.
pub fn toy_geometry(n: usize) -> FanBeamGeometry {
    FanBeamGeometry {
        n_views: 3 * n / 2,
        n_bins: 2 * n,
        image_size: (n, n),
        pixel_size: 1.0,
        detector_pixel: 1.0,
        ..FanBeamGeometry::desk()
    }
}

pub(crate) fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Indices to probe: all of them when there are at most `max`.
pub(crate) fn probe_indices(rng: &mut ChaCha8Rng, len: usize, max: usize) -> Vec<usize> {
    if len <= max {
        (0..len).collect()
    } else {
        rand::seq::index::sample(rng, len, max).into_vec()
    }
}

/// Fourth-order central differences of `f` at the probed coordinates of `x`.
pub(crate) fn central_diff(x: &mut [f64], idx: &[usize], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    idx.iter()
        .map(|&i| {
            let orig = x[i];
            let mut at = |d: f64| {
                x[i] = orig + d;
                f(x)
            };
            let (p1, m1, p2, m2) = (at(h), at(-h), at(2.0 * h), at(-2.0 * h));
            x[i] = orig;
            (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h)
        })
        .collect()
}

fn tensor(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor4<f64> {
    let n = shape.iter().product();
    Tensor4::from_vec(shape, normal_vec(rng, n)).expect("shape matches")
}

fn check(
    suite: &'static str,
    name: &str,
    rng: &mut ChaCha8Rng,
    analytic: &[f64],
    x: &mut [f64],
    f: impl FnMut(&[f64]) -> f64,
) -> CheckResult {
    let idx = probe_indices(rng, x.len(), 40);
    let numeric = central_diff(x, &idx, 1e-4, f);
    let picked: Vec<f64> = idx.iter().map(|&i| analytic[i]).collect();
    CheckResult {
        suite,
        name: name.to_string(),
        rel_err: rel_err(&picked, &numeric),
        threshold: LOCAL_TOLERANCE,
        checked: idx.len(),
    }
}

/// Conv, batch norm (both modes), ReLU and dense layers against a random
/// linear read-out of their outputs.
pub fn layer_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let x = tensor(&mut rng, [2, 3, 6, 5]);
    let w = tensor(&mut rng, [4, 3, 3, 3]);
    let b = normal_vec(&mut rng, 4);
    let probe = tensor(&mut rng, [2, 4, 6, 5]);
    let g = conv2d_backward(&x, &w, &probe)?;
    let eval = |x: &Tensor4<f64>, w: &Tensor4<f64>, b: &[f64]| dot(&conv2d_forward(x, w, b).unwrap().data, &probe.data);
    let mut xd = x.data.clone();
    out.push(check("layers", "conv2d input", &mut rng, &g.input.data, &mut xd, |v| {
        eval(&Tensor4::from_vec(x.shape, v.to_vec()).unwrap(), &w, &b)
    }));
    let mut wd = w.data.clone();
    out.push(check("layers", "conv2d weight", &mut rng, &g.weight, &mut wd, |v| {
        eval(&x, &Tensor4::from_vec(w.shape, v.to_vec()).unwrap(), &b)
    }));
    let mut bd = b.clone();
    out.push(check("layers", "conv2d bias", &mut rng, &g.bias, &mut bd, |v| {
        eval(&x, &w, v)
    }));

    for mode in [BnMode::Train, BnMode::Inference] {
        let x = tensor(&mut rng, [3, 4, 5, 4]);
        let gamma: Vec<f64> = (0..4).map(|_| rng.gen_range(0.5..1.5)).collect();
        let beta = normal_vec(&mut rng, 4);
        let rm = normal_vec(&mut rng, 4);
        let rv: Vec<f64> = (0..4).map(|_| rng.gen_range(0.5..2.0)).collect();
        let probe = tensor(&mut rng, x.shape);
        let eval = |x: &Tensor4<f64>, gamma: &[f64], beta: &[f64]| {
            let (mut m, mut v) = (rm.clone(), rv.clone());
            let (y, _) = batchnorm_forward(x, gamma, beta, &mut m, &mut v, mode).unwrap();
            dot(&y.data, &probe.data)
        };
        let (mut m, mut v) = (rm.clone(), rv.clone());
        let (_, cache) = batchnorm_forward(&x, &gamma, &beta, &mut m, &mut v, mode)?;
        let (gx, gg, gb) = batchnorm_backward(&probe, &gamma, &cache)?;
        let tag = if mode == BnMode::Train { "train" } else { "inference" };
        let mut xd = x.data.clone();
        out.push(check(
            "layers",
            &format!("batchnorm {tag} input"),
            &mut rng,
            &gx.data,
            &mut xd,
            |v| eval(&Tensor4::from_vec(x.shape, v.to_vec()).unwrap(), &gamma, &beta),
        ));
        let mut gd = gamma.clone();
        out.push(check(
            "layers",
            &format!("batchnorm {tag} scale"),
            &mut rng,
            &gg,
            &mut gd,
            |v| eval(&x, v, &beta),
        ));
        let mut bd = beta.clone();
        out.push(check(
            "layers",
            &format!("batchnorm {tag} shift"),
            &mut rng,
            &gb,
            &mut bd,
            |v| eval(&x, &gamma, v),
        ));
    }

    // keep inputs away from the kink
    let mut x = tensor(&mut rng, [2, 3, 4, 4]);
    x.data.iter_mut().for_each(|v| *v += 0.1 * v.signum());
    let probe = tensor(&mut rng, x.shape);
    let gx = relu_backward(&x, &probe)?;
    let mut xd = x.data.clone();
    out.push(check("layers", "relu input", &mut rng, &gx.data, &mut xd, |v| {
        dot(
            &relu_forward(&Tensor4::from_vec(x.shape, v.to_vec()).unwrap()).data,
            &probe.data,
        )
    }));

    let x = tensor(&mut rng, [3, 5, 1, 1]);
    let w = tensor(&mut rng, [4, 5, 1, 1]);
    let b = normal_vec(&mut rng, 4);
    let probe = tensor(&mut rng, [3, 4, 1, 1]);
    let g = dense_backward(&x, &w, &probe)?;
    let eval = |x: &Tensor4<f64>, w: &Tensor4<f64>, b: &[f64]| dot(&dense_forward(x, w, b).unwrap().data, &probe.data);
    let mut xd = x.data.clone();
    out.push(check("layers", "dense input", &mut rng, &g.input.data, &mut xd, |v| {
        eval(&Tensor4::from_vec(x.shape, v.to_vec()).unwrap(), &w, &b)
    }));
    let mut wd = w.data.clone();
    out.push(check("layers", "dense weight", &mut rng, &g.weight, &mut wd, |v| {
        eval(&x, &Tensor4::from_vec(w.shape, v.to_vec()).unwrap(), &b)
    }));
    let mut bd = b.clone();
    out.push(check("layers", "dense bias", &mut rng, &g.bias, &mut bd, |v| {
        eval(&x, &w, v)
    }));
    Ok(out)
}

/// CG settings tight enough that solve error stays far below the
/// finite-difference truncation error.
pub fn tight_cg() -> CgSettings {
    CgSettings {
        max_iters: 5000,
        rel_tolerance: 1e-14,
        record_history: false,
    }
}

/// Gradients of `<w, x(beta, z)>` where `x` solves the inversion block.
pub fn inversion_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let geom = toy_geometry(8);
    let a = SystemMatrix::build(&geom)?;
    let bank = FilterBank::bspline();
    let (rows, cols) = geom.image_size;
    let n = rows * cols;
    let truth: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..0.03)).collect();
    let mut y = a.forward_project(&Image::from_vec(rows, cols, truth)?)?;
    y.data
        .iter_mut()
        .for_each(|v| *v += 0.01 * rng.sample::<f64, _>(StandardNormal));
    let l = bank.channels();
    let mut z = SubbandStack::zeros(l, rows, cols);
    z.data = normal_vec(&mut rng, l * n).into_iter().map(|v| 0.01 * v).collect();
    let betas: Vec<f64> = (0..l).map(|_| rng.gen_range(0.05..1.0)).collect();
    let w = Image::from_vec(rows, cols, normal_vec(&mut rng, n))?;
    let cg = tight_cg();
    let value = |y: &Sinogram, z: &SubbandStack, betas: &[f64]| -> f64 {
        let p = InversionProblem::new(&a, &bank, y, z, betas, cg).unwrap();
        let (x, _) = solve_inversion(&p, &Image::zeros(rows, cols)).unwrap();
        dot(&x.data, &w.data)
    };
    let p = InversionProblem::new(&a, &bank, &y, &z, &betas, cg)?;
    let (x, _) = solve_inversion(&p, &Image::zeros(rows, cols))?;
    let g = backward_inversion(&p, &x, &w)?;

    let mut out = Vec::new();
    let mut bd = betas.clone();
    let idx: Vec<usize> = (0..l).collect();
    let numeric = central_diff(&mut bd, &idx, 1e-4, |b| value(&y, &z, b));
    out.push(CheckResult {
        suite: "inversion",
        name: "grad_beta".into(),
        rel_err: rel_err(&g.grad_beta, &numeric),
        threshold: LOCAL_TOLERANCE,
        checked: l,
    });
    let mut zd = z.data.clone();
    let idx = probe_indices(&mut rng, zd.len(), 60);
    let numeric = central_diff(&mut zd, &idx, 1e-4, |v| {
        let zz = SubbandStack {
            data: v.to_vec(),
            ..z.clone()
        };
        value(&y, &zz, &betas)
    });
    let picked: Vec<f64> = idx.iter().map(|&i| g.grad_z.data[i]).collect();
    out.push(CheckResult {
        suite: "inversion",
        name: "grad_z".into(),
        rel_err: rel_err(&picked, &numeric),
        threshold: LOCAL_TOLERANCE,
        checked: idx.len(),
    });
    Ok(out)
}

/// Layer, inversion and model suites.
pub fn run_all(seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = layer_suite(seed)?;
    out.extend(inversion_suite(seed.wrapping_add(1))?);
    out.extend(crate::model::check::model_suite(seed.wrapping_add(2))?);
    Ok(out)
}
