use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ldct_core::gradcheck::toy_geometry;
use ldct_core::inversion::{apply_normal_operator, solve_inversion, CgSettings, InversionProblem};
use ldct_core::raster::vecops::dot;
use ldct_core::{FanBeamGeometry, FilterBank, Image, Sinogram, SubbandStack, SystemMatrix};

fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn image(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Image {
    Image::from_vec(rows, cols, random(rng, rows * cols)).unwrap()
}

fn geometry(n: usize, views: usize, span_fraction: f64) -> FanBeamGeometry {
    FanBeamGeometry {
        n_views: views,
        angular_span: span_fraction * std::f64::consts::TAU,
        ..toy_geometry(n)
    }
}

/// Dense `A` assembled from the sparse rows.
fn dense_projector(a: &SystemMatrix) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(a.n_rows(), a.n_cols());
    for i in 0..a.n_rows() {
        for (j, v) in a.row(i) {
            m[(i, j)] += v;
        }
    }
    m
}

/// Dense analysis operator of one channel, built column by column from
/// unit impulses.
fn dense_channels(bank: &FilterBank, rows: usize, cols: usize) -> Vec<DMatrix<f64>> {
    let n = rows * cols;
    let mut out = vec![DMatrix::zeros(n, n); bank.channels()];
    for j in 0..n {
        let mut e = Image::zeros(rows, cols);
        e.data[j] = 1.0;
        let z = bank.analyze(&e);
        for (i, m) in out.iter_mut().enumerate() {
            for (r, v) in z.channel(i).iter().enumerate() {
                m[(r, j)] = *v;
            }
        }
    }
    out
}

fn rel(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let s: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    d / s.max(f64::MIN_POSITIVE)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn projector_adjoint_identity(n in 4usize..14, views in 3usize..30, span in 0.25f64..1.0, seed: u64) {
        let a = SystemMatrix::build(&geometry(n, views, span)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = image(&mut rng, n, n);
        let y = Sinogram::from_vec(views, 2 * n, random(&mut rng, views * 2 * n)).unwrap();
        let lhs = dot(&a.forward_project(&x).unwrap().data, &y.data);
        let rhs = dot(&x.data, &a.back_project(&y).unwrap().data);
        prop_assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(rhs.abs()).max(1e-300));
    }

    #[test]
    fn framelet_tight_frame(rows in 1usize..20, cols in 1usize..20, seed: u64) {
        let bank = FilterBank::bspline();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = image(&mut rng, rows, cols);
        let mut rec = bank.adjoint(&bank.analyze(&x)).unwrap();
        let low = bank.lowpass_adjoint(&bank.lowpass_analyze(&x).unwrap()).unwrap();
        rec.data.iter_mut().zip(&low.data).for_each(|(r, l)| *r += l);
        let err = rec.data.iter().zip(&x.data).map(|(r, v)| (r - v).abs()).fold(0.0, f64::max);
        prop_assert!(err <= 1e-12, "sup error {err}");
    }

    #[test]
    fn normal_operator_is_symmetric(n in 4usize..12, seed: u64, b0 in 1e-6f64..10.0, b1 in 1e-6f64..10.0) {
        let a = SystemMatrix::build(&toy_geometry(n)).unwrap();
        let bank = FilterBank::bspline();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y = Sinogram::zeros(a.geometry().n_views, a.geometry().n_bins);
        let z = SubbandStack::zeros(bank.channels(), n, n);
        let betas: Vec<f64> = (0..bank.channels()).map(|i| if i % 2 == 0 { b0 } else { b1 }).collect();
        let p = InversionProblem::new(&a, &bank, &y, &z, &betas, CgSettings::verification()).unwrap();
        let u = image(&mut rng, n, n);
        let v = image(&mut rng, n, n);
        let lhs = dot(&apply_normal_operator(&p, &u).unwrap().data, &v.data);
        let rhs = dot(&u.data, &apply_normal_operator(&p, &v).unwrap().data);
        prop_assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(rhs.abs()));
    }

    #[test]
    fn cg_energy_never_increases(seed: u64, log_beta in -3.0f64..1.0) {
        let n = 8;
        let a = SystemMatrix::build(&toy_geometry(n)).unwrap();
        let bank = FilterBank::bspline();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y = Sinogram::from_vec(a.geometry().n_views, a.geometry().n_bins, random(&mut rng, a.n_rows())).unwrap();
        let mut z = SubbandStack::zeros(bank.channels(), n, n);
        z.data = random(&mut rng, z.data.len());
        let betas = vec![10f64.powf(log_beta); bank.channels()];
        let cg = CgSettings { max_iters: 200, rel_tolerance: 1e-12, record_history: true };
        let p = InversionProblem::new(&a, &bank, &y, &z, &betas, cg).unwrap();
        let (_, rep) = solve_inversion(&p, &Image::zeros(n, n)).unwrap();
        for w in rep.energy_history.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-12 * w[0].abs().max(1.0), "{} -> {}", w[0], w[1]);
        }
    }
}

/// CG against a dense Cholesky solve of the same normal equations.
fn dense_check(bank: &FilterBank, seed: u64) -> f64 {
    let n = 8;
    let a = SystemMatrix::build(&toy_geometry(n)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y = Sinogram::from_vec(a.geometry().n_views, a.geometry().n_bins, random(&mut rng, a.n_rows())).unwrap();
    let mut z = SubbandStack::zeros(bank.channels(), n, n);
    z.data = random(&mut rng, z.data.len());
    let betas: Vec<f64> = (0..bank.channels())
        .map(|_| 10f64.powf(rng.gen_range(-2.0..1.0)))
        .collect();

    let ad = dense_projector(&a);
    let fs = dense_channels(bank, n, n);
    let mut m = ad.transpose() * &ad;
    let mut b = ad.transpose() * DVector::from_column_slice(&y.data);
    for (i, f) in fs.iter().enumerate() {
        m += betas[i] * f.transpose() * f;
        b += betas[i] * f.transpose() * DVector::from_column_slice(z.channel(i));
    }
    let x_direct = m.cholesky().expect("positive definite").solve(&b);

    let cg = CgSettings {
        max_iters: 2000,
        rel_tolerance: 1e-13,
        record_history: false,
    };
    let p = InversionProblem::new(&a, bank, &y, &z, &betas, cg).unwrap();
    let (x, rep) = solve_inversion(&p, &Image::zeros(n, n)).unwrap();
    assert!(rep.converged);
    rel(&x.data, x_direct.as_slice())
}

#[test]
fn solve_matches_dense_direct_solve() {
    for seed in 0..5 {
        for bank in [FilterBank::bspline(), FilterBank::gradient()] {
            let e = dense_check(&bank, seed);
            assert!(e < 1e-8, "seed {seed}, {:?}: {e}", bank.kind());
        }
    }
}

#[test]
fn rhs_matches_dense_assembly() {
    let n = 6;
    let a = SystemMatrix::build(&toy_geometry(n)).unwrap();
    let bank = FilterBank::bspline();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let y = Sinogram::from_vec(a.geometry().n_views, a.geometry().n_bins, random(&mut rng, a.n_rows())).unwrap();
    let mut z = SubbandStack::zeros(bank.channels(), n, n);
    z.data = random(&mut rng, z.data.len());
    let betas: Vec<f64> = (1..=bank.channels()).map(|i| i as f64 * 0.3).collect();
    let p = InversionProblem::new(&a, &bank, &y, &z, &betas, CgSettings::verification()).unwrap();
    let ad = dense_projector(&a);
    let mut b = ad.transpose() * DVector::from_column_slice(&y.data);
    for (i, f) in dense_channels(&bank, n, n).iter().enumerate() {
        b += betas[i] * f.transpose() * DVector::from_column_slice(z.channel(i));
    }
    assert!(rel(&p.rhs(), b.as_slice()) < 1e-13);
}
