use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ldct_core::gradcheck::toy_geometry;
use ldct_core::sim::{
    generate_phantom, read_dataset, sample_measurement, simulate_counts, simulate_dataset, simulate_mixed_dataset,
    simulate_sinogram, write_dataset, Manifest, DOSE_LEVELS, MU_WATER, TRAINING_DOSE_LEVELS,
};
use ldct_core::{FanBeamGeometry, Image, NoiseModel, PhantomKind, SystemMatrix};

/// Sample mean and variance of `draws` readings at one expected count.
fn moments(mean: f64, ev: f64, draws: usize, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v: Vec<f64> = (0..draws).map(|_| sample_measurement(mean, ev, &mut rng)).collect();
    let m = v.iter().sum::<f64>() / draws as f64;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (draws - 1) as f64;
    (m, var)
}

#[test]
fn measurement_moments_in_both_sampling_regimes() {
    for (i, &mean) in [0.3, 4.0, 29.0, 31.0, 500.0, 1e4].iter().enumerate() {
        for ev in [0.0, 10.0] {
            let draws = 40_000;
            let (m, var) = moments(mean, ev, draws, 100 + i as u64);
            let se = ((mean + ev) / draws as f64).sqrt();
            assert!((m - mean).abs() < 3.0 * se, "mean {mean}, ev {ev}: {m}");
            let rel = (var - (mean + ev)) / (mean + ev);
            assert!(rel.abs() < 0.05, "mean {mean}, ev {ev}: variance {var}");
        }
    }
}

#[test]
fn simulated_counts_are_unbiased() {
    let g = toy_geometry(16);
    let a = SystemMatrix::build(&g).unwrap();
    let x = generate_phantom(&PhantomKind::RandomEllipses, (16, 16), 4)
        .unwrap()
        .image;
    let expected: Vec<f64> = a
        .forward_project(&x)
        .unwrap()
        .data
        .iter()
        .map(|p| 1e3 * (-p).exp())
        .collect();
    let runs = 2000;
    let mut sums = vec![0.0; expected.len()];
    for r in 0..runs {
        let c = simulate_counts(&a, &x, &NoiseModel::new(1e3, 10.0, r).unwrap()).unwrap();
        sums.iter_mut().zip(&c.counts).for_each(|(s, v)| *s += v);
    }
    let mut pooled = 0.0;
    let mut pooled_var = 0.0;
    for (s, &mu) in sums.iter().zip(&expected) {
        let m = s / runs as f64;
        let se = ((mu + 10.0) / runs as f64).sqrt();
        assert!((m - mu).abs() < 4.5 * se, "ray mean {m} vs {mu}");
        pooled += m - mu;
        pooled_var += se * se;
    }
    assert!(pooled.abs() < 3.0 * pooled_var.sqrt());
}

fn sinogram_noise_variance(dose: f64) -> f64 {
    let a = SystemMatrix::build(&FanBeamGeometry::desk()).unwrap();
    let x = generate_phantom(&PhantomKind::SheppLogan, (64, 64), 0).unwrap().image;
    let clean = a.forward_project(&x).unwrap();
    let y = simulate_sinogram(&a, &x, &NoiseModel::new(dose, 10.0, 11).unwrap()).unwrap();
    let n = y.len() as f64;
    y.data
        .iter()
        .zip(&clean.data)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n
}

#[test]
fn noise_variance_falls_with_dose() {
    let v: Vec<f64> = DOSE_LEVELS.iter().map(|&d| sinogram_noise_variance(d)).collect();
    for w in v.windows(2) {
        assert!(w[0] < w[1], "{v:?}");
    }
    // quantum-limited: halving the dose roughly doubles the variance
    let ratio = v[3] / v[2];
    assert!((1.6..2.6).contains(&ratio), "{ratio}");
}

#[test]
fn mixed_dataset_draws_from_the_set() {
    let a = SystemMatrix::build(&toy_geometry(16)).unwrap();
    let s1 = simulate_mixed_dataset(&a, &PhantomKind::RandomEllipses, 40, &TRAINING_DOSE_LEVELS, 10.0, 9).unwrap();
    let s2 = simulate_mixed_dataset(&a, &PhantomKind::RandomEllipses, 40, &TRAINING_DOSE_LEVELS, 10.0, 9).unwrap();
    assert_eq!(s1, s2);
    assert!(s1.iter().all(|s| TRAINING_DOSE_LEVELS.contains(&s.dose)));
    let mut distinct: Vec<u64> = s1.iter().map(|s| s.dose.to_bits()).collect();
    distinct.sort();
    distinct.dedup();
    assert!(distinct.len() >= 5);
    assert!(simulate_mixed_dataset(&a, &PhantomKind::WaterDisk, 1, &[], 10.0, 9).is_err());
}

#[test]
fn dataset_directory_round_trip() {
    let g = toy_geometry(16);
    let a = SystemMatrix::build(&g).unwrap();
    let doses = [1e5, 5e3];
    let samples = simulate_dataset(&a, &PhantomKind::RandomEllipses, 3, &doses, 10.0, 2).unwrap();
    assert_eq!(samples.len(), 6);
    let manifest = Manifest {
        ids: samples.iter().map(|s| s.id.clone()).collect(),
        doses: doses.to_vec(),
        seed: 2,
        electronic_variance: 10.0,
        phantom: PhantomKind::RandomEllipses,
        geometry: g,
    };
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &samples, &manifest).unwrap();
    let (m2, back) = read_dataset(dir.path()).unwrap();
    assert_eq!(m2, manifest);
    for (s, b) in samples.iter().zip(&back) {
        assert_eq!(s.id, b.id);
        assert_eq!(s.dose, b.dose);
        let f32_exact = |u: &[f64], v: &[f64]| u.iter().zip(v).all(|(p, q)| (*p as f32) as f64 == *q);
        assert!(f32_exact(&s.phantom.data, &b.phantom.data));
        assert!(f32_exact(&s.sinogram.data, &b.sinogram.data));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn simulation_is_a_function_of_its_seed(seed: u64, dose in 1e3f64..1e6) {
        let a = SystemMatrix::build(&toy_geometry(8)).unwrap();
        let x = Image::filled(8, 8, MU_WATER);
        let nm = NoiseModel::new(dose, 10.0, seed).unwrap();
        prop_assert_eq!(simulate_sinogram(&a, &x, &nm).unwrap(), simulate_sinogram(&a, &x, &nm).unwrap());
    }

    #[test]
    fn phantoms_stay_in_range(seed: u64, n in 16usize..48) {
        for kind in [PhantomKind::RandomEllipses, PhantomKind::WaterDisk] {
            let p = generate_phantom(&kind, (n, n), seed).unwrap();
            prop_assert!(p.image.data.iter().all(|&v| (0.0..=0.1).contains(&v)));
        }
    }
}
