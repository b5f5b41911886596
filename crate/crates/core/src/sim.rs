//! Phantoms and the low-dose measurement model.
//!
//! Each ray's detected count is Poisson with mean `I * exp(-[Ax]_i)` plus
//! zero-mean Gaussian electronic noise; the sinogram is
//! `y_i = ln(I / max(count_i, 1))`.
//!
//! Every ray draws from its own ChaCha stream (`stream = ray index`) of the
//! scan seed, so results do not depend on evaluation order.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::geometry::{FanBeamGeometry, SystemMatrix};
use crate::io;
use crate::raster::{Image, Sinogram};

/// Dose levels used throughout the experiments, highest first.
pub const DOSE_LEVELS: [f64; 4] = [1e5, 5e4, 1e4, 5e3];
/// Dose levels of the mixed-dose training set.
pub const TRAINING_DOSE_LEVELS: [f64; 7] = [1e5, 7.5e4, 5e4, 2.5e4, 1e4, 7.5e3, 5e3];
pub const DEFAULT_ELECTRONIC_VARIANCE: f64 = 10.0;
pub const COUNT_FLOOR: f64 = 1.0;
const MIN_EXPECTED_COUNT: f64 = 1e-12;
const POISSON_INVERSION_LIMIT: f64 = 30.0;

/// Water attenuation in mm^-1.
pub const MU_WATER: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseModel {
    /// Incident photons per ray.
    pub dose: f64,
    /// Electronic noise variance in counts squared.
    pub electronic_variance: f64,
    pub rng_seed: u64,
}

impl NoiseModel {
    pub fn new(dose: f64, electronic_variance: f64, rng_seed: u64) -> Result<Self> {
        let nm = Self {
            dose,
            electronic_variance,
            rng_seed,
        };
        nm.validate()?;
        Ok(nm)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dose > 0.0 && self.dose.is_finite()) {
            return Err(Error::param(
                "dose",
                format!("must be positive and finite, got {}", self.dose),
            ));
        }
        if !(self.electronic_variance >= 0.0 && self.electronic_variance.is_finite()) {
            return Err(Error::param(
                "electronic_variance",
                format!("must be nonnegative, got {}", self.electronic_variance),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawCounts {
    pub views: usize,
    pub bins: usize,
    pub counts: Vec<f64>,
    /// Rays whose expected count underflowed and was raised to 1e-12.
    pub clamped: usize,
}

/// One ellipse in normalized coordinates: the image spans `[-1, 1]` on both
/// axes with y pointing up.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub center: [f64; 2],
    pub axes: [f64; 2],
    /// Degrees, counter-clockwise.
    pub angle: f64,
    pub attenuation: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.angle.to_radians().sin_cos();
        let dx = x - self.center[0];
        let dy = y - self.center[1];
        let u = (dx * c + dy * s) / self.axes[0];
        let v = (-dx * s + dy * c) / self.axes[1];
        u * u + v * v <= 1.0
    }
}

/// How overlapping ellipses combine.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Composition {
    /// Values add, as in the classical head phantom.
    Additive,
    /// Later ellipses overwrite earlier ones.
    Overwrite,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomDescriptor {
    pub name: String,
    pub composition: Composition,
    pub ellipses: Vec<Ellipse>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub image: Image,
    pub descriptor: PhantomDescriptor,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhantomKind {
    SheppLogan,
    WaterDisk,
    RandomEllipses,
}

impl std::str::FromStr for PhantomKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shepp-logan" => Ok(Self::SheppLogan),
            "water-disk" | "disk" => Ok(Self::WaterDisk),
            "random" | "random-ellipses" => Ok(Self::RandomEllipses),
            other => Err(Error::Unknown {
                kind: "phantom",
                name: other.to_string(),
            }),
        }
    }
}

const WATER_DISK_RADIUS: f64 = 0.9;

fn shepp_logan() -> Vec<Ellipse> {
    // classical head phantom, intensities rescaled so that brain tissue sits
    // near water and the skull at twice that
    const S: f64 = MU_WATER;
    let e = |cx: f64, cy: f64, a: f64, b: f64, angle: f64, v: f64| Ellipse {
        center: [cx, cy],
        axes: [a, b],
        angle,
        attenuation: v * S,
    };
    vec![
        e(0.0, 0.0, 0.69, 0.92, 0.0, 2.0),
        e(0.0, -0.0184, 0.6624, 0.874, 0.0, -0.98),
        e(0.22, 0.0, 0.11, 0.31, -18.0, -0.02),
        e(-0.22, 0.0, 0.16, 0.41, 18.0, -0.02),
        e(0.0, 0.35, 0.21, 0.25, 0.0, 0.01),
        e(0.0, 0.1, 0.046, 0.046, 0.0, 0.01),
        e(0.0, -0.1, 0.046, 0.046, 0.0, 0.01),
        e(-0.08, -0.605, 0.046, 0.023, 0.0, 0.01),
        e(0.0, -0.606, 0.023, 0.023, 0.0, 0.01),
        e(0.06, -0.605, 0.023, 0.046, 0.0, 0.01),
    ]
}

fn water_disk() -> Ellipse {
    Ellipse {
        center: [0.0, 0.0],
        axes: [WATER_DISK_RADIUS, WATER_DISK_RADIUS],
        angle: 0.0,
        attenuation: MU_WATER,
    }
}

fn random_ellipses(seed: u64) -> Vec<Ellipse> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.gen_range(3..=8);
    let mut out = vec![water_disk()];
    for _ in 0..count {
        // keep every ellipse inside the disk: |center| + max axis <= 0.85
        let r = 0.55 * rng.gen::<f64>().sqrt();
        let t = rng.gen_range(0.0..std::f64::consts::TAU);
        out.push(Ellipse {
            center: [r * t.cos(), r * t.sin()],
            axes: [rng.gen_range(0.05..0.3), rng.gen_range(0.05..0.3)],
            angle: rng.gen_range(0.0..180.0),
            attenuation: rng.gen_range(0.005..=0.04),
        });
    }
    out
}

pub fn render(desc: &PhantomDescriptor, rows: usize, cols: usize) -> Image {
    let mut img = Image::zeros(rows, cols);
    for r in 0..rows {
        let y = 1.0 - (2.0 * r as f64 + 1.0) / rows as f64;
        for c in 0..cols {
            let x = (2.0 * c as f64 + 1.0) / cols as f64 - 1.0;
            let mut v = 0.0;
            for e in &desc.ellipses {
                if e.contains(x, y) {
                    match desc.composition {
                        Composition::Additive => v += e.attenuation,
                        Composition::Overwrite => v = e.attenuation,
                    }
                }
            }
            // additive presets can dip a hair below zero through round-off
            *img.at_mut(r, c) = v.clamp(0.0, 0.1);
        }
    }
    img
}

pub fn generate_phantom(kind: &PhantomKind, size: (usize, usize), seed: u64) -> Result<Phantom> {
    let (rows, cols) = size;
    if rows < 16 || cols < 16 {
        return Err(Error::param(
            "phantom size",
            format!("must be at least 16x16, got {rows}x{cols}"),
        ));
    }
    let descriptor = match kind {
        PhantomKind::SheppLogan => PhantomDescriptor {
            name: "shepp-logan".into(),
            composition: Composition::Additive,
            ellipses: shepp_logan(),
        },
        PhantomKind::WaterDisk => PhantomDescriptor {
            name: "water-disk".into(),
            composition: Composition::Overwrite,
            ellipses: vec![water_disk()],
        },
        PhantomKind::RandomEllipses => PhantomDescriptor {
            name: format!("random-{seed}"),
            composition: Composition::Overwrite,
            ellipses: random_ellipses(seed),
        },
    };
    let image = render(&descriptor, rows, cols);
    Ok(Phantom { image, descriptor })
}

/// Draws one detector reading with the given expected photon count.
pub fn sample_measurement<R: Rng + ?Sized>(mean: f64, electronic_variance: f64, rng: &mut R) -> f64 {
    let photons = if mean < POISSON_INVERSION_LIMIT {
        let u: f64 = rng.gen();
        let mut k = 0.0;
        let mut p = (-mean).exp();
        let mut cdf = p;
        while u > cdf && p > 0.0 {
            k += 1.0;
            p *= mean / k;
            cdf += p;
        }
        k
    } else {
        let z: f64 = rng.sample(StandardNormal);
        (mean + mean.sqrt() * z).round().max(0.0)
    };
    if electronic_variance > 0.0 {
        let e: f64 = rng.sample(StandardNormal);
        photons + electronic_variance.sqrt() * e
    } else {
        photons
    }
}

fn ray_rng(seed: u64, ray: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(ray as u64);
    rng
}

pub fn simulate_counts(a: &SystemMatrix, x: &Image, nm: &NoiseModel) -> Result<RawCounts> {
    nm.validate()?;
    let line_integrals = a.forward_project(x)?;
    let mut clamped = 0;
    let counts = line_integrals
        .data
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let mut mean = nm.dose * (-p).exp();
            if !(mean >= MIN_EXPECTED_COUNT) {
                mean = MIN_EXPECTED_COUNT;
                clamped += 1;
            }
            sample_measurement(mean, nm.electronic_variance, &mut ray_rng(nm.rng_seed, i))
        })
        .collect();
    if clamped > 0 {
        log::warn!("{clamped} rays had expected counts below {MIN_EXPECTED_COUNT:e} and were clamped");
    }
    Ok(RawCounts {
        views: line_integrals.views,
        bins: line_integrals.bins,
        counts,
        clamped,
    })
}

pub fn counts_to_sinogram(counts: &RawCounts, nm: &NoiseModel) -> Result<Sinogram> {
    nm.validate()?;
    check_len("counts_to_sinogram", counts.views * counts.bins, counts.counts.len())?;
    let data = counts
        .counts
        .iter()
        .map(|&c| (nm.dose / c.max(COUNT_FLOOR)).ln())
        .collect();
    Sinogram::from_vec(counts.views, counts.bins, data)
}

/// Counts and log transform in one step.
pub fn simulate_sinogram(a: &SystemMatrix, x: &Image, nm: &NoiseModel) -> Result<Sinogram> {
    counts_to_sinogram(&simulate_counts(a, x, nm)?, nm)
}

/// Decorrelates per-sample seeds from a dataset seed.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos(2 * index as u128);
    rng.gen()
}

const PHANTOM_STREAM: u64 = 1;
const NOISE_STREAM: u64 = 2;
const DOSE_STREAM: u64 = 3;

pub fn sample_phantom_seed(seed: u64, index: usize) -> u64 {
    derive_seed(seed, PHANTOM_STREAM, index as u64)
}

pub fn sample_noise_seed(seed: u64, dose: f64, index: usize) -> u64 {
    // doses share phantoms but never noise
    derive_seed(seed ^ dose.to_bits(), NOISE_STREAM, index as u64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub phantom: Image,
    pub sinogram: Sinogram,
    pub dose: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub ids: Vec<String>,
    pub doses: Vec<f64>,
    pub seed: u64,
    pub electronic_variance: f64,
    pub phantom: PhantomKind,
    pub geometry: FanBeamGeometry,
}

/// Simulates `count` phantoms, each scanned at every dose.
pub fn simulate_dataset(
    a: &SystemMatrix,
    kind: &PhantomKind,
    count: usize,
    doses: &[f64],
    electronic_variance: f64,
    seed: u64,
) -> Result<Vec<Sample>> {
    let size = a.geometry().image_size;
    let mut out = Vec::with_capacity(count * doses.len());
    for i in 0..count {
        let phantom = generate_phantom(kind, size, sample_phantom_seed(seed, i))?;
        for &dose in doses {
            let nm = NoiseModel::new(dose, electronic_variance, sample_noise_seed(seed, dose, i))?;
            let sinogram = simulate_sinogram(a, &phantom.image, &nm)?;
            out.push(Sample {
                id: sample_id(i, dose, doses.len()),
                phantom: phantom.image.clone(),
                sinogram,
                dose,
            });
        }
    }
    Ok(out)
}

/// Simulates `count` phantoms, each scanned once at a dose drawn uniformly
/// from `dose_set`.
pub fn simulate_mixed_dataset(
    a: &SystemMatrix,
    kind: &PhantomKind,
    count: usize,
    dose_set: &[f64],
    electronic_variance: f64,
    seed: u64,
) -> Result<Vec<Sample>> {
    if dose_set.is_empty() {
        return Err(Error::param("dose_set", "must not be empty"));
    }
    let size = a.geometry().image_size;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let phantom = generate_phantom(kind, size, sample_phantom_seed(seed, i))?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, DOSE_STREAM, i as u64));
        let dose = dose_set[rng.gen_range(0..dose_set.len())];
        let nm = NoiseModel::new(dose, electronic_variance, sample_noise_seed(seed, dose, i))?;
        out.push(Sample {
            id: format!("{i:05}_d{dose:.0}"),
            sinogram: simulate_sinogram(a, &phantom.image, &nm)?,
            phantom: phantom.image,
            dose,
        });
    }
    Ok(out)
}

fn sample_id(i: usize, dose: f64, n_doses: usize) -> String {
    if n_doses == 1 {
        format!("{i:05}")
    } else {
        format!("{i:05}_d{dose:.0}")
    }
}

pub fn write_dataset(dir: &Path, samples: &[Sample], manifest: &Manifest) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for s in samples {
        io::write_image(&dir.join(format!("{}_phantom.f32r", s.id)), &s.phantom)?;
        let sino = Image {
            rows: s.sinogram.views,
            cols: s.sinogram.bins,
            data: s.sinogram.data.clone(),
        };
        io::write_image(&dir.join(format!("{}_sino.f32r", s.id)), &sino)?;
    }
    let json = serde_json::to_string_pretty(manifest)?;
    std::fs::write(dir.join("manifest.json"), json + "\n")?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(dir.join("manifest.json"))?;
    Ok(serde_json::from_str(&text)?)
}

/// Loads every sample listed in the manifest. Doses are recovered from the
/// manifest when it holds a single dose, otherwise from the id suffix.
pub fn read_dataset(dir: &Path) -> Result<(Manifest, Vec<Sample>)> {
    let manifest = read_manifest(dir)?;
    let mut samples = Vec::with_capacity(manifest.ids.len());
    for id in &manifest.ids {
        let phantom = io::read_image(&dir.join(format!("{id}_phantom.f32r")))?;
        let sino = io::read_image(&dir.join(format!("{id}_sino.f32r")))?;
        let dose = match manifest.doses.as_slice() {
            [d] => *d,
            _ => id
                .rsplit_once("_d")
                .and_then(|(_, d)| d.parse().ok())
                .ok_or_else(|| Error::Format(format!("cannot recover dose from sample id {id}")))?,
        };
        samples.push(Sample {
            id: id.clone(),
            phantom,
            sinogram: Sinogram::from_vec(sino.rows, sino.cols, sino.data)?,
            dose,
        });
    }
    Ok((manifest, samples))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shepp_logan_peaks_on_the_skull() {
        let p = generate_phantom(&PhantomKind::SheppLogan, (64, 64), 0).unwrap();
        let img = &p.image;
        assert_eq!(img.at(0, 0), 0.0);
        assert!((img.max() - 2.0 * MU_WATER).abs() < 1e-12);
        // skull ring crosses the vertical centre line near the top
        let col = 32;
        let top = (0..64).find(|&r| img.at(r, col) > 0.0).unwrap();
        assert!((img.at(top, col) - img.max()).abs() < 1e-12);
    }

    #[test]
    fn unknown_phantom_name_errors() {
        assert!("banana".parse::<PhantomKind>().is_err());
        assert!(generate_phantom(&PhantomKind::SheppLogan, (8, 64), 0).is_err());
    }

    #[test]
    fn random_phantoms_are_seeded() {
        let a = generate_phantom(&PhantomKind::RandomEllipses, (32, 32), 5).unwrap();
        let b = generate_phantom(&PhantomKind::RandomEllipses, (32, 32), 5).unwrap();
        let c = generate_phantom(&PhantomKind::RandomEllipses, (32, 32), 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.image, c.image);
        let n = a.descriptor.ellipses.len() - 1;
        assert!((3..=8).contains(&n));
    }

    #[test]
    fn count_floor_and_unit_ratio() {
        let nm = NoiseModel::new(1e4, 0.0, 1).unwrap();
        let c = RawCounts {
            views: 1,
            bins: 3,
            counts: vec![1e4, 0.0, -5.0],
            clamped: 0,
        };
        let y = counts_to_sinogram(&c, &nm).unwrap();
        assert_eq!(y.data[0], 0.0);
        assert!((y.data[1] - 1e4f64.ln()).abs() < 1e-12);
        assert!((y.data[2] - 1e4f64.ln()).abs() < 1e-12);
        let bad = RawCounts { counts: vec![1.0], ..c };
        assert!(counts_to_sinogram(&bad, &nm).is_err());
    }

    #[test]
    fn invalid_noise_models() {
        assert!(NoiseModel::new(0.0, 1.0, 0).is_err());
        assert!(NoiseModel::new(1.0, -1.0, 0).is_err());
        assert!(NoiseModel::new(1.0, 0.0, 0).is_ok());
    }

    #[test]
    fn underflow_is_clamped_and_counted() {
        let g = FanBeamGeometry::desk().with_image(16, 16, 16.0);
        let a = SystemMatrix::build(&g).unwrap();
        let x = Image::filled(16, 16, 1.0);
        let nm = NoiseModel::new(1e4, 0.0, 3).unwrap();
        let c = simulate_counts(&a, &x, &nm).unwrap();
        assert!(c.clamped > 0);
        assert!(c.counts.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(sample_phantom_seed(7, 0), sample_phantom_seed(7, 1));
        assert_ne!(sample_noise_seed(7, 1e4, 0), sample_noise_seed(7, 5e3, 0));
        assert_eq!(sample_noise_seed(7, 1e4, 3), sample_noise_seed(7, 1e4, 3));
    }
}
