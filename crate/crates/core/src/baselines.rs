//! Reference reconstructions: fan-beam FBP and anisotropic TV by ADMM.

use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::framelet::{FilterBank, SubbandStack};
use crate::geometry::{FanBeamGeometry, SystemMatrix};
use crate::inversion::{solve_inversion, CgSettings, InversionProblem};
use crate::raster::vecops::norm;
use crate::raster::{Image, Sinogram};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Apodization {
    RamLak,
    Hann,
}

impl std::str::FromStr for Apodization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ramlak" | "ram-lak" => Ok(Self::RamLak),
            "hann" => Ok(Self::Hann),
            other => Err(Error::Unknown {
                kind: "apodization",
                name: other.to_string(),
            }),
        }
    }
}

/// Frequency response of the band-limited ramp on `p` samples spaced `ds`,
/// taken from the sampled spatial Ram-Lak kernel.
fn ramp_response(p: usize, ds: f64, apod: Apodization) -> Vec<f64> {
    let mut h = vec![Complex::new(0.0, 0.0); p];
    h[0].re = 1.0 / (4.0 * ds * ds);
    for n in 1..p / 2 {
        if n % 2 == 1 {
            let v = -1.0 / ((n * n) as f64 * PI * PI * ds * ds);
            h[n].re = v;
            h[p - n].re = v;
        }
    }
    FftPlanner::new().plan_fft_forward(p).process(&mut h);
    (0..p)
        .map(|k| {
            let nu = k.min(p - k) as f64 / p as f64;
            let w = match apod {
                Apodization::RamLak => 1.0,
                Apodization::Hann => 0.5 * (1.0 + (2.0 * PI * nu).cos()),
            };
            h[k].re * ds * w
        })
        .collect()
}

/// Fan-beam filtered back-projection for a flat, equispaced detector.
///
/// Data are rebinned to a virtual detector through the isocentre, cosine
/// weighted, ramp filtered per view, and back-projected with the
/// `1 / U^2` distance weight and linear interpolation.
pub fn fbp_reconstruct(geom: &FanBeamGeometry, y: &Sinogram, apod: Apodization) -> Result<Image> {
    geom.validate()?;
    if y.views != geom.n_views || y.bins != geom.n_bins || y.len() != geom.n_rays() {
        return Err(Error::DimensionMismatch {
            context: "fbp sinogram",
            expected: geom.n_rays(),
            actual: y.len(),
        });
    }
    let bins = geom.n_bins;
    let d = geom.source_to_isocenter;
    let ds = geom.detector_pixel / geom.magnification();
    let centre = (bins as f64 - 1.0) / 2.0;
    let p = (2 * bins).next_power_of_two();
    let response = ramp_response(p, ds, apod);
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(p);
    let inv = planner.plan_fft_inverse(p);
    let cosine: Vec<f64> = (0..bins)
        .map(|b| {
            let s = (b as f64 - centre) * ds;
            d / (d * d + s * s).sqrt()
        })
        .collect();

    let mut filtered = vec![0.0; geom.n_rays()];
    let mut buf = vec![Complex::new(0.0, 0.0); p];
    for v in 0..geom.n_views {
        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        for (b, (c, w)) in buf.iter_mut().zip(&cosine).enumerate() {
            c.re = y.data[v * bins + b] * w;
        }
        fwd.process(&mut buf);
        buf.iter_mut().zip(&response).for_each(|(c, r)| *c *= *r);
        inv.process(&mut buf);
        for b in 0..bins {
            filtered[v * bins + b] = buf[b].re / p as f64;
        }
    }

    let (rows, cols) = geom.image_size;
    let ps = geom.pixel_size;
    let x0 = -(cols as f64) * ps / 2.0;
    let y_top = rows as f64 * ps / 2.0;
    // each ray is seen twice over a full orbit
    let weight = geom.angular_span / geom.n_views as f64 * (PI / geom.angular_span);
    let mut out = Image::zeros(rows, cols);
    for v in 0..geom.n_views {
        let (sn, cs) = geom.view_angle(v).sin_cos();
        let q = &filtered[v * bins..(v + 1) * bins];
        for r in 0..rows {
            let py = y_top - (r as f64 + 0.5) * ps;
            for c in 0..cols {
                let px = x0 + (c as f64 + 0.5) * ps;
                let depth = d - (px * cs + py * sn);
                let lateral = -px * sn + py * cs;
                let s = lateral * d / depth;
                let t = s / ds + centre;
                if t < 0.0 || t > (bins - 1) as f64 {
                    continue;
                }
                let i = (t.floor() as usize).min(bins - 2);
                let f = t - i as f64;
                let val = (1.0 - f) * q[i] + f * q[i + 1];
                let u = depth / d;
                out.data[r * cols + c] += weight * val / (u * u);
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TvSettings {
    pub lambda: f64,
    /// ADMM penalty.
    pub mu: f64,
    pub iters: usize,
    /// Inner solver for the x-update.
    pub cg: CgSettings,
}

/// Regularization weights for the four test dose levels.
pub const TV_LAMBDA_BY_DOSE: [(f64, f64); 4] = [(1e5, 0.01), (5e4, 0.01), (1e4, 0.02), (5e3, 0.03)];

impl TvSettings {
    pub fn new(lambda: f64, mu: f64, iters: usize) -> Self {
        Self {
            lambda,
            mu,
            iters,
            cg: CgSettings {
                max_iters: 200,
                rel_tolerance: 1e-8,
                record_history: false,
            },
        }
    }

    /// `mu = 10`, 200 iterations, and the weight of the nearest tabulated
    /// dose on a log scale.
    pub fn for_dose(dose: f64) -> Self {
        let lambda = TV_LAMBDA_BY_DOSE
            .iter()
            .min_by(|a, b| {
                let da = (a.0.ln() - dose.ln()).abs();
                let db = (b.0.ln() - dose.ln()).abs();
                da.total_cmp(&db)
            })
            .map(|e| e.1)
            .unwrap_or(0.02);
        Self::new(lambda, 10.0, 200)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::param("tv.lambda", "must be positive"));
        }
        if !(self.mu > 0.0 && self.mu.is_finite()) {
            return Err(Error::param("tv.mu", "must be positive"));
        }
        if self.iters == 0 {
            return Err(Error::param("tv.iters", "must be at least 1"));
        }
        self.cg.validate()
    }
}

#[derive(Clone, Debug)]
pub struct TvReport {
    pub image: Image,
    /// `||grad x^k - z^k||` per iteration.
    pub primal_residuals: Vec<f64>,
    /// `mu ||grad^T (z^k - z^{k-1})||` per iteration.
    pub dual_residuals: Vec<f64>,
    /// x-updates whose CG hit its iteration cap.
    pub cg_failures: usize,
}

/// `sign(v) max(|v| - t, 0)`
pub fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// Anisotropic TV reconstruction with circular differences.
///
/// ```text
/// x <- argmin 1/2 ||Ax - y||^2 + mu/2 ||grad x - z + p/mu||^2
/// z <- shrink(grad x + p/mu, lambda/mu)
/// p <- p + mu (grad x - z)
/// ```
pub fn tv_reconstruct(a: &SystemMatrix, y: &Sinogram, settings: &TvSettings) -> Result<TvReport> {
    settings.validate()?;
    let (rows, cols) = a.geometry().image_size;
    let grad = FilterBank::gradient();
    let mu = settings.mu;
    let thresh = settings.lambda / mu;
    let mut x = Image::zeros(rows, cols);
    let mut z = SubbandStack::zeros(2, rows, cols);
    let mut p = SubbandStack::zeros(2, rows, cols);
    let mut target = SubbandStack::zeros(2, rows, cols);
    let mut report = TvReport {
        image: Image::zeros(rows, cols),
        primal_residuals: Vec::with_capacity(settings.iters),
        dual_residuals: Vec::with_capacity(settings.iters),
        cg_failures: 0,
    };
    for _ in 0..settings.iters {
        for ((t, zv), pv) in target.data.iter_mut().zip(&z.data).zip(&p.data) {
            *t = zv - pv / mu;
        }
        let problem = InversionProblem::new(a, &grad, y, &target, &[mu, mu], settings.cg)?;
        let (xn, rep) = solve_inversion(&problem, &x)?;
        if !rep.converged {
            report.cg_failures += 1;
        }
        x = xn;
        let gx = grad.analyze(&x);
        let z_old = std::mem::replace(&mut z, SubbandStack::zeros(2, rows, cols));
        for ((zn, g), pv) in z.data.iter_mut().zip(&gx.data).zip(&p.data) {
            *zn = soft_threshold(g + pv / mu, thresh);
        }
        let mut primal = vec![0.0; gx.data.len()];
        for (((r, g), zn), pv) in primal.iter_mut().zip(&gx.data).zip(&z.data).zip(p.data.iter_mut()) {
            *r = g - zn;
            *pv += mu * *r;
        }
        let dz = SubbandStack {
            data: z.data.iter().zip(&z_old.data).map(|(n, o)| n - o).collect(),
            ..z.clone()
        };
        report.primal_residuals.push(norm(&primal));
        report.dual_residuals.push(mu * norm(&grad.adjoint(&dz)?.data));
    }
    if report.cg_failures > 0 {
        log::warn!("tv: {} x-updates did not reach the CG tolerance", report.cg_failures);
    }
    report.image = x;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shrink_closed_form() {
        assert_eq!(soft_threshold(1.0, 0.3), 0.7);
        assert_eq!(soft_threshold(-0.2, 0.3), 0.0);
        assert_eq!(soft_threshold(-1.0, 0.25), -0.75);
    }

    #[test]
    fn dose_table() {
        assert_eq!(TvSettings::for_dose(1e4).lambda, 0.02);
        assert_eq!(TvSettings::for_dose(5e3).lambda, 0.03);
        assert_eq!(TvSettings::for_dose(5e4).lambda, 0.01);
        assert_eq!(TvSettings::for_dose(1e4).mu, 10.0);
    }

    #[test]
    fn ramp_dc_is_small() {
        let r = ramp_response(256, 2.0, Apodization::RamLak);
        assert!(r[0] > 0.0 && r[0] < 1e-2 * r[128]);
        let h = ramp_response(256, 2.0, Apodization::Hann);
        assert!(h[128].abs() < 1e-12);
    }

    #[test]
    fn zero_sinogram_gives_zero_image() {
        let g = FanBeamGeometry::desk().with_image(32, 32, 8.0);
        let img = fbp_reconstruct(&g, &Sinogram::zeros(g.n_views, g.n_bins), Apodization::RamLak).unwrap();
        assert!(img.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_sinogram_shape() {
        let g = FanBeamGeometry::desk();
        assert!(fbp_reconstruct(&g, &Sinogram::zeros(3, 4), Apodization::Hann).is_err());
    }
}
