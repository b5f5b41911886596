//! Image-quality metrics against a ground-truth image.
//!
//! PSNR uses the total squared error, not the mean:
//!
//! ```text
//! psnr = -10 log10( ||x - x*||^2 / max_i |x_i|^2 )
//! ```
//!
//! so it sits `10 log10(N)` dB below the mean-normalized form for an
//! `N`-pixel image. [`psnr_mean_normalized`] gives the latter.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Image;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// dB; `f64::INFINITY` when the images are identical.
    pub psnr: f64,
    pub rmse: f64,
    pub ssim: f64,
}

fn check_shapes(truth: &Image, recon: &Image) -> Result<()> {
    if !truth.same_shape(recon) {
        return Err(Error::DimensionMismatch {
            context: "metric inputs",
            expected: truth.len(),
            actual: recon.len(),
        });
    }
    Ok(())
}

fn sse(truth: &Image, recon: &Image) -> f64 {
    truth.data.iter().zip(&recon.data).map(|(a, b)| (a - b) * (a - b)).sum()
}

fn peak(truth: &Image) -> Result<f64> {
    let p = truth.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if p == 0.0 {
        return Err(Error::param("psnr", "ground truth is identically zero"));
    }
    Ok(p)
}

/// PSNR with the total squared error and the ground-truth peak.
pub fn psnr(truth: &Image, recon: &Image) -> Result<f64> {
    check_shapes(truth, recon)?;
    let p = peak(truth)?;
    let e = sse(truth, recon);
    if e == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(-10.0 * (e / (p * p)).log10())
}

/// PSNR with the mean squared error.
pub fn psnr_mean_normalized(truth: &Image, recon: &Image) -> Result<f64> {
    check_shapes(truth, recon)?;
    let p = peak(truth)?;
    let e = sse(truth, recon) / truth.len() as f64;
    if e == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(-10.0 * (e / (p * p)).log10())
}

pub fn rmse(truth: &Image, recon: &Image) -> Result<f64> {
    check_shapes(truth, recon)?;
    Ok((sse(truth, recon) / truth.len() as f64).sqrt())
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian filtering over the valid region.
fn filter_valid(data: &[f64], rows: usize, cols: usize, w: &[f64]) -> Vec<f64> {
    let n = w.len();
    let (or, oc) = (rows - n + 1, cols - n + 1);
    let mut tmp = vec![0.0; rows * oc];
    for r in 0..rows {
        let row = &data[r * cols..(r + 1) * cols];
        for c in 0..oc {
            tmp[r * oc + c] = w.iter().zip(&row[c..c + n]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; or * oc];
    for r in 0..or {
        for c in 0..oc {
            out[r * oc + c] = (0..n).map(|i| w[i] * tmp[(r + i) * oc + c]).sum();
        }
    }
    out
}

/// Mean SSIM with an explicit dynamic range. Symmetric in `a` and `b`.
pub fn ssim_with_range(a: &Image, b: &Image, range: f64) -> Result<f64> {
    check_shapes(a, b)?;
    if a.rows < SSIM_WINDOW || a.cols < SSIM_WINDOW {
        return Err(Error::param(
            "ssim",
            format!(
                "{}x{} image is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window",
                a.rows, a.cols
            ),
        ));
    }
    if !(range > 0.0 && range.is_finite()) {
        return Err(Error::param("ssim", "dynamic range must be positive"));
    }
    let w = gaussian_window();
    let (rows, cols) = (a.rows, a.cols);
    let prod =
        |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> { a.data.iter().zip(&b.data).map(|(x, y)| f(*x, *y)).collect() };
    let mu_a = filter_valid(&a.data, rows, cols, &w);
    let mu_b = filter_valid(&b.data, rows, cols, &w);
    let aa = filter_valid(&prod(&|x, _| x * x), rows, cols, &w);
    let bb = filter_valid(&prod(&|_, y| y * y), rows, cols, &w);
    let ab = filter_valid(&prod(&|x, y| x * y), rows, cols, &w);
    let c1 = (SSIM_K1 * range).powi(2);
    let c2 = (SSIM_K2 * range).powi(2);
    let total: f64 = (0..mu_a.len())
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / mu_a.len() as f64)
}

/// Mean SSIM with the dynamic range taken from the ground truth.
pub fn ssim(truth: &Image, recon: &Image) -> Result<f64> {
    ssim_with_range(truth, recon, truth.max() - truth.min())
}

pub fn evaluate(truth: &Image, recon: &Image) -> Result<MetricReport> {
    Ok(MetricReport {
        psnr: psnr(truth, recon)?,
        rmse: rmse(truth, recon)?,
        ssim: ssim(truth, recon)?,
    })
}

/// Mean and population standard deviation. Identical values, including
/// infinite ones, have zero spread.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    if values.iter().all(|&v| v == values[0]) {
        return (m, 0.0);
    }
    let v = values.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, v.sqrt())
}
