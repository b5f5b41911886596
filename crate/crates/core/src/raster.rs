//! Dense real rasters: attenuation images and log-domain sinograms.
//!
//! Both are stored row-major in double precision. An image row runs along
//! the x axis (columns); a sinogram row is one projection view.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sinogram {
    pub views: usize,
    pub bins: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        check_len("Image::from_vec", rows * cols, data.len())?;
        Ok(Self { rows, cols, data })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn scaled(&self, s: f64) -> Image {
        Image {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }
}

impl Sinogram {
    pub fn zeros(views: usize, bins: usize) -> Self {
        Self {
            views,
            bins,
            data: vec![0.0; views * bins],
        }
    }

    pub fn from_vec(views: usize, bins: usize, data: Vec<f64>) -> Result<Self> {
        check_len("Sinogram::from_vec", views * bins, data.len())?;
        Ok(Self { views, bins, data })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn view(&self, v: usize) -> &[f64] {
        &self.data[v * self.bins..(v + 1) * self.bins]
    }

    pub fn scaled(&self, s: f64) -> Sinogram {
        Sinogram {
            views: self.views,
            bins: self.bins,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }
}

/// Slice arithmetic shared by the solvers.
pub mod vecops {
    #[inline]
    pub fn dot(a: &[f64], b: &[f64]) -> f64 {
        debug_assert_eq!(a.len(), b.len());
        // four partial sums keep the reduction order fixed and vectorizable
        let mut acc = [0.0f64; 4];
        let chunks = a.len() / 4;
        for i in 0..chunks {
            let j = 4 * i;
            acc[0] += a[j] * b[j];
            acc[1] += a[j + 1] * b[j + 1];
            acc[2] += a[j + 2] * b[j + 2];
            acc[3] += a[j + 3] * b[j + 3];
        }
        let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
        for j in 4 * chunks..a.len() {
            s += a[j] * b[j];
        }
        s
    }

    #[inline]
    pub fn norm_sq(a: &[f64]) -> f64 {
        dot(a, a)
    }

    #[inline]
    pub fn norm(a: &[f64]) -> f64 {
        norm_sq(a).sqrt()
    }

    /// y += alpha * x
    #[inline]
    pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), y.len());
        for (yi, xi) in y.iter_mut().zip(x) {
            *yi += alpha * xi;
        }
    }

    pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
        a.iter().zip(b).map(|(x, y)| x - y).collect()
    }

    pub fn max_abs(a: &[f64]) -> f64 {
        a.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}
