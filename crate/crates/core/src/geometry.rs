//! Fan-beam scan geometry and the sparse system matrix.
//!
//! Rays run from a point source on a circular orbit to the centres of the
//! bins of an equispaced flat-panel detector. The weight `a_ij` is the exact
//! length (mm) of ray `i` inside pixel `j`, found with Siddon's algorithm:
//! the parametric positions where the ray crosses the pixel grid lines are
//! merged in order, and each gap between consecutive crossings is one pixel.
//!
//! World coordinates are millimetres with the image centred on the rotation
//! axis, x to the right and y up. Pixel `(r, c)` has its top-left corner at
//! `(-cols * ps / 2 + c * ps, rows * ps / 2 - r * ps)`.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::raster::{Image, Sinogram};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FanBeamGeometry {
    pub n_views: usize,
    pub n_bins: usize,
    /// (rows, cols) in pixels.
    pub image_size: (usize, usize),
    /// mm
    pub pixel_size: f64,
    /// mm, detector bin pitch
    pub detector_pixel: f64,
    /// mm
    pub source_to_detector: f64,
    /// mm
    pub source_to_isocenter: f64,
    /// radians covered by the views, evenly spaced without repeating the end point
    pub angular_span: f64,
}

impl Default for FanBeamGeometry {
    fn default() -> Self {
        Self::desk()
    }
}

impl FanBeamGeometry {
    /// 64x64 image at 4 mm, 120 views, 128 bins at 4 mm, magnification 2.
    pub fn desk() -> Self {
        Self {
            n_views: 120,
            n_bins: 128,
            image_size: (64, 64),
            pixel_size: 4.0,
            detector_pixel: 4.0,
            source_to_detector: 1000.0,
            source_to_isocenter: 500.0,
            angular_span: 2.0 * std::f64::consts::PI,
        }
    }

    /// 600 views over a full orbit, 512 bins at 1 mm, 100 cm / 50 cm, 256x256 image.
    pub fn full_scale() -> Self {
        Self {
            n_views: 600,
            n_bins: 512,
            image_size: (256, 256),
            pixel_size: 1.0,
            detector_pixel: 1.0,
            source_to_detector: 1000.0,
            source_to_isocenter: 500.0,
            angular_span: 2.0 * std::f64::consts::PI,
        }
    }

    /// Same scanner with a different image raster covering the same extent.
    pub fn with_image(mut self, rows: usize, cols: usize, pixel_size: f64) -> Self {
        self.image_size = (rows, cols);
        self.pixel_size = pixel_size;
        self
    }

    pub fn rows(&self) -> usize {
        self.image_size.0
    }

    pub fn cols(&self) -> usize {
        self.image_size.1
    }

    pub fn n_rays(&self) -> usize {
        self.n_views * self.n_bins
    }

    pub fn n_pixels(&self) -> usize {
        self.image_size.0 * self.image_size.1
    }

    pub fn magnification(&self) -> f64 {
        self.source_to_detector / self.source_to_isocenter
    }

    pub fn view_angle(&self, view: usize) -> f64 {
        view as f64 * self.angular_span / self.n_views as f64
    }

    /// Signed detector coordinate (mm) of a bin centre, zero on the central ray.
    pub fn bin_offset(&self, bin: usize) -> f64 {
        (bin as f64 - (self.n_bins as f64 - 1.0) / 2.0) * self.detector_pixel
    }

    /// Full detector width projected back to the isocentre plane.
    pub fn field_of_view(&self) -> f64 {
        self.n_bins as f64 * self.detector_pixel / self.magnification()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidGeometry(msg.to_string()));
        if self.n_views == 0 || self.n_bins == 0 {
            return bad("n_views and n_bins must be at least 1");
        }
        if self.image_size.0 == 0 || self.image_size.1 == 0 {
            return bad("image_size must be nonzero");
        }
        let lengths = [
            self.pixel_size,
            self.detector_pixel,
            self.source_to_detector,
            self.source_to_isocenter,
            self.angular_span,
        ];
        if lengths.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return bad("all lengths and the angular span must be strictly positive");
        }
        if self.source_to_detector <= self.source_to_isocenter {
            return bad("source_to_detector must exceed source_to_isocenter");
        }
        let fov = self.field_of_view();
        let tol = 1e-9 * fov;
        let width = self.image_size.1 as f64 * self.pixel_size;
        if width > fov + tol {
            return Err(Error::FieldOfView {
                dimension: "width",
                extent_mm: width,
                fov_mm: fov,
            });
        }
        let height = self.image_size.0 as f64 * self.pixel_size;
        if height > fov + tol {
            return Err(Error::FieldOfView {
                dimension: "height",
                extent_mm: height,
                fov_mm: fov,
            });
        }
        Ok(())
    }

    /// Source position and detector-bin centre of ray `(view, bin)`, in mm.
    pub fn ray_endpoints(&self, view: usize, bin: usize) -> ([f64; 2], [f64; 2]) {
        let theta = self.view_angle(view);
        let (s, c) = theta.sin_cos();
        let source = [self.source_to_isocenter * c, self.source_to_isocenter * s];
        let along = self.source_to_detector;
        let t = self.bin_offset(bin);
        let det = [source[0] - along * c - t * s, source[1] - along * s + t * c];
        (source, det)
    }

    /// Siddon traversal of one ray; calls `visit(pixel_index, length_mm)` for
    /// every pixel with a positive intersection length, in order along the ray.
    pub fn trace_ray<F: FnMut(usize, f64)>(&self, view: usize, bin: usize, visit: F) {
        let (p0, p1) = self.ray_endpoints(view, bin);
        trace_segment(self.image_size, self.pixel_size, p0, p1, visit);
    }

    /// Line integrals without storing the matrix; bit-identical to
    /// `SystemMatrix::forward_project` for the same geometry.
    pub fn forward_project_matrix_free(&self, x: &Image) -> Result<Sinogram> {
        self.validate()?;
        check_len("forward_project_matrix_free", self.n_pixels(), x.len())?;
        let mut out = Sinogram::zeros(self.n_views, self.n_bins);
        for v in 0..self.n_views {
            for b in 0..self.n_bins {
                let mut acc = 0.0;
                self.trace_ray(v, b, |j, w| acc += w * x.data[j]);
                out.data[v * self.n_bins + b] = acc;
            }
        }
        Ok(out)
    }
}

/// Exact intersection of segment `p0 -> p1` (mm) with a pixel grid centred at
/// the origin.
pub fn trace_segment<F: FnMut(usize, f64)>(
    image_size: (usize, usize),
    pixel_size: f64,
    p0: [f64; 2],
    p1: [f64; 2],
    mut visit: F,
) {
    let (rows, cols) = image_size;
    // grid coordinates: u along columns, w along rows (downwards)
    let x0 = -(cols as f64) * pixel_size / 2.0;
    let y_top = rows as f64 * pixel_size / 2.0;
    let u0 = (p0[0] - x0) / pixel_size;
    let w0 = (y_top - p0[1]) / pixel_size;
    let du = (p1[0] - p0[0]) / pixel_size;
    let dw = -(p1[1] - p0[1]) / pixel_size;
    let seg_len = ((p1[0] - p0[0]).powi(2) + (p1[1] - p0[1]).powi(2)).sqrt();
    if seg_len == 0.0 {
        return;
    }

    let mut t_lo = 0.0f64;
    let mut t_hi = 1.0f64;
    for (start, delta, extent) in [(u0, du, cols as f64), (w0, dw, rows as f64)] {
        if delta == 0.0 {
            if start < 0.0 || start > extent {
                return;
            }
        } else {
            let ta = (0.0 - start) / delta;
            let tb = (extent - start) / delta;
            t_lo = t_lo.max(ta.min(tb));
            t_hi = t_hi.min(ta.max(tb));
        }
    }
    if t_hi <= t_lo {
        return;
    }

    let crossings = |start: f64, delta: f64| -> Vec<f64> {
        if delta == 0.0 {
            return Vec::new();
        }
        let a = start + t_lo * delta;
        let b = start + t_hi * delta;
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let first = lo.floor() as i64 + 1;
        let last = hi.ceil() as i64 - 1;
        let mut ts: Vec<f64> = (first..=last).map(|k| (k as f64 - start) / delta).collect();
        if delta < 0.0 {
            ts.reverse();
        }
        ts
    };
    let tu = crossings(u0, du);
    let tw = crossings(w0, dw);

    let min_len = 1e-10 * pixel_size;
    let mut prev = t_lo;
    let (mut i, mut j) = (0usize, 0usize);
    let mut last_pixel = usize::MAX;
    let mut pending = 0.0f64;
    let mut emit = |t_a: f64, t_b: f64, visit: &mut F| {
        let len = (t_b - t_a) * seg_len;
        if len <= min_len {
            return;
        }
        let tm = 0.5 * (t_a + t_b);
        let c = ((u0 + tm * du).floor().max(0.0) as usize).min(cols - 1);
        let r = ((w0 + tm * dw).floor().max(0.0) as usize).min(rows - 1);
        let pix = r * cols + c;
        if pix == last_pixel {
            pending += len;
        } else {
            if last_pixel != usize::MAX {
                visit(last_pixel, pending);
            }
            last_pixel = pix;
            pending = len;
        }
    };
    loop {
        let next = match (tu.get(i), tw.get(j)) {
            (Some(&a), Some(&b)) => {
                if a <= b {
                    i += 1;
                    a
                } else {
                    j += 1;
                    b
                }
            }
            (Some(&a), None) => {
                i += 1;
                a
            }
            (None, Some(&b)) => {
                j += 1;
                b
            }
            (None, None) => break,
        };
        if next > prev {
            emit(prev, next, &mut visit);
            prev = next;
        }
    }
    emit(prev, t_hi, &mut visit);
    if last_pixel != usize::MAX {
        visit(last_pixel, pending);
    }
}

/// Sparse nonnegative system matrix in compressed-row layout. Row `i` is ray
/// `view * n_bins + bin`; column `j` is pixel `r * cols + c`.
#[derive(Clone, Debug, PartialEq)]
pub struct SystemMatrix {
    geometry: FanBeamGeometry,
    row_ptr: Vec<usize>,
    col_idx: Vec<u32>,
    values: Vec<f64>,
}

impl SystemMatrix {
    pub fn build(geometry: &FanBeamGeometry) -> Result<Self> {
        geometry.validate()?;
        let n_rays = geometry.n_rays();
        let mut row_ptr = Vec::with_capacity(n_rays + 1);
        let est = n_rays * (geometry.rows() + geometry.cols()) / 2;
        let mut col_idx = Vec::with_capacity(est);
        let mut values = Vec::with_capacity(est);
        row_ptr.push(0);
        for v in 0..geometry.n_views {
            for b in 0..geometry.n_bins {
                geometry.trace_ray(v, b, |j, w| {
                    col_idx.push(j as u32);
                    values.push(w);
                });
                row_ptr.push(values.len());
            }
        }
        col_idx.shrink_to_fit();
        values.shrink_to_fit();
        Ok(Self {
            geometry: geometry.clone(),
            row_ptr,
            col_idx,
            values,
        })
    }

    pub fn geometry(&self) -> &FanBeamGeometry {
        &self.geometry
    }

    /// N_d
    pub fn n_rows(&self) -> usize {
        self.row_ptr.len() - 1
    }

    /// N_p
    pub fn n_cols(&self) -> usize {
        self.geometry.n_pixels()
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Stored `(pixel, weight)` pairs of one ray.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[span.clone()]
            .iter()
            .zip(&self.values[span])
            .map(|(&j, &w)| (j as usize, w))
    }

    pub fn row_nnz(&self, i: usize) -> usize {
        self.row_ptr[i + 1] - self.row_ptr[i]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn forward_project(&self, x: &Image) -> Result<Sinogram> {
        check_len("forward_project", self.n_cols(), x.len())?;
        let g = &self.geometry;
        let mut out = Sinogram::zeros(g.n_views, g.n_bins);
        self.forward_into(&x.data, &mut out.data);
        Ok(out)
    }

    pub fn back_project(&self, y: &Sinogram) -> Result<Image> {
        check_len("back_project", self.n_rows(), y.len())?;
        let (rows, cols) = self.geometry.image_size;
        let mut out = Image::zeros(rows, cols);
        self.back_into(&y.data, &mut out.data);
        Ok(out)
    }

    /// `out = A x` on raw slices; lengths are the caller's responsibility.
    pub fn forward_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n_cols());
        debug_assert_eq!(out.len(), self.n_rows());
        for (i, o) in out.iter_mut().enumerate() {
            let (s, e) = (self.row_ptr[i], self.row_ptr[i + 1]);
            let mut acc = 0.0;
            for (&j, &w) in self.col_idx[s..e].iter().zip(&self.values[s..e]) {
                acc += w * x[j as usize];
            }
            *o = acc;
        }
    }

    /// `out = A^T y`, accumulated ray by ray in row order.
    pub fn back_into(&self, y: &[f64], out: &mut [f64]) {
        debug_assert_eq!(y.len(), self.n_rows());
        debug_assert_eq!(out.len(), self.n_cols());
        out.iter_mut().for_each(|v| *v = 0.0);
        for (i, &yi) in y.iter().enumerate() {
            if yi == 0.0 {
                continue;
            }
            let (s, e) = (self.row_ptr[i], self.row_ptr[i + 1]);
            for (&j, &w) in self.col_idx[s..e].iter().zip(&self.values[s..e]) {
                out[j as usize] += w * yi;
            }
        }
    }

    /// `out = A^T A x`, fused so the sinogram is never materialised.
    pub fn normal_into(&self, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..self.n_rows() {
            let (s, e) = (self.row_ptr[i], self.row_ptr[i + 1]);
            let cols = &self.col_idx[s..e];
            let vals = &self.values[s..e];
            let mut acc = 0.0;
            for (&j, &w) in cols.iter().zip(vals) {
                acc += w * x[j as usize];
            }
            if acc == 0.0 {
                continue;
            }
            for (&j, &w) in cols.iter().zip(vals) {
                out[j as usize] += w * acc;
            }
        }
    }
}


impl SystemMatrix {
    /// `A^T A` applied to `N` interleaved vectors: element `(j, t)` lives at
    /// `j * N + t`. Streams the matrix once for all right-hand sides.
    pub fn normal_interleaved<const N: usize>(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n_cols() * N);
        out.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..self.n_rows() {
            let (s, e) = (self.row_ptr[i], self.row_ptr[i + 1]);
            let cols = &self.col_idx[s..e];
            let vals = &self.values[s..e];
            let mut acc = [0.0f64; N];
            for (&j, &w) in cols.iter().zip(vals) {
                let base = j as usize * N;
                let xs = &x[base..base + N];
                for t in 0..N {
                    acc[t] += w * xs[t];
                }
            }
            for (&j, &w) in cols.iter().zip(vals) {
                let base = j as usize * N;
                let os = &mut out[base..base + N];
                for t in 0..N {
                    os[t] += w * acc[t];
                }
            }
        }
    }
}
