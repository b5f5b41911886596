//! High-pass filter banks and their circular-convolution operators.
//!
//! The linear B-spline framelet bank is built from three 1-D filters
//! `h0 = [1, 2, 1] / 4`, `h1 = [1, 0, -1] * sqrt(2) / 4`, `h2 = [-1, 2, -1] / 4`.
//! The eight 2-D high-pass kernels are the tensor products `h_a h_b^T` except
//! `h0 h0^T`, which is kept separately as the low-pass. With periodic
//! boundaries the bank is a tight frame:
//! `H0^T H0 + sum_i F_i^T F_i = I`.
//!
//! Conventions: `analyze` is a true convolution, `z_i[p] = sum_q f_i[q] x[p - q]`,
//! with indices wrapped around the image. The adjoint is the matching
//! correlation. Kernels are stored with their centre at the middle tap.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::raster::Image;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BankKind {
    BsplineLinear,
    Gradient,
    Learnable,
    None,
}

impl std::str::FromStr for BankKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bspline-linear" | "bspline" => Ok(BankKind::BsplineLinear),
            "gradient" => Ok(BankKind::Gradient),
            "learnable" => Ok(BankKind::Learnable),
            "none" => Ok(BankKind::None),
            other => Err(Error::Unknown {
                kind: "filter bank",
                name: other.to_string(),
            }),
        }
    }
}

/// Square kernel of odd side `size`, row-major, centre tap at `(size/2, size/2)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Kernel {
    pub size: usize,
    pub taps: Vec<f64>,
}

impl Kernel {
    pub fn new(size: usize, taps: Vec<f64>) -> Result<Self> {
        if size % 2 == 0 {
            return Err(Error::param("kernel size", "must be odd"));
        }
        check_len("Kernel::new", size * size, taps.len())?;
        Ok(Self { size, taps })
    }

    pub fn outer(col: &[f64; 3], row: &[f64; 3]) -> Self {
        let mut taps = Vec::with_capacity(9);
        for a in col {
            for b in row {
                taps.push(a * b);
            }
        }
        Self { size: 3, taps }
    }

    pub fn radius(&self) -> usize {
        self.size / 2
    }

    pub fn sum(&self) -> f64 {
        self.taps.iter().sum()
    }

    /// Kernel mirrored through its centre.
    pub fn flipped(&self) -> Kernel {
        let mut taps = self.taps.clone();
        taps.reverse();
        Kernel { size: self.size, taps }
    }

    /// `g[d] = sum_q f[q] f[q + d]`, of side `2 * size - 1`.
    pub fn autocorrelation(&self) -> Kernel {
        let n = self.size;
        let m = 2 * n - 1;
        let mut taps = vec![0.0; m * m];
        for a in 0..n {
            for b in 0..n {
                let fa = self.taps[a * n + b];
                if fa == 0.0 {
                    continue;
                }
                for c in 0..n {
                    for d in 0..n {
                        let fc = self.taps[c * n + d];
                        // offset (c - a, d - b) shifted by n - 1
                        taps[(c + n - 1 - a) * m + (d + n - 1 - b)] += fa * fc;
                    }
                }
            }
        }
        Kernel { size: m, taps }
    }
}

const SQRT2_4: f64 = std::f64::consts::SQRT_2 / 4.0;
pub const H0: [f64; 3] = [0.25, 0.5, 0.25];
pub const H1: [f64; 3] = [SQRT2_4, 0.0, -SQRT2_4];
pub const H2: [f64; 3] = [-0.25, 0.5, -0.25];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterBank {
    kind: BankKind,
    highpass: Vec<Kernel>,
    lowpass: Option<Kernel>,
}

impl FilterBank {
    /// Builds a bank. `Learnable` needs `init` kernels; the other kinds ignore it.
    pub fn build(kind: BankKind, init: Option<Vec<Kernel>>) -> Result<Self> {
        match kind {
            BankKind::BsplineLinear => Ok(Self::bspline()),
            BankKind::Gradient => Ok(Self::gradient()),
            BankKind::None => Ok(Self {
                kind,
                highpass: Vec::new(),
                lowpass: None,
            }),
            BankKind::Learnable => {
                let kernels = init.ok_or_else(|| Error::MissingField {
                    context: "learnable filter bank",
                    field: "initial kernels".into(),
                })?;
                if kernels.is_empty() {
                    return Err(Error::param("learnable filter bank", "needs at least one kernel"));
                }
                Ok(Self {
                    kind,
                    highpass: kernels,
                    lowpass: None,
                })
            }
        }
    }

    pub fn bspline() -> Self {
        let filters = [H0, H1, H2];
        let mut highpass = Vec::with_capacity(8);
        for (a, ha) in filters.iter().enumerate() {
            for (b, hb) in filters.iter().enumerate() {
                if a == 0 && b == 0 {
                    continue;
                }
                highpass.push(Kernel::outer(ha, hb));
            }
        }
        Self {
            kind: BankKind::BsplineLinear,
            highpass,
            lowpass: Some(Kernel::outer(&H0, &H0)),
        }
    }

    /// Forward differences `[1, -1]` along columns and rows, as 3x3 kernels.
    pub fn gradient() -> Self {
        let mut horiz = vec![0.0; 9];
        horiz[4] = 1.0;
        horiz[5] = -1.0;
        let mut vert = vec![0.0; 9];
        vert[4] = 1.0;
        vert[7] = -1.0;
        Self {
            kind: BankKind::Gradient,
            highpass: vec![Kernel { size: 3, taps: horiz }, Kernel { size: 3, taps: vert }],
            lowpass: None,
        }
    }

    /// Learnable bank seeded from the B-spline framelet kernels.
    pub fn learnable_from_bspline() -> Self {
        Self {
            kind: BankKind::Learnable,
            highpass: Self::bspline().highpass,
            lowpass: None,
        }
    }

    pub fn kind(&self) -> BankKind {
        self.kind
    }

    /// Number of high-pass kernels (0 for the identity-coupled `None` bank).
    pub fn highpass_count(&self) -> usize {
        self.highpass.len()
    }

    /// Channels of the coupling variable: `L`, or 1 for `None`, whose single
    /// channel is the image itself.
    pub fn channels(&self) -> usize {
        if self.kind == BankKind::None {
            1
        } else {
            self.highpass.len()
        }
    }

    pub fn kernels(&self) -> &[Kernel] {
        &self.highpass
    }

    pub fn kernels_mut(&mut self) -> &mut [Kernel] {
        &mut self.highpass
    }

    pub fn lowpass(&self) -> Option<&Kernel> {
        self.lowpass.as_ref()
    }

    pub fn analyze(&self, x: &Image) -> SubbandStack {
        let n = x.len();
        let c = self.channels();
        let mut data = vec![0.0; c * n];
        for i in 0..c {
            self.analyze_channel_into(i, x.rows, x.cols, &x.data, &mut data[i * n..(i + 1) * n]);
        }
        SubbandStack {
            rows: x.rows,
            cols: x.cols,
            channels: c,
            data,
        }
    }

    /// `out = F_i x` for raw row-major data.
    pub fn analyze_channel_into(&self, i: usize, rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
        if self.kind == BankKind::None {
            out.copy_from_slice(x);
            return;
        }
        circular_correlate(x, rows, cols, &self.highpass[i].flipped(), out, false);
    }

    /// `out (+)= F_i^T z_i`.
    pub fn adjoint_channel_into(
        &self,
        i: usize,
        rows: usize,
        cols: usize,
        z: &[f64],
        out: &mut [f64],
        accumulate: bool,
    ) {
        if self.kind == BankKind::None {
            if accumulate {
                out.iter_mut().zip(z).for_each(|(o, v)| *o += v);
            } else {
                out.copy_from_slice(z);
            }
            return;
        }
        circular_correlate(z, rows, cols, &self.highpass[i], out, accumulate);
    }

    /// `F_i^T z_i` for one channel.
    pub fn adjoint_channel(&self, i: usize, z: &SubbandStack) -> Result<Image> {
        self.check_stack(z)?;
        if i >= z.channels {
            return Err(Error::param(
                "channel",
                format!("{i} out of range for {} channels", z.channels),
            ));
        }
        let mut out = Image::zeros(z.rows, z.cols);
        self.adjoint_channel_into(i, z.rows, z.cols, z.channel(i), &mut out.data, false);
        Ok(out)
    }

    /// `sum_i F_i^T z_i`.
    pub fn adjoint(&self, z: &SubbandStack) -> Result<Image> {
        self.check_stack(z)?;
        let mut out = Image::zeros(z.rows, z.cols);
        for i in 0..z.channels {
            self.adjoint_channel_into(i, z.rows, z.cols, z.channel(i), &mut out.data, i > 0);
        }
        Ok(out)
    }

    /// `sum_i w_i F_i^T z_i`.
    pub fn weighted_adjoint_into(&self, weights: &[f64], z: &SubbandStack, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        let mut tmp = vec![0.0; z.rows * z.cols];
        for (i, w) in weights.iter().enumerate() {
            self.adjoint_channel_into(i, z.rows, z.cols, z.channel(i), &mut tmp, false);
            out.iter_mut().zip(&tmp).for_each(|(o, t)| *o += w * t);
        }
    }

    fn check_stack(&self, z: &SubbandStack) -> Result<()> {
        check_len("subband stack channels", self.channels(), z.channels)
    }

    /// Single kernel equal to `sum_i w_i F_i^T F_i` (a 5x5 correlation for 3x3
    /// banks), applied with `apply_normal_kernel`.
    pub fn normal_kernel(&self, weights: &[f64]) -> Kernel {
        if self.kind == BankKind::None {
            let w = weights.first().copied().unwrap_or(0.0);
            return Kernel { size: 1, taps: vec![w] };
        }
        let size = 2 * self.highpass.iter().map(|k| k.size).max().unwrap_or(1) - 1;
        let mut taps = vec![0.0; size * size];
        for (k, w) in self.highpass.iter().zip(weights) {
            let g = k.autocorrelation();
            let off = (size - g.size) / 2;
            for a in 0..g.size {
                for b in 0..g.size {
                    taps[(a + off) * size + b + off] += w * g.taps[a * g.size + b];
                }
            }
        }
        Kernel { size, taps }
    }

    /// Low-pass analysis `H0 x` (B-spline bank only).
    pub fn lowpass_analyze(&self, x: &Image) -> Option<Image> {
        let k = self.lowpass.as_ref()?;
        let mut out = Image::zeros(x.rows, x.cols);
        circular_correlate(&x.data, x.rows, x.cols, &k.flipped(), &mut out.data, false);
        Some(out)
    }

    /// `H0^T v` (B-spline bank only).
    pub fn lowpass_adjoint(&self, v: &Image) -> Option<Image> {
        let k = self.lowpass.as_ref()?;
        let mut out = Image::zeros(v.rows, v.cols);
        circular_correlate(&v.data, v.rows, v.cols, k, &mut out.data, false);
        Some(out)
    }
}

/// `out[p] (+)= sum_d k[d] x[p + d]` with periodic wrap.
pub fn circular_correlate(x: &[f64], rows: usize, cols: usize, k: &Kernel, out: &mut [f64], accumulate: bool) {
    debug_assert_eq!(x.len(), rows * cols);
    debug_assert_eq!(out.len(), rows * cols);
    let h = k.radius();
    let n = k.size;
    if !accumulate {
        out.iter_mut().for_each(|v| *v = 0.0);
    }
    if n == 1 {
        let w = k.taps[0];
        out.iter_mut().zip(x).for_each(|(o, v)| *o += w * v);
        return;
    }
    // periodic padding so the inner loops are branch free
    let pc = cols + 2 * h;
    let pr = rows + 2 * h;
    let mut padded = vec![0.0; pr * pc];
    for r in 0..pr {
        let sr = (r + rows * (h / rows + 1) - h) % rows;
        let src = &x[sr * cols..(sr + 1) * cols];
        let dst = &mut padded[r * pc..(r + 1) * pc];
        for c in 0..pc {
            dst[c] = src[(c + cols * (h / cols + 1) - h) % cols];
        }
    }
    for a in 0..n {
        for b in 0..n {
            let w = k.taps[a * n + b];
            if w == 0.0 {
                continue;
            }
            for r in 0..rows {
                let src = &padded[(r + a) * pc + b..(r + a) * pc + b + cols];
                let dst = &mut out[r * cols..(r + 1) * cols];
                for (o, v) in dst.iter_mut().zip(src) {
                    *o += w * v;
                }
            }
        }
    }
}

/// `g[q] = sum_p w[p] v[p - q]` over the kernel support: the gradient of
/// `<w, f (*) v>` with respect to the taps of `f`.
pub fn kernel_gradient(w: &[f64], v: &[f64], rows: usize, cols: usize, size: usize) -> Vec<f64> {
    let h = size / 2;
    let mut g = vec![0.0; size * size];
    for a in 0..size {
        for b in 0..size {
            // q = (a - h, b - h); v[p - q]
            let mut acc = 0.0;
            for r in 0..rows {
                let sr = (r + rows * (h / rows + 1) + h - a) % rows;
                let wrow = &w[r * cols..(r + 1) * cols];
                let vrow = &v[sr * cols..(sr + 1) * cols];
                for c in 0..cols {
                    let sc = (c + cols * (h / cols + 1) + h - b) % cols;
                    acc += wrow[c] * vrow[sc];
                }
            }
            g[a * size + b] = acc;
        }
    }
    g
}

/// `L` subband images of one raster, channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SubbandStack {
    pub rows: usize,
    pub cols: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl SubbandStack {
    pub fn zeros(channels: usize, rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            channels,
            data: vec![0.0; channels * rows * cols],
        }
    }

    pub fn pixels(&self) -> usize {
        self.rows * self.cols
    }

    pub fn channel(&self, i: usize) -> &[f64] {
        let n = self.pixels();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn channel_mut(&mut self, i: usize) -> &mut [f64] {
        let n = self.pixels();
        &mut self.data[i * n..(i + 1) * n]
    }
}
