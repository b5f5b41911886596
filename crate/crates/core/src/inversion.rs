//! The inversion block: the least-squares solve
//!
//! ```text
//! (A^T A + sum_i beta_i F_i^T F_i) x = A^T y + sum_i beta_i F_i^T z_i
//! ```
//!
//! by conjugate gradient, and its backward pass. For a scalar loss with
//! gradient `g` at the solution, one extra solve `s = M^-1 g` gives
//!
//! ```text
//! dl/dz_i    = beta_i F_i s
//! dl/dbeta_i = (F_i^T z_i - F_i^T F_i x)^T s
//! ```
//!
//! and `dl/db = s` for the right-hand side itself.
//!
//! Up to four systems sharing one projector are solved in lockstep so the
//! sparse matrix is streamed once per iteration for all of them.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::framelet::{circular_correlate, FilterBank, Kernel, SubbandStack};
use crate::geometry::SystemMatrix;
use crate::raster::vecops::{axpy, dot, norm};
use crate::raster::{Image, Sinogram};

/// Smallest coupling weight an inversion will use.
pub const BETA_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CgSettings {
    pub max_iters: usize,
    pub rel_tolerance: f64,
    pub record_history: bool,
}

impl Default for CgSettings {
    fn default() -> Self {
        Self::training()
    }
}

impl CgSettings {
    pub fn training() -> Self {
        Self {
            max_iters: 100,
            rel_tolerance: 1e-6,
            record_history: false,
        }
    }

    pub fn verification() -> Self {
        Self {
            max_iters: 2000,
            rel_tolerance: 1e-10,
            record_history: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::param("cg.max_iters", "must be at least 1"));
        }
        if !(self.rel_tolerance > 0.0 && self.rel_tolerance < 1.0) {
            return Err(Error::param("cg.rel_tolerance", "must lie in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CgReport {
    pub iterations: usize,
    /// `||M x - b|| / ||b||` from the recursively updated residual.
    pub rel_residual: f64,
    pub converged: bool,
    /// Relative residual after each iteration (index 0 is the start).
    pub residual_history: Vec<f64>,
    /// Quadratic objective `x^T M x / 2 - b^T x` after each iteration. It
    /// differs from half the squared M-norm error by a constant, so it must
    /// never increase.
    pub energy_history: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct InversionProblem<'a> {
    a: &'a SystemMatrix,
    bank: &'a FilterBank,
    y: &'a Sinogram,
    z: &'a SubbandStack,
    betas: Vec<f64>,
    cg: CgSettings,
    kernel: Kernel,
}

impl<'a> InversionProblem<'a> {
    /// Weights below `BETA_FLOOR` are raised to it.
    pub fn new(
        a: &'a SystemMatrix,
        bank: &'a FilterBank,
        y: &'a Sinogram,
        z: &'a SubbandStack,
        betas: &[f64],
        cg: CgSettings,
    ) -> Result<Self> {
        cg.validate()?;
        check_len("inversion sinogram", a.n_rows(), y.len())?;
        check_len("inversion subband channels", bank.channels(), z.channels)?;
        check_len("inversion subband pixels", a.n_cols(), z.pixels())?;
        check_len("inversion betas", bank.channels(), betas.len())?;
        let (rows, cols) = a.geometry().image_size;
        if z.rows != rows || z.cols != cols {
            return Err(Error::param(
                "subband stack",
                "raster shape differs from the projector's image",
            ));
        }
        if betas.iter().any(|b| !b.is_finite()) {
            return Err(Error::param("betas", "must be finite"));
        }
        let betas: Vec<f64> = betas.iter().map(|b| b.max(BETA_FLOOR)).collect();
        let kernel = bank.normal_kernel(&betas);
        Ok(Self {
            a,
            bank,
            y,
            z,
            betas,
            cg,
            kernel,
        })
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn settings(&self) -> CgSettings {
        self.cg
    }

    pub fn projector(&self) -> &SystemMatrix {
        self.a
    }

    pub fn bank(&self) -> &FilterBank {
        self.bank
    }

    fn shape(&self) -> (usize, usize) {
        self.a.geometry().image_size
    }

    /// `b = A^T y + sum_i beta_i F_i^T z_i`
    pub fn rhs(&self) -> Vec<f64> {
        let mut b = vec![0.0; self.a.n_cols()];
        self.a.back_into(&self.y.data, &mut b);
        let (rows, cols) = self.shape();
        let mut tmp = vec![0.0; b.len()];
        for (i, &beta) in self.betas.iter().enumerate() {
            self.bank
                .adjoint_channel_into(i, rows, cols, self.z.channel(i), &mut tmp, false);
            axpy(beta, &tmp, &mut b);
        }
        b
    }

    fn apply_into(&self, v: &[f64], out: &mut [f64]) {
        self.a.normal_into(v, out);
        self.add_regularizer(v, out);
    }

    fn add_regularizer(&self, v: &[f64], out: &mut [f64]) {
        let (rows, cols) = self.shape();
        circular_correlate(v, rows, cols, &self.kernel, out, true);
    }
}

/// `A^T A v + sum_i beta_i F_i^T F_i v`
pub fn apply_normal_operator(p: &InversionProblem, v: &Image) -> Result<Image> {
    check_len("apply_normal_operator", p.a.n_cols(), v.len())?;
    let mut out = Image::zeros(v.rows, v.cols);
    p.apply_into(&v.data, &mut out.data);
    Ok(out)
}

pub fn solve_inversion(p: &InversionProblem, x0: &Image) -> Result<(Image, CgReport)> {
    let mut out = solve_inversion_batch(std::slice::from_ref(p), &[x0])?;
    Ok(out.pop().expect("one solution"))
}

/// Solves several inversions; problems sharing a projector run in lockstep.
pub fn solve_inversion_batch(problems: &[InversionProblem], x0: &[&Image]) -> Result<Vec<(Image, CgReport)>> {
    check_len("solve_inversion_batch warm starts", problems.len(), x0.len())?;
    for (p, x) in problems.iter().zip(x0) {
        check_len("solve_inversion warm start", p.a.n_cols(), x.len())?;
    }
    let rhs: Vec<Vec<f64>> = problems.iter().map(|p| p.rhs()).collect();
    let starts: Vec<Vec<f64>> = x0.iter().map(|x| x.data.clone()).collect();
    let solved = cg_batch(problems, &rhs, starts);
    let (rows, cols) = problems.first().map(|p| p.shape()).unwrap_or((0, 0));
    Ok(solved
        .into_iter()
        .map(|(x, r)| (Image { rows, cols, data: x }, r))
        .collect())
}

#[derive(Clone, Debug)]
pub struct InversionGradients {
    pub grad_z: SubbandStack,
    pub grad_beta: Vec<f64>,
    /// `s = M^-1 grad_x`, the gradient with respect to the right-hand side.
    pub grad_rhs: Image,
    pub report: CgReport,
}

pub fn backward_inversion(p: &InversionProblem, x_sol: &Image, grad_x: &Image) -> Result<InversionGradients> {
    let mut out = backward_inversion_batch(std::slice::from_ref(p), &[x_sol], &[grad_x])?;
    Ok(out.pop().expect("one gradient"))
}

pub fn backward_inversion_batch(
    problems: &[InversionProblem],
    x_sol: &[&Image],
    grad_x: &[&Image],
) -> Result<Vec<InversionGradients>> {
    check_len("backward_inversion_batch solutions", problems.len(), x_sol.len())?;
    check_len("backward_inversion_batch gradients", problems.len(), grad_x.len())?;
    for ((p, x), g) in problems.iter().zip(x_sol).zip(grad_x) {
        check_len("backward_inversion solution", p.a.n_cols(), x.len())?;
        check_len("backward_inversion gradient", p.a.n_cols(), g.len())?;
    }
    let rhs: Vec<Vec<f64>> = grad_x.iter().map(|g| g.data.clone()).collect();
    let starts: Vec<Vec<f64>> = problems.iter().map(|p| vec![0.0; p.a.n_cols()]).collect();
    let solved = cg_batch(problems, &rhs, starts);
    Ok(problems
        .iter()
        .zip(x_sol)
        .zip(solved)
        .map(|((p, x), (s, report))| inversion_gradients_from(p, x, s, report))
        .collect())
}

/// Gradients given the adjoint solution `s`; exposed so both gradients can be
/// checked to come from a single shared solve.
pub fn inversion_gradients_from(
    p: &InversionProblem,
    x_sol: &Image,
    s: Vec<f64>,
    report: CgReport,
) -> InversionGradients {
    let (rows, cols) = p.shape();
    let n = rows * cols;
    let channels = p.bank.channels();
    let mut grad_z = SubbandStack::zeros(channels, rows, cols);
    let mut grad_beta = vec![0.0; channels];
    let mut fs = vec![0.0; n];
    let mut fx = vec![0.0; n];
    for i in 0..channels {
        p.bank.analyze_channel_into(i, rows, cols, &s, &mut fs);
        p.bank.analyze_channel_into(i, rows, cols, &x_sol.data, &mut fx);
        // (F_i^T z_i - F_i^T F_i x)^T s = (z_i - F_i x)^T (F_i s)
        let zi = p.z.channel(i);
        let mut acc = 0.0;
        for t in 0..n {
            acc += (zi[t] - fx[t]) * fs[t];
        }
        grad_beta[i] = acc;
        let beta = p.betas[i];
        grad_z
            .channel_mut(i)
            .iter_mut()
            .zip(&fs)
            .for_each(|(g, v)| *g = beta * v);
    }
    InversionGradients {
        grad_z,
        grad_beta,
        grad_rhs: Image { rows, cols, data: s },
        report,
    }
}

/// Applies every problem's operator to its vector, sharing projector passes.
fn apply_batch(problems: &[&InversionProblem], vs: &[&[f64]], outs: &mut [Vec<f64>]) {
    let a = problems[0].a;
    let n = a.n_cols();
    let shared = problems.iter().all(|p| std::ptr::eq(p.a, a));
    if !shared || problems.len() == 1 {
        for ((p, v), o) in problems.iter().zip(vs).zip(outs.iter_mut()) {
            p.apply_into(v, o);
        }
        return;
    }
    let m = problems.len();
    let mut inter = vec![0.0; n * m];
    for (t, v) in vs.iter().enumerate() {
        for j in 0..n {
            inter[j * m + t] = v[j];
        }
    }
    let mut res = vec![0.0; n * m];
    match m {
        2 => a.normal_interleaved::<2>(&inter, &mut res),
        3 => a.normal_interleaved::<3>(&inter, &mut res),
        4 => a.normal_interleaved::<4>(&inter, &mut res),
        _ => unreachable!("batches are chunked to at most four"),
    }
    for (t, o) in outs.iter_mut().enumerate() {
        for j in 0..n {
            o[j] = res[j * m + t];
        }
    }
    for ((p, v), o) in problems.iter().zip(vs).zip(outs.iter_mut()) {
        p.add_regularizer(v, o);
    }
}

const LOCKSTEP: usize = 4;

fn cg_batch(problems: &[InversionProblem], rhs: &[Vec<f64>], starts: Vec<Vec<f64>>) -> Vec<(Vec<f64>, CgReport)> {
    let mut out = Vec::with_capacity(problems.len());
    let mut starts = starts.into_iter();
    for (chunk, b_chunk) in problems.chunks(LOCKSTEP).zip(rhs.chunks(LOCKSTEP)) {
        let x0: Vec<Vec<f64>> = starts.by_ref().take(chunk.len()).collect();
        out.extend(cg_lockstep(chunk, b_chunk, x0));
    }
    out
}

/// Independent CG recursions advanced together; each stops on its own
/// relative residual `||r|| / ||b||`.
fn cg_lockstep(problems: &[InversionProblem], rhs: &[Vec<f64>], mut xs: Vec<Vec<f64>>) -> Vec<(Vec<f64>, CgReport)> {
    let m = problems.len();
    let n = problems[0].a.n_cols();
    let mut reports = vec![CgReport::default(); m];
    let mut rs: Vec<Vec<f64>> = vec![vec![0.0; n]; m];
    let mut ps: Vec<Vec<f64>> = vec![vec![0.0; n]; m];
    let mut qs: Vec<Vec<f64>> = vec![vec![0.0; n]; m];
    let mut rho = vec![0.0; m];
    let mut bnorm = vec![0.0; m];
    let mut active = vec![true; m];

    {
        let refs: Vec<&InversionProblem> = problems.iter().collect();
        let vs: Vec<&[f64]> = xs.iter().map(|x| x.as_slice()).collect();
        apply_batch(&refs, &vs, &mut qs);
    }
    for t in 0..m {
        bnorm[t] = norm(&rhs[t]);
        if bnorm[t] == 0.0 {
            xs[t].iter_mut().for_each(|v| *v = 0.0);
            reports[t].converged = true;
            active[t] = false;
            continue;
        }
        for j in 0..n {
            rs[t][j] = rhs[t][j] - qs[t][j];
        }
        ps[t].copy_from_slice(&rs[t]);
        rho[t] = dot(&rs[t], &rs[t]);
        let rel = rho[t].sqrt() / bnorm[t];
        reports[t].rel_residual = rel;
        if problems[t].cg.record_history {
            reports[t].residual_history.push(rel);
            reports[t].energy_history.push(energy(&xs[t], &rhs[t], &rs[t]));
        }
        if rel <= problems[t].cg.rel_tolerance {
            reports[t].converged = true;
            active[t] = false;
        }
    }

    loop {
        let live: Vec<usize> = (0..m)
            .filter(|&t| active[t] && reports[t].iterations < problems[t].cg.max_iters)
            .collect();
        if live.is_empty() {
            break;
        }
        {
            let refs: Vec<&InversionProblem> = live.iter().map(|&t| &problems[t]).collect();
            let vs: Vec<&[f64]> = live.iter().map(|&t| ps[t].as_slice()).collect();
            let mut outs: Vec<Vec<f64>> = live.iter().map(|&t| std::mem::take(&mut qs[t])).collect();
            apply_batch(&refs, &vs, &mut outs);
            for (&t, o) in live.iter().zip(outs) {
                qs[t] = o;
            }
        }
        for &t in &live {
            let pq = dot(&ps[t], &qs[t]);
            let rep = &mut reports[t];
            rep.iterations += 1;
            if !(pq > 0.0) {
                // operator lost definiteness numerically; keep the current iterate
                active[t] = false;
                continue;
            }
            let alpha = rho[t] / pq;
            axpy(alpha, &ps[t], &mut xs[t]);
            axpy(-alpha, &qs[t], &mut rs[t]);
            let rho_new = dot(&rs[t], &rs[t]);
            let rel = rho_new.sqrt() / bnorm[t];
            rep.rel_residual = rel;
            if problems[t].cg.record_history {
                rep.residual_history.push(rel);
                rep.energy_history.push(energy(&xs[t], &rhs[t], &rs[t]));
            }
            if rel <= problems[t].cg.rel_tolerance {
                rep.converged = true;
                active[t] = false;
                continue;
            }
            let beta = rho_new / rho[t];
            rho[t] = rho_new;
            let (p, r) = (&mut ps[t], &rs[t]);
            for j in 0..n {
                p[j] = r[j] + beta * p[j];
            }
        }
    }
    for (t, rep) in reports.iter().enumerate() {
        if !rep.converged {
            log::warn!(
                "CG stopped after {} iterations at relative residual {:.3e} (system {t})",
                rep.iterations,
                rep.rel_residual
            );
        }
    }
    xs.into_iter().zip(reports).collect()
}

/// `x^T M x / 2 - b^T x = -x^T (b + r) / 2` with `r = b - M x`.
fn energy(x: &[f64], b: &[f64], r: &[f64]) -> f64 {
    let mut s = 0.0;
    for j in 0..x.len() {
        s += x[j] * (b[j] + r[j]);
    }
    -0.5 * s
}
