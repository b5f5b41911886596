use super::cnn::{cnn_backward, cnn_forward, commit_running, CnnCache};
use super::mlp::{mlp_backward, mlp_forward, MlpCache};
use super::{HpIdx, Model};
use crate::error::{check_len, Error, Result};
use crate::framelet::{kernel_gradient, FilterBank, SubbandStack};
use crate::geometry::SystemMatrix;
use crate::inversion::{backward_inversion_batch, solve_inversion_batch, CgReport, InversionProblem, BETA_FLOOR};
use crate::nn::{BnMode, Real, Tensor4};
use crate::raster::vecops::{axpy, norm_sq};
use crate::raster::{Image, Sinogram};

#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions<'a> {
    pub bn_mode: BnMode,
    /// Predictor inputs to use instead of the computed residual norms,
    /// indexed `[stage - 1][sample]`.
    pub frozen_norms: Option<&'a [Vec<Vec<f64>>]>,
}

impl Default for ForwardOptions<'_> {
    fn default() -> Self {
        Self {
            bn_mode: BnMode::Train,
            frozen_norms: None,
        }
    }
}

impl ForwardOptions<'_> {
    pub fn inference() -> Self {
        Self {
            bn_mode: BnMode::Inference,
            frozen_norms: None,
        }
    }
}

/// Intermediate values of one stage for a batch.
#[derive(Clone, Debug)]
pub struct StageTrace<T> {
    pub cnn: CnnCache<T>,
    pub x_tilde: Vec<Image>,
    pub z: Vec<SubbandStack>,
    /// `y - A x^{k-1}`
    pub sino_residual: Vec<Vec<f64>>,
    /// `z_i - F_i x^{k-1}`
    pub subband_residual: Vec<SubbandStack>,
    /// Squared residual norms, `L + 1` per sample.
    pub norms: Vec<Vec<f64>>,
    /// Predictor output before the positivity floor.
    pub raw_betas: Vec<Vec<f64>>,
    pub betas: Vec<Vec<f64>>,
    pub mlp: Option<MlpCache<T>>,
    pub reports: Vec<CgReport>,
}

#[derive(Clone, Debug)]
pub struct ForwardTrace<T> {
    /// `estimates[k][sample]` is `x^k`.
    pub estimates: Vec<Vec<Image>>,
    pub stage0_reports: Vec<CgReport>,
    pub stages: Vec<StageTrace<T>>,
    pub bank: FilterBank,
    pub bn_mode: BnMode,
}

impl<T> ForwardTrace<T> {
    pub fn batch(&self) -> usize {
        self.estimates[0].len()
    }

    pub fn output(&self) -> &[Image] {
        self.estimates.last().expect("stage 0 always runs")
    }

    /// Inversions in stages 1..K that hit their iteration cap.
    pub fn nonconverged(&self) -> usize {
        self.stages
            .iter()
            .flat_map(|s| &s.reports)
            .filter(|r| !r.converged)
            .count()
    }
}

fn stage_weight(k: usize, stages: usize, mu: f64) -> f64 {
    if k == stages {
        1.0
    } else if k == 0 {
        0.0
    } else {
        mu
    }
}

/// Batch mean of `||x^K - x||^2 + mu * sum_{k=1}^{K-1} ||x^k - x||^2`.
pub fn loss<T>(trace: &ForwardTrace<T>, truths: &[&Image], mu: f64) -> f64 {
    let stages = trace.estimates.len() - 1;
    let b = trace.batch();
    let mut total = 0.0;
    for (k, est) in trace.estimates.iter().enumerate().skip(1) {
        let w = stage_weight(k, stages, mu);
        for (x, t) in est.iter().zip(truths) {
            let d: f64 = x.data.iter().zip(&t.data).map(|(a, b)| (a - b) * (a - b)).sum();
            total += w * d;
        }
    }
    total / b as f64
}

fn history<T: Real>(estimates: &[Vec<Image>], scale: f64) -> Tensor4<T> {
    let k = estimates.len();
    let b = estimates[0].len();
    let (rows, cols) = (estimates[0][0].rows, estimates[0][0].cols);
    let mut t = Tensor4::zeros([b, k, rows, cols]);
    let inv = 1.0 / scale;
    for (j, est) in estimates.iter().enumerate() {
        for (s, x) in est.iter().enumerate() {
            t.plane_of_mut(s, j)
                .iter_mut()
                .zip(&x.data)
                .for_each(|(d, v)| *d = T::of(v * inv));
        }
    }
    t
}

impl<T: Real> Model<T> {
    fn check_inputs(&self, a: &SystemMatrix, ys: &[&Sinogram]) -> Result<()> {
        if ys.is_empty() {
            return Err(Error::param("batch", "must hold at least one sinogram"));
        }
        for y in ys {
            check_len("model input sinogram", a.n_rows(), y.len())?;
        }
        Ok(())
    }

    /// Stage-0 estimates: `z = 0`, `beta = beta0`, zero start.
    pub fn stage0(&self, a: &SystemMatrix, ys: &[&Sinogram]) -> Result<Vec<(Image, CgReport)>> {
        self.check_inputs(a, ys)?;
        let (rows, cols) = a.geometry().image_size;
        let bank = self.stage0_bank();
        let z = SubbandStack::zeros(bank.channels(), rows, cols);
        let betas = vec![self.config.beta0; bank.channels()];
        let problems = ys
            .iter()
            .map(|y| InversionProblem::new(a, bank, y, &z, &betas, self.config.cg))
            .collect::<Result<Vec<_>>>()?;
        let zero = Image::zeros(rows, cols);
        solve_inversion_batch(&problems, &vec![&zero; ys.len()])
    }

    /// Raw predictor output for a batch of residual-norm vectors.
    fn predict_raw(&self, stage: usize, norms: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, Option<MlpCache<T>>)> {
        let l = self.channels();
        for n in norms {
            check_len("predictor input", l + 1, n.len())?;
        }
        match &self.stages[stage - 1].hp {
            HpIdx::Mlp(idx) => {
                let b = norms.len();
                let data = norms.iter().flatten().map(|&v| T::of(v)).collect();
                let x = Tensor4::from_vec([b, l + 1, 1, 1], data)?;
                let (out, cache) = mlp_forward(&self.params, idx, x)?;
                let raw = (0..b)
                    .map(|s| out.sample(s).iter().map(|v| v.f64()).collect())
                    .collect();
                Ok((raw, Some(cache)))
            }
            HpIdx::Constant(i) => {
                let beta: Vec<f64> = self.params.params[*i]
                    .value
                    .data
                    .iter()
                    .map(|v| v.f64().exp())
                    .collect();
                Ok((vec![beta; norms.len()], None))
            }
        }
    }

    /// Coupling weights for one sample at `stage` (1-based) from its `L + 1`
    /// squared residual norms, floored at the positivity limit.
    pub fn predict_betas(&self, stage: usize, residual_sq_norms: &[f64]) -> Result<Vec<f64>> {
        self.check_stage(stage)?;
        let (raw, _) = self.predict_raw(stage, &[residual_sq_norms.to_vec()])?;
        Ok(raw[0].iter().map(|b| b.max(BETA_FLOOR)).collect())
    }

    fn check_stage(&self, stage: usize) -> Result<()> {
        if stage == 0 || stage > self.config.stages {
            return Err(Error::param(
                "stage",
                format!("{stage} outside 1..={}", self.config.stages),
            ));
        }
        Ok(())
    }

    /// Runs the stage-`stage` denoiser on per-sample histories
    /// `x^0..x^{stage-1}` and analyzes its output.
    pub fn denoise_stage(
        &self,
        stage: usize,
        histories: &[Vec<Image>],
        mode: BnMode,
    ) -> Result<Vec<(Image, SubbandStack)>> {
        self.check_stage(stage)?;
        if histories.is_empty() {
            return Err(Error::param("history", "empty batch"));
        }
        for h in histories {
            check_len("denoiser history length", stage, h.len())?;
        }
        let by_stage: Vec<Vec<Image>> = (0..stage)
            .map(|j| histories.iter().map(|h| h[j].clone()).collect())
            .collect();
        let (xt, _) = self.denoise(stage, &by_stage, mode)?;
        let bank = self.bank();
        Ok(xt
            .into_iter()
            .map(|x| {
                let z = bank.analyze(&x);
                (x, z)
            })
            .collect())
    }

    fn denoise(&self, stage: usize, estimates: &[Vec<Image>], mode: BnMode) -> Result<(Vec<Image>, CnnCache<T>)> {
        let scale = self.config.denoiser_scale;
        let input = history::<T>(estimates, scale);
        let (out, cache) = cnn_forward(&self.params, &self.stages[stage - 1], input, mode)?;
        let prev = &estimates[stage - 1];
        let xt = prev
            .iter()
            .enumerate()
            .map(|(s, p)| {
                let data = out
                    .sample(s)
                    .iter()
                    .zip(&p.data)
                    .map(|(o, pv)| scale * o.f64() + if self.config.residual { *pv } else { 0.0 })
                    .collect();
                Image {
                    rows: p.rows,
                    cols: p.cols,
                    data,
                }
            })
            .collect();
        Ok((xt, cache))
    }

    /// Gradient of `sum_s <grad_z[s], F x~_s>` with respect to the denoiser
    /// inputs, indexed `[j][sample]`. Parameter gradients are accumulated.
    pub(crate) fn denoise_vjp(
        &mut self,
        stage: usize,
        estimates: &[Vec<Image>],
        mode: BnMode,
        grad_z: &[SubbandStack],
    ) -> Result<Vec<Vec<Image>>> {
        self.check_stage(stage)?;
        check_len("denoiser history length", stage, estimates.len())?;
        let (_, cache) = self.denoise(stage, estimates, mode)?;
        let bank = self.bank();
        let scale = self.config.denoiser_scale;
        let (rows, cols) = (estimates[0][0].rows, estimates[0][0].cols);
        let b = estimates[0].len();
        check_len("denoiser output gradients", b, grad_z.len())?;
        let mut g_out = Tensor4::<T>::zeros([b, 1, rows, cols]);
        let mut gxt = vec![vec![0.0; rows * cols]; b];
        for s in 0..b {
            for i in 0..bank.channels() {
                bank.adjoint_channel_into(i, rows, cols, grad_z[s].channel(i), &mut gxt[s], true);
            }
            g_out
                .sample_mut(s)
                .iter_mut()
                .zip(&gxt[s])
                .for_each(|(o, v)| *o = T::of(scale * v));
        }
        let layout = self.stages[stage - 1].clone();
        let g_hist = cnn_backward(&mut self.params, &layout, &cache, g_out)?;
        Ok((0..stage)
            .map(|j| {
                (0..b)
                    .map(|s| {
                        let mut data: Vec<f64> = g_hist.plane_of(s, j).iter().map(|v| v.f64() / scale).collect();
                        if self.config.residual && j + 1 == stage {
                            axpy(1.0, &gxt[s], &mut data);
                        }
                        Image { rows, cols, data }
                    })
                    .collect()
            })
            .collect())
    }

    /// Full forward pass. `x0` supplies cached stage-0 estimates.
    pub fn forward(
        &self,
        a: &SystemMatrix,
        ys: &[&Sinogram],
        x0: Option<&[Image]>,
        opts: &ForwardOptions,
    ) -> Result<ForwardTrace<T>> {
        self.check_inputs(a, ys)?;
        let b = ys.len();
        let (x0, stage0_reports) = match x0 {
            Some(x) => {
                check_len("cached stage-0 estimates", b, x.len())?;
                for xi in x {
                    check_len("cached stage-0 estimate", a.n_cols(), xi.len())?;
                }
                (x.to_vec(), vec![CgReport::default(); b])
            }
            None => self.stage0(a, ys)?.into_iter().unzip(),
        };
        if let Some(f) = opts.frozen_norms {
            check_len("frozen norm stages", self.config.stages, f.len())?;
        }
        let bank = self.bank();
        let l = bank.channels();
        let (rows, cols) = a.geometry().image_size;
        let n = rows * cols;
        let mut estimates = vec![x0];
        let mut stages = Vec::with_capacity(self.config.stages);
        for k in 1..=self.config.stages {
            let (x_tilde, cnn) = self.denoise(k, &estimates, opts.bn_mode)?;
            let prev = &estimates[k - 1];
            let z: Vec<SubbandStack> = x_tilde.iter().map(|x| bank.analyze(x)).collect();
            let mut sino_residual = Vec::with_capacity(b);
            let mut subband_residual = Vec::with_capacity(b);
            let mut norms = Vec::with_capacity(b);
            let mut ax = vec![0.0; a.n_rows()];
            let mut fx = vec![0.0; n];
            for s in 0..b {
                a.forward_into(&prev[s].data, &mut ax);
                let r0: Vec<f64> = ys[s].data.iter().zip(&ax).map(|(y, v)| y - v).collect();
                let mut nv = Vec::with_capacity(l + 1);
                nv.push(norm_sq(&r0));
                let mut rs = z[s].clone();
                for i in 0..l {
                    bank.analyze_channel_into(i, rows, cols, &prev[s].data, &mut fx);
                    let ch = rs.channel_mut(i);
                    ch.iter_mut().zip(&fx).for_each(|(r, f)| *r -= f);
                    nv.push(norm_sq(ch));
                }
                sino_residual.push(r0);
                subband_residual.push(rs);
                norms.push(nv);
            }
            let inputs = match opts.frozen_norms {
                Some(f) => {
                    check_len("frozen norm samples", b, f[k - 1].len())?;
                    f[k - 1].clone()
                }
                None => norms.clone(),
            };
            let (raw_betas, mlp) = self.predict_raw(k, &inputs)?;
            let betas: Vec<Vec<f64>> = raw_betas
                .iter()
                .map(|r| r.iter().map(|v| v.max(BETA_FLOOR)).collect())
                .collect();
            let problems = (0..b)
                .map(|s| InversionProblem::new(a, &bank, ys[s], &z[s], &betas[s], self.config.cg))
                .collect::<Result<Vec<_>>>()?;
            let starts: Vec<&Image> = prev.iter().collect();
            let (xk, reports): (Vec<Image>, Vec<CgReport>) =
                solve_inversion_batch(&problems, &starts)?.into_iter().unzip();
            drop(problems);
            estimates.push(xk);
            stages.push(StageTrace {
                cnn,
                x_tilde,
                z,
                sino_residual,
                subband_residual,
                norms,
                raw_betas,
                betas,
                mlp,
                reports,
            });
        }
        Ok(ForwardTrace {
            estimates,
            stage0_reports,
            stages,
            bank,
            bn_mode: opts.bn_mode,
        })
    }

    /// Final estimates with batch norm in inference mode.
    pub fn reconstruct(&self, a: &SystemMatrix, ys: &[&Sinogram]) -> Result<Vec<Image>> {
        let trace = self.forward(a, ys, None, &ForwardOptions::inference())?;
        Ok(trace.estimates.last().cloned().unwrap_or_default())
    }

    /// Stores the running statistics of a training-mode pass.
    pub fn commit_running_stats(&mut self, trace: &ForwardTrace<T>) {
        if trace.bn_mode != BnMode::Train {
            return;
        }
        for (layout, st) in self.stages.iter().zip(&trace.stages) {
            commit_running(&mut self.params, layout, &st.cnn);
        }
    }

    /// Accumulates the gradient of the batch loss into `self.params` and
    /// returns the loss. Gradients are added to whatever is already there.
    pub fn backward(
        &mut self,
        a: &SystemMatrix,
        ys: &[&Sinogram],
        trace: &ForwardTrace<T>,
        truths: &[&Image],
    ) -> Result<f64> {
        let b = trace.batch();
        let kk = self.config.stages;
        check_len("backward truths", b, truths.len())?;
        check_len("backward sinograms", b, ys.len())?;
        if trace.stages.len() != kk || trace.estimates.len() != kk + 1 {
            return Err(Error::MissingField {
                context: "forward trace",
                field: format!("stages (have {}, need {kk})", trace.stages.len()),
            });
        }
        let mu = self.config.mu;
        let value = loss(trace, truths, mu);
        let (rows, cols) = a.geometry().image_size;
        let n = rows * cols;
        let scale = self.config.denoiser_scale;
        let bank = &trace.bank;
        let l = bank.channels();

        // dL/dx^k, starting from the direct loss terms
        let mut gx: Vec<Vec<Image>> = trace
            .estimates
            .iter()
            .enumerate()
            .map(|(k, est)| {
                let w = 2.0 * stage_weight(k, kk, mu) / b as f64;
                est.iter()
                    .zip(truths)
                    .map(|(x, t)| Image {
                        rows,
                        cols,
                        data: x.data.iter().zip(&t.data).map(|(a, b)| w * (a - b)).collect(),
                    })
                    .collect()
            })
            .collect();
        let ksize = bank.kernels().first().map_or(3, |k| k.size);
        let mut filter_grads = vec![vec![0.0; ksize * ksize]; if self.filters.is_some() { l } else { 0 }];

        for k in (1..=kk).rev() {
            let st = &trace.stages[k - 1];
            let prev = &trace.estimates[k - 1];
            let cur = &trace.estimates[k];
            let problems = (0..b)
                .map(|s| InversionProblem::new(a, bank, ys[s], &st.z[s], &st.betas[s], self.config.cg))
                .collect::<Result<Vec<_>>>()?;
            let xs: Vec<&Image> = cur.iter().collect();
            let gs: Vec<&Image> = gx[k].iter().collect();
            let inv = backward_inversion_batch(&problems, &xs, &gs)?;
            drop(problems);

            let g_raw: Vec<Vec<f64>> = (0..b)
                .map(|s| {
                    (0..l)
                        .map(|i| {
                            if st.raw_betas[s][i] > BETA_FLOOR {
                                inv[s].grad_beta[i]
                            } else {
                                0.0
                            }
                        })
                        .collect()
                })
                .collect();

            let g_norms = match &self.stages[k - 1].hp {
                HpIdx::Mlp(idx) => {
                    let idx = *idx;
                    let cache = st.mlp.as_ref().ok_or_else(|| Error::MissingField {
                        context: "forward trace",
                        field: format!("predictor cache of stage {k}"),
                    })?;
                    let data = g_raw.iter().flatten().map(|&v| T::of(v)).collect();
                    let g_out = Tensor4::from_vec([b, l, 1, 1], data)?;
                    let g_in = mlp_backward(&mut self.params, &idx, cache, g_out)?;
                    Some(
                        (0..b)
                            .map(|s| g_in.sample(s).iter().map(|v| v.f64()).collect::<Vec<f64>>())
                            .collect::<Vec<_>>(),
                    )
                }
                HpIdx::Constant(pi) => {
                    let p = &mut self.params.params[*pi];
                    for s in 0..b {
                        for i in 0..l {
                            // beta = exp(theta)
                            p.grad[i] += T::of(g_raw[s][i] * st.raw_betas[s][i]);
                        }
                    }
                    None
                }
            };

            let mut gz: Vec<SubbandStack> = inv.iter().map(|g| g.grad_z.clone()).collect();
            let mut tmp = vec![0.0; n];
            if let (true, Some(gn)) = (self.config.full_gradient, &g_norms) {
                let mut back = vec![0.0; n];
                for s in 0..b {
                    a.back_into(&st.sino_residual[s], &mut back);
                    axpy(-2.0 * gn[s][0], &back, &mut gx[k - 1][s].data);
                    for i in 0..l {
                        let gi = gn[s][i + 1];
                        let r = st.subband_residual[s].channel(i);
                        axpy(2.0 * gi, r, gz[s].channel_mut(i));
                        bank.adjoint_channel_into(i, rows, cols, r, &mut tmp, false);
                        axpy(-2.0 * gi, &tmp, &mut gx[k - 1][s].data);
                        if !filter_grads.is_empty() {
                            let kg = kernel_gradient(r, &prev[s].data, rows, cols, ksize);
                            axpy(-2.0 * gi, &kg, &mut filter_grads[i]);
                        }
                    }
                }
            }

            if !filter_grads.is_empty() {
                let mut fs = vec![0.0; n];
                let mut fx = vec![0.0; n];
                for s in 0..b {
                    let sv = &inv[s].grad_rhs.data;
                    for i in 0..l {
                        let beta = st.betas[s][i];
                        bank.analyze_channel_into(i, rows, cols, sv, &mut fs);
                        bank.analyze_channel_into(i, rows, cols, &cur[s].data, &mut fx);
                        let zi = st.z[s].channel(i);
                        let w: Vec<f64> = zi.iter().zip(&fx).map(|(z, f)| z - f).collect();
                        axpy(beta, &kernel_gradient(&w, sv, rows, cols, ksize), &mut filter_grads[i]);
                        axpy(
                            -beta,
                            &kernel_gradient(&fs, &cur[s].data, rows, cols, ksize),
                            &mut filter_grads[i],
                        );
                        axpy(
                            1.0,
                            &kernel_gradient(gz[s].channel(i), &st.x_tilde[s].data, rows, cols, ksize),
                            &mut filter_grads[i],
                        );
                    }
                }
            }

            let mut g_out = Tensor4::<T>::zeros([b, 1, rows, cols]);
            for s in 0..b {
                let mut gxt = vec![0.0; n];
                for i in 0..l {
                    bank.adjoint_channel_into(i, rows, cols, gz[s].channel(i), &mut gxt, true);
                }
                if self.config.residual {
                    axpy(1.0, &gxt, &mut gx[k - 1][s].data);
                }
                g_out
                    .sample_mut(s)
                    .iter_mut()
                    .zip(&gxt)
                    .for_each(|(o, v)| *o = T::of(scale * v));
            }
            let layout = self.stages[k - 1].clone();
            let g_hist = cnn_backward(&mut self.params, &layout, &st.cnn, g_out)?;
            for (j, gxj) in gx.iter_mut().enumerate().take(k) {
                for (s, g) in gxj.iter_mut().enumerate() {
                    g.data
                        .iter_mut()
                        .zip(g_hist.plane_of(s, j))
                        .for_each(|(d, v)| *d += v.f64() / scale);
                }
            }
        }

        if let Some(idx) = &self.filters {
            for (fi, g) in idx.iter().zip(&filter_grads) {
                let p = &mut self.params.params[*fi];
                p.grad.iter_mut().zip(g).for_each(|(d, v)| *d += T::of(*v));
            }
        }
        Ok(value)
    }
}
