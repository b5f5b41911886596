use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::net::ForwardOptions;
use super::Model;
use crate::error::{Error, Result};
use crate::geometry::SystemMatrix;
use crate::io::write_checkpoint;
use crate::metrics::psnr;
use crate::nn::{adam_step, AdamConfig, Real};
use crate::raster::{Image, Sinogram};
use crate::sim::Sample;

#[derive(Clone, Debug)]
pub struct TrainSample {
    pub y: Sinogram,
    pub truth: Image,
    pub dose: f64,
}

impl From<&Sample> for TrainSample {
    fn from(s: &Sample) -> Self {
        Self {
            y: s.sinogram.clone(),
            truth: s.phantom.clone(),
            dose: s.dose,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Seeds the per-epoch shuffle.
    pub seed: u64,
    /// Write a checkpoint every this many epochs; 0 writes only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 4,
            adam: AdamConfig::default(),
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::param("train.batch_size", "must be positive"));
        }
        let a = &self.adam;
        if !(a.lr >= 0.0 && a.lr.is_finite()) {
            return Err(Error::param("train.adam.lr", "must be finite and nonnegative"));
        }
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return Err(Error::param(
                "train.adam",
                "betas must lie in [0, 1) and eps be positive",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean batch loss over the epoch.
    pub loss: f64,
    pub val_psnr: Option<f64>,
    /// Seconds since training started.
    pub wall_time: f64,
    pub cg_nonconverged: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// Constant weights chosen before the first update, per stage.
    pub calibrated_betas: Option<Vec<f64>>,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss,val_psnr,wall_time,cg_nonconverged\n");
        for e in &self.epochs {
            let v = e.val_psnr.map_or(String::new(), |p| format!("{p:.6}"));
            s.push_str(&format!(
                "{},{:.9e},{},{:.3},{}\n",
                e.epoch, e.loss, v, e.wall_time, e.cg_nonconverged
            ));
        }
        s
    }

    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.loss).collect()
    }

    /// Trailing moving average of the epoch losses; the first `window - 1`
    /// entries average over what is available.
    pub fn smoothed_losses(&self, window: usize) -> Vec<f64> {
        let l = self.losses();
        (0..l.len())
            .map(|i| {
                let lo = (i + 1).saturating_sub(window.max(1));
                l[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
            })
            .collect()
    }
}

#[derive(Serialize)]
struct BatchDump<'a> {
    epoch: usize,
    batch: usize,
    loss: f64,
    sample_indices: &'a [usize],
    doses: Vec<f64>,
    betas: Vec<Vec<Vec<f64>>>,
    norms: Vec<Vec<Vec<f64>>>,
}

/// Mean PSNR of `model` over `samples`, batch norm in inference mode.
pub fn mean_psnr<T: Real>(model: &Model<T>, a: &SystemMatrix, samples: &[TrainSample], batch: usize) -> Result<f64> {
    let mut total = 0.0;
    for chunk in samples.chunks(batch.max(1)) {
        let ys: Vec<&Sinogram> = chunk.iter().map(|s| &s.y).collect();
        for (x, s) in model.reconstruct(a, &ys)?.iter().zip(chunk) {
            total += psnr(&s.truth, x)?;
        }
    }
    Ok(total / samples.len() as f64)
}

fn stage0_cache<T: Real>(
    model: &Model<T>,
    a: &SystemMatrix,
    samples: &[TrainSample],
    batch: usize,
) -> Result<Vec<Image>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch) {
        let ys: Vec<&Sinogram> = chunk.iter().map(|s| &s.y).collect();
        out.extend(model.stage0(a, &ys)?.into_iter().map(|(x, _)| x));
    }
    Ok(out)
}

/// Sets each stage's constant weights to what an untrained predictor
/// would output on the first batch: `h1 * h2 * sum of residual norms`.
fn calibrate_constants<T: Real>(
    model: &mut Model<T>,
    a: &SystemMatrix,
    samples: &[TrainSample],
    x0: &[Image],
    batch: usize,
) -> Result<Vec<f64>> {
    let n = samples.len().min(batch);
    let ys: Vec<&Sinogram> = samples[..n].iter().map(|s| &s.y).collect();
    let [h1, h2] = model.config.mlp_hidden;
    let l = model.channels();
    let mut chosen = Vec::with_capacity(model.config.stages);
    for k in 1..=model.config.stages {
        let trace = model.forward(a, &ys, Some(&x0[..n]), &ForwardOptions::default())?;
        let mean: f64 = trace.stages[k - 1]
            .norms
            .iter()
            .map(|v| v.iter().sum::<f64>())
            .sum::<f64>()
            / n as f64;
        let beta = (h1 * h2) as f64 * mean;
        model.set_constant_betas(k, &vec![beta; l])?;
        chosen.push(beta);
    }
    Ok(chosen)
}

/// Trains `model` with Adam on the batch loss. Stage-0 estimates do not
/// depend on the weights and are computed once up front.
pub fn train<T: Real>(
    model: &mut Model<T>,
    a: &SystemMatrix,
    train_set: &[TrainSample],
    val_set: &[TrainSample],
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::param("training set", "is empty"));
    }
    if let Some(dir) = checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }
    let start = Instant::now();
    let x0 = stage0_cache(model, a, train_set, cfg.batch_size)?;
    let mut report = TrainReport::default();
    if model.uses_constant_hp() && model.config.hp_init.is_none() && model.params.step == 0 {
        report.calibrated_betas = Some(calibrate_constants(model, a, train_set, &x0, cfg.batch_size)?);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        let mut nonconverged = 0usize;
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let ys: Vec<&Sinogram> = idx.iter().map(|&i| &train_set[i].y).collect();
            let truths: Vec<&Image> = idx.iter().map(|&i| &train_set[i].truth).collect();
            let xs: Vec<Image> = idx.iter().map(|&i| x0[i].clone()).collect();
            model.params.zero_grad();
            let trace = model.forward(a, &ys, Some(&xs), &ForwardOptions::default())?;
            nonconverged += trace.nonconverged();
            let loss = model.backward(a, &ys, &trace, &truths)?;
            let grads_finite = model.params.params.iter().all(|p| p.grad.iter().all(|g| g.is_finite()));
            if !loss.is_finite() || !grads_finite {
                let dump = BatchDump {
                    epoch,
                    batch: bi,
                    loss,
                    sample_indices: idx,
                    doses: idx.iter().map(|&i| train_set[i].dose).collect(),
                    betas: trace.stages.iter().map(|s| s.betas.clone()).collect(),
                    norms: trace.stages.iter().map(|s| s.norms.clone()).collect(),
                };
                let text = serde_json::to_string_pretty(&dump)?;
                match checkpoint_dir {
                    Some(dir) => std::fs::write(dir.join("nonfinite_batch.json"), text)?,
                    None => log::error!("non-finite batch: {text}"),
                }
                return Err(Error::NonFiniteLoss {
                    value: loss,
                    epoch,
                    batch: bi,
                });
            }
            model.commit_running_stats(&trace);
            adam_step(&mut model.params, &cfg.adam);
            loss_sum += loss;
            batches += 1;
        }
        let val_psnr = if val_set.is_empty() {
            None
        } else {
            Some(mean_psnr(model, a, val_set, cfg.batch_size)?)
        };
        let rec = EpochRecord {
            epoch,
            loss: loss_sum / batches as f64,
            val_psnr,
            wall_time: start.elapsed().as_secs_f64(),
            cg_nonconverged: nonconverged,
        };
        log::info!(
            "epoch {epoch}: loss {:.6e}, val psnr {}, {:.1}s",
            rec.loss,
            val_psnr.map_or("-".into(), |p| format!("{p:.3}")),
            rec.wall_time
        );
        if nonconverged > 0 {
            log::warn!("epoch {epoch}: {nonconverged} inversions hit the CG iteration cap");
        }
        report.epochs.push(rec);
        if let Some(dir) = checkpoint_dir {
            if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
                write_checkpoint(&dir.join(format!("epoch_{epoch:04}.ahpc")), &model.to_tensors())?;
            }
        }
    }
    if let Some(dir) = checkpoint_dir {
        write_checkpoint(&dir.join("final.ahpc"), &model.to_tensors())?;
    }
    Ok(report)
}
