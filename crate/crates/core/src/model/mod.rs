//! The unrolled reconstruction network.
//!
//! Stage 0 inverts the data with a small constant coupling `beta0` and
//! `z = 0`. Each later stage `k` runs a CNN on all previous estimates
//! `x^0..x^{k-1}` to get a denoised image `x~`, analyzes it into subbands
//! `z^k = F x~`, predicts per-channel weights `beta^k` from the residual
//! norms
//!
//! ```text
//! ||y - A x^{k-1}||^2,  ||z_i^k - F_i x^{k-1}||^2  (i = 1..L)
//! ```
//!
//! and solves the inversion block warm-started at `x^{k-1}`.
//!
//! The model is generic over the network precision `T`; inversions always
//! run in f64.

pub mod check;
mod cnn;
mod mlp;
mod net;
mod train;

pub use cnn::CnnCache;
pub use mlp::MlpCache;
pub use net::{loss, ForwardOptions, ForwardTrace, StageTrace};
pub use train::{mean_psnr, train, EpochRecord, TrainConfig, TrainReport, TrainSample};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::framelet::{BankKind, FilterBank, Kernel};
use crate::inversion::CgSettings;
use crate::io::NamedTensor;
use crate::nn::{init_conv, init_dense_ones, Param, ParamSet, Real, Tensor4};
use crate::sim::MU_WATER;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HpMode {
    /// Weights predicted per sample from residual norms.
    Mlp,
    /// One learned weight per channel and stage.
    LearnableConstant,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    NoFilter,
    Gradient,
    LearnableFilters,
    LearnableHp,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "no-filter" => Ok(Self::NoFilter),
            "gradient" => Ok(Self::Gradient),
            "learnable-filters" => Ok(Self::LearnableFilters),
            "learnable-hp" => Ok(Self::LearnableHp),
            other => Err(Error::Unknown {
                kind: "variant",
                name: other.to_string(),
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Number of denoise-and-invert stages after stage 0.
    pub stages: usize,
    pub bank: BankKind,
    pub hp_mode: HpMode,
    pub cnn_depth: usize,
    pub cnn_channels: usize,
    pub mlp_hidden: [usize; 2],
    pub beta0: f64,
    /// Weight of the intermediate stage losses.
    pub mu: f64,
    /// Propagate gradients through the residual norms feeding the predictor.
    pub full_gradient: bool,
    /// Images are divided by this before entering a CNN and its output is
    /// multiplied by it.
    pub denoiser_scale: f64,
    /// Add `x^{k-1}` to the CNN output.
    pub residual: bool,
    /// Start the last convolution of every CNN at zero.
    pub zero_init_last: bool,
    /// Initial value of learnable constant weights; calibrated from the
    /// first training batch when absent.
    pub hp_init: Option<f64>,
    pub cg: CgSettings,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            stages: 3,
            bank: BankKind::BsplineLinear,
            hp_mode: HpMode::Mlp,
            cnn_depth: 17,
            cnn_channels: 64,
            mlp_hidden: [16, 16],
            beta0: 0.005,
            mu: 0.8,
            full_gradient: true,
            denoiser_scale: MU_WATER,
            residual: false,
            zero_init_last: false,
            hp_init: None,
            cg: CgSettings::training(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Five 32-channel blocks per CNN, each predicting a correction to
    /// the previous estimate and starting from the identity.
    pub fn desk() -> Self {
        Self {
            cnn_depth: 5,
            cnn_channels: 32,
            residual: true,
            zero_init_last: true,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 {
            return Err(Error::param("model.stages", "must be at least 1"));
        }
        if self.cnn_depth < 2 {
            return Err(Error::param("model.cnn_depth", "must be at least 2"));
        }
        if self.cnn_channels == 0 || self.mlp_hidden.contains(&0) {
            return Err(Error::param("model widths", "must be positive"));
        }
        if !(self.beta0 > 0.0) {
            return Err(Error::param("model.beta0", "must be positive"));
        }
        if !(self.mu >= 0.0) {
            return Err(Error::param("model.mu", "must be nonnegative"));
        }
        if !(self.denoiser_scale > 0.0) {
            return Err(Error::param("model.denoiser_scale", "must be positive"));
        }
        if let Some(v) = self.hp_init {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::param("model.hp_init", "must be positive"));
            }
        }
        self.cg.validate()
    }
}

/// Switches a base configuration to one of the ablation variants.
pub fn apply_variant(config: &ModelConfig, variant: Variant) -> ModelConfig {
    let mut c = config.clone();
    match variant {
        Variant::NoFilter => {
            c.bank = BankKind::None;
            c.hp_mode = HpMode::LearnableConstant;
        }
        Variant::Gradient => c.bank = BankKind::Gradient,
        Variant::LearnableFilters => c.bank = BankKind::Learnable,
        Variant::LearnableHp => c.hp_mode = HpMode::LearnableConstant,
    }
    c
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct ConvIdx {
    pub w: usize,
    pub b: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct BnIdx {
    pub scale: usize,
    pub shift: usize,
    pub mean: usize,
    pub var: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) enum HpIdx {
    Mlp([ConvIdx; 3]),
    /// Parameter holding `ln beta` per channel.
    Constant(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct StageLayout {
    pub convs: Vec<ConvIdx>,
    /// One entry per conv; `None` for the first and last block.
    pub bns: Vec<Option<BnIdx>>,
    pub hp: HpIdx,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamSet<T>,
    pub(crate) stages: Vec<StageLayout>,
    pub(crate) filters: Option<Vec<usize>>,
    /// Bank used by stage 0, and by every stage unless filters are learned.
    base_bank: FilterBank,
}

fn base_bank(kind: BankKind) -> Result<FilterBank> {
    match kind {
        BankKind::Learnable => Ok(FilterBank::learnable_from_bspline()),
        k => FilterBank::build(k, None),
    }
}

fn stage_seed(seed: u64, stage: usize, layer: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((stage as u64) << 32 | layer as u64)
}

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let bank = base_bank(config.bank)?;
        let l = bank.channels();
        let mut params = ParamSet::default();
        let mut stages = Vec::with_capacity(config.stages);
        let c = config.cnn_channels;
        let depth = config.cnn_depth;
        for k in 1..=config.stages {
            let mut convs = Vec::with_capacity(depth);
            let mut bns = Vec::with_capacity(depth);
            for j in 0..depth {
                let cin = if j == 0 { k } else { c };
                let cout = if j + 1 == depth { 1 } else { c };
                let w = if j + 1 == depth && config.zero_init_last {
                    Tensor4::zeros([cout, cin, 3, 3])
                } else {
                    init_conv::<T>(cout, cin, stage_seed(config.seed, k, j))
                };
                let wi = params.push(Param::new(format!("stage{k}.conv{j}.weight"), w));
                let bi = params.push(Param::new(
                    format!("stage{k}.conv{j}.bias"),
                    Tensor4::zeros([cout, 1, 1, 1]),
                ));
                convs.push(ConvIdx { w: wi, b: bi });
                if j > 0 && j + 1 < depth {
                    let ones = Tensor4 {
                        shape: [c, 1, 1, 1],
                        data: vec![T::one(); c],
                        grad: None,
                    };
                    bns.push(Some(BnIdx {
                        scale: params.push(Param::new(format!("stage{k}.bn{j}.scale"), ones.clone())),
                        shift: params.push(Param::new(
                            format!("stage{k}.bn{j}.shift"),
                            Tensor4::zeros([c, 1, 1, 1]),
                        )),
                        mean: params.push(Param::buffer(
                            format!("stage{k}.bn{j}.running_mean"),
                            Tensor4::zeros([c, 1, 1, 1]),
                        )),
                        var: params.push(Param::buffer(format!("stage{k}.bn{j}.running_var"), ones)),
                    }));
                } else {
                    bns.push(None);
                }
            }
            let hp = match config.hp_mode {
                HpMode::Mlp => {
                    let [h1, h2] = config.mlp_hidden;
                    let dims = [(h1, l + 1), (h2, h1), (l, h2)];
                    let mut idx = [ConvIdx { w: 0, b: 0 }; 3];
                    for (j, (fo, fi)) in dims.into_iter().enumerate() {
                        idx[j] = ConvIdx {
                            w: params.push(Param::new(format!("stage{k}.mlp{j}.weight"), init_dense_ones(fo, fi))),
                            b: params.push(Param::new(
                                format!("stage{k}.mlp{j}.bias"),
                                Tensor4::zeros([fo, 1, 1, 1]),
                            )),
                        };
                    }
                    HpIdx::Mlp(idx)
                }
                HpMode::LearnableConstant => {
                    let init = config.hp_init.unwrap_or(1.0).ln();
                    let t = Tensor4 {
                        shape: [l, 1, 1, 1],
                        data: vec![T::of(init); l],
                        grad: None,
                    };
                    HpIdx::Constant(params.push(Param::new(format!("stage{k}.log_beta"), t)))
                }
            };
            stages.push(StageLayout { convs, bns, hp });
        }
        let filters = if config.bank == BankKind::Learnable {
            Some(
                bank.kernels()
                    .iter()
                    .enumerate()
                    .map(|(i, k)| {
                        let t = Tensor4 {
                            shape: [1, 1, k.size, k.size],
                            data: k.taps.iter().map(|&v| T::of(v)).collect(),
                            grad: None,
                        };
                        params.push(Param::new(format!("bank.filter{i}"), t))
                    })
                    .collect(),
            )
        } else {
            None
        };
        Ok(Self {
            config,
            params,
            stages,
            filters,
            base_bank: bank,
        })
    }

    /// Coupling channels `L`.
    pub fn channels(&self) -> usize {
        self.base_bank.channels()
    }

    /// Bank used by the stage-0 inversion.
    pub fn stage0_bank(&self) -> &FilterBank {
        &self.base_bank
    }

    /// Bank used by stages 1..K, including learned filters.
    pub fn bank(&self) -> FilterBank {
        match &self.filters {
            None => self.base_bank.clone(),
            Some(idx) => {
                let kernels = idx
                    .iter()
                    .map(|&i| {
                        let p = &self.params.params[i];
                        Kernel {
                            size: p.value.shape[2],
                            taps: p.value.data.iter().map(|v| v.f64()).collect(),
                        }
                    })
                    .collect();
                FilterBank::build(BankKind::Learnable, Some(kernels)).expect("learnable bank has kernels")
            }
        }
    }

    /// Sets every stage's constant weights (learnable-constant mode only).
    pub fn set_constant_betas(&mut self, stage: usize, betas: &[f64]) -> Result<()> {
        let layout = self
            .stages
            .get(stage.wrapping_sub(1))
            .ok_or_else(|| Error::param("stage", format!("{stage} out of range")))?;
        match layout.hp {
            HpIdx::Constant(i) => {
                let p = &mut self.params.params[i];
                if betas.len() != p.len() {
                    return Err(Error::DimensionMismatch {
                        context: "constant betas",
                        expected: p.len(),
                        actual: betas.len(),
                    });
                }
                for (v, b) in p.value.data.iter_mut().zip(betas) {
                    *v = T::of(b.max(crate::inversion::BETA_FLOOR).ln());
                }
                Ok(())
            }
            HpIdx::Mlp(_) => Err(Error::param("hp_mode", "model predicts its weights with an MLP")),
        }
    }

    pub fn uses_constant_hp(&self) -> bool {
        self.config.hp_mode == HpMode::LearnableConstant
    }

    /// Parameters and Adam state as named f32 tensors.
    pub fn to_tensors(&self) -> Vec<NamedTensor> {
        let mut out = Vec::with_capacity(3 * self.params.params.len() + 1);
        let to_f32 = |v: &[T]| v.iter().map(|x| x.f64() as f32).collect::<Vec<f32>>();
        for p in &self.params.params {
            let dims: Vec<u32> = p.value.shape.iter().map(|&d| d as u32).collect();
            out.push(NamedTensor::new(p.name.clone(), dims.clone(), to_f32(&p.value.data)));
            if p.trainable {
                out.push(NamedTensor::new(
                    format!("{}.adam_m", p.name),
                    dims.clone(),
                    to_f32(&p.m),
                ));
                out.push(NamedTensor::new(format!("{}.adam_v", p.name), dims, to_f32(&p.v)));
            }
        }
        let step = self.params.step;
        // split so counts beyond 2^24 survive the f32 payload
        out.push(NamedTensor::new(
            "optimizer.step",
            vec![2],
            vec![(step >> 24) as f32, (step & 0xFF_FFFF) as f32],
        ));
        out
    }

    /// Restores parameters saved by [`Model::to_tensors`] into a model built
    /// from the same configuration.
    pub fn load_tensors(&mut self, tensors: &[NamedTensor]) -> Result<()> {
        use std::collections::HashMap;
        let by_name: HashMap<&str, &NamedTensor> = tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        let fetch = |name: &str, shape: &[usize; 4]| -> Result<Vec<T>> {
            let t = by_name.get(name).ok_or_else(|| Error::MissingField {
                context: "checkpoint",
                field: name.to_string(),
            })?;
            let want: Vec<u32> = shape.iter().map(|&d| d as u32).collect();
            if t.dims != want {
                return Err(Error::Format(format!(
                    "checkpoint tensor {name} has dims {:?}, expected {want:?}",
                    t.dims
                )));
            }
            Ok(t.data.iter().map(|&v| T::of(v as f64)).collect())
        };
        for p in &mut self.params.params {
            let shape = p.value.shape;
            p.value.data = fetch(&p.name, &shape)?;
            if p.trainable {
                p.m = fetch(&format!("{}.adam_m", p.name), &shape)?;
                p.v = fetch(&format!("{}.adam_v", p.name), &shape)?;
            }
        }
        let step = by_name.get("optimizer.step").ok_or_else(|| Error::MissingField {
            context: "checkpoint",
            field: "optimizer.step".into(),
        })?;
        if step.data.len() != 2 {
            return Err(Error::Format("optimizer.step must hold two values".into()));
        }
        self.params.step = ((step.data[0] as u64) << 24) | step.data[1] as u64;
        Ok(())
    }
}
