pub mod baselines;
pub mod config;
pub mod error;
pub mod framelet;
pub mod geometry;
pub mod gradcheck;
pub mod inversion;
pub mod io;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod raster;
pub mod sim;

pub use error::{Error, Result};
pub use framelet::{BankKind, FilterBank, Kernel, SubbandStack};
pub use geometry::{FanBeamGeometry, SystemMatrix};
pub use inversion::{
    apply_normal_operator, backward_inversion, solve_inversion, CgReport, CgSettings, InversionGradients,
    InversionProblem,
};
pub use metrics::{psnr, rmse, ssim, MetricReport};
pub use model::{apply_variant, HpMode, Model, ModelConfig, Variant};
pub use raster::{Image, Sinogram};
pub use sim::{NoiseModel, Phantom, PhantomKind, RawCounts};
