use std::fmt::Write as _;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ldct_core::baselines::{fbp_reconstruct, tv_reconstruct, Apodization, TvSettings};
use ldct_core::config::{Precision, RunConfig};
use ldct_core::gradcheck::{format_table, run_all};
use ldct_core::io::{read_checkpoint, read_image, write_image};
use ldct_core::metrics::{evaluate, mean_std};
use ldct_core::model::{train, TrainSample};
use ldct_core::nn::Real;
use ldct_core::sim::{
    read_dataset, simulate_dataset, simulate_mixed_dataset, write_dataset, Manifest, Sample, MU_WATER,
};
use ldct_core::{Error, Image, Model, PhantomKind, Sinogram, SystemMatrix};

#[derive(Parser)]
#[command(
    name = "ldct",
    version,
    about = "Low-dose CT simulation, reconstruction and evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// JSON run configuration; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration field, e.g. `--set train.lr=1e-3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate phantoms and noisy sinograms.
    Simulate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dose in photons per ray; repeat for several.
        #[arg(long, allow_hyphen_values = true)]
        dose: Vec<f64>,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        phantom: Option<PhantomKind>,
        /// Draw one dose per phantom from the dose set.
        #[arg(long)]
        mixed: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the unrolled network.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        val: Option<PathBuf>,
        /// Checkpoint directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Reconstruct a dataset with a trained checkpoint.
    Reconstruct {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score reconstructions against the dataset phantoms.
    Eval {
        #[arg(long)]
        data: PathBuf,
        /// Directory holding `<id>_<suffix>.f32r` files.
        #[arg(long)]
        recon: PathBuf,
        #[arg(long, default_value = "recon")]
        suffix: String,
        /// CSV destination; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Reconstruct a dataset with FBP or TV-ADMM.
    Baseline {
        #[arg(long)]
        method: Method,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "ramlak")]
        apodization: Apodization,
        /// TV weight; chosen from the sample dose when absent.
        #[arg(long, allow_hyphen_values = true)]
        lambda: Option<f64>,
        #[arg(long, default_value_t = 10.0)]
        mu: f64,
        #[arg(long, default_value_t = 200)]
        iters: usize,
    },
    /// Run every finite-difference gradient suite.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Window a raster to an 8-bit grayscale PNG.
    ExportPng {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = -150.0, allow_hyphen_values = true)]
        hu_min: f64,
        #[arg(long, default_value_t = 150.0, allow_hyphen_values = true)]
        hu_max: f64,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Method {
    Fbp,
    Tv,
}

enum Failure {
    Usage(String),
    Validation(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Io(_) => Failure::Usage(e.to_string()),
            other => Failure::Validation(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

type CliResult<T> = Result<T, Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg
                .lines()
                .next()
                .unwrap_or("invalid arguments")
                .trim_start_matches("error: ");
            eprintln!("error[usage]: {first}");
            return ExitCode::from(1);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error[usage]: {}", one_line(&m));
            ExitCode::from(1)
        }
        Err(Failure::Validation(m)) => {
            eprintln!("error[validation]: {}", one_line(&m));
            ExitCode::from(2)
        }
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn load_config(args: &ConfigArgs, fallback: Option<&Path>) -> CliResult<RunConfig> {
    let mut cfg = match args.config.as_deref().or(fallback.filter(|p| p.exists())) {
        Some(p) => RunConfig::load(p).map_err(|e| match e {
            Error::Io(io) => Failure::Usage(format!("{}: {io}", p.display())),
            other => Failure::Validation(format!("{}: {other}", p.display())),
        })?,
        None => RunConfig::default(),
    };
    for s in &args.overrides {
        cfg.set(s).map_err(|e| Failure::Usage(e.to_string()))?;
    }
    Ok(cfg)
}

fn echo_config(dir: &Path, cfg: &RunConfig) -> CliResult<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.json"), cfg.to_json())?;
    Ok(())
}

fn required(path: Option<PathBuf>, what: &str) -> CliResult<PathBuf> {
    path.ok_or_else(|| Failure::Usage(format!("missing {what}: pass it as a flag or set it in the config")))
}

fn existing_dir(path: &Path) -> CliResult<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("{} is not a directory", path.display())))
    }
}

fn run(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::Simulate {
            cfg,
            dose,
            count,
            seed,
            phantom,
            mixed,
            out,
        } => {
            let mut c = load_config(&cfg, None)?;
            if !dose.is_empty() {
                c.noise.doses = dose;
            }
            if let Some(n) = count {
                c.noise.count = n;
            }
            if let Some(s) = seed {
                c.noise.seed = s;
            }
            if let Some(p) = phantom {
                c.noise.phantom = p;
            }
            c.noise.mixed |= mixed;
            c.paths.output = out.or(c.paths.output);
            c.validate()?;
            let dir = required(c.paths.output.clone(), "output directory (--out)")?;
            simulate(&c, &dir)
        }
        Command::Train { cfg, data, val, out } => {
            let mut c = load_config(&cfg, None)?;
            c.paths.dataset = data.or(c.paths.dataset);
            c.paths.validation = val.or(c.paths.validation);
            c.paths.checkpoint_dir = out.or(c.paths.checkpoint_dir);
            c.validate()?;
            match c.train.precision {
                Precision::F32 => train_with::<f32>(&c),
                Precision::F64 => train_with::<f64>(&c),
            }
        }
        Command::Reconstruct {
            cfg,
            checkpoint,
            data,
            out,
        } => {
            let beside = checkpoint.parent().map(|d| d.join("config.json"));
            let mut c = load_config(&cfg, beside.as_deref())?;
            c.paths.dataset = data.or(c.paths.dataset);
            c.paths.output = out.or(c.paths.output);
            c.validate()?;
            match c.train.precision {
                Precision::F32 => reconstruct_with::<f32>(&c, &checkpoint),
                Precision::F64 => reconstruct_with::<f64>(&c, &checkpoint),
            }
        }
        Command::Eval {
            data,
            recon,
            suffix,
            out,
        } => eval(&data, &recon, &suffix, out.as_deref()),
        Command::Baseline {
            method,
            data,
            out,
            apodization,
            lambda,
            mu,
            iters,
        } => baseline(method, &data, &out, apodization, lambda, mu, iters),
        Command::Gradcheck { seed } => {
            let results = run_all(seed)?;
            print!("{}", format_table(&results));
            let failed: Vec<&str> = results
                .iter()
                .filter(|r| !r.passed())
                .map(|r| r.name.as_str())
                .collect();
            if failed.is_empty() {
                Ok(())
            } else {
                Err(Failure::Validation(format!(
                    "gradient checks failed: {}",
                    failed.join(", ")
                )))
            }
        }
        Command::ExportPng {
            input,
            output,
            hu_min,
            hu_max,
        } => export_png(&input, &output, hu_min, hu_max),
    }
}

fn simulate(c: &RunConfig, dir: &Path) -> CliResult<()> {
    let a = SystemMatrix::build(&c.geometry)?;
    let n = &c.noise;
    let samples = if n.mixed {
        simulate_mixed_dataset(&a, &n.phantom, n.count, &n.doses, n.electronic_variance, n.seed)?
    } else {
        simulate_dataset(&a, &n.phantom, n.count, &n.doses, n.electronic_variance, n.seed)?
    };
    let manifest = Manifest {
        ids: samples.iter().map(|s| s.id.clone()).collect(),
        doses: n.doses.clone(),
        seed: n.seed,
        electronic_variance: n.electronic_variance,
        phantom: n.phantom.clone(),
        geometry: c.geometry.clone(),
    };
    write_dataset(dir, &samples, &manifest)?;
    // the echo lives inside the output, so leave its own path out
    let mut echo = c.clone();
    echo.paths.output = None;
    echo_config(dir, &echo)?;
    log::info!("wrote {} samples to {}", samples.len(), dir.display());
    Ok(())
}

fn load_samples(dir: &Path, c: &RunConfig) -> CliResult<Vec<Sample>> {
    existing_dir(dir)?;
    let (manifest, samples) = read_dataset(dir)?;
    if manifest.geometry != c.geometry {
        return Err(Failure::Validation(format!(
            "dataset {} was simulated with a different geometry than the configuration",
            dir.display()
        )));
    }
    Ok(samples)
}

fn train_with<T: Real>(c: &RunConfig) -> CliResult<()> {
    let data = required(c.paths.dataset.clone(), "training dataset (--data)")?;
    let out = required(c.paths.checkpoint_dir.clone(), "checkpoint directory (--out)")?;
    let train_set: Vec<TrainSample> = load_samples(&data, c)?.iter().map(Into::into).collect();
    let val_set: Vec<TrainSample> = match &c.paths.validation {
        Some(v) => load_samples(v, c)?.iter().map(Into::into).collect(),
        None => Vec::new(),
    };
    echo_config(&out, c)?;
    let a = SystemMatrix::build(&c.geometry)?;
    let mut model = Model::<T>::new(c.resolved_model())?;
    let report = train(&mut model, &a, &train_set, &val_set, &c.train_config(), Some(&out))?;
    std::fs::write(out.join("train_log.csv"), report.to_csv())?;
    if let Some(b) = &report.calibrated_betas {
        log::info!("calibrated constant weights per stage: {b:?}");
    }
    Ok(())
}

fn reconstruct_with<T: Real>(c: &RunConfig, checkpoint: &Path) -> CliResult<()> {
    let data = required(c.paths.dataset.clone(), "dataset (--data)")?;
    let out = required(c.paths.output.clone(), "output directory (--out)")?;
    let samples = load_samples(&data, c)?;
    let mut model = Model::<T>::new(c.resolved_model())?;
    model.load_tensors(&read_checkpoint(checkpoint)?)?;
    let a = SystemMatrix::build(&c.geometry)?;
    echo_config(&out, c)?;
    for chunk in samples.chunks(c.train.batch_size) {
        let ys: Vec<&Sinogram> = chunk.iter().map(|s| &s.sinogram).collect();
        for (x, s) in model.reconstruct(&a, &ys)?.iter().zip(chunk) {
            write_image(&out.join(format!("{}_recon.f32r", s.id)), x)?;
        }
    }
    log::info!("wrote {} reconstructions to {}", samples.len(), out.display());
    Ok(())
}

fn format_metric(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf" } else { "-inf" }.to_string()
    } else {
        format!("{v:.6}")
    }
}

fn eval(data: &Path, recon: &Path, suffix: &str, out: Option<&Path>) -> CliResult<()> {
    existing_dir(data)?;
    existing_dir(recon)?;
    let (_, samples) = read_dataset(data)?;
    let mut csv = String::from("id,dose,psnr,rmse,ssim\n");
    let (mut p, mut r, mut s) = (Vec::new(), Vec::new(), Vec::new());
    for sample in &samples {
        let path = recon.join(format!("{}_{suffix}.f32r", sample.id));
        let x = read_image(&path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
        let m = evaluate(&sample.phantom, &x)?;
        writeln!(
            csv,
            "{},{},{},{},{}",
            sample.id,
            sample.dose,
            format_metric(m.psnr),
            format_metric(m.rmse),
            format_metric(m.ssim)
        )
        .expect("string write");
        p.push(m.psnr);
        r.push(m.rmse);
        s.push(m.ssim);
    }
    let stats = [mean_std(&p), mean_std(&r), mean_std(&s)];
    let row = |f: fn((f64, f64)) -> f64| stats.iter().map(|&v| format_metric(f(v))).collect::<Vec<_>>().join(",");
    writeln!(csv, "mean,,{}", row(|v| v.0)).expect("string write");
    writeln!(csv, "std,,{}", row(|v| v.1)).expect("string write");
    match out {
        Some(path) => std::fs::write(path, &csv)?,
        None => print!("{csv}"),
    }
    eprintln!(
        "psnr {} ± {} dB, ssim {} ± {} over {} images",
        format_metric(stats[0].0),
        format_metric(stats[0].1),
        format_metric(stats[2].0),
        format_metric(stats[2].1),
        samples.len()
    );
    Ok(())
}

fn baseline(
    method: Method,
    data: &Path,
    out: &Path,
    apod: Apodization,
    lambda: Option<f64>,
    mu: f64,
    iters: usize,
) -> CliResult<()> {
    existing_dir(data)?;
    let (manifest, samples) = read_dataset(data)?;
    std::fs::create_dir_all(out)?;
    let a = match method {
        Method::Tv => Some(SystemMatrix::build(&manifest.geometry)?),
        Method::Fbp => None,
    };
    for s in &samples {
        let x = match &a {
            None => fbp_reconstruct(&manifest.geometry, &s.sinogram, apod)?,
            Some(a) => {
                let mut settings = TvSettings::for_dose(s.dose);
                settings.mu = mu;
                settings.iters = iters;
                if let Some(l) = lambda {
                    settings.lambda = l;
                }
                tv_reconstruct(a, &s.sinogram, &settings)?.image
            }
        };
        write_image(&out.join(format!("{}_recon.f32r", s.id)), &x)?;
    }
    log::info!("wrote {} reconstructions to {}", samples.len(), out.display());
    Ok(())
}

/// Maps attenuation to 8-bit gray through `HU = 1000 (mu - mu_w) / mu_w`.
fn window_to_gray(img: &Image, hu_min: f64, hu_max: f64) -> Vec<u8> {
    img.data
        .iter()
        .map(|&mu| {
            let hu = 1000.0 * (mu - MU_WATER) / MU_WATER;
            let t = ((hu - hu_min) / (hu_max - hu_min)).clamp(0.0, 1.0);
            (t * 255.0).round() as u8
        })
        .collect()
}

fn export_png(input: &Path, output: &Path, hu_min: f64, hu_max: f64) -> CliResult<()> {
    if !(hu_max > hu_min) {
        return Err(Failure::Usage(format!("empty HU window [{hu_min}, {hu_max}]")));
    }
    let img = read_image(input).map_err(|e| Failure::Usage(format!("{}: {e}", input.display())))?;
    let file = File::create(output)?;
    let mut enc = png::Encoder::new(BufWriter::new(file), img.cols as u32, img.rows as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| Failure::Usage(e.to_string()))?;
    writer
        .write_image_data(&window_to_gray(&img, hu_min, hu_max))
        .map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(())
}
