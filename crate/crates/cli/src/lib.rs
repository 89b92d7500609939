//! The `ndpp` command line: verification suites, training runs, kernel
//! export and the whitening benchmark.

pub mod bench;
pub mod kernel;
pub mod verify;

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ndpp_core::matfun::BlockPolicy;
use ndpp_core::models::data::DatasetSpec;
use ndpp_core::models::net::{build, ModelKind, NdppOptions};
use ndpp_core::models::sgd::{Schedule, SgdConfig};
use ndpp_core::models::train::{evaluate, train, TrainConfig};
use ndpp_core::ndpp::{save_layers, InverseSqrtMethod, NdppLayerConfig, ScaleMode};
use ndpp_core::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Parser)]
#[command(name = "ndpp", version, about = "Decorrelating feature transforms: checks, training and benchmarks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the verification suites and print one PASS/FAIL line per suite.
    Verify(VerifyArgs),
    /// Train a model and write the metrics CSV.
    Train(TrainArgs),
    /// Print the spatial deconvolution kernel of an image as a CSV grid.
    Kernel(KernelArgs),
    /// Time the whitening stages against a plain convolution.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Run only these suites (repeatable).
    #[arg(long = "suite")]
    pub suites: Vec<String>,
    /// Regularization for the Newton whitening suite.
    #[arg(long, allow_negative_numbers = true)]
    pub epsilon: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScheduleArg {
    Constant,
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum IsqrtArg {
    Newton,
    Eigen,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// ndpp-mlp, ndpp-cnn, bn-mlp, bn-cnn, plain-mlp, plain-cnn or linear.
    #[arg(long, default_value = "ndpp-mlp")]
    pub model: String,
    /// blobs, ar1 or idx:<images>[,<labels>].
    #[arg(long, default_value = "blobs")]
    pub dataset: String,
    #[arg(long, default_value_t = 0.1, allow_negative_numbers = true)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub momentum: f64,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub weight_decay: f64,
    #[arg(long, value_enum, default_value_t = ScheduleArg::Constant)]
    pub schedule: ScheduleArg,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    /// Simulated workers sharing the covariance statistics of each batch.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    /// none, musigma or l1.
    #[arg(long, default_value = "none")]
    pub scale_mode: String,
    /// default, full or a column count.
    #[arg(long, default_value = "default")]
    pub block_size: String,
    #[arg(long, default_value_t = 3)]
    pub subsample: usize,
    #[arg(long, default_value_t = 1e-5, allow_negative_numbers = true)]
    pub epsilon: f64,
    #[arg(long, value_enum, default_value_t = IsqrtArg::Newton)]
    pub isqrt: IsqrtArg,
    #[arg(long, default_value_t = 5)]
    pub newton_iterations: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 10)]
    pub log_every: usize,
    /// Metrics CSV destination; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write the trained deconvolution layers in the binary layer format.
    #[arg(long)]
    pub save_layers: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SourceArg {
    Ar1,
    White,
    File,
}

#[derive(Debug, Args)]
pub struct KernelArgs {
    #[arg(long, value_enum, default_value_t = SourceArg::Ar1)]
    pub source: SourceArg,
    /// Correlation of the AR(1) source.
    #[arg(long, default_value_t = 0.9, allow_negative_numbers = true)]
    pub rho: f64,
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Image read by `--source file`.
    #[arg(long)]
    pub path: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    #[arg(long, default_value_t = 64)]
    pub block: usize,
    #[arg(long, default_value_t = 3)]
    pub subsample: usize,
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn parse_block_size(s: &str) -> Result<BlockPolicy> {
    match s {
        "default" => Ok(BlockPolicy::Default),
        "full" => Ok(BlockPolicy::Full),
        n => match n.parse::<usize>() {
            Ok(b) if b > 0 => Ok(BlockPolicy::Fixed(b)),
            _ => Err(Error::Config(format!("block size must be default, full or a positive integer, got {n:?}"))),
        },
    }
}

fn block_name(p: BlockPolicy) -> String {
    match p {
        BlockPolicy::Default => "default".into(),
        BlockPolicy::Full => "full".into(),
        BlockPolicy::Fixed(b) => b.to_string(),
    }
}

/// Fully resolved `train` configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub model: ModelKind,
    pub dataset: DatasetSpec,
    pub ndpp: NdppOptions,
    pub train: TrainConfig,
    pub out: Option<PathBuf>,
    pub save_layers: Option<PathBuf>,
}

impl RunConfig {
    pub fn resolve(a: &TrainArgs) -> Result<Self> {
        let ndpp = NdppOptions {
            scale_mode: ScaleMode::from_str(&a.scale_mode)?,
            block_size: parse_block_size(&a.block_size)?,
            subsample: a.subsample,
            epsilon: a.epsilon,
            isqrt_method: match a.isqrt {
                IsqrtArg::Newton => InverseSqrtMethod::Newton,
                IsqrtArg::Eigen => InverseSqrtMethod::Eigen,
            },
            newton_iterations: a.newton_iterations,
            workers: a.workers,
            ..NdppOptions::default()
        };
        let mut probe = NdppLayerConfig::fully_connected(1, 1);
        probe.subsample = ndpp.subsample;
        probe.epsilon = ndpp.epsilon;
        probe.workers = ndpp.workers;
        probe.validate()?;
        if ndpp.newton_iterations == 0 {
            return Err(Error::Config("at least one Newton iteration is required".into()));
        }
        let schedule = match a.schedule {
            ScheduleArg::Constant => Schedule::Constant,
            ScheduleArg::Cosine => Schedule::Cosine { total_steps: 0 },
        };
        let train = TrainConfig {
            epochs: a.epochs,
            batch_size: a.batch_size,
            sgd: SgdConfig { lr: a.lr, momentum: a.momentum, weight_decay: a.weight_decay, schedule },
            seed: a.seed,
            workers: a.workers,
            log_every: a.log_every,
        };
        train.validate()?;
        Ok(RunConfig {
            model: ModelKind::from_str(&a.model)?,
            dataset: DatasetSpec::from_str(&a.dataset)?,
            ndpp,
            train,
            out: a.out.clone(),
            save_layers: a.save_layers.clone(),
        })
    }

    /// `# key=value` lines describing every resolved setting.
    pub fn echo(&self, w: &mut impl Write) -> io::Result<()> {
        let t = &self.train;
        let n = &self.ndpp;
        let schedule = match t.sgd.schedule {
            Schedule::Constant => "constant",
            Schedule::Cosine { .. } => "cosine",
        };
        let isqrt = match n.isqrt_method {
            InverseSqrtMethod::Newton => "newton",
            InverseSqrtMethod::Eigen => "eigen",
        };
        writeln!(w, "# command=train model={} dataset={} seed={}", self.model.name(), self.dataset.name(), t.seed)?;
        writeln!(
            w,
            "# lr={} momentum={} weight_decay={} schedule={schedule} epochs={} batch_size={} workers={} log_every={}",
            t.sgd.lr, t.sgd.momentum, t.sgd.weight_decay, t.epochs, t.batch_size, t.workers, t.log_every
        )?;
        writeln!(
            w,
            "# scale_mode={} block_size={} subsample={} epsilon={} isqrt={isqrt} newton_iterations={} running_momentum={}",
            n.scale_mode.name(),
            block_name(n.block_size),
            n.subsample,
            n.epsilon,
            n.newton_iterations,
            n.running_momentum
        )?;
        let path = |p: &Option<PathBuf>| p.as_ref().map_or("-".to_string(), |p| p.display().to_string());
        writeln!(w, "# out={} save_layers={}", path(&self.out), path(&self.save_layers))
    }
}

/// Exit status for an error: 2 for configuration problems, 1 otherwise.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        _ => 1,
    }
}

pub fn cmd_verify(a: &VerifyArgs, out: &mut impl Write) -> Result<bool> {
    if let Some(eps) = a.epsilon {
        if !(eps >= 0.0) || !eps.is_finite() {
            return Err(Error::Config(format!("epsilon must be a finite non-negative number, got {eps}")));
        }
    }
    let names: Vec<&str> = if a.suites.is_empty() { verify::SUITES.to_vec() } else { a.suites.iter().map(String::as_str).collect() };
    for n in &names {
        if !verify::SUITES.contains(n) {
            return Err(Error::Config(format!("unknown suite {n:?}; expected one of {:?}", verify::SUITES)));
        }
    }
    let eps = a.epsilon.map_or("default".to_string(), |e| e.to_string());
    writeln!(out, "# command=verify suites={} epsilon={eps}", names.join(","))?;
    let opts = verify::VerifyOptions { epsilon: a.epsilon };
    let mut all = true;
    for n in names {
        let r = verify::run_suite(n, &opts)?;
        all &= r.passed;
        writeln!(out, "{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail)?;
        out.flush()?;
    }
    Ok(all)
}

pub fn cmd_train(a: &TrainArgs, out: &mut impl Write) -> Result<()> {
    let cfg = RunConfig::resolve(a)?;
    cfg.echo(out)?;
    let data = cfg.dataset.load(cfg.train.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let mut model = build(cfg.model, data.sample_shape(), data.classes, &cfg.ndpp, &mut rng)?;
    let log = match train(&mut model, &data, &cfg.train) {
        Ok(log) => log,
        Err(Error::Diverged(report)) => {
            writeln!(out, "# diverged step={} loss={}", report.step, report.loss)?;
            return Err(Error::Diverged(report));
        }
        Err(e) => return Err(e),
    };
    match &cfg.out {
        Some(p) => {
            let mut f = BufWriter::new(File::create(p)?);
            log.write_csv(&mut f)?;
            f.flush()?;
        }
        None => log.write_csv(out)?,
    }
    if log.batch_losses.is_empty() {
        writeln!(out, "# final steps=0")?;
    } else {
        let train_acc = evaluate(&mut model, &data.x_train, &data.y_train)?;
        let eval_acc = evaluate(&mut model, &data.x_eval, &data.y_eval)?;
        writeln!(out, "# final train_acc={train_acc:.6} eval_acc={eval_acc:.6} steps={}", log.batch_losses.len())?;
    }
    if let Some(p) = &cfg.save_layers {
        let layers: Vec<_> = model.ndpp_layers_mut().map(|l| &*l).collect();
        let mut f = BufWriter::new(File::create(p)?);
        save_layers(&layers, &mut f)?;
        f.flush()?;
        writeln!(out, "# saved {} layers to {}", layers.len(), p.display())?;
    }
    Ok(())
}

pub fn cmd_kernel(a: &KernelArgs, out: &mut impl Write) -> Result<()> {
    if a.size == 0 {
        return Err(Error::Config("size must be at least 1".into()));
    }
    let img = match a.source {
        SourceArg::Ar1 => {
            if !(a.rho.abs() < 1.0) {
                return Err(Error::Config(format!("rho must lie in (-1, 1), got {}", a.rho)));
            }
            writeln!(out, "# command=kernel source=ar1 rho={} size={} seed={}", a.rho, a.size, a.seed)?;
            kernel::synthetic_ar1(a.size, a.rho, a.seed)
        }
        SourceArg::White => {
            writeln!(out, "# command=kernel source=white size={} seed={}", a.size, a.seed)?;
            kernel::synthetic_white(a.size, a.seed)?
        }
        SourceArg::File => {
            let p = a.path.as_ref().ok_or_else(|| Error::Config("--source file needs --path".into()))?;
            let img = kernel::load_image(p, a.size)?;
            writeln!(out, "# command=kernel source=file path={} size={}", p.display(), a.size)?;
            img
        }
    };
    kernel::write_kernel(&img, out)?;
    Ok(())
}

pub fn cmd_bench(a: &BenchArgs, out: &mut impl Write) -> Result<()> {
    if a.batch == 0 || a.block == 0 || a.subsample == 0 || a.repeats == 0 {
        return Err(Error::Config("batch, block, subsample and repeats must be at least 1".into()));
    }
    let cfg = bench::BenchConfig {
        batch: a.batch,
        block: a.block,
        subsample: a.subsample,
        repeats: a.repeats,
        seed: a.seed,
        ..Default::default()
    };
    writeln!(
        out,
        "# command=bench batch={} block={} subsample={} newton_iterations={} repeats={} seed={} unit=ms",
        cfg.batch, cfg.block, cfg.subsample, cfg.newton_iterations, cfg.repeats, cfg.seed
    )?;
    let rows = bench::run_ladder(&cfg)?;
    bench::write_csv(&rows, out)?;
    let (c1, c2) = bench::cov_scaling(8192, cfg.block, cfg.repeats)?;
    writeln!(out, "# cov N={}→{} B={}: {:.4}ms → {:.4}ms ratio {:.2}", 8192, 16384, cfg.block, c1 * 1e3, c2 * 1e3, c2 / c1)?;
    let (i1, i2) = bench::isqrt_scaling(cfg.block, cfg.newton_iterations, cfg.repeats)?;
    writeln!(out, "# isqrt B={}→{}: {:.4}ms → {:.4}ms ratio {:.2}", cfg.block, 2 * cfg.block, i1 * 1e3, i2 * 1e3, i2 / i1)?;
    let last = rows.last().expect("ladder is non-empty");
    writeln!(
        out,
        "# largest shape: whitening {:.4}ms vs conv {:.4}ms",
        last.whitening_total() * 1e3,
        last.t_conv * 1e3
    )?;
    Ok(())
}

/// Runs a parsed command against stdout and maps the outcome to an exit code.
pub fn run(cli: Cli) -> ExitCode {
    let stdout = io::stdout();
    let mut out = stdout.lock();
    let result = match &cli.command {
        Command::Verify(a) => cmd_verify(a, &mut out).map(|ok| if ok { 0 } else { 1 }),
        Command::Train(a) => cmd_train(a, &mut out).map(|_| 0),
        Command::Kernel(a) => cmd_kernel(a, &mut out).map(|_| 0),
        Command::Bench(a) => cmd_bench(a, &mut out).map(|_| 0),
    };
    let _ = out.flush();
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
