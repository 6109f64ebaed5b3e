//! Command-line interface: `train`, `eval`, `variance-sim` and `grad-check`.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure or divergence,
//! 3 I/O failure. Everything is single-threaded, so runs are bit-reproducible
//! under fixed flags.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::autodiff::NormGrad;
use crate::data::{default_mnist_dir, load_cifar10, load_mnist, Dataset, Split, MNIST_MEAN, MNIST_STD};
use crate::error::{Error, Result};
use crate::gradcheck::{all_checks, GradCheckConfig};
use crate::mixer::{ForwardOptions, InputShape, MixerConfig, MixerParams, NormPlacement, Preset};
use crate::perturb::Sharing;
use crate::trainer::{evaluate, prepare, train, Algo, Schedule, Timing, TrainConfig, METRICS_HEADER};
use crate::variance_lab::{sweep, write_csv, SweepAxis, SweepConfig, CSV_HEADER};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_IO: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "fwdgrad", version, about = "Forward-gradient training of LocalMixer networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model and write metrics.csv plus final.ckpt to --out.
    Train(TrainArgs),
    /// Report the test error of a checkpoint.
    Eval(EvalArgs),
    /// Measure gradient-estimator variances against closed-form predictions.
    VarianceSim(VarianceArgs),
    /// Check the differentiation engine and fused loss against oracles.
    GradCheck(GradCheckArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DatasetKind {
    Mnist,
    Cifar10,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TimingArg {
    /// Wall-clock seconds since the start of training.
    Wall,
    /// Always 0, so metrics files are byte-identical across runs.
    Off,
}

#[derive(Args, Debug)]
pub struct DataArgs {
    /// Dataset.
    #[arg(long, value_enum, default_value = "mnist")]
    pub dataset: DatasetKind,
    /// Directory with the raw dataset files [default: $MNIST_DIR, then data/mnist].
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Normalization placement inside blocks: both, before, after or begin-block.
    #[arg(long, default_value = "both")]
    pub norm_placement: NormPlacement,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Architecture preset: s1-1, m1-16 or m8-16 (l8-64 and l32-64 also parse).
    #[arg(long, default_value = "s1-1")]
    pub model: Preset,
    /// Algorithm: bp, lg-bp, fg-w, fg-a, lg-fg-w or lg-fg-a.
    #[arg(long, default_value = "lg-fg-a")]
    pub algo: Algo,
    #[arg(long, default_value_t = 1000)]
    pub epochs: usize,
    #[arg(long, default_value_t = 128)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    /// Learning-rate schedule: linear or cosine.
    #[arg(long, default_value = "linear")]
    pub schedule: Schedule,
    /// Warm-up steps of the cosine schedule.
    #[arg(long, default_value_t = 0)]
    pub warmup_steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long, default_value = "runs/latest")]
    pub out: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Activity perturbation sharing across the batch: independent or shared.
    #[arg(long, default_value = "independent")]
    pub sharing: Sharing,
    /// Do not zero perturbations of units whose ReLU is inactive.
    #[arg(long)]
    pub no_relu_mask: bool,
    /// Normalization gradient: exact or no-grad.
    #[arg(long, default_value = "exact")]
    pub norm_grad: NormGrad,
    /// Perturbation samples averaged per step (experimental).
    #[arg(long, default_value_t = 1)]
    pub samples: usize,
    /// Save a checkpoint every K epochs (0 disables).
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: usize,
    /// Train on the first K training examples only (0 uses all).
    #[arg(long, default_value_t = 0)]
    pub train_limit: usize,
    /// Evaluate on the first K test examples only (0 uses all).
    #[arg(long, default_value_t = 0)]
    pub test_limit: usize,
    /// Content of the seconds column.
    #[arg(long, value_enum, default_value = "wall")]
    pub timing: TimingArg,
    /// Only print the final summary.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Split to evaluate: test or train.
    #[arg(long, default_value = "test")]
    pub split: String,
}

#[derive(Args, Debug)]
pub struct VarianceArgs {
    /// Swept quantity: N (batch size), p (fan-in) or q (fan-out).
    #[arg(long, default_value = "N")]
    pub axis: SweepAxis,
    /// Largest swept value; powers of two from 1 [default: 4096 for N, 256 for p and q].
    #[arg(long)]
    pub max: Option<usize>,
    /// Minimum Monte-Carlo trials per point.
    #[arg(long, default_value_t = 5000)]
    pub trials: usize,
    /// Extra trials for cheap points: each gets at least budget / (N·p·q).
    #[arg(long, default_value_t = 16_000_000)]
    pub work_budget: usize,
    /// Samples for the V and S oracles.
    #[arg(long, default_value_t = 200_000)]
    pub oracle_samples: usize,
    /// Batch size of the p and q sweeps.
    #[arg(long, default_value_t = 4)]
    pub batch: usize,
    /// Relative tolerance against the closed form.
    #[arg(long, default_value_t = 0.15)]
    pub tolerance: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// CSV output path.
    #[arg(long, default_value = "variance.csv")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct GradCheckArgs {
    /// Random cases per check.
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Run the fused-loss comparison in double precision with tighter tolerances.
    #[arg(long)]
    pub double: bool,
    /// Corrupt engine tangents so that the checks must fail.
    #[arg(long, hide = true)]
    pub inject_fault: bool,
}

/// Exit code for a library error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        Error::Io { .. } | Error::BadMagic { .. } | Error::Format { .. } => EXIT_IO,
        _ => EXIT_RUNTIME,
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() { err.write_all(text.as_bytes()) } else { out.write_all(text.as_bytes()) };
            return code;
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(&a, out, err),
        Command::Eval(a) => cmd_eval(&a, out),
        Command::VarianceSim(a) => cmd_variance_sim(&a, out, err),
        Command::GradCheck(a) => cmd_grad_check(&a, out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn input_shape(kind: DatasetKind) -> InputShape {
    match kind {
        DatasetKind::Mnist => InputShape::MNIST,
        DatasetKind::Cifar10 => InputShape::CIFAR10,
    }
}

fn load(args: &DataArgs, split: Split) -> Result<Dataset> {
    match args.dataset {
        DatasetKind::Mnist => {
            let dir = match &args.data_dir {
                Some(d) => d.clone(),
                None => default_mnist_dir().ok_or_else(|| Error::Io {
                    path: PathBuf::from("data/mnist"),
                    source: std::io::Error::new(std::io::ErrorKind::NotFound, "MNIST not found; pass --data-dir or set MNIST_DIR"),
                })?,
            };
            load_mnist(&dir, split)
        }
        DatasetKind::Cifar10 => load_cifar10(args.data_dir.as_deref().unwrap_or(Path::new("data/cifar10")), split),
    }
}

/// Pixel mean and standard deviation used for standardization.
fn pixel_norm(kind: DatasetKind, train: &Dataset) -> (f32, f32) {
    match kind {
        DatasetKind::Mnist => (MNIST_MEAN, MNIST_STD),
        DatasetKind::Cifar10 => {
            let (m, s) = train.pixel_stats();
            (m as f32, s as f32)
        }
    }
}

fn limit(d: Dataset, k: usize) -> Dataset {
    if k == 0 || k >= d.len() {
        d
    } else {
        d.subset(&(0..k).collect::<Vec<_>>())
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

fn cmd_train(a: &TrainArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    let train_d = limit(load(&a.data, Split::Train)?, a.train_limit);
    let test_d = limit(load(&a.data, Split::Test)?, a.test_limit);
    let (pixel_mean, pixel_std) = pixel_norm(a.data.dataset, &train_d);
    let cfg = TrainConfig {
        algo: a.algo,
        preset: a.model,
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr: a.lr,
        momentum: a.momentum,
        schedule: a.schedule,
        warmup_steps: a.warmup_steps,
        seed: a.seed,
        sharing: a.sharing,
        relu_masking: !a.no_relu_mask,
        placement: a.data.norm_placement,
        norm_grad: a.norm_grad,
        samples: a.samples,
        pixel_mean,
        pixel_std,
        checkpoint_every: a.checkpoint_every,
        checkpoint_dir: Some(a.out.clone()),
    };
    cfg.validate()?;
    std::fs::create_dir_all(&a.out).map_err(io_err(&a.out))?;
    let csv_path = a.out.join("metrics.csv");
    let mut csv = BufWriter::new(File::create(&csv_path).map_err(io_err(&csv_path))?);
    writeln!(csv, "{METRICS_HEADER}").map_err(io_err(&csv_path))?;
    let timing = match a.timing {
        TimingArg::Wall => Timing::Wall,
        TimingArg::Off => Timing::Off,
    };
    let mut write_err = None;
    let outcome = train(&cfg, &train_d, &test_d, input_shape(a.data.dataset), timing, |r| {
        if let Err(e) = writeln!(csv, "{}", r.csv_row()).and_then(|_| csv.flush()) {
            write_err.get_or_insert(e);
        }
        if !a.quiet {
            let _ = writeln!(
                err,
                "epoch {:>4}  train {:6.2}%  test {:6.2}%  loss {:.4}  lr {:.2e}  {:.0}s",
                r.epoch, r.train_err, r.test_err, r.loss, r.lr, r.seconds
            );
        }
    });
    if let Some(e) = write_err {
        return Err(Error::io(&csv_path, e));
    }
    let outcome = outcome?;
    let ckpt = a.out.join("final.ckpt");
    outcome.params.save(&ckpt)?;
    writeln!(
        out,
        "{} {} final test error {:.2}% train error {:.2}%",
        a.model, a.algo, outcome.final_test_err, outcome.final_train_err
    )
    .map_err(io_err(Path::new("<stdout>")))?;
    Ok(EXIT_OK)
}

fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> Result<i32> {
    let split = match a.split.as_str() {
        "test" => Split::Test,
        "train" => Split::Train,
        s => return Err(Error::Config(format!("unknown split {s:?} (test | train)"))),
    };
    let params = MixerParams::<f32>::load(&a.checkpoint)?;
    let train_d = load(&a.data, Split::Train)?;
    let data = if split == Split::Train { train_d.clone() } else { load(&a.data, split)? };
    let (mean, std) = pixel_norm(a.data.dataset, &train_d);
    let prepared = prepare(&data, &params.config, mean, std)?;
    let check: &MixerConfig = &params.config;
    check.validate()?;
    let opts = ForwardOptions { placement: a.data.norm_placement, ..Default::default() };
    let e = evaluate(&params, &prepared, opts)?;
    writeln!(out, "{} error {e:.2}% on {} examples", a.split, data.len()).map_err(io_err(Path::new("<stdout>")))?;
    Ok(EXIT_OK)
}

fn cmd_variance_sim(a: &VarianceArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    if a.trials < 1000 {
        let _ = writeln!(err, "warning: fewer than 1000 trials per point; the statistical tolerance is unreliable");
    }
    let mut cfg = SweepConfig::new(a.axis);
    if let Some(m) = a.max {
        cfg.max = m;
    }
    cfg.trials = a.trials;
    cfg.work_budget = a.work_budget;
    cfg.oracle_samples = a.oracle_samples;
    cfg.batch = a.batch;
    cfg.seed = a.seed;
    let rows = sweep(&cfg);
    write_csv(&a.out, &rows)?;
    let o = |e: std::io::Error| Error::io(Path::new("<stdout>"), e);
    writeln!(out, "{CSV_HEADER}").map_err(o)?;
    for r in &rows {
        writeln!(out, "{}", r.csv_row()).map_err(o)?;
    }
    let worst = rows.iter().map(|r| r.rel_err).fold(0.0, f64::max);
    let pass = rows.iter().all(|r| r.rel_err <= a.tolerance);
    writeln!(out, "max relative error {worst:.4} (tolerance {}): {}", a.tolerance, if pass { "PASS" } else { "FAIL" }).map_err(o)?;
    Ok(if pass { EXIT_OK } else { EXIT_RUNTIME })
}

fn cmd_grad_check(a: &GradCheckArgs, out: &mut dyn Write) -> Result<i32> {
    let cfg = GradCheckConfig { trials: a.trials, seed: a.seed, double: a.double, inject_fault: a.inject_fault };
    let results = all_checks(&cfg)?;
    let o = |e: std::io::Error| Error::io(Path::new("<stdout>"), e);
    let mut failed = 0;
    for r in &results {
        let ok = r.passed();
        failed += usize::from(!ok);
        writeln!(out, "{:<4} {:<40} cases {:>4}  max err {:.3e}  tol {:.0e}", if ok { "ok" } else { "FAIL" }, r.name, r.cases, r.max_err, r.tol).map_err(o)?;
    }
    writeln!(out, "{} checks, {failed} failed", results.len()).map_err(o)?;
    Ok(if failed == 0 { EXIT_OK } else { EXIT_RUNTIME })
}
