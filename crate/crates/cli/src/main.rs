use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand};

use l12refit::experiments::{
    self, load_png, load_source, metrics_csv, reconstruct, run_experiment_observed, save_png,
    ExperimentConfig, ImageSource, RefitMode, Task, RNG_ALGORITHM,
};
use l12refit::penalties::oracle::{check_penalty, OracleBudget};
use l12refit::solvers::{DiagnosticsLog, PrimalDualParams, LAMBDA_PER_NOISE_STD};
use l12refit::{BlockPenalty, Error, ForwardOperator, Kernel, PenaltyTag};

const PROX_CHECK_TOL: f64 = 1e-5;

#[derive(Parser)]
#[command(name = "l12refit", version, about = "Block-sparse refitting for l12 analysis regularization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Denoise a clean image degraded with Gaussian noise.
    Denoise(DenoiseArgs),
    /// Deblur a clean image degraded with a directional blur and noise.
    Deblur(DeblurArgs),
    /// Reconstruct an already degraded image.
    Refit(RefitArgs),
    /// Compare closed-form conjugate proxes against a numerical oracle.
    ProxCheck(ProxCheckArgs),
    /// Print version, generator and defaults.
    Info,
}

#[derive(Args)]
#[group(id = "source", multiple = false)]
struct SourceArgs {
    /// Clean 8-bit PNG image.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Generate a synthetic piecewise-constant image of size HxW.
    #[arg(long, value_name = "HxW", value_parser = parse_synthetic)]
    synthetic: Option<(usize, usize)>,
}

#[derive(Args)]
struct SolverArgs {
    #[arg(long, default_value_t = LAMBDA_PER_NOISE_STD)]
    lambda_factor: f64,
    #[arg(long, default_value = "sd", value_parser = parse_penalty)]
    penalty: PenaltyTag,
    #[arg(long, default_value_t = 1000)]
    iters: usize,
    #[arg(long, default_value_t = 0.25)]
    tau: f64,
    #[arg(long, default_value_t = 1.0 / 6.0)]
    sigma: f64,
    #[arg(long, default_value_t = 1.0)]
    theta: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "joint", value_parser = parse_mode)]
    mode: RefitMode,
}

#[derive(Args)]
struct OutputArgs {
    /// Output directory, created if absent.
    #[arg(long)]
    out: PathBuf,
    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
    /// Also write per-iteration diagnostics.csv.
    #[arg(long)]
    diagnostics: bool,
}

const EXPERIMENT_FLAGS: [&str; 11] = [
    "input",
    "synthetic",
    "noise_std",
    "lambda_factor",
    "penalty",
    "iters",
    "tau",
    "sigma",
    "theta",
    "seed",
    "mode",
];

#[derive(Args)]
struct DenoiseArgs {
    #[command(flatten)]
    source: SourceArgs,
    #[arg(long, required_unless_present = "config")]
    noise_std: Option<f64>,
    #[command(flatten)]
    solver: SolverArgs,
    /// Re-run from a config.txt written by a previous run.
    #[arg(long, conflicts_with_all = EXPERIMENT_FLAGS)]
    config: Option<PathBuf>,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args)]
struct DeblurArgs {
    #[command(flatten)]
    source: SourceArgs,
    #[arg(long, default_value_t = 2.0)]
    noise_std: f64,
    #[command(flatten)]
    solver: SolverArgs,
    #[arg(long, default_value_t = 9, value_parser = parse_positive)]
    blur_len: usize,
    /// Blur direction in degrees.
    #[arg(long, default_value_t = 45.0, value_parser = parse_finite)]
    blur_angle: f64,
    #[arg(long, conflicts_with_all = EXPERIMENT_FLAGS, conflicts_with_all = ["blur_len", "blur_angle"])]
    config: Option<PathBuf>,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args)]
struct RefitArgs {
    /// Degraded 8-bit PNG image.
    #[arg(long)]
    input: PathBuf,
    /// Regularization weight.
    #[arg(long, required_unless_present = "noise_std", conflicts_with = "noise_std")]
    lambda: Option<f64>,
    /// Noise level; sets lambda to lambda-factor times this.
    #[arg(long)]
    noise_std: Option<f64>,
    #[command(flatten)]
    solver: SolverArgs,
    /// Length of the directional blur; omit for denoising.
    #[arg(long, value_parser = parse_positive)]
    blur_len: Option<usize>,
    #[arg(long, default_value_t = 45.0, value_parser = parse_finite, requires = "blur_len")]
    blur_angle: f64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct ProxCheckArgs {
    #[arg(long, value_parser = parse_penalty)]
    penalty: PenaltyTag,
    #[arg(long, default_value_t = 1000)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Block size.
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u8).range(1..=6))]
    b: u8,
}

fn parse_penalty(s: &str) -> Result<PenaltyTag, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_mode(s: &str) -> Result<RefitMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_synthetic(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = experiments::parse_dims(s).map_err(|e| e.to_string())?;
    if h < 16 || w < 16 {
        return Err(format!("synthetic image needs at least 16x16, got {h}x{w}"));
    }
    Ok((h, w))
}

fn parse_positive(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(v) if v > 0 => Ok(v),
        _ => Err(format!("expected a positive integer, got `{s}`")),
    }
}

fn parse_finite(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(format!("expected a finite number, got `{s}`")),
    }
}

/// Failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Io(_) | Error::UnsupportedFormat(_) => 3,
            _ => 4,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure {
        code: 3,
        message: format!("{}: {e}", path.display()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Denoise(args) => denoise(args),
        Command::Deblur(args) => deblur(args),
        Command::Refit(args) => refit(args),
        Command::ProxCheck(args) => prox_check(args),
        Command::Info => {
            info();
            Ok(())
        }
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn source_from(args: &SourceArgs) -> Result<ImageSource, Failure> {
    match (&args.input, args.synthetic) {
        (Some(path), None) => {
            let path = fs::canonicalize(path).map_err(|e| io_failure(path, e))?;
            Ok(ImageSource::Png(path))
        }
        (None, Some((height, width))) => Ok(ImageSource::Synthetic { height, width }),
        _ => Cli::command()
            .error(
                ErrorKind::MissingRequiredArgument,
                "one of --input or --synthetic is required",
            )
            .exit(),
    }
}

fn apply_solver(config: &mut ExperimentConfig, s: &SolverArgs) {
    config.lambda_factor = s.lambda_factor;
    config.mode = s.mode;
    config.iterations = s.iters;
    config.tau = s.tau;
    config.sigma = s.sigma;
    config.theta = s.theta;
}

fn read_config(path: &Path, task: Task) -> Result<ExperimentConfig, Failure> {
    let text = fs::read_to_string(path).map_err(|e| io_failure(path, e))?;
    let config = ExperimentConfig::from_text(&text).map_err(|e| Failure {
        code: 2,
        message: format!("{}: {e}", path.display()),
    })?;
    if config.task != task {
        return Err(Failure {
            code: 2,
            message: format!("{}: config is for `{}`", path.display(), config.task),
        });
    }
    Ok(config)
}

fn denoise(args: DenoiseArgs) -> Result<(), Failure> {
    let config = match &args.config {
        Some(path) => read_config(path, Task::Denoise)?,
        None => {
            let source = source_from(&args.source)?;
            let noise_std = args.noise_std.expect("required without --config");
            let mut config =
                ExperimentConfig::denoise(source, noise_std, args.solver.penalty, args.solver.seed);
            apply_solver(&mut config, &args.solver);
            config
        }
    };
    run(&config, &args.output)
}

fn deblur(args: DeblurArgs) -> Result<(), Failure> {
    let config = match &args.config {
        Some(path) => read_config(path, Task::Deblur)?,
        None => {
            let source = source_from(&args.source)?;
            let mut config =
                ExperimentConfig::deblur(source, args.noise_std, args.solver.penalty, args.solver.seed);
            apply_solver(&mut config, &args.solver);
            config.blur_length = args.blur_len;
            config.blur_angle = args.blur_angle;
            config
        }
    };
    run(&config, &args.output)
}

/// Creates `dir` and refuses to clobber any of `names` unless `force`.
fn prepare_output(dir: &Path, names: &[&str], force: bool) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))?;
    if !force {
        if let Some(existing) = names.iter().map(|n| dir.join(n)).find(|p| p.exists()) {
            return Err(Failure {
                code: 3,
                message: format!("{} exists (use --force to overwrite)", existing.display()),
            });
        }
    }
    Ok(())
}

fn write_file(path: &Path, contents: &str) -> Result<(), Failure> {
    fs::write(path, contents).map_err(|e| io_failure(path, e))
}

fn run(config: &ExperimentConfig, out: &OutputArgs) -> Result<(), Failure> {
    config.validate()?;
    let mut names = vec!["noisy.png", "biased.png", "refit.png", "metrics.csv", "config.txt"];
    if out.diagnostics {
        names.push("diagnostics.csv");
    }
    prepare_output(&out.out, &names, out.force)?;
    let clean = load_source(&config.source, config.seed)?;
    let mut log = DiagnosticsLog::new();
    let result = run_experiment_observed(config, &clean, &mut |info| log.record(info))?;
    let dir = &out.out;
    save_png(&dir.join("noisy.png"), &result.observed)?;
    save_png(&dir.join("biased.png"), &result.biased)?;
    save_png(&dir.join("refit.png"), &result.refit)?;
    write_file(&dir.join("metrics.csv"), &metrics_csv(config, &result.metrics))?;
    write_file(&dir.join("config.txt"), &config.to_text())?;
    if out.diagnostics {
        let path = dir.join("diagnostics.csv");
        let file = fs::File::create(&path).map_err(|e| io_failure(&path, e))?;
        log.write_csv(std::io::BufWriter::new(file))?;
    }
    let m = &result.metrics;
    println!(
        "psnr input {:.2} dB, biased {:.2} dB, refit {:.2} dB",
        m.psnr_input, m.psnr_biased, m.psnr_refit
    );
    Ok(())
}

fn refit(args: RefitArgs) -> Result<(), Failure> {
    let input = fs::canonicalize(&args.input).map_err(|e| io_failure(&args.input, e))?;
    let lambda = match (args.lambda, args.noise_std) {
        (Some(lambda), _) => lambda,
        (None, Some(std)) => args.solver.lambda_factor * std,
        (None, None) => unreachable!("clap requires one of them"),
    };
    prepare_output(&args.out, &["biased.png", "refit.png"], args.force)?;
    let y = load_png(&input)?;
    let phi = match args.blur_len {
        Some(len) => {
            ForwardOperator::convolution(Kernel::motion(len, args.blur_angle)?, y.height(), y.width())?
        }
        None => ForwardOperator::Identity,
    };
    let s = &args.solver;
    let params = PrimalDualParams {
        tau: s.tau,
        sigma: s.sigma,
        theta: s.theta,
        iterations: s.iters,
        lambda,
        tolerance: None,
    };
    let penalty = BlockPenalty::new(s.penalty, lambda)?;
    let (biased, refit) = reconstruct(&phi, &y, &params, &penalty, s.mode, &mut |_| {})?;
    save_png(&args.out.join("biased.png"), &biased)?;
    save_png(&args.out.join("refit.png"), &refit)?;
    println!("lambda {lambda}, wrote {}", args.out.display());
    Ok(())
}

fn prox_check(args: ProxCheckArgs) -> Result<(), Failure> {
    let report = check_penalty(
        args.penalty,
        args.b as usize,
        args.trials,
        args.seed,
        &OracleBudget::default(),
    )?;
    println!(
        "{} b={} instances={} conjugate={:.3e} moreau={:.3e} identity={:.3e} max={:.3e}",
        args.penalty,
        args.b,
        report.instances,
        report.max_conjugate_route_error,
        report.max_moreau_route_error,
        report.max_moreau_residual,
        report.max_error()
    );
    if report.max_error() <= PROX_CHECK_TOL {
        Ok(())
    } else {
        Err(Failure {
            code: 1,
            message: format!("max error {:.3e} exceeds {PROX_CHECK_TOL:e}", report.max_error()),
        })
    }
}

fn info() {
    let p = PrimalDualParams::new(1.0);
    println!("l12refit {}", env!("CARGO_PKG_VERSION"));
    println!("rng: {RNG_ALGORITHM}");
    let tags: Vec<&str> = PenaltyTag::ALL.iter().map(|t| t.as_str()).collect();
    println!("penalties: {}", tags.join(" "));
    println!(
        "defaults: lambda = {LAMBDA_PER_NOISE_STD} * noise_std, tau = {}, sigma = {}, theta = {}, iterations = {}",
        p.tau, p.sigma, p.theta, p.iterations
    );
    println!("deblur defaults: noise_std = 2, blur length 9 at 45 degrees");
}
