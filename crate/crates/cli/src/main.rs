use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use mulog_core::admm::{self, BetaSchedule, MulogOptions};
use mulog_core::container::{read_plane, write_plane, Container};
use mulog_core::denoise::{
    bounded_denoiser_audit, Denoiser, ExternalDenoiser, GaussianSmoothing, TvConfig, TvDenoiser,
    AUDIT_SIGMAS,
};
use mulog_core::experiments::{self, Fig4Config};
use mulog_core::fidelity::NewtonOptions;
use mulog_core::image::CovarianceImage;
use mulog_core::metrics;
use mulog_core::scenes::Scene;
use mulog_core::statistics::sample_wishart_image;

mod export;

const THREADS_ENV: &str = "MULOG_THREADS";

/// Speckle reduction for SAR intensity and covariance images.
#[derive(Debug, Parser)]
#[command(name = "mulog", version)]
struct Cli {
    /// Worker threads (default: $MULOG_THREADS, then all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Draw a speckled image from a built-in scene or a ground-truth file.
    Simulate(SimulateArgs),
    /// Restore a speckled image.
    Despeckle(DespeckleArgs),
    /// Compare an estimate with a reference (PSNR, SSIM).
    Evaluate(EvaluateArgs),
    /// Accuracy of the rectangle-rule Newton step versus matrix size.
    Fig4(Fig4Args),
    /// Empirical bounded-denoiser constants.
    Audit(AuditArgs),
    /// Write an 8-bit PGM preview.
    Export(ExportArgs),
    /// Denoise a single-plane file (usable as an external denoiser).
    #[command(hide = true)]
    DenoisePlane(DenoisePlaneArgs),
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Built-in scene name or path to a ground-truth container.
    #[arg(long)]
    gt: String,
    #[arg(long)]
    looks: f64,
    /// Number of channels for built-in scenes.
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 256)]
    width: usize,
    #[arg(long, default_value_t = 256)]
    height: usize,
    #[arg(long)]
    out: PathBuf,
    /// Where to write the ground truth (default: `<out stem>.truth.mulg`).
    #[arg(long)]
    truth_out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Method {
    Mulog,
    Midal,
    Homomorphic,
}

#[derive(Debug, Args)]
struct DenoiserArgs {
    /// `tv`, `gauss` or `ext:<command>` with `{in}`, `{sigma}`, `{out}` placeholders.
    #[arg(long, default_value = "tv")]
    denoiser: String,
    /// TV weight multiplier.
    #[arg(long, default_value_t = mulog_core::denoise::tv::DEFAULT_LAMBDA)]
    lambda: f64,
    /// Timeout in seconds for external denoisers.
    #[arg(long, default_value_t = 600)]
    timeout: u64,
    /// Allow concurrent calls to an external denoiser.
    #[arg(long)]
    concurrent: bool,
}

#[derive(Debug, Args)]
struct DespeckleArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, value_enum, default_value_t = Method::Mulog)]
    method: Method,
    #[command(flatten)]
    den: DenoiserArgs,
    /// Number of looks; overrides the file header.
    #[arg(long)]
    looks: Option<f64>,
    /// Outer iterations.
    #[arg(long, default_value_t = admm::DEFAULT_OUTER_ITERS)]
    iters: usize,
    /// Fidelity weight (default 1 + 2/L).
    #[arg(long)]
    beta: Option<f64>,
    /// Multiply beta by this factor after every iteration.
    #[arg(long)]
    beta_growth: Option<f64>,
    /// Rectangles in the Newton-step integral (0 = commuting surrogate).
    #[arg(long = "Q", default_value_t = mulog_core::fidelity::DEFAULT_Q)]
    q: usize,
    #[arg(long, default_value_t = mulog_core::fidelity::DEFAULT_INNER_ITERS)]
    inner_iters: usize,
    /// Start each inner solve from the previous estimate.
    #[arg(long)]
    warm_start: bool,
    #[arg(long)]
    out: PathBuf,
    /// Per-iteration diagnostics as JSON lines.
    #[arg(long)]
    diag: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    est: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
    /// JSON report destination.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct Fig4Args {
    #[arg(long, value_delimiter = ',', default_values_t = experiments::FIG4_DIMS)]
    dims: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = experiments::FIG4_QS)]
    qs: Vec<usize>,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = mulog_core::fidelity::DEFAULT_INNER_ITERS)]
    iters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Text table destination.
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSON lines destination.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AuditArgs {
    /// Denoisers to audit (default: every built-in one).
    #[arg(long = "denoiser")]
    denoisers: Vec<String>,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = mulog_core::denoise::tv::DEFAULT_LAMBDA)]
    lambda: f64,
    /// JSON lines destination.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ExportArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Values above this quantile of the amplitude are saturated.
    #[arg(long, default_value_t = 0.99)]
    saturation: f64,
    #[arg(long, default_value_t = 1.0)]
    gamma: f64,
}

#[derive(Debug, Args)]
struct DenoisePlaneArgs {
    input: PathBuf,
    sigma: f64,
    output: PathBuf,
    #[arg(long, default_value = "tv")]
    denoiser: String,
    #[arg(long, default_value_t = mulog_core::denoise::tv::DEFAULT_LAMBDA)]
    lambda: f64,
}

/// Bad arguments detected after parsing; reported with exit code 2.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(UsageError(msg.into()).into())
}

fn make_denoiser(
    spec: &str,
    lambda: f64,
    timeout: u64,
    concurrent: bool,
) -> Result<Box<dyn Denoiser>> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return usage(format!("--lambda must be positive, got {lambda}"));
    }
    match spec {
        "tv" => Ok(Box::new(TvDenoiser::new(TvConfig {
            lambda_scale: lambda,
            ..TvConfig::default()
        }))),
        "gauss" => Ok(Box::new(GaussianSmoothing::default())),
        _ => match spec.strip_prefix("ext:") {
            Some(cmd) => match ExternalDenoiser::new(cmd) {
                Ok(d) => Ok(Box::new(
                    d.with_timeout(Duration::from_secs(timeout))
                        .concurrent(concurrent),
                )),
                Err(e) => usage(e.to_string()),
            },
            None => usage(format!(
                "unknown denoiser `{spec}` (expected tv, gauss or ext:<command>)"
            )),
        },
    }
}

fn read_container(path: &Path) -> Result<Container> {
    Container::read(path).with_context(|| format!("reading {}", path.display()))
}

fn write_container(c: &Container, path: &Path) -> Result<()> {
    c.write(path)
        .with_context(|| format!("writing {}", path.display()))
}

fn default_truth_path(out: &Path) -> PathBuf {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    out.with_file_name(format!("{stem}.truth.mulg"))
}

fn simulate(a: &SimulateArgs) -> Result<()> {
    if !(a.looks > 0.0 && a.looks.is_finite()) {
        return usage(format!("--looks must be positive, got {}", a.looks));
    }
    let truth = match a.gt.parse::<Scene>() {
        Ok(scene) => {
            let dim = a.dim.unwrap_or(1);
            if dim == 0 || dim > 16 {
                return usage(format!("--dim must be in 1..=16, got {dim}"));
            }
            if a.width == 0 || a.height == 0 {
                return usage("--width and --height must be positive");
            }
            scene.covariance(a.width, a.height, dim)?
        }
        Err(e) => {
            let path = Path::new(&a.gt);
            if !path.exists() {
                return usage(e.to_string());
            }
            let c = read_container(path)?;
            if let Some(d) = a.dim {
                if d != c.image.dim() {
                    return usage(format!(
                        "--dim {d} does not match the ground truth (D = {})",
                        c.image.dim()
                    ));
                }
            }
            c.image
        }
    };
    if truth.dim() > 1 && a.looks.fract() != 0.0 {
        return usage(format!(
            "D > 1 needs an integer number of looks, got {}",
            a.looks
        ));
    }
    let noisy = sample_wishart_image(&truth, a.looks, a.seed)?;
    write_container(&Container::new(noisy, a.looks), &a.out)?;
    let truth_path = a
        .truth_out
        .clone()
        .unwrap_or_else(|| default_truth_path(&a.out));
    write_container(&Container::new(truth, 0.0), &truth_path)?;
    Ok(())
}

fn despeckle(a: &DespeckleArgs) -> Result<()> {
    let input = read_container(&a.input)?;
    let looks = match a.looks {
        Some(l) if l > 0.0 && l.is_finite() => l,
        Some(l) => return usage(format!("--looks must be positive, got {l}")),
        None if input.looks > 0.0 => input.looks,
        None => return usage("the input header has no number of looks; pass --looks"),
    };
    let dim = input.image.dim();
    if a.method != Method::Mulog && dim != 1 {
        let name = a
            .method
            .to_possible_value()
            .map(|v| v.get_name().to_string())
            .unwrap_or_default();
        return usage(format!(
            "--method {name} needs a single-channel image, got D = {dim}"
        ));
    }
    let den = make_denoiser(
        &a.den.denoiser,
        a.den.lambda,
        a.den.timeout,
        a.den.concurrent,
    )?;
    let opts = MulogOptions {
        outer_iters: a.iters,
        beta: a.beta,
        newton: NewtonOptions {
            iters: a.inner_iters,
            q: a.q,
            damping: 1.0,
        },
        beta_schedule: a
            .beta_growth
            .map_or(BetaSchedule::Fixed, BetaSchedule::Increasing),
        warm_start: a.warm_start,
        track_objective: false,
    };
    if let Err(e) = opts.validate() {
        return usage(e.to_string());
    }
    let (out, records) = match a.method {
        Method::Mulog => {
            let r = admm::mulog(&input.image, looks, &opts, den.as_ref())?;
            (
                Container::new(r.estimate, looks).with_basis(r.basis),
                r.records,
            )
        }
        Method::Midal => {
            let (r, records) = admm::midal(&input.image.intensity(0), looks, &opts, den.as_ref())?;
            (
                Container::new(CovarianceImage::from_intensity(&r), looks),
                records,
            )
        }
        Method::Homomorphic => {
            let r = admm::homomorphic(&input.image.intensity(0), looks, den.as_ref())?;
            (
                Container::new(CovarianceImage::from_intensity(&r), looks),
                Vec::new(),
            )
        }
    };
    write_container(&out, &a.out)?;
    if let Some(path) = &a.diag {
        let f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
        admm::write_records(&records, BufWriter::new(f))?;
    }
    Ok(())
}

fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let est = read_container(&a.est)?;
    let reference = read_container(&a.reference)?;
    let report = metrics::evaluate(&est.image, &reference.image)?;
    let psnr = if report.psnr_db.is_infinite() {
        "+inf".to_string()
    } else {
        format!("{:.3}", report.psnr_db)
    };
    let kind = if reference.image.dim() == 1 {
        "amplitude"
    } else {
        "trace"
    };
    println!("metric        value");
    println!("psnr_db       {psnr}");
    println!("ssim          {:.5}", report.ssim);
    println!("peak ({kind})  {:.6}", report.peak_value);
    println!("residual_mad  {:.6}", report.residual_mad);
    if let Some(path) = &a.report {
        fs::write(path, serde_json::to_string(&report)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn fig4(a: &Fig4Args) -> Result<()> {
    let cfg = Fig4Config {
        dims: a.dims.clone(),
        qs: a.qs.clone(),
        trials: a.trials,
        iters: a.iters,
        seed: a.seed,
    };
    let rows = match experiments::fig4(&cfg) {
        Err(mulog_core::Error::InvalidInput(m)) => return usage(m),
        r => r?,
    };
    let table = experiments::format_fig4(&rows);
    print!("{table}");
    if let Some(path) = &a.out {
        fs::write(path, &table).with_context(|| format!("writing {}", path.display()))?;
    }
    if let Some(path) = &a.json {
        let mut f = BufWriter::new(fs::File::create(path)?);
        for r in &rows {
            writeln!(f, "{}", serde_json::to_string(r)?)?;
        }
    }
    Ok(())
}

fn audit(a: &AuditArgs) -> Result<()> {
    let specs = if a.denoisers.is_empty() {
        vec!["tv".to_string(), "gauss".to_string()]
    } else {
        a.denoisers.clone()
    };
    if a.size < 2 {
        return usage("--size must be at least 2");
    }
    let mut json = match &a.json {
        Some(p) => Some(BufWriter::new(fs::File::create(p)?)),
        None => None,
    };
    println!("{:<24} {:>12}  per-sigma ratios", "denoiser", "constant");
    for spec in &specs {
        let d = make_denoiser(spec, a.lambda, 600, false)?;
        let r = bounded_denoiser_audit(d.as_ref(), &AUDIT_SIGMAS, a.size, a.seed)?;
        let ratios: Vec<String> = r
            .ratios
            .iter()
            .map(|(s, v)| format!("{s}:{v:.4}"))
            .collect();
        println!("{:<24} {:>12.6}  {}", spec, r.constant, ratios.join(" "));
        if let Some(f) = json.as_mut() {
            writeln!(
                f,
                "{}",
                serde_json::json!({ "denoiser": spec, "report": r })
            )?;
        }
    }
    Ok(())
}

fn denoise_plane(a: &DenoisePlaneArgs) -> Result<()> {
    if a.denoiser.starts_with("ext:") {
        return usage("denoise-plane only runs built-in denoisers");
    }
    let d = make_denoiser(&a.denoiser, a.lambda, 600, false)?;
    let p = read_plane(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let out = mulog_core::denoise::checked_denoise(d.as_ref(), &p, a.sigma)?;
    write_plane(&a.output, &out).with_context(|| format!("writing {}", a.output.display()))?;
    Ok(())
}

fn configure_threads(flag: Option<usize>) -> Result<()> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var(THREADS_ENV) {
            Ok(v) => match v.trim().parse() {
                Ok(n) => Some(n),
                Err(_) => {
                    return usage(format!(
                        "{THREADS_ENV} must be a positive integer, got `{v}`"
                    ))
                }
            },
            Err(_) => None,
        },
    };
    if let Some(n) = n {
        if n == 0 {
            return usage("thread count must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    configure_threads(cli.threads)?;
    match &cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Despeckle(a) => despeckle(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Fig4(a) => fig4(a),
        Command::Audit(a) => audit(a),
        Command::Export(a) => export::export(a),
        Command::DenoisePlane(a) => denoise_plane(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
