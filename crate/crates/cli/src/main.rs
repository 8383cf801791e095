use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde_json::json;

use gtsne::affinity::GRADIENT_SCALE;
use gtsne::calibrate::{calibrate_all, target_perplexity, DEFAULT_TOL};
use gtsne::continuum::sigma_star;
use gtsne::descent::{run_tsne, Init, OptimizerConfig};
use gtsne::io::{fmt_f64 as fmt, matrix_csv, read_points, table_csv, write_atomic};
use gtsne::kernel::{validate_input_kernel, validate_output_kernel, GridSpec, KernelConfig};
use gtsne::measure::MeasureSpec;
use gtsne::study::{convergence_study, Metric, StudyConfig, StudyRow};
use gtsne::Error;

const EXIT_DOMAIN: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_IO: u8 = 3;

#[derive(Parser)]
#[command(
    name = "gtsne",
    version,
    about = "t-SNE with general kernels, bandwidth calibration and continuum diagnostics"
)]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum InitArg {
    Random,
    Principal,
}

#[derive(Subcommand)]
enum Command {
    /// Check a kernel pair and print the validation report as JSON.
    ValidateKernel {
        #[arg(long)]
        config: PathBuf,
        /// Input space dimension for the tail integral.
        #[arg(long, default_value_t = 1)]
        dim: usize,
    },
    /// Solve the per-point bandwidths for perplexity n*rho.
    Calibrate {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        rho: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Calibrate and minimize the loss; writes embedding.csv, trace.csv,
    /// sigmas.csv and meta.json.
    Embed {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        rho: f64,
        #[arg(long, default_value_t = 2)]
        dim: usize,
        #[arg(long, default_value_t = 1000)]
        iters: usize,
        /// Step size; defaults to n.
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "random")]
        init: InitArg,
        #[arg(long, default_value_t = 1e-7)]
        stop_tol: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Continuum bandwidth field sigma* on an evaluation grid.
    Continuum {
        #[arg(long)]
        measure: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        rho: f64,
        /// Grid points per axis; defaults to 101 in 1-D and 21 in 2-D.
        #[arg(long)]
        grid: Option<usize>,
        #[arg(long, default_value_t = 1e-10)]
        tol: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a convergence study described by a JSON file.
    Study {
        #[arg(long)]
        config: PathBuf,
    },
}

/// Failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if e.is_io() {
            EXIT_IO
        } else if e.is_config() {
            EXIT_USAGE
        } else {
            EXIT_DOMAIN
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        message: message.into(),
    }
}

fn read_text(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Failure {
        code: EXIT_IO,
        message: format!("cannot read {}: {e}", path.display()),
    })
}

fn kernels(path: &Path) -> Result<KernelConfig, Failure> {
    Ok(KernelConfig::from_json(&read_text(path)?)?)
}

fn validate_kernel(config: &Path, dim: usize) -> Result<u8, Failure> {
    let cfg = kernels(config)?;
    let (kin, kout) = cfg.build()?;
    let input = validate_input_kernel(&kin, dim, &GridSpec::input_default())?;
    let output = validate_output_kernel(&kout, &GridSpec::output_default())?;
    let overall = input.overall && output.overall;
    let failed: Vec<&str> = input.failed_ids().into_iter().chain(output.failed_ids()).collect();
    let report = json!({ "input": input, "output": output, "failed": failed, "overall": overall });
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    Ok(if overall { 0 } else { EXIT_DOMAIN })
}

fn calibrate(input: &Path, config: &Path, rho: f64, out: &Path) -> Result<u8, Failure> {
    let (kin, _) = kernels(config)?.build()?;
    let points = read_points(input)?;
    let cal = calibrate_all(points.view(), &kin, rho, DEFAULT_TOL)?;
    let rows: Vec<Vec<String>> = cal
        .sigmas
        .iter()
        .zip(&cal.residuals)
        .zip(&cal.iterations)
        .map(|((s, r), it)| vec![fmt(*s), fmt(*r), it.to_string()])
        .collect();
    write_atomic(
        out,
        table_csv(&["sigma", "entropy_residual", "iterations"], &rows)?.as_bytes(),
    )?;
    Ok(0)
}

#[allow(clippy::too_many_arguments)]
fn embed(
    input: &Path,
    config: &Path,
    rho: f64,
    dim: usize,
    iters: usize,
    lr: Option<f64>,
    seed: u64,
    init: InitArg,
    stop_tol: f64,
    out: &Path,
) -> Result<u8, Failure> {
    let cfg = kernels(config)?;
    let (kin, kout) = cfg.build()?;
    if dim == 0 {
        return Err(usage("--dim must be >= 1"));
    }
    let points = read_points(input)?;
    let n = points.nrows();
    let perplexity = target_perplexity(n, rho)?;
    let opt = OptimizerConfig {
        iterations: iters,
        learning_rate: lr,
        seed,
        stop_tol,
        init: match init {
            InitArg::Random => Init::Random,
            InitArg::Principal => Init::Principal,
        },
        ..OptimizerConfig::default()
    };
    let emb = run_tsne(points.view(), &kin, &kout, rho, dim, &opt)?;
    let trace: Vec<Vec<String>> = emb
        .trace
        .iter()
        .map(|t| vec![t.iteration.to_string(), fmt(t.loss), fmt(t.grad_norm)])
        .collect();
    let sigmas: Vec<Vec<String>> = emb.sigmas.iter().map(|s| vec![fmt(*s)]).collect();
    let meta = json!({
        "n": n,
        "dim": dim,
        "rho": rho,
        "perplexity": perplexity,
        "gradient_scale": GRADIENT_SCALE,
        "learning_rate": emb.learning_rate,
        "iterations": emb.trace.last().map_or(0, |t| t.iteration),
        "converged": emb.converged,
        "final_loss": emb.final_loss(),
        "final_grad_norm": emb.final_grad_norm(),
        "kernels": cfg,
        "optimizer": opt,
    });
    // everything is computed before the first file is written
    write_atomic(&out.join("embedding.csv"), matrix_csv(emb.coords.view()).as_bytes())?;
    write_atomic(
        &out.join("trace.csv"),
        table_csv(&["iteration", "loss", "grad_norm"], &trace)?.as_bytes(),
    )?;
    write_atomic(&out.join("sigmas.csv"), table_csv(&["sigma"], &sigmas)?.as_bytes())?;
    let meta = serde_json::to_string_pretty(&meta).expect("meta serializes") + "\n";
    write_atomic(&out.join("meta.json"), meta.as_bytes())?;
    Ok(0)
}

fn continuum(
    measure: &Path,
    config: &Path,
    rho: f64,
    grid: Option<usize>,
    tol: f64,
    out: &Path,
) -> Result<u8, Failure> {
    let spec = MeasureSpec::from_json(&read_text(measure)?)?;
    let mu = spec.build()?;
    let (kin, _) = kernels(config)?.build()?;
    let d = mu.dim();
    let m = grid.unwrap_or(if d == 1 { 101 } else { 21 });
    if m < 2 {
        return Err(usage("--grid must be >= 2"));
    }
    let (lo, hi) = mu.bounding_box();
    let axis = |k: usize, i: usize| lo[k] + (hi[k] - lo[k]) * i as f64 / (m - 1) as f64;
    // row-major over the axes, last axis fastest
    let points: Vec<Vec<f64>> = (0..m.pow(d as u32))
        .map(|flat| (0..d).map(|k| axis(k, flat / m.pow((d - 1 - k) as u32) % m)).collect())
        .filter(|x: &Vec<f64>| mu.in_support(x))
        .collect();
    let roots: Vec<_> = points
        .par_iter()
        .map(|x| sigma_star(&mu, &kin, rho, x, tol))
        .collect::<Result<_, _>>()?;
    let mut header: Vec<String> = (1..=d).map(|k| format!("x{k}")).collect();
    header.extend(["sigma_star".into(), "f_residual".into(), "iterations".into()]);
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows: Vec<Vec<String>> = points
        .iter()
        .zip(&roots)
        .map(|(x, r)| {
            let mut row: Vec<String> = x.iter().map(|v| fmt(*v)).collect();
            row.extend([fmt(r.sigma), fmt(r.residual), r.iterations.to_string()]);
            row
        })
        .collect();
    write_atomic(&out.join("sigma_star.csv"), table_csv(&header, &rows)?.as_bytes())?;
    Ok(0)
}

fn study(config: &Path) -> Result<u8, Failure> {
    let cfg = StudyConfig::from_json(&read_text(config)?)?;
    let report = convergence_study(&cfg)?;
    let failed = report.rows.iter().filter(|r| !r.is_ok()).count();
    let metrics: [(&str, Metric); 5] = [
        ("sup_sigma_dev", |r| r.sup_sigma_dev),
        ("loss_gap", StudyRow::loss_gap),
        ("entropy_expansion_residual", |r| r.entropy_expansion_residual),
        ("diameter", |r| r.diameter),
        ("max_stationarity_residual", |r| r.max_stationarity_residual),
    ];
    for (name, f) in metrics {
        let med: Vec<String> = report
            .medians(f)
            .iter()
            .map(|(n, v)| format!("n={n}: {v:.6e}"))
            .collect();
        println!("{name:<28} {}", med.join("  "));
    }
    println!(
        "{} rows ({failed} failed) written to {}",
        report.rows.len(),
        cfg.output_dir.display()
    );
    Ok(0)
}

fn configure_threads() -> Result<(), Failure> {
    if let Ok(v) = std::env::var("GTSNE_THREADS") {
        let threads: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&t| t > 0)
            .ok_or_else(|| usage(format!("GTSNE_THREADS must be a positive integer, got {v:?}")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| usage(e.to_string()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<u8, Failure> {
    configure_threads()?;
    match cli.command {
        Command::ValidateKernel { config, dim } => validate_kernel(&config, dim),
        Command::Calibrate {
            input,
            config,
            rho,
            out,
        } => calibrate(&input, &config, rho, &out),
        Command::Embed {
            input,
            config,
            rho,
            dim,
            iters,
            lr,
            seed,
            init,
            stop_tol,
            out,
        } => embed(&input, &config, rho, dim, iters, lr, seed, init, stop_tol, &out),
        Command::Continuum {
            measure,
            config,
            rho,
            grid,
            tol,
            out,
        } => continuum(&measure, &config, rho, grid, tol, &out),
        Command::Study { config } => study(&config),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
