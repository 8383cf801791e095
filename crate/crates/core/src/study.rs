//! Convergence study: sample the measure at growing `n`, run the full
//! pipeline for each `(n, seed)` cell and compare against the continuum
//! references.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::affinity::GRADIENT_SCALE;
use crate::continuum::{
    big_f_curve, check_feasible, empirical_big_f, field_p, functional_i_with_sigmas, sigma_star_field,
    stationarity_from_affinities, JointSample,
};
use crate::descent::{run_tsne, Embedding, OptimizerConfig};
use crate::error::{Error, Result};
use crate::io::{fmt_f64, line_plot_svg, matrix_csv, table_csv, write_atomic, Series};
use crate::kernel::{validate_input_kernel, validate_output_kernel, GridSpec, InputKernel, KernelConfig, OutputKernel};
use crate::measure::{ContinuumMeasure, MeasureSpec};

/// Points in the log-spaced sigma grid used for the `F` deviation.
pub const SIGMA_GRID_POINTS: usize = 16;
/// Residual tolerance for the continuum bandwidth roots.
pub const REFERENCE_TOL: f64 = 1e-10;

fn one() -> usize {
    1
}
fn four() -> usize {
    4
}

/// Study description, e.g.
/// `{"measure": {"family": "uniform-box", "lower": [0], "upper": [1]},
///   "n-grid": [100, 400, 1600], "seeds": [1, 2, 3], "rho": 0.3, "output-dir": "out"}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct StudyConfig {
    pub measure: MeasureSpec,
    pub n_grid: Vec<usize>,
    pub seeds: Vec<u64>,
    pub rho: f64,
    #[serde(default)]
    pub kernels: KernelConfig,
    /// Embedding dimension `s`.
    #[serde(default = "one")]
    pub output_dim: usize,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    /// When set, each cell stops once every stationarity residual is below
    /// this value, overriding `optimizer.stop-tol`.
    #[serde(default)]
    pub stationarity_tol: Option<f64>,
    /// Grid refinement factor for the continuum references.
    #[serde(default = "four")]
    pub reference_refinement: usize,
    pub output_dir: PathBuf,
}

impl StudyConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("study config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_grid.is_empty() {
            return Err(Error::Config("n-grid is empty".into()));
        }
        if self.n_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "n-grid must be strictly increasing, got {:?}",
                self.n_grid
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds is empty".into()));
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        if seeds.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("seeds must be distinct".into()));
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(Error::Config(format!("rho must lie in (0, 1), got {}", self.rho)));
        }
        for &n in &self.n_grid {
            check_feasible(n, self.rho)?;
        }
        if self.output_dim == 0 {
            return Err(Error::Config("output-dim must be >= 1".into()));
        }
        if let Some(t) = self.stationarity_tol {
            if !(t.is_finite() && t > 0.0) {
                return Err(Error::Config(format!("stationarity-tol must be positive, got {t}")));
            }
        }
        if self.reference_refinement == 0 {
            return Err(Error::Config("reference-refinement must be >= 1".into()));
        }
        self.optimizer.validate()
    }

    fn optimizer_for(&self, n: usize, seed: u64) -> OptimizerConfig {
        let mut opt = self.optimizer.clone();
        opt.seed = seed;
        if let Some(t) = self.stationarity_tol {
            // max row norm of the gradient is GRADIENT_SCALE / n times the largest residual
            opt.stop_tol = GRADIENT_SCALE * t / n as f64;
        }
        opt
    }
}

/// `spec` sampled `n` times; deterministic in `seed`.
pub fn sample_measure(spec: &MeasureSpec, n: usize, seed: u64) -> Result<Array2<f64>> {
    spec.build()?.sample(n, seed)
}

/// Diagnostics of one `(n, seed)` cell. Failed cells carry NaN metrics and
/// the error message.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudyRow {
    pub n: usize,
    pub seed: u64,
    /// Final loss in nats.
    pub d_n_rho: f64,
    pub sup_sigma_dev: f64,
    pub sup_f_dev: f64,
    pub diameter: f64,
    pub entropy_expansion_residual: f64,
    pub i_empirical: f64,
    pub max_stationarity_residual: f64,
    pub iterations: usize,
    pub converged: bool,
    pub error: String,
}

impl StudyRow {
    pub const HEADER: [&'static str; 12] = [
        "n",
        "seed",
        "d_n_rho",
        "sup_sigma_dev",
        "sup_f_dev",
        "diameter",
        "entropy_expansion_residual",
        "i_empirical",
        "max_stationarity_residual",
        "iterations",
        "converged",
        "error",
    ];

    fn failed(n: usize, seed: u64, err: &Error) -> Self {
        Self {
            n,
            seed,
            d_n_rho: f64::NAN,
            sup_sigma_dev: f64::NAN,
            sup_f_dev: f64::NAN,
            diameter: f64::NAN,
            entropy_expansion_residual: f64::NAN,
            i_empirical: f64::NAN,
            max_stationarity_residual: f64::NAN,
            iterations: 0,
            converged: false,
            error: err.to_string(),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.error.is_empty()
    }

    /// `|d_n_rho - I-empirical|`.
    pub fn loss_gap(&self) -> f64 {
        (self.d_n_rho - self.i_empirical).abs()
    }

    fn fields(&self) -> Vec<String> {
        vec![
            self.n.to_string(),
            self.seed.to_string(),
            fmt_f64(self.d_n_rho),
            fmt_f64(self.sup_sigma_dev),
            fmt_f64(self.sup_f_dev),
            fmt_f64(self.diameter),
            fmt_f64(self.entropy_expansion_residual),
            fmt_f64(self.i_empirical),
            fmt_f64(self.max_stationarity_residual),
            self.iterations.to_string(),
            self.converged.to_string(),
            self.error.clone(),
        ]
    }
}

pub fn rows_csv(rows: &[StudyRow]) -> Result<String> {
    let fields: Vec<Vec<String>> = rows.iter().map(StudyRow::fields).collect();
    table_csv(&StudyRow::HEADER, &fields)
}

pub fn emit_csv(rows: &[StudyRow], path: &Path) -> Result<()> {
    write_atomic(path, rows_csv(rows)?.as_bytes())
}

pub fn emit_svg(series: &[Series], path: &Path) -> Result<()> {
    write_atomic(
        path,
        line_plot_svg("convergence study", "n", "median over seeds", series, true, true).as_bytes(),
    )
}

/// Scalar extracted from a row.
pub type Metric = fn(&StudyRow) -> f64;

/// Median of `metric` over the successful rows at each `n`, in grid order.
/// Sizes with no successful row are skipped.
pub fn medians<F: Fn(&StudyRow) -> f64>(rows: &[StudyRow], metric: F) -> Vec<(usize, f64)> {
    let mut sizes: Vec<usize> = rows.iter().map(|r| r.n).collect();
    sizes.sort_unstable();
    sizes.dedup();
    sizes
        .into_iter()
        .filter_map(|n| {
            let mut v: Vec<f64> = rows
                .iter()
                .filter(|r| r.n == n && r.is_ok())
                .map(&metric)
                .filter(|x| x.is_finite())
                .collect();
            if v.is_empty() {
                return None;
            }
            v.sort_by(f64::total_cmp);
            let m = v.len();
            let med = if m % 2 == 1 {
                v[m / 2]
            } else {
                0.5 * (v[m / 2 - 1] + v[m / 2])
            };
            Some((n, med))
        })
        .collect()
}

/// One polyline per metric, medians over seeds against `n`.
pub fn summary_series(rows: &[StudyRow]) -> Vec<Series> {
    let metrics: [(&str, Metric); 6] = [
        ("sup_sigma_dev", |r| r.sup_sigma_dev),
        ("sup_f_dev", |r| r.sup_f_dev),
        ("|d_n_rho - i_empirical|", StudyRow::loss_gap),
        ("entropy_expansion_residual", |r| r.entropy_expansion_residual),
        ("max_stationarity_residual", |r| r.max_stationarity_residual),
        ("diameter", |r| r.diameter),
    ];
    metrics
        .iter()
        .map(|(name, f)| Series {
            name: name.to_string(),
            points: medians(rows, f).into_iter().map(|(n, v)| (n as f64, v)).collect(),
        })
        .collect()
}

struct CellOutput {
    row: StudyRow,
    artifacts: Option<(Array2<f64>, Embedding)>,
}

struct Context {
    measure: ContinuumMeasure,
    reference: ContinuumMeasure,
    kernel_in: InputKernel,
    kernel_out: OutputKernel,
}

fn log_grid(lo: f64, hi: f64, m: usize) -> Vec<f64> {
    if m == 1 || hi <= lo {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..m)
        .map(|k| (a + (b - a) * k as f64 / (m - 1) as f64).exp())
        .collect()
}

fn max_of<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    values.into_iter().fold(0.0, f64::max)
}

fn run_cell(config: &StudyConfig, ctx: &Context, n: usize, seed: u64) -> Result<(StudyRow, Array2<f64>, Embedding)> {
    let rho = config.rho;
    let x = ctx.measure.sample(n, seed)?;
    let emb = run_tsne(
        x.view(),
        &ctx.kernel_in,
        &ctx.kernel_out,
        rho,
        config.output_dim,
        &config.optimizer_for(n, seed),
    )?;

    let field = sigma_star_field(&ctx.reference, &ctx.kernel_in, rho, x.view(), REFERENCE_TOL)?;
    let sup_sigma_dev = max_of(emb.sigmas.iter().zip(&field.roots).map(|(s, r)| (s - r.sigma).abs()));

    let lo = emb.sigmas.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = emb.sigmas.iter().copied().fold(0.0, f64::max);
    let grid = log_grid(lo, hi, SIGMA_GRID_POINTS);
    let devs: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = x.row(i).to_vec();
            let cont = big_f_curve(&ctx.reference, &ctx.kernel_in, rho, &xi, &grid)?;
            let mut worst = 0.0f64;
            for (&sigma, c) in grid.iter().zip(cont) {
                worst = worst.max((empirical_big_f(x.view(), i, &ctx.kernel_in, rho, sigma)? - c).abs());
            }
            Ok(worst)
        })
        .collect::<Result<_>>()?;
    let sup_f_dev = max_of(devs);

    // Σ_{i≠j} P log P + 2 log n against the continuum density on sample pairs
    let p_cont = field_p(x.view(), &field, &ctx.kernel_in)?;
    let p = &emb.affinities;
    let mut discrete = 0.0;
    let mut continuum = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let pij = p.get(i, j);
            if pij > 0.0 {
                discrete += pij * pij.ln();
            }
            let c = p_cont[[i, j]];
            if c > 0.0 {
                continuum += c * c.ln();
            }
        }
    }
    let nf = n as f64;
    let entropy_expansion_residual = (discrete + 2.0 * nf.ln() - continuum / (nf * nf)).abs();

    let sample = JointSample::new(x.clone(), emb.coords.clone())?;
    let i_empirical = functional_i_with_sigmas(&sample, &emb.sigmas, &ctx.kernel_in, &ctx.kernel_out)?;
    let stationarity = stationarity_from_affinities(&emb.affinities, emb.coords.view(), &ctx.kernel_out)?;

    let row = StudyRow {
        n,
        seed,
        d_n_rho: emb.final_loss(),
        sup_sigma_dev,
        sup_f_dev,
        diameter: emb.diameter(),
        entropy_expansion_residual,
        i_empirical,
        max_stationarity_residual: max_of(stationarity),
        iterations: emb.trace.last().map_or(0, |t| t.iteration),
        converged: emb.converged,
        error: String::new(),
    };
    Ok((row, x, emb))
}

fn check_kernels(kernels: &KernelConfig, dim: usize) -> Result<(InputKernel, OutputKernel)> {
    let (kernel_in, kernel_out) = kernels.build()?;
    let mut failed = Vec::new();
    let r_in = validate_input_kernel(&kernel_in, dim, &GridSpec::input_default())?;
    let r_out = validate_output_kernel(&kernel_out, &GridSpec::output_default())?;
    for report in [&r_in, &r_out] {
        failed.extend(
            report
                .failed_ids()
                .into_iter()
                .map(|id| format!("{}: {id}", report.kernel)),
        );
    }
    if !failed.is_empty() {
        return Err(Error::InvalidKernel(format!("failed checks {}", failed.join(", "))));
    }
    Ok((kernel_in, kernel_out))
}

/// Result rows in `(n, seed)` order.
#[derive(Debug, Clone)]
pub struct StudyReport {
    pub rows: Vec<StudyRow>,
}

impl StudyReport {
    pub fn medians<F: Fn(&StudyRow) -> f64>(&self, metric: F) -> Vec<(usize, f64)> {
        medians(&self.rows, metric)
    }
}

/// Runs every cell, then writes `rows.csv`, `summary.svg` and
/// `<n>/<seed>/{points,embedding,trace}.csv` under the output directory.
pub fn convergence_study(config: &StudyConfig) -> Result<StudyReport> {
    config.validate()?;
    let measure = config.measure.build()?;
    let reference = measure.refined(config.reference_refinement)?;
    let (kernel_in, kernel_out) = check_kernels(&config.kernels, measure.dim())?;
    let ctx = Context {
        measure,
        reference,
        kernel_in,
        kernel_out,
    };
    let cells: Vec<(usize, u64)> = config
        .n_grid
        .iter()
        .flat_map(|&n| config.seeds.iter().map(move |&s| (n, s)))
        .collect();
    let outputs: Vec<CellOutput> = cells
        .par_iter()
        .map(|&(n, seed)| match run_cell(config, &ctx, n, seed) {
            Ok((row, x, emb)) => CellOutput {
                row,
                artifacts: Some((x, emb)),
            },
            Err(e) => CellOutput {
                row: StudyRow::failed(n, seed, &e),
                artifacts: None,
            },
        })
        .collect();

    let dir = &config.output_dir;
    for out in &outputs {
        if let Some((x, emb)) = &out.artifacts {
            let cell = dir.join(out.row.n.to_string()).join(out.row.seed.to_string());
            write_atomic(&cell.join("points.csv"), matrix_csv(x.view()).as_bytes())?;
            write_atomic(&cell.join("embedding.csv"), matrix_csv(emb.coords.view()).as_bytes())?;
            let trace: Vec<Vec<String>> = emb
                .trace
                .iter()
                .map(|t| vec![t.iteration.to_string(), fmt_f64(t.loss), fmt_f64(t.grad_norm)])
                .collect();
            write_atomic(
                &cell.join("trace.csv"),
                table_csv(&["iteration", "loss", "grad_norm"], &trace)?.as_bytes(),
            )?;
        }
    }
    let rows: Vec<StudyRow> = outputs.into_iter().map(|o| o.row).collect();
    emit_csv(&rows, &dir.join("rows.csv"))?;
    emit_svg(&summary_series(&rows), &dir.join("summary.svg"))?;
    Ok(StudyReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(dir: &Path, grid: Vec<usize>) -> StudyConfig {
        StudyConfig {
            measure: MeasureSpec::uniform(&[0.0], &[1.0]),
            n_grid: grid,
            seeds: vec![1],
            rho: 0.3,
            kernels: KernelConfig::default(),
            output_dim: 1,
            optimizer: OptimizerConfig {
                iterations: 200,
                init: crate::descent::Init::Principal,
                ..OptimizerConfig::default()
            },
            stationarity_tol: Some(1e-4),
            reference_refinement: 2,
            output_dir: dir.to_path_buf(),
        }
    }

    #[test]
    fn uniform_sample_mean() {
        let spec = MeasureSpec::uniform(&[0.0], &[1.0]);
        let x = sample_measure(&spec, 10_000, 1).unwrap();
        assert!((x.mean().unwrap() - 0.5).abs() < 0.02);
        assert_eq!(x, sample_measure(&spec, 10_000, 1).unwrap());
    }

    #[test]
    fn zero_weight_component_is_never_sampled() {
        let spec = MeasureSpec::from_json(
            r#"{"family": "mixture", "components": [
                {"weight": 1, "family": "uniform-box", "lower": [0], "upper": [1]},
                {"weight": 0, "family": "uniform-box", "lower": [2], "upper": [3]}]}"#,
        )
        .unwrap();
        let x = sample_measure(&spec, 500, 3).unwrap();
        assert!(x.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn config_validation() {
        let dir = Path::new("unused");
        assert!(small(dir, vec![40, 20]).validate().is_err());
        assert!(small(dir, vec![3, 20]).validate().is_err()); // 3 * 0.3 < 1
        assert!(small(dir, vec![20, 40]).validate().is_ok());
        let text = r#"{"measure": {"family": "uniform-box", "lower": [0], "upper": [1]},
            "n-grid": [50], "seeds": [1], "rho": 0.3, "output-dir": "o", "bogus": 1}"#;
        assert!(StudyConfig::from_json(text).unwrap_err().is_config());
    }

    #[test]
    fn single_size_study_writes_everything() {
        let dir = tempfile::tempdir().unwrap();
        let config = small(dir.path(), vec![30]);
        let report = convergence_study(&config).unwrap();
        assert_eq!(report.rows.len(), 1);
        let row = &report.rows[0];
        assert!(row.is_ok(), "{}", row.error);
        for v in [
            row.d_n_rho,
            row.sup_sigma_dev,
            row.sup_f_dev,
            row.diameter,
            row.entropy_expansion_residual,
            row.i_empirical,
            row.max_stationarity_residual,
        ] {
            assert!(v.is_finite());
        }
        let csv = std::fs::read_to_string(dir.path().join("rows.csv")).unwrap();
        assert_eq!(csv.lines().count(), 2);
        assert!(csv.starts_with(&StudyRow::HEADER.join(",")));
        let svg = std::fs::read_to_string(dir.path().join("summary.svg")).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 6);
        for f in ["points.csv", "embedding.csv", "trace.csv"] {
            assert!(dir.path().join("30/1").join(f).exists());
        }
        let again = convergence_study(&config).unwrap();
        assert_eq!(again.rows, report.rows);
        assert_eq!(std::fs::read_to_string(dir.path().join("rows.csv")).unwrap(), csv);
    }

    #[test]
    fn failing_cells_are_recorded() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = small(dir.path(), vec![30]);
        // the optimizer blows up with an absurd step
        config.optimizer.learning_rate = Some(1e300);
        config.optimizer.momentum = 0.0;
        let report = convergence_study(&config).unwrap();
        assert!(!report.rows[0].is_ok());
        let csv = std::fs::read_to_string(dir.path().join("rows.csv")).unwrap();
        assert_eq!(csv.lines().count(), 2);
    }

    #[test]
    fn medians_by_size() {
        let mut rows: Vec<StudyRow> = [(10, 3.0), (10, 1.0), (10, 2.0), (20, 4.0), (20, 6.0)]
            .iter()
            .map(|&(n, v)| StudyRow {
                diameter: v,
                error: String::new(),
                ..StudyRow::failed(n, 0, &Error::Config(String::new()))
            })
            .collect();
        rows.push(StudyRow::failed(30, 0, &Error::Config("x".into())));
        assert_eq!(medians(&rows, |r| r.diameter), vec![(10, 2.0), (20, 5.0)]);
    }
}
