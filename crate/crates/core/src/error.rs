use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the engine.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed numeric input: non-finite coordinates, shape mismatches, bad arguments.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A kernel profile produced a non-finite value where a finite one is required.
    #[error("kernel definition error: {0}")]
    KernelDefinition(String),

    /// Kernel parameters are out of range or the kernel failed a required check.
    #[error("invalid kernel: {0}")]
    InvalidKernel(String),

    /// Every neighbour weight of point `index` vanished.
    #[error("calibration underflow at point {index}: all neighbour weights are zero")]
    CalibrationUnderflow { index: usize },

    /// The entropy target `log(n * rho)` lies outside `(0, log(n - 1))`.
    #[error("infeasible perplexity: n = {n}, rho = {rho}, perplexity n*rho = {perplexity} must lie strictly inside (1, {max})")]
    InfeasiblePerplexity {
        n: usize,
        rho: f64,
        perplexity: f64,
        max: f64,
    },

    /// The entropy of point `index` cannot reach the target because of tied distances.
    #[error("degenerate geometry at point {index}: {reason}")]
    DegenerateGeometry { index: usize, reason: String },

    /// Root finding did not converge.
    #[error("no convergence at point {index}: {reason}")]
    NoConvergence { index: usize, reason: String },

    /// Per-point calibration failures, in index order.
    #[error("calibration failed for {} point(s); first: {}", .0.len(), .0.first().map(|(i, e)| format!("#{i}: {e}")).unwrap_or_default())]
    Calibration(Vec<(usize, Error)>),

    /// Relative entropy is infinite: `Q[i][j] = 0` where `P[i][j] > 0`.
    #[error("infinite relative entropy: Q is zero at ({i}, {j}) where P is positive")]
    InfiniteLoss { i: usize, j: usize },

    /// The optimizer produced a non-finite value.
    #[error("optimizer diverged at iteration {iteration}")]
    Divergence { iteration: usize },

    /// Continuum quadrature could not resolve the kernel on the grid.
    #[error("quadrature evaluation error: {0}")]
    Evaluation(String),

    /// Continuum root finding found no sign change.
    #[error("resolution error: {0}")]
    Resolution(String),

    /// A documented precondition does not hold.
    #[error("precondition violated: {0}")]
    Precondition(String),

    /// Invalid configuration file contents.
    #[error("config error: {0}")]
    Config(String),

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by malformed configuration rather than by the data.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_))
    }

    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
