//! Per-point entropy calibration.
//!
//! For each point `i`, the conditional distribution
//! `p_{j|i} ∝ exp(-w(sigma_i |x_i - x_j|^theta))` must have entropy
//! `log(n * rho)`. Entropy is strictly decreasing in `sigma`, so each
//! `sigma_i` is found by bisection in `log sigma`.

use ndarray::ArrayView2;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::kernel::{squared_distance, InputKernel};

/// Default entropy tolerance in nats.
pub const DEFAULT_TOL: f64 = 1e-8;
/// Lower end of the inverse-sigma bracket `[delta^theta, n^(theta/2)]`.
pub const BRACKET_DELTA: f64 = 1e-4;
pub const MAX_BISECTIONS: usize = 100;
pub const MAX_EXPANSIONS: usize = 40;
const EXPANSION_FACTOR: f64 = 10.0;

#[derive(Debug, Clone, Serialize)]
pub struct CalibrationResult {
    pub sigmas: Vec<f64>,
    /// Entropy minus target, nats.
    pub residuals: Vec<f64>,
    pub iterations: Vec<usize>,
    /// Smallest lower and largest upper bracket end used over all points.
    pub bracket: (f64, f64),
}

/// Solution of the entropy equation for one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SigmaRoot {
    pub sigma: f64,
    pub residual: f64,
    pub iterations: usize,
    pub bracket: (f64, f64),
}

fn check_points(points: &ArrayView2<f64>) -> Result<()> {
    if points.nrows() < 2 {
        return Err(Error::InvalidInput(format!(
            "need at least 2 points, got {}",
            points.nrows()
        )));
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite coordinate".into()));
    }
    Ok(())
}

/// `|x_i - x_j|^theta` for every `j`, with the entry for `i` itself left at 0.
pub(crate) fn scaled_distances(points: &ArrayView2<f64>, i: usize, kernel: &InputKernel) -> Vec<f64> {
    let xi = points.row(i);
    points
        .outer_iter()
        .map(|xj| {
            let d2 = match (xi.as_slice(), xj.as_slice()) {
                (Some(a), Some(b)) => squared_distance(a, b),
                _ => xi.iter().zip(xj.iter()).map(|(u, v)| (u - v) * (u - v)).sum(),
            };
            kernel.scaled_distance(d2)
        })
        .collect()
}

/// Shifted weights `exp(-(w_j - w_min))` over `j != i`, with their sum and the
/// entropy of the normalized distribution.
struct ShiftedRow {
    weights: Vec<f64>,
    sum: f64,
    entropy: f64,
}

fn shifted_row(dist: &[f64], i: usize, sigma: f64, kernel: &InputKernel) -> Result<ShiftedRow> {
    let exponents: Vec<f64> = dist
        .iter()
        .enumerate()
        .map(|(j, &t)| {
            if j == i {
                f64::INFINITY
            } else if t == 0.0 {
                0.0
            } else {
                kernel.w(sigma * t)
            }
        })
        .collect();
    let min = exponents
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != i)
        .map(|(_, &e)| e)
        .fold(f64::INFINITY, f64::min);
    if !min.is_finite() {
        return Err(Error::CalibrationUnderflow { index: i });
    }
    let mut weights = vec![0.0; dist.len()];
    let mut sum = 0.0;
    let mut moment = 0.0;
    for (j, &e) in exponents.iter().enumerate() {
        if j == i {
            continue;
        }
        let excess = e - min;
        let u = (-excess).exp();
        weights[j] = u;
        sum += u;
        moment += u * excess;
    }
    if !(sum > 0.0 && sum.is_finite()) {
        return Err(Error::CalibrationUnderflow { index: i });
    }
    // -Σ p ln p with p_j = u_j / S and -ln p_j = excess_j + ln S.
    let entropy = sum.ln() + moment / sum;
    Ok(ShiftedRow { weights, sum, entropy })
}

/// `p_{j|i}` for all `j`, zero at `i`.
pub fn conditional_distribution(
    points: ArrayView2<f64>,
    i: usize,
    sigma: f64,
    kernel: &InputKernel,
) -> Result<Vec<f64>> {
    check_points(&points)?;
    if i >= points.nrows() {
        return Err(Error::InvalidInput(format!(
            "index {i} out of range for {} points",
            points.nrows()
        )));
    }
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::InvalidInput(format!("sigma must be positive, got {sigma}")));
    }
    let dist = scaled_distances(&points, i, kernel);
    conditional_from_distances(&dist, i, sigma, kernel)
}

pub(crate) fn conditional_from_distances(dist: &[f64], i: usize, sigma: f64, kernel: &InputKernel) -> Result<Vec<f64>> {
    let row = shifted_row(dist, i, sigma, kernel)?;
    Ok(row.weights.into_iter().map(|u| u / row.sum).collect())
}

/// Shannon entropy in nats; `0 log 0 = 0`.
pub fn entropy(p: &[f64]) -> Result<f64> {
    let mut h = 0.0;
    for &v in p {
        if !(v >= 0.0) || !v.is_finite() {
            return Err(Error::InvalidInput(format!(
                "probability entries must be finite and nonnegative, got {v}"
            )));
        }
        if v > 0.0 {
            h -= v * v.ln();
        }
    }
    Ok(h.max(0.0))
}

/// Perplexity `n * rho` after checking it lies strictly inside `(1, n - 1)`.
pub fn target_perplexity(n: usize, rho: f64) -> Result<f64> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::InvalidInput(format!("rho must lie in (0, 1), got {rho}")));
    }
    let perplexity = n as f64 * rho;
    let max = n.saturating_sub(1) as f64;
    if !(perplexity > 1.0 && perplexity < max) {
        return Err(Error::InfeasiblePerplexity {
            n,
            rho,
            perplexity,
            max,
        });
    }
    Ok(perplexity)
}

/// Solves `entropy(p_{.|i}(sigma)) = log(n rho)` for `sigma`.
pub fn solve_sigma(points: ArrayView2<f64>, i: usize, kernel: &InputKernel, rho: f64, tol: f64) -> Result<SigmaRoot> {
    check_points(&points)?;
    let n = points.nrows();
    if i >= n {
        return Err(Error::InvalidInput(format!("index {i} out of range for {n} points")));
    }
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::InvalidInput(format!("rho must lie in (0, 1), got {rho}")));
    }
    let dist = scaled_distances(&points, i, kernel);
    solve_from_distances(&dist, i, kernel, rho, tol)
}

pub(crate) fn solve_from_distances(
    dist: &[f64],
    i: usize,
    kernel: &InputKernel,
    rho: f64,
    tol: f64,
) -> Result<SigmaRoot> {
    let n = dist.len();
    let neighbours = || dist.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, &t)| t);
    let nearest = neighbours().fold(f64::INFINITY, f64::min);
    let farthest = neighbours().fold(f64::NEG_INFINITY, f64::max);
    if nearest == farthest {
        return Err(Error::DegenerateGeometry {
            index: i,
            reason: format!(
                "all {} neighbours are equidistant; entropy is log({}) for every sigma",
                n - 1,
                n - 1
            ),
        });
    }
    let target = target_perplexity(n, rho)?.ln();
    // Entropy never drops below log(m) for m tied nearest neighbours.
    let tied = neighbours().filter(|&t| t == nearest).count();
    if (tied as f64).ln() >= target - tol {
        return Err(Error::DegenerateGeometry {
            index: i,
            reason: format!("{tied} tied nearest neighbours keep the entropy above log({tied}) >= target {target:.6}"),
        });
    }

    let h = |sigma: f64| shifted_row(dist, i, sigma, kernel).map(|r| r.entropy);
    let theta = kernel.theta();
    let mut lo = (n as f64).powf(-0.5 * theta);
    let mut hi = BRACKET_DELTA.powf(-theta);
    let mut h_lo = h(lo)?;
    let mut expansions = 0;
    while h_lo <= target {
        if expansions == MAX_EXPANSIONS {
            return Err(plateau_error(
                i,
                "below",
                lo * EXPANSION_FACTOR,
                lo,
                h(lo * EXPANSION_FACTOR)?,
                h_lo,
                target,
                tol,
            ));
        }
        lo /= EXPANSION_FACTOR;
        h_lo = h(lo)?;
        expansions += 1;
    }
    let mut h_hi = h(hi)?;
    expansions = 0;
    while h_hi >= target {
        if expansions == MAX_EXPANSIONS {
            return Err(plateau_error(
                i,
                "above",
                hi / EXPANSION_FACTOR,
                hi,
                h(hi / EXPANSION_FACTOR)?,
                h_hi,
                target,
                tol,
            ));
        }
        hi *= EXPANSION_FACTOR;
        h_hi = h(hi)?;
        expansions += 1;
    }
    let bracket = (lo, hi);
    if (h_lo - h_hi).abs() <= tol {
        return Err(Error::DegenerateGeometry {
            index: i,
            reason: format!("entropy constant over bracket [{lo:e}, {hi:e}]"),
        });
    }

    for iteration in 1..=MAX_BISECTIONS {
        let mid = (lo * hi).sqrt();
        let value = h(mid)?;
        let residual = value - target;
        if residual.abs() <= tol {
            return Ok(SigmaRoot {
                sigma: mid,
                residual,
                iterations: iteration,
                bracket,
            });
        }
        if residual > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(Error::NoConvergence {
        index: i,
        reason: format!(
            "bisection did not reach tolerance {tol:e} in {MAX_BISECTIONS} steps (bracket [{lo:e}, {hi:e}])"
        ),
    })
}

#[allow(clippy::too_many_arguments)]
fn plateau_error(
    i: usize,
    side: &str,
    s_prev: f64,
    s_end: f64,
    h_prev: f64,
    h_end: f64,
    target: f64,
    tol: f64,
) -> Error {
    if (h_prev - h_end).abs() <= tol {
        Error::DegenerateGeometry {
            index: i,
            reason: format!("entropy plateaus at {h_end:.9} {side} target {target:.9} as sigma -> {s_end:e}"),
        }
    } else {
        Error::NoConvergence {
            index: i,
            reason: format!(
                "bracket expansion cap reached: entropy {h_prev:.9} at {s_prev:e}, {h_end:.9} at {s_end:e}, target {target:.9}"
            ),
        }
    }
}

/// Calibrates every point independently.
pub fn calibrate_all(points: ArrayView2<f64>, kernel: &InputKernel, rho: f64, tol: f64) -> Result<CalibrationResult> {
    check_points(&points)?;
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::InvalidInput(format!("rho must lie in (0, 1), got {rho}")));
    }
    let n = points.nrows();
    target_perplexity(n, rho)?;
    let roots: Vec<Result<SigmaRoot>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let dist = scaled_distances(&points, i, kernel);
            solve_from_distances(&dist, i, kernel, rho, tol)
        })
        .collect();
    let mut failures = Vec::new();
    let mut result = CalibrationResult {
        sigmas: Vec::with_capacity(n),
        residuals: Vec::with_capacity(n),
        iterations: Vec::with_capacity(n),
        bracket: (f64::INFINITY, 0.0),
    };
    for (i, root) in roots.into_iter().enumerate() {
        match root {
            Ok(r) => {
                result.sigmas.push(r.sigma);
                result.residuals.push(r.residual);
                result.iterations.push(r.iterations);
                result.bracket.0 = result.bracket.0.min(r.bracket.0);
                result.bracket.1 = result.bracket.1.max(r.bracket.1);
            }
            Err(e) => failures.push((i, e)),
        }
    }
    if failures.is_empty() {
        Ok(result)
    } else {
        Err(Error::Calibration(failures))
    }
}

/// Entropy of `p_{.|i}` at `sigma`, computed in shifted form.
pub fn conditional_entropy(points: ArrayView2<f64>, i: usize, sigma: f64, kernel: &InputKernel) -> Result<f64> {
    check_points(&points)?;
    let dist = scaled_distances(&points, i, kernel);
    shifted_row(&dist, i, sigma, kernel).map(|r| r.entropy)
}

pub(crate) fn entropy_from_distances(dist: &[f64], i: usize, sigma: f64, kernel: &InputKernel) -> Result<f64> {
    shifted_row(dist, i, sigma, kernel).map(|r| r.entropy)
}
