//! Continuum counterparts of the discrete objects: the entropy functional `F`,
//! the bandwidth field `sigma*`, the symmetric mass `p_psi`, the output
//! density `q`, the functional `I` and the stationarity residual.
//!
//! Integrals against a [`ContinuumMeasure`] use its quadrature rule. Integrals
//! against an empirical measure `(1/n) Σ δ_{X_i}` are plain averages that
//! include the point itself, except where a diagonal correction is named.

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::Serialize;
use statrs::function::gamma::gamma;

use crate::affinity::{joint_affinities, AffinityMatrix, Objective, GRADIENT_SCALE};
use crate::calibrate::{calibrate_all, entropy_from_distances, scaled_distances, target_perplexity, DEFAULT_TOL};
use crate::error::{Error, Result};
use crate::kernel::{squared_distance, InputKernel, OutputKernel};
use crate::measure::ContinuumMeasure;
use crate::quadrature::{integrate_half_line, TailStatus};

/// The kernel must spread over at least this many quadrature nodes (effective
/// count `(Σa)^2 / Σa^2` of the node masses) for `F` to be trusted.
pub const MIN_RESOLVED_NODES: f64 = 4.0;
const MAX_EXPANSIONS: usize = 40;
const MAX_BISECTIONS: usize = 200;

fn check_rho(rho: f64) -> Result<()> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::InvalidInput(format!("rho must lie in (0, 1), got {rho}")));
    }
    Ok(())
}

fn check_point(measure: &ContinuumMeasure, x: &[f64]) -> Result<()> {
    if x.len() != measure.dim() {
        return Err(Error::InvalidInput(format!(
            "point has dimension {}, measure has {}",
            x.len(),
            measure.dim()
        )));
    }
    let (lo, hi) = measure.bounding_box();
    if x.iter().zip(lo.iter().zip(&hi)).any(|(v, (a, b))| !(v >= a && v <= b)) {
        return Err(Error::InvalidInput(format!(
            "point {x:?} lies outside the box {lo:?}..{hi:?}"
        )));
    }
    Ok(())
}

/// `|x - node|^theta` for every quadrature node.
fn node_distances(measure: &ContinuumMeasure, kernel: &InputKernel, x: &[f64]) -> Vec<f64> {
    measure
        .nodes()
        .rows()
        .into_iter()
        .map(|row| kernel.scaled_distance(squared_distance(x, row.as_slice().expect("contiguous"))))
        .collect()
}

#[derive(Debug, Clone, Copy)]
struct KernelMass {
    /// `log ∫ K(x, ·, sigma) dμ`
    ln_z: f64,
    /// `∫ w K dμ / ∫ K dμ`
    mean_w: f64,
}

fn kernel_mass(measure: &ContinuumMeasure, kernel: &InputKernel, dist: &[f64], sigma: f64) -> Result<KernelMass> {
    let u: Vec<f64> = dist
        .iter()
        .map(|&t| if t == 0.0 { 0.0 } else { kernel.w(sigma * t) })
        .collect();
    let u_min = u.iter().copied().fold(f64::INFINITY, f64::min);
    if !u_min.is_finite() {
        return Err(Error::Evaluation(format!(
            "kernel exponent is not finite at sigma = {sigma}"
        )));
    }
    let (mut s, mut s2, mut su) = (0.0, 0.0, 0.0);
    for (&w, &uk) in measure.weights().iter().zip(&u) {
        let a = w * (u_min - uk).exp();
        s += a;
        s2 += a * a;
        su += a * uk;
    }
    if !(s > 0.0) || s * s < MIN_RESOLVED_NODES * s2 {
        return Err(Error::Evaluation(format!(
            "sigma = {sigma} is beyond what the {}-node grid resolves",
            measure.nodes_per_axis()
        )));
    }
    Ok(KernelMass {
        ln_z: -u_min + s.ln(),
        mean_w: su / s,
    })
}

/// `F(x, sigma) = -∫ w K dμ / Z - log Z + log rho` with `Z = ∫ K(x, ·, sigma) dμ`.
pub fn big_f(measure: &ContinuumMeasure, kernel: &InputKernel, rho: f64, x: &[f64], sigma: f64) -> Result<f64> {
    check_rho(rho)?;
    check_point(measure, x)?;
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::InvalidInput(format!("sigma must be positive, got {sigma}")));
    }
    let m = kernel_mass(measure, kernel, &node_distances(measure, kernel, x), sigma)?;
    Ok(-m.mean_w - m.ln_z + rho.ln())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SigmaStar {
    pub sigma: f64,
    /// `F` at `sigma`.
    pub residual: f64,
    pub iterations: usize,
}

fn solve_from_distances(
    measure: &ContinuumMeasure,
    kernel: &InputKernel,
    rho: f64,
    dist: &[f64],
    tol: f64,
) -> Result<SigmaStar> {
    let ln_rho = rho.ln();
    let f = |sigma: f64| -> Result<f64> {
        let m = kernel_mass(measure, kernel, dist, sigma)?;
        Ok(-m.mean_w - m.ln_z + ln_rho)
    };
    let (mut lo, mut hi) = (1.0f64, 1.0f64);
    let mut f_lo = f(lo)?;
    let mut f_hi = f_lo;
    let mut expansions = 0;
    while f_lo > 0.0 {
        if expansions == MAX_EXPANSIONS {
            return Err(Error::Resolution(format!("F stays positive down to sigma = {lo}")));
        }
        hi = lo;
        f_hi = f_lo;
        lo /= 10.0;
        f_lo = f(lo)?;
        expansions += 1;
    }
    while f_hi < 0.0 {
        if expansions == MAX_EXPANSIONS {
            return Err(Error::Resolution(format!("F stays negative up to sigma = {hi}")));
        }
        lo = hi;
        f_lo = f_hi;
        hi *= 10.0;
        f_hi = f(hi)?;
        expansions += 1;
    }
    if f_lo.abs() <= tol {
        return Ok(SigmaStar {
            sigma: lo,
            residual: f_lo,
            iterations: 0,
        });
    }
    if f_hi.abs() <= tol {
        return Ok(SigmaStar {
            sigma: hi,
            residual: f_hi,
            iterations: 0,
        });
    }
    for it in 1..=MAX_BISECTIONS {
        let mid = (lo * hi).sqrt();
        let fm = f(mid)?;
        if fm.abs() <= tol {
            return Ok(SigmaStar {
                sigma: mid,
                residual: fm,
                iterations: it,
            });
        }
        if fm < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if mid <= lo.min(hi) && mid >= lo.max(hi) {
            break;
        }
    }
    Err(Error::Resolution(format!(
        "bisection did not reach |F| <= {tol} in [{lo}, {hi}]"
    )))
}

/// Root of `sigma ↦ F(x, sigma)` by bisection in `log sigma`.
pub fn sigma_star(
    measure: &ContinuumMeasure,
    kernel: &InputKernel,
    rho: f64,
    x: &[f64],
    tol: f64,
) -> Result<SigmaStar> {
    check_rho(rho)?;
    check_point(measure, x)?;
    solve_from_distances(measure, kernel, rho, &node_distances(measure, kernel, x), tol)
}

/// `sigma*` and the kernel normalizer at each row of `points`.
#[derive(Debug, Clone)]
pub struct SigmaField {
    pub roots: Vec<SigmaStar>,
    /// `log ∫ K(x_i, ·, sigma*(x_i)) dμ`
    pub ln_norms: Vec<f64>,
}

impl SigmaField {
    pub fn sigmas(&self) -> Vec<f64> {
        self.roots.iter().map(|r| r.sigma).collect()
    }
}

pub fn sigma_star_field(
    measure: &ContinuumMeasure,
    kernel: &InputKernel,
    rho: f64,
    points: ArrayView2<f64>,
    tol: f64,
) -> Result<SigmaField> {
    check_rho(rho)?;
    let rows: Vec<(SigmaStar, f64)> = (0..points.nrows())
        .into_par_iter()
        .map(|i| {
            let x = points.row(i).to_vec();
            check_point(measure, &x)?;
            let dist = node_distances(measure, kernel, &x);
            let root = solve_from_distances(measure, kernel, rho, &dist, tol)?;
            let mass = kernel_mass(measure, kernel, &dist, root.sigma)?;
            Ok((root, mass.ln_z))
        })
        .collect::<Result<_>>()?;
    let (roots, ln_norms) = rows.into_iter().unzip();
    Ok(SigmaField { roots, ln_norms })
}

/// `F(x, sigma)` for each sigma, sharing the node distances.
pub fn big_f_curve(
    measure: &ContinuumMeasure,
    kernel: &InputKernel,
    rho: f64,
    x: &[f64],
    sigmas: &[f64],
) -> Result<Vec<f64>> {
    check_rho(rho)?;
    check_point(measure, x)?;
    let dist = node_distances(measure, kernel, x);
    sigmas
        .iter()
        .map(|&sigma| {
            if !(sigma.is_finite() && sigma > 0.0) {
                return Err(Error::InvalidInput(format!("sigma must be positive, got {sigma}")));
            }
            let m = kernel_mass(measure, kernel, &dist, sigma)?;
            Ok(-m.mean_w - m.ln_z + rho.ln())
        })
        .collect()
}

/// `p(X_i, X_j)` with the bandwidths and normalizers of a continuum field.
pub fn field_p(points: ArrayView2<f64>, field: &SigmaField, kernel: &InputKernel) -> Result<Array2<f64>> {
    let n = points.nrows();
    if field.roots.len() != n {
        return Err(Error::InvalidInput(format!(
            "field has {} roots for {n} points",
            field.roots.len()
        )));
    }
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let sigma = field.roots[i].sigma;
            scaled_distances(&points, i, kernel)
                .into_iter()
                .map(|t| {
                    let u = if t == 0.0 { 0.0 } else { kernel.w(sigma * t) };
                    (-u - field.ln_norms[i]).exp()
                })
                .collect()
        })
        .collect();
    Ok(Array2::from_shape_fn((n, n), |(i, j)| 0.5 * (rows[i][j] + rows[j][i])))
}

/// `K(x, x', sigma) / ∫ K(x, ·, sigma) dμ`.
pub fn conditional_density(
    measure: &ContinuumMeasure,
    kernel: &InputKernel,
    x: &[f64],
    x_prime: &[f64],
    sigma: f64,
) -> Result<f64> {
    check_point(measure, x)?;
    check_point(measure, x_prime)?;
    let m = kernel_mass(measure, kernel, &node_distances(measure, kernel, x), sigma)?;
    Ok((-kernel.exponent(sigma, squared_distance(x, x_prime)) - m.ln_z).exp())
}

/// `p_psi(x, x') = (K(x,x',psi(x)) / ∫K(x,·,psi(x))dμ + K(x,x',psi(x')) / ∫K(x',·,psi(x'))dμ) / 2`.
pub fn p_psi<P>(measure: &ContinuumMeasure, kernel: &InputKernel, psi: P, x: &[f64], x_prime: &[f64]) -> Result<f64>
where
    P: Fn(&[f64]) -> Result<f64>,
{
    let a = conditional_density(measure, kernel, x, x_prime, psi(x)?)?;
    let b = conditional_density(measure, kernel, x_prime, x, psi(x_prime)?)?;
    Ok(0.5 * (a + b))
}

/// Paired input and output points `(X_i, Y_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointSample {
    pub x: Array2<f64>,
    pub y: Array2<f64>,
}

impl JointSample {
    pub fn new(x: Array2<f64>, y: Array2<f64>) -> Result<Self> {
        if x.nrows() != y.nrows() {
            return Err(Error::InvalidInput(format!(
                "{} inputs but {} outputs",
                x.nrows(),
                y.nrows()
            )));
        }
        if x.nrows() == 0 || x.ncols() == 0 || y.ncols() == 0 {
            return Err(Error::InvalidInput("joint sample must be nonempty".into()));
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite coordinate".into()));
        }
        Ok(Self { x, y })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }
}

/// `(1/n^2) Σ_{i≠j} g(Y_i, Y_j)`: the empirical double mean of `g` with the
/// self pairs `(1/n) k(0)` removed.
pub fn output_normalizer(sample: &JointSample, kernel: &OutputKernel) -> Result<f64> {
    let n = sample.n();
    if n < 2 {
        return Err(Error::InvalidInput(format!("need at least 2 points, got {n}")));
    }
    let rows: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let yi = sample.y.row(i);
            ((i + 1)..n)
                .map(|j| kernel.k(squared_distance(yi.as_slice().unwrap(), sample.y.row(j).as_slice().unwrap()).sqrt()))
                .sum::<f64>()
        })
        .collect();
    let total: f64 = rows.iter().sum();
    Ok(2.0 * total / (n * n) as f64)
}

/// `q_n(y, y') = g(y, y') / [(1/n^2) Σ_{i,j} g(Y_i, Y_j) - k(0)/n]`.
pub fn q_continuous(sample: &JointSample, kernel: &OutputKernel, y: &[f64], y_prime: &[f64]) -> Result<f64> {
    if y.len() != sample.y.ncols() || y_prime.len() != sample.y.ncols() {
        return Err(Error::InvalidInput("output point dimension mismatch".into()));
    }
    Ok(kernel.k(squared_distance(y, y_prime).sqrt()) / output_normalizer(sample, kernel)?)
}

/// `(1/n^2) Σ_{i≠j} p_ij log(p_ij / q_ij)` over densities `p`, `q` on sample pairs.
pub fn pairwise_relative_entropy(p: &Array2<f64>, q: &Array2<f64>) -> Result<f64> {
    let n = p.nrows();
    if p.dim() != (n, n) || q.dim() != (n, n) {
        return Err(Error::InvalidInput(
            "pair matrices must be square and of equal size".into(),
        ));
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            let (pij, qij) = (p[[i, j]], q[[i, j]]);
            if i == j || pij == 0.0 {
                continue;
            }
            if !(qij > 0.0) {
                return Err(Error::InfiniteLoss { i, j });
            }
            total += pij * (pij / qij).ln();
        }
    }
    Ok(total / (n * n) as f64)
}

/// `p_psi(X_i, X_j)` on the empirical input measure with `psi(X_i) = sigmas[i]`.
///
/// The normalizer `∫K(X_i, ·) dμ_n = (1 + Σ_{j≠i} K_ij) / n` includes the
/// point's own mass; this is what separates `I` from the discrete loss at
/// finite `n`.
pub fn empirical_p(points: ArrayView2<f64>, sigmas: &[f64], kernel: &InputKernel) -> Result<Array2<f64>> {
    let n = points.nrows();
    if sigmas.len() != n {
        return Err(Error::InvalidInput(format!("{} sigmas for {n} points", sigmas.len())));
    }
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let dist = scaled_distances(&points, i, kernel);
            let k: Vec<f64> = dist
                .iter()
                .enumerate()
                .map(|(j, &t)| if j == i { 1.0 } else { (-kernel.w(sigmas[i] * t)).exp() })
                .collect();
            let mass: f64 = k.iter().sum::<f64>() / n as f64;
            k.into_iter().map(|v| v / mass).collect()
        })
        .collect();
    Ok(Array2::from_shape_fn((n, n), |(i, j)| 0.5 * (rows[i][j] + rows[j][i])))
}

/// `I(μ_n)` on a joint sample, with `sigma*` from discrete calibration.
pub fn functional_i(sample: &JointSample, kernel_in: &InputKernel, kernel_out: &OutputKernel, rho: f64) -> Result<f64> {
    let cal = calibrate_all(sample.x.view(), kernel_in, rho, DEFAULT_TOL)?;
    functional_i_with_sigmas(sample, &cal.sigmas, kernel_in, kernel_out)
}

pub fn functional_i_with_sigmas(
    sample: &JointSample,
    sigmas: &[f64],
    kernel_in: &InputKernel,
    kernel_out: &OutputKernel,
) -> Result<f64> {
    let n = sample.n();
    let p = empirical_p(sample.x.view(), sigmas, kernel_in)?;
    let norm = output_normalizer(sample, kernel_out)?;
    let y = &sample.y;
    let q = Array2::from_shape_fn((n, n), |(i, j)| {
        kernel_out.k(squared_distance(y.row(i).as_slice().unwrap(), y.row(j).as_slice().unwrap()).sqrt()) / norm
    });
    pairwise_relative_entropy(&p, &q)
}

/// Symmetrized discrete affinities, with the forced `P = 1/2` at `n = 2`.
pub fn discrete_affinities(points: ArrayView2<f64>, kernel: &InputKernel, rho: f64) -> Result<AffinityMatrix> {
    if points.nrows() == 2 {
        return AffinityMatrix::from_array(ndarray::array![[0.0, 0.5], [0.5, 0.0]], 0.0);
    }
    let cal = calibrate_all(points, kernel, rho, DEFAULT_TOL)?;
    joint_affinities(points, &cal.sigmas, kernel)
}

/// `r_i = |(1/n) Σ_{j≠i} (p_n - q_n)(X_i, X_j) k'(r_ij) (Y_i - Y_j) / (r_ij g)|`.
pub fn stationarity_residual(
    sample: &JointSample,
    kernel_in: &InputKernel,
    kernel_out: &OutputKernel,
    rho: f64,
) -> Result<Vec<f64>> {
    let p = discrete_affinities(sample.x.view(), kernel_in, rho)?;
    stationarity_from_affinities(&p, sample.y.view(), kernel_out)
}

/// Stationarity residual for given `P`; `p_n = n^2 P` and `q_n = n^2 Q`.
pub fn stationarity_from_affinities(
    p: &AffinityMatrix,
    y: ArrayView2<f64>,
    kernel_out: &OutputKernel,
) -> Result<Vec<f64>> {
    let (n, s) = y.dim();
    if n != p.n() {
        return Err(Error::InvalidInput(format!("embedding has {n} rows, P has {}", p.n())));
    }
    let flat: Vec<f64> = y.iter().copied().collect();
    let mut grad = vec![0.0; n * s];
    Objective::new(p, kernel_out, s).evaluate(&flat, &mut grad, 1.0);
    let scale = n as f64 / GRADIENT_SCALE;
    Ok(grad
        .chunks(s)
        .map(|g| scale * g.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect())
}

/// `F` of the empirical measure at `X_i`: `log(n rho) - H(p_{·|i})`.
pub fn empirical_big_f(points: ArrayView2<f64>, i: usize, kernel: &InputKernel, rho: f64, sigma: f64) -> Result<f64> {
    let n = points.nrows();
    let dist = scaled_distances(&points, i, kernel);
    Ok((n as f64 * rho).ln() - entropy_from_distances(&dist, i, sigma, kernel)?)
}

/// Sum with Neumaier compensation.
fn compensated_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        comp += if sum.abs() >= v.abs() {
            (sum - t) + v
        } else {
            (v - t) + sum
        };
        sum = t;
    }
    sum + comp
}

/// `a b - c d` with one rounding error.
fn difference_of_products(a: f64, b: f64, c: f64, d: f64) -> f64 {
    let cd = c * d;
    let err = (-c).mul_add(d, cd);
    a.mul_add(b, -cd) + err
}

/// `(Σ w f)(Σ w h g) - (Σ w h)(Σ w f g)`, nonnegative whenever `g` and `f/h`
/// are oppositely ordered on every pair of points.
pub fn chebyshev_gap(f: &[f64], g: &[f64], h: &[f64], w: &[f64]) -> Result<f64> {
    let m = f.len();
    if m == 0 || g.len() != m || h.len() != m || w.len() != m {
        return Err(Error::InvalidInput(
            "f, g, h and weights must be nonempty and of equal length".into(),
        ));
    }
    if f.iter().chain(h).any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(Error::InvalidInput("f and h must be positive".into()));
    }
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("g must be finite".into()));
    }
    if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidInput("weights must be a probability vector".into()));
    }
    let ratio: Vec<f64> = f.iter().zip(h).map(|(a, b)| a / b).collect();
    for x in 0..m {
        for y in (x + 1)..m {
            let dg = g[x] - g[y];
            let dr = ratio[y] - ratio[x];
            let scale = dg.abs() * (ratio[x].abs() + ratio[y].abs());
            if dg * dr < -1e-12 * scale {
                return Err(Error::Precondition(format!(
                    "compatibility fails at pair ({x}, {y}): (g(x)-g(y))(f(y)/h(y)-f(x)/h(x)) = {}",
                    dg * dr
                )));
            }
        }
    }
    let wf = compensated_sum((0..m).map(|k| w[k] * f[k]));
    let whg = compensated_sum((0..m).map(|k| w[k] * h[k] * g[k]));
    let wh = compensated_sum((0..m).map(|k| w[k] * h[k]));
    let wfg = compensated_sum((0..m).map(|k| w[k] * f[k] * g[k]));
    Ok(difference_of_products(wf, whg, wh, wfg))
}

/// Surface area of the unit sphere in `R^d`: `2 pi^{d/2} / Gamma(d/2)`.
pub fn sphere_area(d: usize) -> f64 {
    2.0 * std::f64::consts::PI.powf(0.5 * d as f64) / gamma(0.5 * d as f64)
}

/// `Z_d = ∫_{R^d} exp(-w(|t|^theta)) dt = S_{d-1} ∫_0^∞ r^{d-1} exp(-w(r^theta)) dr`.
pub fn normalization_zd(kernel: &InputKernel, d: usize) -> Result<f64> {
    if d == 0 {
        return Err(Error::InvalidInput("dimension must be >= 1".into()));
    }
    let theta = kernel.theta();
    let radial = integrate_half_line(
        |r: f64| {
            let t = if r == 0.0 { 0.0 } else { r.powf(theta) };
            r.powi(d as i32 - 1) * (-kernel.w(t)).exp()
        },
        1e16,
        1e-13,
    );
    if radial.status != TailStatus::Converged {
        return Err(Error::InvalidKernel(format!(
            "{}: radial integral for Z_{d} is {:?}",
            kernel.id(),
            radial.status
        )));
    }
    Ok(sphere_area(d) * radial.value)
}

/// Feasibility check shared with calibration, exposed for study configs.
pub fn check_feasible(n: usize, rho: f64) -> Result<()> {
    target_perplexity(n, rho).map(|_| ())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::MeasureSpec;
    use ndarray::array;
    use statrs::function::erf::erf;

    fn unit() -> ContinuumMeasure {
        MeasureSpec::uniform(&[0.0], &[1.0]).build().unwrap()
    }

    // Closed forms for uniform [0,1], w(t) = t, theta = 2.
    fn z_exact(x: f64, sigma: f64) -> f64 {
        let c = (std::f64::consts::PI / sigma).sqrt() / 2.0;
        c * (erf(sigma.sqrt() * (1.0 - x)) + erf(sigma.sqrt() * x))
    }

    fn f_exact(x: f64, sigma: f64, rho: f64) -> f64 {
        // ∫ σu² e^{-σu²} over [-x, 1-x] = (Z - (1-x) e^{-σ(1-x)²} - x e^{-σx²}) / 2
        let z = z_exact(x, sigma);
        let edge = (1.0 - x) * (-sigma * (1.0 - x) * (1.0 - x)).exp() + x * (-sigma * x * x).exp();
        -(0.5 * (z - edge)) / z - z.ln() + rho.ln()
    }

    fn sigma_exact(x: f64, rho: f64) -> f64 {
        let (mut lo, mut hi) = (1e-3f64, 1e4f64);
        for _ in 0..200 {
            let mid = (lo * hi).sqrt();
            if f_exact(x, mid, rho) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        (lo * hi).sqrt()
    }

    fn trapezoid_f(x: f64, sigma: f64, rho: f64, m: usize) -> f64 {
        let h = 1.0 / (m - 1) as f64;
        let (mut z, mut a) = (0.0, 0.0);
        for k in 0..m {
            let t = k as f64 * h;
            let c = if k == 0 || k == m - 1 { 0.5 * h } else { h };
            let u = sigma * (t - x) * (t - x);
            z += c * (-u).exp();
            a += c * u * (-u).exp();
        }
        -a / z - z.ln() + rho.ln()
    }

    #[test]
    fn big_f_matches_refined_and_closed_form() {
        let k = InputKernel::gaussian();
        let v = big_f(&unit(), &k, 0.3, &[0.5], 10.0).unwrap();
        let refined = trapezoid_f(0.5, 10.0, 0.3, 4 * 2047 + 1);
        assert!((v - refined).abs() < 1e-6, "{v} vs {refined}");
        assert!((v - f_exact(0.5, 10.0, 0.3)).abs() < 1e-6);
        let tiny = big_f(&unit(), &k, 0.3, &[0.2], 1e-12).unwrap();
        assert!((tiny - 0.3f64.ln()).abs() < 1e-10);
        let vals: Vec<f64> = [1.0, 5.0, 25.0]
            .iter()
            .map(|&s| big_f(&unit(), &k, 0.3, &[0.5], s).unwrap())
            .collect();
        assert!(vals[0] < vals[1] && vals[1] < vals[2]);
    }

    #[test]
    fn big_f_rejects_unresolved_sigma_and_outside_points() {
        let k = InputKernel::gaussian();
        let coarse = MeasureSpec::uniform(&[0.0], &[1.0]).with_nodes(11).build().unwrap();
        assert!(matches!(
            big_f(&coarse, &k, 0.3, &[0.5], 1e6),
            Err(Error::Evaluation(_))
        ));
        assert!(matches!(
            big_f(&unit(), &k, 0.3, &[1.5], 1.0),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn sigma_star_matches_oracle() {
        let k = InputKernel::gaussian();
        let m = unit();
        let root = sigma_star(&m, &k, 0.3, &[0.5], 1e-10).unwrap();
        assert!(root.residual.abs() <= 1e-10);
        let exact = sigma_exact(0.5, 0.3);
        assert!((root.sigma / exact - 1.0).abs() < 1e-5, "{} vs {exact}", root.sigma);
        let a = sigma_star(&m, &k, 0.3, &[0.25], 1e-12).unwrap().sigma;
        let b = sigma_star(&m, &k, 0.3, &[0.75], 1e-12).unwrap().sigma;
        assert!((a / b - 1.0).abs() < 1e-9);
        let smaller_rho = sigma_star(&m, &k, 0.2, &[0.5], 1e-10).unwrap().sigma;
        assert!(smaller_rho >= root.sigma);
    }

    #[test]
    fn p_psi_properties() {
        let k = InputKernel::gaussian();
        let m = unit();
        let field = |x: &[f64]| sigma_star(&m, &k, 0.3, x, 1e-10).map(|r| r.sigma);
        let s = field(&[0.4]).unwrap();
        let diag = p_psi(&m, &k, field, &[0.4], &[0.4]).unwrap();
        assert!((diag - 1.0 / z_exact(0.4, s)).abs() < 1e-5);
        let ab = p_psi(&m, &k, field, &[0.2], &[0.7]).unwrap();
        let ba = p_psi(&m, &k, field, &[0.7], &[0.2]).unwrap();
        assert_eq!(ab, ba);
        let (s1, s2) = (sigma_exact(0.2, 0.3), sigma_exact(0.7, 0.3));
        let oracle = 0.5 * ((-s1 * 0.25).exp() / z_exact(0.2, s1) + (-s2 * 0.25).exp() / z_exact(0.7, s2));
        // exp(-sigma d^2) magnifies the relative error of sigma by sigma d^2 (about 20 here).
        assert!((ab / oracle - 1.0).abs() < 1e-4, "{ab} vs {oracle}");
        let fine = m.refined(4).unwrap();
        let fine_field = |x: &[f64]| sigma_star(&fine, &k, 0.3, x, 1e-12).map(|r| r.sigma);
        let refined = p_psi(&fine, &k, fine_field, &[0.2], &[0.7]).unwrap();
        assert!((refined / oracle - 1.0).abs() < 1e-5, "{refined} vs {oracle}");
    }

    #[test]
    fn q_continuous_examples() {
        let k = OutputKernel::student();
        let coincident = JointSample::new(array![[0.0], [1.0]], array![[2.0], [2.0]]).unwrap();
        assert_eq!(q_continuous(&coincident, &k, &[2.0], &[2.0]).unwrap(), 2.0);
        let line = JointSample::new(array![[0.0], [1.0], [2.0]], array![[0.0], [1.0], [3.0]]).unwrap();
        let shifted = JointSample::new(line.x.clone(), line.y.mapv(|v| v + 7.5)).unwrap();
        // (1/9) * 2 * (1/2 + 1/10 + 1/5) = 1.6 / 9
        let q01 = q_continuous(&line, &k, &[0.0], &[1.0]).unwrap();
        assert!((q01 - 0.5 / (1.6 / 9.0)).abs() < 1e-14);
        assert!((q01 - 9.0 * 0.3125).abs() < 1e-14);
        assert!((q_continuous(&shifted, &k, &[7.5], &[8.5]).unwrap() - q01).abs() < 1e-14);
    }

    #[test]
    fn functional_i_on_three_points() {
        let kin = InputKernel::gaussian();
        let kout = OutputKernel::student();
        let x = array![[0.0], [1.0], [3.0]];
        let y = array![[0.0], [0.5], [2.0]];
        let sample = JointSample::new(x.clone(), y.clone()).unwrap();
        let cal = calibrate_all(x.view(), &kin, 0.5, DEFAULT_TOL).unwrap();
        let got = functional_i_with_sigmas(&sample, &cal.sigmas, &kin, &kout).unwrap();
        assert_eq!(functional_i(&sample, &kin, &kout, 0.5).unwrap(), got);

        let pts = [0.0f64, 1.0, 3.0];
        let ys = [0.0f64, 0.5, 2.0];
        let kk = |i: usize, j: usize| (-cal.sigmas[i] * (pts[i] - pts[j]).powi(2)).exp();
        let mass = |i: usize| (kk(i, 0) + kk(i, 1) + kk(i, 2)) / 3.0;
        let g = |i: usize, j: usize| 1.0 / (1.0 + (ys[i] - ys[j]).powi(2));
        let norm = 2.0 * (g(0, 1) + g(0, 2) + g(1, 2)) / 9.0;
        let mut oracle = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    let p = 0.5 * (kk(i, j) / mass(i) + kk(j, i) / mass(j));
                    oracle += p * (p / (g(i, j) / norm)).ln() / 9.0;
                }
            }
        }
        assert!((got - oracle).abs() < 1e-13, "{got} vs {oracle}");
        let m = Array2::from_elem((3, 3), 0.7);
        assert_eq!(pairwise_relative_entropy(&m, &m).unwrap(), 0.0);
    }

    #[test]
    fn stationarity_residual_cases() {
        let kin = InputKernel::gaussian();
        let kout = OutputKernel::student();
        let two = JointSample::new(array![[0.0], [1.0]], array![[0.3], [-2.0]]).unwrap();
        assert_eq!(stationarity_residual(&two, &kin, &kout, 0.3).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn chebyshev_gap_cases() {
        let w = [0.25; 4];
        let f = [1.0, 2.0, 3.0, 4.0];
        let g = [4.0, 3.0, 2.0, 1.0];
        assert_eq!(chebyshev_gap(&f, &g, &f, &w).unwrap(), 0.0);
        assert_eq!(chebyshev_gap(&f, &[2.0; 4], &[1.0; 4], &w).unwrap(), 0.0);
        let h = [1.0; 4];
        let gap = chebyshev_gap(&f, &g, &h, &w).unwrap();
        // (Σwf)(Σwg) - Σwfg = 2.5 * 2.5 - 5
        assert!((gap - 1.25).abs() < 1e-15);
        let err = chebyshev_gap(&f, &f, &h, &w).unwrap_err();
        assert!(
            matches!(err, Error::Precondition(ref m) if m.contains("(0, 1)")),
            "{err}"
        );
    }

    #[test]
    fn zd_constants() {
        let gauss = InputKernel::gaussian();
        assert!((normalization_zd(&gauss, 1).unwrap() - std::f64::consts::PI.sqrt()).abs() < 1e-8);
        assert!((normalization_zd(&gauss, 2).unwrap() - std::f64::consts::PI).abs() < 1e-8);
        let laplace = InputKernel::power(1.0, 1.0).unwrap();
        assert!((normalization_zd(&laplace, 1).unwrap() - 2.0).abs() < 1e-8);
        // Z_3 of the Gaussian form is pi^{3/2}.
        assert!((normalization_zd(&gauss, 3).unwrap() - std::f64::consts::PI.powf(1.5)).abs() < 1e-8);
        let heavy = InputKernel::log_poly(1.0, 1.0).unwrap();
        assert!(matches!(normalization_zd(&heavy, 1), Err(Error::InvalidKernel(_))));
    }
}
