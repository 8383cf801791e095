//! Affinity matrices, the relative-entropy loss and its gradient.
//!
//! `P` symmetrizes the calibrated conditionals, `P_ij = (p_{j|i} + p_{i|j}) / 2n`;
//! `Q` normalizes the output kernel over ordered pairs. The loss is
//! `L(Y) = Σ_{i≠j} P_ij log(P_ij / Q_ij)` and its gradient is
//!
//! ```text
//! dL/dy_i = -c Σ_{j≠i} (P_ij - Q_ij) k'(r_ij) / k(r_ij) * (y_i - y_j) / r_ij
//! ```
//!
//! with `c = GRADIENT_SCALE = 2`: both ordered pairs `(i, j)` and `(j, i)`
//! depend on `y_i`. The constant is pinned by finite differences of the loss.

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;

use crate::calibrate::{conditional_from_distances, scaled_distances};
use crate::error::{Error, Result};
use crate::kernel::{InputKernel, OutputKernel};

/// Multiplier of the single-sum pair expression in the gradient.
pub const GRADIENT_SCALE: f64 = 2.0;

/// Symmetric, nonnegative, zero-diagonal matrix summing to one over ordered pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityMatrix {
    entries: Array2<f64>,
}

impl AffinityMatrix {
    /// Wraps a matrix after checking the invariants to `tol`.
    pub fn from_array(entries: Array2<f64>, tol: f64) -> Result<Self> {
        let m = Self { entries };
        m.check_invariants(tol)?;
        Ok(m)
    }

    pub fn n(&self) -> usize {
        self.entries.nrows()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[[i, j]]
    }

    pub fn entries(&self) -> &Array2<f64> {
        &self.entries
    }

    pub fn total(&self) -> f64 {
        self.entries.iter().sum()
    }

    pub fn check_invariants(&self, tol: f64) -> Result<()> {
        let n = self.entries.nrows();
        if self.entries.ncols() != n {
            return Err(Error::InvalidInput("affinity matrix must be square".into()));
        }
        for i in 0..n {
            if self.entries[[i, i]] != 0.0 {
                return Err(Error::InvalidInput(format!("nonzero diagonal at {i}")));
            }
            for j in 0..n {
                let v = self.entries[[i, j]];
                if !(v >= 0.0 && v.is_finite()) {
                    return Err(Error::InvalidInput(format!("entry ({i}, {j}) = {v}")));
                }
                if v != self.entries[[j, i]] {
                    return Err(Error::InvalidInput(format!("asymmetric at ({i}, {j})")));
                }
            }
        }
        let total = self.total();
        if (total - 1.0).abs() > tol {
            return Err(Error::InvalidInput(format!("entries sum to {total}, expected 1")));
        }
        Ok(())
    }

    /// `Σ_{i≠j} P_ij log P_ij`.
    pub fn neg_entropy(&self) -> f64 {
        self.entries.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum()
    }
}

fn check_coords(y: &ArrayView2<f64>) -> Result<()> {
    if y.nrows() < 2 {
        return Err(Error::InvalidInput(format!(
            "need at least 2 points, got {}",
            y.nrows()
        )));
    }
    if y.ncols() == 0 {
        return Err(Error::InvalidInput("output dimension must be >= 1".into()));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite coordinate".into()));
    }
    Ok(())
}

/// `P_ij = (p_{j|i} + p_{i|j}) / 2n` from calibrated sigmas.
pub fn joint_affinities(points: ArrayView2<f64>, sigmas: &[f64], kernel: &InputKernel) -> Result<AffinityMatrix> {
    let n = points.nrows();
    if sigmas.len() != n {
        return Err(Error::InvalidInput(format!("{} sigmas for {n} points", sigmas.len())));
    }
    check_coords(&points)?;
    if let Some(s) = sigmas.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
        return Err(Error::InvalidInput(format!("sigma must be positive, got {s}")));
    }
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| conditional_from_distances(&scaled_distances(&points, i, kernel), i, sigmas[i], kernel))
        .collect::<Result<_>>()?;
    let scale = 1.0 / (2.0 * n as f64);
    let entries = Array2::from_shape_fn(
        (n, n),
        |(i, j)| if i == j { 0.0 } else { (rows[i][j] + rows[j][i]) * scale },
    );
    Ok(AffinityMatrix { entries })
}

/// `Q_ij = k(|y_i - y_j|) / Σ_{k≠l} k(|y_k - y_l|)`, normalized in log space.
pub fn embedding_affinities(y: ArrayView2<f64>, kernel: &OutputKernel) -> Result<AffinityMatrix> {
    check_coords(&y)?;
    let n = y.nrows();
    let mut ln_k = Array2::from_elem((n, n), f64::NEG_INFINITY);
    let mut max = f64::NEG_INFINITY;
    for i in 0..n {
        for j in (i + 1)..n {
            let r2: f64 = y
                .row(i)
                .iter()
                .zip(y.row(j).iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            let v = kernel.ln_k(r2.sqrt());
            ln_k[[i, j]] = v;
            ln_k[[j, i]] = v;
            max = max.max(v);
        }
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            total += 2.0 * (ln_k[[i, j]] - max).exp();
        }
    }
    let entries = ln_k.mapv(|v| {
        if v == f64::NEG_INFINITY {
            0.0
        } else {
            (v - max).exp() / total
        }
    });
    Ok(AffinityMatrix { entries })
}

/// `Σ_{i≠j} P_ij log(P_ij / Q_ij)` with `0 log 0 = 0`.
pub fn kl_loss(p: &AffinityMatrix, q: &AffinityMatrix) -> Result<f64> {
    if p.n() != q.n() {
        return Err(Error::InvalidInput(format!("size mismatch: {} vs {}", p.n(), q.n())));
    }
    let n = p.n();
    let mut loss = 0.0;
    for i in 0..n {
        for j in 0..n {
            let pij = p.get(i, j);
            if i == j || pij == 0.0 {
                continue;
            }
            let qij = q.get(i, j);
            if qij <= 0.0 {
                return Err(Error::InfiniteLoss { i, j });
            }
            loss += pij * (pij / qij).ln();
        }
    }
    Ok(loss)
}

/// Gradient contribution of the pair `(i, j)` to `dL/dy_i`.
pub fn pair_term(p_ij: f64, q_ij: f64, y_i: &[f64], y_j: &[f64], kernel: &OutputKernel) -> Vec<f64> {
    let r = crate::kernel::squared_distance(y_i, y_j).sqrt();
    if r == 0.0 {
        return vec![0.0; y_i.len()];
    }
    let factor = -GRADIENT_SCALE * (p_ij - q_ij) * kernel.dln_k(r) / r;
    y_i.iter().zip(y_j).map(|(a, b)| factor * (a - b)).collect()
}

/// Loss and gradient of `Y ↦ L(P, Q(Y))`.
///
/// The first sweep visits each unordered pair once for `Z` and `Σ P ln k`; the
/// second accumulates gradient rows independently. Totals are summed in row
/// order, so results do not depend on the worker count.
pub struct Objective<'a> {
    p: &'a AffinityMatrix,
    kernel: &'a OutputKernel,
    dim: usize,
    neg_entropy: f64,
    p_total: f64,
}

impl<'a> Objective<'a> {
    pub fn new(p: &'a AffinityMatrix, kernel: &'a OutputKernel, dim: usize) -> Self {
        Self {
            p,
            kernel,
            dim,
            neg_entropy: p.neg_entropy(),
            p_total: p.total(),
        }
    }

    pub fn n(&self) -> usize {
        self.p.n()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `(Σ_{i<j} k_ij, Σ_{i<j} P_ij ln k_ij, max ln k)`, weights scaled by `exp(-shift)`.
    fn totals(&self, y: &[f64], shift: Option<f64>) -> (f64, f64, f64) {
        let (n, s) = (self.n(), self.dim);
        let rows: Vec<(f64, f64, f64)> = (0..n)
            .into_par_iter()
            .map(|i| {
                let yi = &y[i * s..(i + 1) * s];
                let prow = self.p.entries.row(i);
                let (mut k_sum, mut p_ln_k, mut max) = (0.0, 0.0, f64::NEG_INFINITY);
                for j in (i + 1)..n {
                    let yj = &y[j * s..(j + 1) * s];
                    let r2: f64 = yi.iter().zip(yj).map(|(a, b)| (a - b) * (a - b)).sum();
                    let t = self.kernel.pair_terms(r2);
                    k_sum += match shift {
                        Some(m) => (t.ln_k - m).exp(),
                        None => t.k,
                    };
                    p_ln_k += prow[j] * t.ln_k;
                    max = f64::max(max, t.ln_k);
                }
                (k_sum, p_ln_k, max)
            })
            .collect();
        rows.iter().fold((0.0, 0.0, f64::NEG_INFINITY), |acc, r| {
            (acc.0 + r.0, acc.1 + r.1, acc.2.max(r.2))
        })
    }

    /// Writes `dL/dy` given the ordered-pair normalizer `z` of the (shifted) weights.
    fn sweep_gradient(&self, y: &[f64], grad: &mut [f64], alpha: f64, z: f64, shift: Option<f64>) {
        let (n, s) = (self.n(), self.dim);
        grad.par_chunks_mut(s).enumerate().for_each(|(i, gi)| {
            gi.iter_mut().for_each(|v| *v = 0.0);
            let yi = &y[i * s..(i + 1) * s];
            let prow = self.p.entries.row(i);
            for j in 0..n {
                if j == i {
                    continue;
                }
                let yj = &y[j * s..(j + 1) * s];
                let r2: f64 = yi.iter().zip(yj).map(|(a, b)| (a - b) * (a - b)).sum();
                let (k, d) = match shift {
                    Some(m) => {
                        let t = self.kernel.pair_terms(r2);
                        ((t.ln_k - m).exp(), t.dln_k_over_r)
                    }
                    None => self.kernel.pair_weights(r2),
                };
                let coef = (alpha * prow[j] - k / z) * d;
                for ((g, u), v) in gi.iter_mut().zip(yi).zip(yj) {
                    *g += coef * (u - v);
                }
            }
            gi.iter_mut().for_each(|g| *g *= -GRADIENT_SCALE);
        });
    }

    fn normalizer(&self, y: &[f64]) -> (f64, f64, Option<f64>) {
        let (k_sum, p_ln_k, max) = self.totals(y, None);
        if k_sum > 1e-250 {
            return (2.0 * k_sum, 2.0 * p_ln_k, None);
        }
        // Every pair weight is tiny: work relative to the largest log weight.
        let (k_sum, p_ln_k, _) = self.totals(y, Some(max));
        (2.0 * k_sum, 2.0 * p_ln_k, Some(max))
    }

    /// Loss at `y` (row-major `n × dim`).
    pub fn loss(&self, y: &[f64]) -> f64 {
        assert_eq!(y.len(), self.n() * self.dim);
        let (z, p_ln_k, shift) = self.normalizer(y);
        self.neg_entropy - p_ln_k + self.p_total * (shift.unwrap_or(0.0) + z.ln())
    }

    /// Loss at `y`; writes `dL/dy` into `grad`. `exaggeration` scales `P` in the
    /// gradient only (1.0 for the plain objective).
    pub fn evaluate(&self, y: &[f64], grad: &mut [f64], exaggeration: f64) -> f64 {
        assert_eq!(y.len(), self.n() * self.dim);
        assert_eq!(grad.len(), y.len());
        let (z, p_ln_k, shift) = self.normalizer(y);
        self.sweep_gradient(y, grad, exaggeration, z, shift);
        self.neg_entropy - p_ln_k + self.p_total * (shift.unwrap_or(0.0) + z.ln())
    }
}

/// Analytic gradient of the loss with respect to `Y`.
pub fn gradient(p: &AffinityMatrix, y: ArrayView2<f64>, kernel: &OutputKernel) -> Result<Array2<f64>> {
    loss_and_gradient(p, y, kernel).map(|(_, g)| g)
}

/// Loss and gradient at `Y` in one pass.
pub fn loss_and_gradient(p: &AffinityMatrix, y: ArrayView2<f64>, kernel: &OutputKernel) -> Result<(f64, Array2<f64>)> {
    check_coords(&y)?;
    if y.nrows() != p.n() {
        return Err(Error::InvalidInput(format!(
            "embedding has {} rows, P has {}",
            y.nrows(),
            p.n()
        )));
    }
    let flat: Vec<f64> = y.iter().copied().collect();
    let mut grad = vec![0.0; flat.len()];
    let obj = Objective::new(p, kernel, y.ncols());
    let loss = obj.evaluate(&flat, &mut grad, 1.0);
    let g = Array2::from_shape_vec((y.nrows(), y.ncols()), grad).expect("shape");
    Ok((loss, g))
}

/// Loss of `Y` computed in log space (no underflow of `Q`).
pub fn embedding_loss(p: &AffinityMatrix, y: ArrayView2<f64>, kernel: &OutputKernel) -> Result<f64> {
    check_coords(&y)?;
    if y.nrows() != p.n() {
        return Err(Error::InvalidInput(format!(
            "embedding has {} rows, P has {}",
            y.nrows(),
            p.n()
        )));
    }
    let flat: Vec<f64> = y.iter().copied().collect();
    Ok(Objective::new(p, kernel, y.ncols()).loss(&flat))
}
