//! Gradient descent with momentum on the embedding loss.

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::affinity::{joint_affinities, AffinityMatrix, Objective};
use crate::calibrate::{calibrate_all, DEFAULT_TOL};
use crate::error::{Error, Result};
use crate::kernel::{InputKernel, OutputKernel};

/// Default step size per point: `learning_rate = AUTO_LR_PER_POINT * n`.
pub const AUTO_LR_PER_POINT: f64 = 1.0;

/// Opt-in early exaggeration: `P` is multiplied by `factor` in the gradient
/// for the first `iterations` steps. Off by default.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Exaggeration {
    pub factor: f64,
    pub iterations: usize,
}

/// Starting embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Init {
    /// Seeded centered Gaussian coordinates.
    #[default]
    Random,
    /// Input points projected on their leading principal axes. Avoids the
    /// folded local minima that random starts fall into for `s = 1`.
    Principal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct OptimizerConfig {
    pub iterations: usize,
    /// `None` selects `AUTO_LR_PER_POINT * n`.
    pub learning_rate: Option<f64>,
    pub momentum: f64,
    pub seed: u64,
    pub init_scale: f64,
    pub init: Init,
    /// Stop once the largest gradient row norm drops below this.
    pub stop_tol: f64,
    pub exaggeration: Option<Exaggeration>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            learning_rate: None,
            momentum: 0.5,
            seed: 0,
            init_scale: 1e-2,
            init: Init::Random,
            stop_tol: 1e-7,
            exaggeration: None,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be >= 1".into()));
        }
        if let Some(lr) = self.learning_rate {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(Error::Config(format!(
                    "learning rate must be positive and finite, got {lr}"
                )));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.init_scale.is_finite() && self.init_scale >= 0.0) {
            return Err(Error::Config(format!(
                "init scale must be nonnegative, got {}",
                self.init_scale
            )));
        }
        if !(self.stop_tol >= 0.0) {
            return Err(Error::Config(format!(
                "stop tolerance must be nonnegative, got {}",
                self.stop_tol
            )));
        }
        if let Some(e) = self.exaggeration {
            if !(e.factor.is_finite() && e.factor > 0.0) {
                return Err(Error::Config(format!(
                    "exaggeration factor must be positive, got {}",
                    e.factor
                )));
            }
        }
        Ok(())
    }

    pub fn learning_rate_for(&self, n: usize) -> f64 {
        self.learning_rate.unwrap_or(AUTO_LR_PER_POINT * n as f64)
    }
}

/// Centered Gaussian coordinates with standard deviation `scale`.
pub fn init_embedding(n: usize, s: usize, seed: u64, scale: f64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut y = Array2::from_shape_fn((n, s), |_| {
        let z: f64 = StandardNormal.sample(&mut rng);
        z * scale
    });
    if n > 0 {
        for mut col in y.columns_mut() {
            let mean = col.sum() / n as f64;
            col.mapv_inplace(|v| v - mean);
        }
    }
    y
}

/// Leading `s` principal coordinates of `points`, each column rescaled to
/// standard deviation `scale`. Columns beyond the input rank are filled from
/// [`init_embedding`] with the same seed.
pub fn principal_embedding(points: ArrayView2<f64>, s: usize, seed: u64, scale: f64) -> Array2<f64> {
    let (n, d) = points.dim();
    let mut y = init_embedding(n, s, seed, scale);
    if n < 2 || d == 0 {
        return y;
    }
    let mean = points.mean_axis(ndarray::Axis(0)).expect("nonempty");
    let centered = &points - &mean;
    let mut cov = centered.t().dot(&centered) / n as f64;
    let trace: f64 = cov.diag().sum();
    for col in 0..s.min(d) {
        // Power iteration from a fixed, generic start vector.
        let mut v = ndarray::Array1::from_shape_fn(d, |k| 1.0 + 0.1 * k as f64);
        v /= v.dot(&v).sqrt();
        let mut lambda = 0.0;
        for _ in 0..1000 {
            let w = cov.dot(&v);
            let norm = w.dot(&w).sqrt();
            if norm == 0.0 {
                lambda = 0.0;
                break;
            }
            let next = &w / norm;
            let change = (&next - &v).iter().map(|x| x.abs()).fold(0.0, f64::max);
            v = next;
            lambda = norm;
            if change < 1e-13 {
                break;
            }
        }
        if !(lambda > 1e-12 * trace.max(f64::MIN_POSITIVE)) {
            break;
        }
        let pivot = v
            .iter()
            .copied()
            .fold(0.0, |a: f64, b| if b.abs() > a.abs() { b } else { a });
        if pivot < 0.0 {
            v.mapv_inplace(|x| -x);
        }
        let proj = centered.dot(&v);
        let sd = (proj.iter().map(|x| x * x).sum::<f64>() / (n - 1) as f64).sqrt();
        if sd > 0.0 {
            y.column_mut(col).assign(&proj.mapv(|x| x / sd * scale));
        }
        let outer = v.view().insert_axis(ndarray::Axis(1));
        cov = cov - lambda * outer.dot(&outer.t());
    }
    y
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceEntry {
    pub iteration: usize,
    pub loss: f64,
    /// Largest gradient row norm.
    pub grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct Embedding {
    pub coords: Array2<f64>,
    /// One entry per evaluated iterate, starting with the initial embedding.
    pub trace: Vec<TraceEntry>,
    pub sigmas: Vec<f64>,
    pub affinities: AffinityMatrix,
    pub learning_rate: f64,
    pub converged: bool,
}

impl Embedding {
    pub fn n(&self) -> usize {
        self.coords.nrows()
    }

    pub fn dim(&self) -> usize {
        self.coords.ncols()
    }

    pub fn final_loss(&self) -> f64 {
        self.trace.last().map(|t| t.loss).unwrap_or(f64::NAN)
    }

    pub fn final_grad_norm(&self) -> f64 {
        self.trace.last().map(|t| t.grad_norm).unwrap_or(f64::NAN)
    }

    /// Largest pairwise distance between embedded points.
    pub fn diameter(&self) -> f64 {
        diameter(self.coords.view())
    }
}

pub fn diameter(y: ArrayView2<f64>) -> f64 {
    let n = y.nrows();
    let mut best = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            let d: f64 = y
                .row(i)
                .iter()
                .zip(y.row(j).iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            best = best.max(d);
        }
    }
    best.sqrt()
}

fn max_row_norm(grad: &[f64], s: usize) -> f64 {
    grad.chunks(s)
        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
        .fold(0.0, f64::max)
}

/// Trace, final coordinates and convergence flag of a descent run.
#[derive(Debug, Clone)]
pub struct DescentRun {
    pub coords: Array2<f64>,
    pub trace: Vec<TraceEntry>,
    pub converged: bool,
}

/// Minimizes the loss for fixed `P`, starting from `y0`.
pub fn optimize(
    p: &AffinityMatrix,
    kernel: &OutputKernel,
    y0: Array2<f64>,
    config: &OptimizerConfig,
) -> Result<DescentRun> {
    config.validate()?;
    let (n, s) = y0.dim();
    if n != p.n() {
        return Err(Error::InvalidInput(format!(
            "initial embedding has {n} rows, P has {}",
            p.n()
        )));
    }
    if s == 0 {
        return Err(Error::InvalidInput("output dimension must be >= 1".into()));
    }
    let lr = config.learning_rate_for(n);
    let mut y: Vec<f64> = y0.iter().copied().collect();
    let mut velocity = vec![0.0; n * s];
    let mut grad = vec![0.0; n * s];
    let objective = Objective::new(p, kernel, s);
    let mut trace = Vec::with_capacity(config.iterations + 1);
    let mut converged = false;
    for iteration in 0..=config.iterations {
        let alpha = match config.exaggeration {
            Some(e) if iteration < e.iterations => e.factor,
            _ => 1.0,
        };
        let loss = objective.evaluate(&y, &mut grad, alpha);
        let grad_norm = max_row_norm(&grad, s);
        if !loss.is_finite() || !grad_norm.is_finite() {
            return Err(Error::Divergence { iteration });
        }
        trace.push(TraceEntry {
            iteration,
            loss,
            grad_norm,
        });
        if alpha == 1.0 && grad_norm < config.stop_tol {
            converged = true;
            break;
        }
        if iteration == config.iterations {
            break;
        }
        for ((yk, vk), gk) in y.iter_mut().zip(velocity.iter_mut()).zip(&grad) {
            *vk = config.momentum * *vk - lr * gk;
            *yk += *vk;
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                iteration: iteration + 1,
            });
        }
    }
    let coords = Array2::from_shape_vec((n, s), y).expect("shape");
    Ok(DescentRun {
        coords,
        trace,
        converged,
    })
}

/// Calibrates, builds `P` and minimizes the loss from a seeded initialization.
///
/// With two points `P` is forced to 1/2 whatever the bandwidths, so
/// calibration is skipped and the sigmas are reported as NaN.
pub fn run_tsne(
    points: ArrayView2<f64>,
    kernel_in: &InputKernel,
    kernel_out: &OutputKernel,
    rho: f64,
    dim: usize,
    config: &OptimizerConfig,
) -> Result<Embedding> {
    config.validate()?;
    let n = points.nrows();
    if n < 2 {
        return Err(Error::InvalidInput(format!("need at least 2 points, got {n}")));
    }
    if dim == 0 {
        return Err(Error::InvalidInput("output dimension must be >= 1".into()));
    }
    let (sigmas, affinities) = if n == 2 {
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite coordinate".into()));
        }
        let p = AffinityMatrix::from_array(ndarray::array![[0.0, 0.5], [0.5, 0.0]], 0.0)?;
        (vec![f64::NAN; 2], p)
    } else {
        let cal = calibrate_all(points, kernel_in, rho, DEFAULT_TOL)?;
        let p = joint_affinities(points, &cal.sigmas, kernel_in)?;
        (cal.sigmas, p)
    };
    let y0 = match config.init {
        Init::Random => init_embedding(n, dim, config.seed, config.init_scale),
        Init::Principal => principal_embedding(points, dim, config.seed, config.init_scale),
    };
    let run = optimize(&affinities, kernel_out, y0, config)?;
    Ok(Embedding {
        coords: run.coords,
        trace: run.trace,
        sigmas,
        affinities,
        learning_rate: config.learning_rate_for(n),
        converged: run.converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::affinity::embedding_affinities;
    use ndarray::array;

    #[test]
    fn init_is_deterministic_and_scaled() {
        assert_eq!(init_embedding(3, 2, 7, 1.0), init_embedding(3, 2, 7, 1.0));
        assert_ne!(init_embedding(3, 2, 7, 1.0), init_embedding(3, 2, 8, 1.0));
        assert!(init_embedding(4, 3, 1, 0.0).iter().all(|&v| v == 0.0));
        let y = init_embedding(1000, 2, 1, 1e-2);
        let sd = (y.iter().map(|v| v * v).sum::<f64>() / (y.len() - 1) as f64).sqrt();
        assert!((sd / 1e-2 - 1.0).abs() < 0.1, "{sd}");
        for col in y.columns() {
            assert!(col.sum().abs() < 1e-15);
        }
    }

    #[test]
    fn principal_init_follows_the_dominant_axis() {
        // Points on the line t * (3, 4) / 5 plus a small orthogonal wobble.
        let x = Array2::from_shape_fn((20, 2), |(i, k)| {
            let t = i as f64 - 9.5;
            // +, -, -, + is orthogonal to both t and the constant.
            let wobble = if matches!(i % 4, 0 | 3) { 0.01 } else { -0.01 };
            if k == 0 {
                0.6 * t - 0.8 * wobble
            } else {
                0.8 * t + 0.6 * wobble
            }
        });
        let y = principal_embedding(x.view(), 2, 1, 0.5);
        let t: Vec<f64> = (0..20).map(|i| i as f64 - 9.5).collect();
        let sd = (t.iter().map(|v| v * v).sum::<f64>() / 19.0).sqrt();
        for i in 0..20 {
            assert!((y[[i, 0]] - t[i] / sd * 0.5).abs() < 1e-9, "{}", y[[i, 0]]);
            assert!((y[[i, 1]].abs() - 0.5 * (19.0f64 / 20.0).sqrt()).abs() < 1e-9);
        }
        // One input column, two output columns: the second is the random start.
        let line = Array2::from_shape_fn((5, 1), |(i, _)| i as f64);
        let y = principal_embedding(line.view(), 2, 4, 1.0);
        assert_eq!(y.column(1), init_embedding(5, 2, 4, 1.0).column(1));
    }

    #[test]
    fn config_rejects_bad_values() {
        let bad = [
            OptimizerConfig {
                iterations: 0,
                ..Default::default()
            },
            OptimizerConfig {
                learning_rate: Some(f64::INFINITY),
                ..Default::default()
            },
            OptimizerConfig {
                momentum: 1.0,
                ..Default::default()
            },
        ];
        for c in bad {
            assert!(c.validate().unwrap_err().is_config());
        }
    }

    fn two_clusters() -> Array2<f64> {
        Array2::from_shape_fn((10, 10), |(i, k)| {
            let base = if i < 5 { 0.0 } else { 10.0 };
            base + 0.1 * ((i * 7 + k * 3) % 11) as f64 / 11.0
        })
    }

    #[test]
    fn two_clusters_loss_decreases() {
        let x = two_clusters();
        let cfg = OptimizerConfig {
            iterations: 500,
            seed: 3,
            ..Default::default()
        };
        let e = run_tsne(
            x.view(),
            &InputKernel::gaussian(),
            &OutputKernel::student(),
            0.3,
            2,
            &cfg,
        )
        .unwrap();
        assert!(e.final_loss() < e.trace[0].loss);
        assert!(e.trace.iter().all(|t| t.loss.is_finite() && t.grad_norm.is_finite()));
        let again = run_tsne(
            x.view(),
            &InputKernel::gaussian(),
            &OutputKernel::student(),
            0.3,
            2,
            &cfg,
        )
        .unwrap();
        assert_eq!(e.coords, again.coords);
        assert_eq!(e.trace, again.trace);
    }

    #[test]
    fn two_points_have_constant_loss() {
        let x = array![[0.0, 1.0], [3.0, -2.0]];
        let cfg = OptimizerConfig {
            iterations: 20,
            ..Default::default()
        };
        let e = run_tsne(
            x.view(),
            &InputKernel::gaussian(),
            &OutputKernel::student(),
            0.3,
            2,
            &cfg,
        )
        .unwrap();
        assert_eq!(e.trace.len(), 1);
        assert!(e.converged);
        assert_eq!(e.final_loss(), 0.0);
        assert_eq!(e.final_grad_norm(), 0.0);
    }

    #[test]
    fn triangle_converges_to_uniform_q() {
        let h = 3f64.sqrt() / 2.0;
        let x = array![[0.0, 0.0], [1.0, 0.0], [0.5, h]];
        let cfg = OptimizerConfig {
            iterations: 5000,
            seed: 11,
            init_scale: 1.0,
            stop_tol: 1e-12,
            ..Default::default()
        };
        // Equidistant neighbours make calibration degenerate, but P is 1/6 for any equal sigmas.
        let p = joint_affinities(x.view(), &[1.0; 3], &InputKernel::gaussian()).unwrap();
        let y0 = init_embedding(3, 2, cfg.seed, cfg.init_scale);
        let run = optimize(&p, &OutputKernel::student(), y0, &cfg).unwrap();
        assert!(run.converged);
        let q = embedding_affinities(run.coords.view(), &OutputKernel::student()).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    assert!((q.get(i, j) - 1.0 / 6.0).abs() < 1e-3, "{}", q.get(i, j));
                }
            }
        }
    }

    #[test]
    fn exaggeration_is_opt_in() {
        let x = two_clusters();
        let cfg = OptimizerConfig {
            iterations: 50,
            exaggeration: Some(Exaggeration {
                factor: 4.0,
                iterations: 20,
            }),
            ..Default::default()
        };
        let e = run_tsne(
            x.view(),
            &InputKernel::gaussian(),
            &OutputKernel::student(),
            0.3,
            2,
            &cfg,
        )
        .unwrap();
        assert_eq!(e.trace.len(), 51);
    }
}
