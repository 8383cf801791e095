//! Compactly supported probability measures with densities, discretized by
//! tensor-product trapezoid rules.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;

use crate::error::{Error, Result};

/// Default trapezoid nodes per axis.
pub const DEFAULT_NODES_1D: usize = 2048;
pub const DEFAULT_NODES_2D: usize = 256;
/// Largest supported dimension for quadrature.
pub const MAX_DIM: usize = 2;
const MASS_TOL: f64 = 1e-6;
const MAX_REJECTIONS: usize = 1_000_000;

/// One box-supported piece of a measure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum BoxSpec {
    UniformBox {
        lower: Vec<f64>,
        upper: Vec<f64>,
    },
    /// Product of independent normals truncated to the box.
    TruncGauss {
        mean: Vec<f64>,
        std: Vec<f64>,
        lower: Vec<f64>,
        upper: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedBox {
    pub weight: f64,
    #[serde(flatten)]
    pub shape: BoxSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum MeasureFamily {
    UniformBox {
        lower: Vec<f64>,
        upper: Vec<f64>,
    },
    TruncGauss {
        mean: Vec<f64>,
        std: Vec<f64>,
        lower: Vec<f64>,
        upper: Vec<f64>,
    },
    Mixture {
        components: Vec<WeightedBox>,
    },
}

/// JSON description of a measure, e.g.
/// `{"family": "uniform-box", "lower": [0], "upper": [1]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasureSpec {
    #[serde(flatten)]
    pub family: MeasureFamily,
    /// Trapezoid nodes per axis; defaults depend on the dimension.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nodes: Option<usize>,
}

impl MeasureSpec {
    pub fn uniform(lower: &[f64], upper: &[f64]) -> Self {
        Self {
            family: MeasureFamily::UniformBox {
                lower: lower.to_vec(),
                upper: upper.to_vec(),
            },
            nodes: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("measure spec: {e}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }

    pub fn with_nodes(mut self, nodes: usize) -> Self {
        self.nodes = Some(nodes);
        self
    }

    pub fn build(&self) -> Result<ContinuumMeasure> {
        ContinuumMeasure::new(self)
    }
}

#[derive(Debug, Clone)]
enum Shape {
    Uniform,
    Gauss { mean: Vec<f64>, std: Vec<f64>, mass: f64 },
}

#[derive(Debug, Clone)]
struct Component {
    weight: f64,
    lower: Vec<f64>,
    upper: Vec<f64>,
    shape: Shape,
}

fn std_normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + erf(z / std::f64::consts::SQRT_2))
}

impl Component {
    fn from_spec(weight: f64, spec: &BoxSpec) -> Result<Self> {
        let (lower, upper, shape) = match spec {
            BoxSpec::UniformBox { lower, upper } => (lower.clone(), upper.clone(), Shape::Uniform),
            BoxSpec::TruncGauss {
                mean,
                std,
                lower,
                upper,
            } => {
                if mean.len() != lower.len() || std.len() != lower.len() {
                    return Err(Error::Config(
                        "trunc-gauss: mean, std and box must share a dimension".into(),
                    ));
                }
                if std.iter().any(|s| !(s.is_finite() && *s > 0.0)) || mean.iter().any(|m| !m.is_finite()) {
                    return Err(Error::Config(
                        "trunc-gauss: std must be positive and mean finite".into(),
                    ));
                }
                let mut mass = 1.0;
                for k in 0..lower.len() {
                    mass *=
                        std_normal_cdf((upper[k] - mean[k]) / std[k]) - std_normal_cdf((lower[k] - mean[k]) / std[k]);
                }
                if !(mass > 0.0) {
                    return Err(Error::Config("trunc-gauss: box carries no normal mass".into()));
                }
                (
                    lower.clone(),
                    upper.clone(),
                    Shape::Gauss {
                        mean: mean.clone(),
                        std: std.clone(),
                        mass,
                    },
                )
            }
        };
        if lower.is_empty() || lower.len() != upper.len() {
            return Err(Error::Config("box corners must be nonempty and of equal length".into()));
        }
        for (a, b) in lower.iter().zip(&upper) {
            if !(a.is_finite() && b.is_finite() && a < b) {
                return Err(Error::Config(format!(
                    "box side [{a}, {b}] must be finite with lower < upper"
                )));
            }
        }
        Ok(Self {
            weight,
            lower,
            upper,
            shape,
        })
    }

    fn volume(&self) -> f64 {
        self.lower.iter().zip(&self.upper).map(|(a, b)| b - a).product()
    }

    fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(&self.lower)
            .zip(&self.upper)
            .all(|((v, a), b)| v >= a && v <= b)
    }

    fn density(&self, x: &[f64]) -> f64 {
        if !self.contains(x) {
            return 0.0;
        }
        match &self.shape {
            Shape::Uniform => 1.0 / self.volume(),
            Shape::Gauss { mean, std, mass } => {
                let mut v = 1.0 / mass;
                for k in 0..x.len() {
                    let z = (x[k] - mean[k]) / std[k];
                    v *= (-0.5 * z * z).exp() / (std[k] * (2.0 * std::f64::consts::PI).sqrt());
                }
                v
            }
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        match &self.shape {
            Shape::Uniform => Ok((0..self.lower.len())
                .map(|k| rng.random_range(self.lower[k]..self.upper[k]))
                .collect()),
            Shape::Gauss { mean, std, .. } => {
                let mut out = Vec::with_capacity(mean.len());
                for k in 0..mean.len() {
                    let normal = Normal::new(mean[k], std[k]).map_err(|e| Error::Config(e.to_string()))?;
                    let mut accepted = None;
                    for _ in 0..MAX_REJECTIONS {
                        let v = normal.sample(rng);
                        if v >= self.lower[k] && v <= self.upper[k] {
                            accepted = Some(v);
                            break;
                        }
                    }
                    out.push(
                        accepted.ok_or_else(|| {
                            Error::Config("trunc-gauss: truncation box too unlikely to sample".into())
                        })?,
                    );
                }
                Ok(out)
            }
        }
    }
}

/// Measure with a density on a finite union of boxes and its quadrature rule.
///
/// Each box gets its own trapezoid grid, so densities that jump at box edges
/// are still integrated without an edge error. Quadrature weights include the
/// density and sum to one.
#[derive(Debug, Clone)]
pub struct ContinuumMeasure {
    spec: MeasureSpec,
    dim: usize,
    components: Vec<Component>,
    nodes_per_axis: usize,
    nodes: Array2<f64>,
    weights: Vec<f64>,
    raw_mass: f64,
}

fn trapezoid_axis(a: f64, b: f64, m: usize) -> (Vec<f64>, Vec<f64>) {
    let h = (b - a) / (m - 1) as f64;
    let x = (0..m).map(|k| if k == m - 1 { b } else { a + k as f64 * h }).collect();
    let w = (0..m).map(|k| if k == 0 || k == m - 1 { 0.5 * h } else { h }).collect();
    (x, w)
}

impl ContinuumMeasure {
    pub fn new(spec: &MeasureSpec) -> Result<Self> {
        let components = match &spec.family {
            MeasureFamily::UniformBox { lower, upper } => vec![Component::from_spec(
                1.0,
                &BoxSpec::UniformBox {
                    lower: lower.clone(),
                    upper: upper.clone(),
                },
            )?],
            MeasureFamily::TruncGauss {
                mean,
                std,
                lower,
                upper,
            } => vec![Component::from_spec(
                1.0,
                &BoxSpec::TruncGauss {
                    mean: mean.clone(),
                    std: std.clone(),
                    lower: lower.clone(),
                    upper: upper.clone(),
                },
            )?],
            MeasureFamily::Mixture { components } => {
                if components.is_empty() {
                    return Err(Error::Config("mixture needs at least one component".into()));
                }
                if components.iter().any(|c| !(c.weight.is_finite() && c.weight >= 0.0)) {
                    return Err(Error::Config("mixture weights must be nonnegative".into()));
                }
                let total: f64 = components.iter().map(|c| c.weight).sum();
                if !(total > 0.0) {
                    return Err(Error::Config("mixture weights sum to zero".into()));
                }
                components
                    .iter()
                    .map(|c| Component::from_spec(c.weight / total, &c.shape))
                    .collect::<Result<Vec<_>>>()?
            }
        };
        let dim = components[0].lower.len();
        if components.iter().any(|c| c.lower.len() != dim) {
            return Err(Error::Config("mixture components differ in dimension".into()));
        }
        if dim > MAX_DIM {
            return Err(Error::Config(format!("quadrature supports d <= {MAX_DIM}, got {dim}")));
        }
        let m = spec
            .nodes
            .unwrap_or(if dim == 1 { DEFAULT_NODES_1D } else { DEFAULT_NODES_2D });
        if m < 2 {
            return Err(Error::Config(format!("need at least 2 nodes per axis, got {m}")));
        }
        let mut coords: Vec<f64> = Vec::new();
        let mut weights: Vec<f64> = Vec::new();
        let mut raw_mass = 0.0;
        for c in components.iter().filter(|c| c.weight > 0.0) {
            let axes: Vec<(Vec<f64>, Vec<f64>)> = (0..dim).map(|k| trapezoid_axis(c.lower[k], c.upper[k], m)).collect();
            let total = m.pow(dim as u32);
            let mut mass = 0.0;
            let start = weights.len();
            for flat in 0..total {
                let mut point = Vec::with_capacity(dim);
                let mut w = 1.0;
                let mut rest = flat;
                for axis in axes.iter().rev() {
                    let k = rest % m;
                    rest /= m;
                    point.push(axis.0[k]);
                    w *= axis.1[k];
                }
                point.reverse();
                let v = w * c.density(&point);
                mass += v;
                coords.extend_from_slice(&point);
                weights.push(v);
            }
            if (mass - 1.0).abs() > MASS_TOL {
                return Err(Error::Evaluation(format!(
                    "density integrates to {mass} on its {m}-node grid; increase nodes"
                )));
            }
            raw_mass += c.weight * mass;
            for w in &mut weights[start..] {
                *w *= c.weight / mass;
            }
        }
        let count = weights.len();
        let nodes = Array2::from_shape_vec((count, dim), coords).expect("shape");
        Ok(Self {
            spec: spec.clone(),
            dim,
            components,
            nodes_per_axis: m,
            nodes,
            weights,
            raw_mass,
        })
    }

    pub fn spec(&self) -> &MeasureSpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nodes_per_axis(&self) -> usize {
        self.nodes_per_axis
    }

    /// Quadrature nodes, one row per node.
    pub fn nodes(&self) -> &Array2<f64> {
        &self.nodes
    }

    /// Quadrature weights (density included); they sum to one.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Trapezoid integral of the density before renormalization.
    pub fn raw_mass(&self) -> f64 {
        self.raw_mass
    }

    /// Same measure on a grid with `factor` times as many intervals per axis.
    pub fn refined(&self, factor: usize) -> Result<Self> {
        let m = (self.nodes_per_axis - 1) * factor + 1;
        Self::new(&self.spec.clone().with_nodes(m))
    }

    pub fn density(&self, x: &[f64]) -> f64 {
        self.components.iter().map(|c| c.weight * c.density(x)).sum()
    }

    /// Smallest box containing the support.
    pub fn bounding_box(&self) -> (Vec<f64>, Vec<f64>) {
        let mut lo = vec![f64::INFINITY; self.dim];
        let mut hi = vec![f64::NEG_INFINITY; self.dim];
        for c in self.components.iter().filter(|c| c.weight > 0.0) {
            for k in 0..self.dim {
                lo[k] = lo[k].min(c.lower[k]);
                hi[k] = hi[k].max(c.upper[k]);
            }
        }
        (lo, hi)
    }

    pub fn in_support(&self, x: &[f64]) -> bool {
        x.len() == self.dim && self.components.iter().any(|c| c.weight > 0.0 && c.contains(x))
    }

    pub fn mean(&self) -> Array1<f64> {
        self.nodes.t().dot(&Array1::from(self.weights.clone()))
    }

    /// `n` i.i.d. draws, deterministic in `seed`.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Array2<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cumulative: Vec<f64> = self
            .components
            .iter()
            .scan(0.0, |acc, c| {
                *acc += c.weight;
                Some(*acc)
            })
            .collect();
        let mut out = Array2::zeros((n, self.dim));
        for i in 0..n {
            let u: f64 = rng.random();
            let pick = cumulative.iter().position(|&c| u < c).unwrap_or_else(|| {
                self.components
                    .iter()
                    .rposition(|c| c.weight > 0.0)
                    .expect("positive weight")
            });
            let point = self.components[pick].sample(&mut rng)?;
            for (k, v) in point.into_iter().enumerate() {
                out[[i, k]] = v;
            }
        }
        Ok(out)
    }
}
