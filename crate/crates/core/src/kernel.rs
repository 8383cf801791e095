//! Input and output kernels.
//!
//! An input kernel has the form `exp(-w(sigma * |x - x'|^theta))` for a
//! strictly increasing profile `w` with `w(0) = 0`; `sigma` is supplied per
//! evaluation and controls the entropy of the induced neighbour distribution.
//! An output kernel is radial, `k(|y - y'|)`, positive, bounded, decreasing and
//! flat at the origin.
//!
//! Builtin families are selected from JSON; custom profiles are added in code
//! through [`WeightFunction`] and [`RadialProfile`]. The validators check the
//! admissibility conditions numerically on a grid and by quadrature, so they
//! work for any profile given as code.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::{integrate, integrate_half_line, TailStatus};

/// Tolerance for pointwise sign checks.
pub const SIGN_TOL: f64 = 1e-9;
/// Kernel weight below which the tail counts as resolved.
pub const TAIL_THRESHOLD: f64 = 1e-12;

/// Profile `w` of an input kernel, together with its first two derivatives.
pub trait WeightFunction: Send + Sync + fmt::Debug {
    fn name(&self) -> String;
    fn w(&self, t: f64) -> f64;
    fn dw(&self, t: f64) -> f64;
    fn d2w(&self, t: f64) -> f64;
}

/// Radial profile `k` of an output kernel.
pub trait RadialProfile: Send + Sync + fmt::Debug {
    fn name(&self) -> String;
    fn k(&self, r: f64) -> f64;
    fn dk(&self, r: f64) -> f64;
    fn ln_k(&self, r: f64) -> f64 {
        self.k(r).ln()
    }
    /// `d/dr ln k(r)`.
    fn dln_k(&self, r: f64) -> f64 {
        self.dk(r) / self.k(r)
    }
}

#[derive(Clone, Debug)]
pub enum InputFamily {
    /// `w(t) = t^a`, `a >= 1`. With `a = 1, theta = 2` this is the Gaussian kernel.
    Power {
        a: f64,
    },
    /// `w(t) = alpha * ln(1 + t)`: polynomial decay `(1 + sigma r^theta)^-alpha`.
    LogPoly {
        alpha: f64,
    },
    /// `w(t) = atan(t)`. Bounded, hence inadmissible; kept for negative tests.
    Arctan,
    Custom(Arc<dyn WeightFunction>),
}

/// Input kernel `exp(-w(sigma * |x - x'|^theta))`.
#[derive(Clone, Debug)]
pub struct InputKernel {
    family: InputFamily,
    theta: f64,
    // w(0) of the raw profile; subtracted so that w(0) = 0.
    offset: f64,
}

fn check_positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidKernel(format!(
            "{name} must be positive and finite, got {v}"
        )))
    }
}

impl InputKernel {
    pub fn power(a: f64, theta: f64) -> Result<Self> {
        check_positive("theta", theta)?;
        if !(a.is_finite() && a >= 1.0) {
            return Err(Error::InvalidKernel(format!("power exponent a must be >= 1, got {a}")));
        }
        Ok(Self {
            family: InputFamily::Power { a },
            theta,
            offset: 0.0,
        })
    }

    /// The classical Gaussian input kernel `exp(-sigma |x - x'|^2)`.
    pub fn gaussian() -> Self {
        Self {
            family: InputFamily::Power { a: 1.0 },
            theta: 2.0,
            offset: 0.0,
        }
    }

    pub fn log_poly(alpha: f64, theta: f64) -> Result<Self> {
        check_positive("theta", theta)?;
        check_positive("alpha", alpha)?;
        Ok(Self {
            family: InputFamily::LogPoly { alpha },
            theta,
            offset: 0.0,
        })
    }

    pub fn arctan(theta: f64) -> Result<Self> {
        check_positive("theta", theta)?;
        Ok(Self {
            family: InputFamily::Arctan,
            theta,
            offset: 0.0,
        })
    }

    /// Registers a custom profile, shifting it so that `w(0) = 0`.
    pub fn custom(profile: Arc<dyn WeightFunction>, theta: f64) -> Result<Self> {
        check_positive("theta", theta)?;
        let offset = profile.w(0.0);
        if !offset.is_finite() {
            return Err(Error::KernelDefinition(format!(
                "{}: w(0) is not finite",
                profile.name()
            )));
        }
        Ok(Self {
            family: InputFamily::Custom(profile),
            theta,
            offset,
        })
    }

    pub fn family(&self) -> &InputFamily {
        &self.family
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn params(&self) -> Vec<f64> {
        match &self.family {
            InputFamily::Power { a } => vec![*a],
            InputFamily::LogPoly { alpha } => vec![*alpha],
            InputFamily::Arctan | InputFamily::Custom(_) => vec![],
        }
    }

    pub fn id(&self) -> String {
        match &self.family {
            InputFamily::Power { a } => format!("power(a={a},theta={})", self.theta),
            InputFamily::LogPoly { alpha } => format!("log-poly(alpha={alpha},theta={})", self.theta),
            InputFamily::Arctan => format!("arctan(theta={})", self.theta),
            InputFamily::Custom(p) => format!("custom:{}(theta={})", p.name(), self.theta),
        }
    }

    #[inline]
    pub fn w(&self, t: f64) -> f64 {
        match &self.family {
            InputFamily::Power { a } => {
                if *a == 1.0 {
                    t
                } else {
                    t.powf(*a)
                }
            }
            InputFamily::LogPoly { alpha } => alpha * t.ln_1p(),
            InputFamily::Arctan => t.atan(),
            InputFamily::Custom(p) => p.w(t) - self.offset,
        }
    }

    pub fn dw(&self, t: f64) -> f64 {
        match &self.family {
            InputFamily::Power { a } => {
                if *a == 1.0 {
                    1.0
                } else {
                    a * t.powf(a - 1.0)
                }
            }
            InputFamily::LogPoly { alpha } => alpha / (1.0 + t),
            InputFamily::Arctan => 1.0 / (1.0 + t * t),
            InputFamily::Custom(p) => p.dw(t),
        }
    }

    pub fn d2w(&self, t: f64) -> f64 {
        match &self.family {
            InputFamily::Power { a } => {
                if *a == 1.0 {
                    0.0
                } else if *a == 2.0 {
                    2.0
                } else {
                    a * (a - 1.0) * t.powf(a - 2.0)
                }
            }
            InputFamily::LogPoly { alpha } => -alpha / ((1.0 + t) * (1.0 + t)),
            InputFamily::Arctan => -2.0 * t / ((1.0 + t * t) * (1.0 + t * t)),
            InputFamily::Custom(p) => p.d2w(t),
        }
    }

    /// `|x - x'|^theta` from the squared distance.
    #[inline]
    pub fn scaled_distance(&self, dist_sq: f64) -> f64 {
        if self.theta == 2.0 {
            dist_sq
        } else if self.theta == 1.0 {
            dist_sq.sqrt()
        } else {
            dist_sq.powf(0.5 * self.theta)
        }
    }

    /// Exponent `w(sigma * |x - x'|^theta)` given the squared distance.
    #[inline]
    pub fn exponent(&self, sigma: f64, dist_sq: f64) -> f64 {
        if dist_sq == 0.0 {
            return 0.0;
        }
        self.w(sigma * self.scaled_distance(dist_sq))
    }

    /// `exp(-w(sigma * |x - x'|^theta))`.
    pub fn eval(&self, x: &[f64], x_prime: &[f64], sigma: f64) -> Result<f64> {
        if x.len() != x_prime.len() {
            return Err(Error::InvalidInput(format!(
                "point dimensions differ: {} vs {}",
                x.len(),
                x_prime.len()
            )));
        }
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(Error::InvalidInput(format!("sigma must be positive, got {sigma}")));
        }
        if x.iter().chain(x_prime).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite coordinate".into()));
        }
        Ok((-self.exponent(sigma, squared_distance(x, x_prime))).exp())
    }
}

#[derive(Clone, Debug)]
pub enum OutputFamily {
    /// `k(r) = (1 + r^2)^-b`; `b = 1` is the Student-t kernel.
    Cauchy {
        b: f64,
    },
    /// `k(r) = exp(-r^2)`.
    Gauss,
    /// `k(r) = exp(-r)`. Has `k'(0) = -1`, so it is inadmissible; kept for negative tests.
    Exp,
    Custom(Arc<dyn RadialProfile>),
}

/// Radial output kernel `k(|y - y'|)`.
#[derive(Clone, Debug)]
pub struct OutputKernel {
    family: OutputFamily,
}

/// Per-pair quantities needed by the loss and its gradient.
#[derive(Clone, Copy, Debug)]
pub(crate) struct PairTerms {
    pub k: f64,
    pub ln_k: f64,
    /// `k'(r) / (r k(r))`, the factor multiplying `y_i - y_j` in `grad ln k`.
    pub dln_k_over_r: f64,
}

impl OutputKernel {
    pub fn cauchy(b: f64) -> Result<Self> {
        check_positive("b", b)?;
        Ok(Self {
            family: OutputFamily::Cauchy { b },
        })
    }

    /// Student-t kernel `1 / (1 + r^2)`.
    pub fn student() -> Self {
        Self {
            family: OutputFamily::Cauchy { b: 1.0 },
        }
    }

    pub fn gauss() -> Self {
        Self {
            family: OutputFamily::Gauss,
        }
    }

    pub fn exp() -> Self {
        Self {
            family: OutputFamily::Exp,
        }
    }

    pub fn custom(profile: Arc<dyn RadialProfile>) -> Self {
        Self {
            family: OutputFamily::Custom(profile),
        }
    }

    pub fn family(&self) -> &OutputFamily {
        &self.family
    }

    pub fn params(&self) -> Vec<f64> {
        match &self.family {
            OutputFamily::Cauchy { b } => vec![*b],
            _ => vec![],
        }
    }

    pub fn id(&self) -> String {
        match &self.family {
            OutputFamily::Cauchy { b } => format!("cauchy(b={b})"),
            OutputFamily::Gauss => "gauss".into(),
            OutputFamily::Exp => "exp".into(),
            OutputFamily::Custom(p) => format!("custom:{}", p.name()),
        }
    }

    /// Upper bound of `k`, attained at the origin for a decreasing profile.
    pub fn k_max(&self) -> f64 {
        self.k(0.0)
    }

    pub fn k(&self, r: f64) -> f64 {
        match &self.family {
            OutputFamily::Cauchy { b } => {
                if *b == 1.0 {
                    1.0 / (1.0 + r * r)
                } else {
                    (1.0 + r * r).powf(-b)
                }
            }
            OutputFamily::Gauss => (-r * r).exp(),
            OutputFamily::Exp => (-r).exp(),
            OutputFamily::Custom(p) => p.k(r),
        }
    }

    pub fn dk(&self, r: f64) -> f64 {
        match &self.family {
            OutputFamily::Cauchy { b } => -2.0 * b * r * (1.0 + r * r).powf(-b - 1.0),
            OutputFamily::Gauss => -2.0 * r * (-r * r).exp(),
            OutputFamily::Exp => -(-r).exp(),
            OutputFamily::Custom(p) => p.dk(r),
        }
    }

    pub fn ln_k(&self, r: f64) -> f64 {
        match &self.family {
            OutputFamily::Cauchy { b } => -b * (r * r).ln_1p(),
            OutputFamily::Gauss => -r * r,
            OutputFamily::Exp => -r,
            OutputFamily::Custom(p) => p.ln_k(r),
        }
    }

    /// `d/dr ln k(r)`.
    pub fn dln_k(&self, r: f64) -> f64 {
        match &self.family {
            OutputFamily::Cauchy { b } => -2.0 * b * r / (1.0 + r * r),
            OutputFamily::Gauss => -2.0 * r,
            OutputFamily::Exp => -1.0,
            OutputFamily::Custom(p) => p.dln_k(r),
        }
    }

    /// `(k, k'/(r k))` without the logarithm where the family allows it.
    #[inline]
    pub(crate) fn pair_weights(&self, r2: f64) -> (f64, f64) {
        match &self.family {
            OutputFamily::Cauchy { b } if *b == 1.0 => {
                let k = 1.0 / (1.0 + r2);
                (k, -2.0 * k)
            }
            OutputFamily::Gauss => ((-r2).exp(), -2.0),
            _ => {
                let t = self.pair_terms(r2);
                (t.k, t.dln_k_over_r)
            }
        }
    }

    #[inline]
    pub(crate) fn pair_terms(&self, r2: f64) -> PairTerms {
        match &self.family {
            OutputFamily::Cauchy { b } => {
                let base = 1.0 + r2;
                if *b == 1.0 {
                    PairTerms {
                        k: 1.0 / base,
                        ln_k: -r2.ln_1p(),
                        dln_k_over_r: -2.0 / base,
                    }
                } else {
                    let ln_k = -b * r2.ln_1p();
                    PairTerms {
                        k: ln_k.exp(),
                        ln_k,
                        dln_k_over_r: -2.0 * b / base,
                    }
                }
            }
            OutputFamily::Gauss => PairTerms {
                k: (-r2).exp(),
                ln_k: -r2,
                dln_k_over_r: -2.0,
            },
            _ => {
                let r = r2.sqrt();
                let ln_k = self.ln_k(r);
                PairTerms {
                    k: ln_k.exp(),
                    ln_k,
                    dln_k_over_r: if r > 0.0 { self.dln_k(r) / r } else { 0.0 },
                }
            }
        }
    }

    /// `k(|y - y'|)`.
    pub fn eval(&self, y: &[f64], y_prime: &[f64]) -> Result<f64> {
        if y.len() != y_prime.len() {
            return Err(Error::InvalidInput(format!(
                "point dimensions differ: {} vs {}",
                y.len(),
                y_prime.len()
            )));
        }
        if y.iter().chain(y_prime).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite coordinate".into()));
        }
        Ok(self.k(squared_distance(y, y_prime).sqrt()))
    }
}

#[inline]
pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum()
}

// ---------------------------------------------------------------------------
// JSON configuration

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum InputSpec {
    Power {
        #[serde(default = "one")]
        a: f64,
        #[serde(default = "two")]
        theta: f64,
    },
    LogPoly {
        #[serde(default = "one")]
        alpha: f64,
        #[serde(default = "one")]
        theta: f64,
    },
    Arctan {
        #[serde(default = "one")]
        theta: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum OutputSpec {
    Cauchy {
        #[serde(default = "one")]
        b: f64,
    },
    Gauss,
    Exp,
}

fn one() -> f64 {
    1.0
}
fn two() -> f64 {
    2.0
}

/// Kernel selection, e.g.
/// `{"input": {"family": "power", "a": 1.0, "theta": 2.0}, "output": {"family": "cauchy", "b": 1.0}}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub input: InputSpec,
    pub output: OutputSpec,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            input: InputSpec::Power { a: 1.0, theta: 2.0 },
            output: OutputSpec::Cauchy { b: 1.0 },
        }
    }
}

impl InputSpec {
    pub fn build(&self) -> Result<InputKernel> {
        match *self {
            InputSpec::Power { a, theta } => InputKernel::power(a, theta),
            InputSpec::LogPoly { alpha, theta } => InputKernel::log_poly(alpha, theta),
            InputSpec::Arctan { theta } => InputKernel::arctan(theta),
        }
    }
}

impl OutputSpec {
    pub fn build(&self) -> Result<OutputKernel> {
        match *self {
            OutputSpec::Cauchy { b } => OutputKernel::cauchy(b),
            OutputSpec::Gauss => Ok(OutputKernel::gauss()),
            OutputSpec::Exp => Ok(OutputKernel::exp()),
        }
    }
}

impl KernelConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("kernel config: {e}")))
    }

    pub fn build(&self) -> Result<(InputKernel, OutputKernel)> {
        Ok((self.input.build()?, self.output.build()?))
    }
}

// ---------------------------------------------------------------------------
// Validation

/// Outcome of one numerical condition check.
#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub id: String,
    pub pass: bool,
    /// Informational checks are reported but do not enter `overall`.
    pub informational: bool,
    /// Grid point where the check was decided (worst case or first violation).
    pub witness: Option<f64>,
    /// Measured quantity: extreme value or integral estimate.
    pub value: Option<f64>,
    pub detail: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct ValidationReport {
    pub kernel: String,
    pub checks: Vec<Check>,
    pub overall: bool,
}

impl ValidationReport {
    fn new(kernel: String, checks: Vec<Check>) -> Self {
        let overall = checks.iter().filter(|c| !c.informational).all(|c| c.pass);
        Self {
            kernel,
            checks,
            overall,
        }
    }

    pub fn check(&self, id: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.id == id)
    }

    pub fn failed_ids(&self) -> Vec<&str> {
        self.checks
            .iter()
            .filter(|c| !c.informational && !c.pass)
            .map(|c| c.id.as_str())
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Evaluation grid `{0} ∪ linspace(0, 10) ∪ logspace(1e-8, max)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub max: f64,
    pub points: usize,
}

impl GridSpec {
    pub fn input_default() -> Self {
        Self {
            max: 1e16,
            points: 4000,
        }
    }

    pub fn output_default() -> Self {
        Self { max: 1e6, points: 4000 }
    }

    pub fn nodes(&self) -> Vec<f64> {
        let half = (self.points / 2).max(2);
        let lin_top = self.max.min(10.0);
        let mut nodes: Vec<f64> = (0..half).map(|k| lin_top * k as f64 / (half - 1) as f64).collect();
        let (lo, hi) = (1e-8f64.ln(), self.max.ln());
        if hi > lo {
            nodes.extend((0..half).map(|k| (lo + (hi - lo) * k as f64 / (half - 1) as f64).exp()));
        }
        nodes.push(self.max);
        nodes.sort_by(f64::total_cmp);
        nodes.dedup();
        nodes
    }
}

fn finite_or_err(kernel: &str, what: &str, t: f64, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::KernelDefinition(format!("{kernel}: {what}({t}) = {v}")))
    }
}

/// Checks the admissibility conditions of an input kernel in ambient dimension `dim`.
///
/// Check ids: `w-prime-positive`, `w-divergent`, `w-curvature`, `tail-integral`.
pub fn validate_input_kernel(kernel: &InputKernel, dim: usize, grid: &GridSpec) -> Result<ValidationReport> {
    if dim == 0 {
        return Err(Error::InvalidInput("dimension must be >= 1".into()));
    }
    let id = kernel.id();
    let nodes = grid.nodes();
    let mut checks = Vec::new();

    let mut min_dw = (f64::INFINITY, 0.0);
    let mut min_curv = (f64::INFINITY, 0.0);
    for &t in &nodes {
        finite_or_err(&id, "w", t, kernel.w(t))?;
        let dw = finite_or_err(&id, "w'", t, kernel.dw(t))?;
        let d2w = finite_or_err(&id, "w''", t, kernel.d2w(t))?;
        if dw < min_dw.0 {
            min_dw = (dw, t);
        }
        let curv = dw + t * d2w;
        if curv < min_curv.0 {
            min_curv = (curv, t);
        }
    }
    checks.push(Check {
        id: "w-prime-positive".into(),
        pass: min_dw.0 > 0.0,
        informational: false,
        witness: Some(min_dw.1),
        value: Some(min_dw.0),
        detail: format!("min w'(t) = {:e} at t = {}", min_dw.0, min_dw.1),
    });

    let divergence_threshold = -TAIL_THRESHOLD.ln();
    let w_max = kernel.w(grid.max);
    checks.push(Check {
        id: "w-divergent".into(),
        pass: w_max >= divergence_threshold,
        informational: false,
        witness: Some(grid.max),
        value: Some(w_max),
        detail: format!(
            "w({:e}) = {w_max:.6} against divergence threshold {divergence_threshold:.6}",
            grid.max
        ),
    });

    checks.push(Check {
        id: "w-curvature".into(),
        pass: min_curv.0 >= -SIGN_TOL,
        informational: false,
        witness: Some(min_curv.1),
        value: Some(min_curv.0),
        detail: format!("min w'(t) + t w''(t) = {:e} at t = {}", min_curv.0, min_curv.1),
    });

    // ∫ t^(d-1) w(t^θ) exp(-w(t^θ)) dt, evaluated in log form.
    let theta = kernel.theta();
    let d = dim as f64;
    let integrand = |t: f64| {
        if t <= 0.0 {
            return 0.0;
        }
        let w = kernel.w(t.powf(theta));
        if w <= 0.0 {
            return 0.0;
        }
        ((d - 1.0) * t.ln() + w.ln() - w).exp()
    };
    let check = if (-w_max).exp() >= TAIL_THRESHOLD {
        Check {
            id: "tail-integral".into(),
            pass: false,
            informational: false,
            witness: Some(grid.max),
            value: None,
            detail: format!(
                "inconclusive: kernel weight exp(-w) = {:e} at grid end is not below {TAIL_THRESHOLD:e}",
                (-w_max).exp()
            ),
        }
    } else {
        let upper = grid.max.powf(1.0 / theta);
        let r = integrate_half_line(integrand, upper, 1e-10);
        Check {
            id: "tail-integral".into(),
            pass: r.status == TailStatus::Converged,
            informational: false,
            witness: Some(upper),
            value: Some(r.value),
            detail: format!(
                "{:?}: integral over [0, {upper:e}] = {:e}, shell decay ratio {:.6}",
                r.status, r.value, r.decay_ratio
            ),
        }
    };
    checks.push(check);
    Ok(ValidationReport::new(id, checks))
}

/// Checks the admissibility conditions of an output kernel.
///
/// Check ids: `k-positive`, `k-decreasing`, `k-bounded`, `k-prime-bounded`,
/// `k-prime-at-zero`, `radial-integral`, and the informational
/// `double-integral-literal`.
pub fn validate_output_kernel(kernel: &OutputKernel, grid: &GridSpec) -> Result<ValidationReport> {
    let id = kernel.id();
    let nodes = grid.nodes();
    let k_max = finite_or_err(&id, "k", 0.0, kernel.k(0.0))?;
    let mut checks = Vec::new();

    let mut ln_vals = Vec::with_capacity(nodes.len());
    let mut sup_k = (f64::NEG_INFINITY, 0.0);
    let mut sup_dk = (0.0f64, 0.0);
    for &r in &nodes {
        let ln_k = kernel.ln_k(r);
        if ln_k.is_nan() || ln_k == f64::INFINITY {
            return Err(Error::KernelDefinition(format!("{id}: ln k({r}) = {ln_k}")));
        }
        ln_vals.push(ln_k);
        let k = kernel.k(r);
        if k > sup_k.0 {
            sup_k = (k, r);
        }
        let dk = kernel.dk(r);
        if dk.is_nan() {
            return Err(Error::KernelDefinition(format!("{id}: k'({r}) = NaN")));
        }
        if dk.abs() > sup_dk.0 || !dk.is_finite() {
            sup_dk = (dk.abs(), r);
        }
    }

    let non_positive = nodes.iter().zip(&ln_vals).find(|(_, l)| !l.is_finite());
    checks.push(Check {
        id: "k-positive".into(),
        pass: non_positive.is_none(),
        informational: false,
        witness: non_positive.map(|(r, _)| *r),
        value: None,
        detail: match non_positive {
            Some((r, _)) => format!("k({r}) is not positive"),
            None => "k > 0 on grid".into(),
        },
    });

    let increase = nodes
        .windows(2)
        .zip(ln_vals.windows(2))
        .map(|(r, l)| (r[1], l[1] - l[0]))
        .fold(
            (f64::NEG_INFINITY, 0.0),
            |acc, x| if x.1 > acc.0 { (x.1, x.0) } else { acc },
        );
    checks.push(Check {
        id: "k-decreasing".into(),
        pass: increase.0 <= SIGN_TOL,
        informational: false,
        witness: Some(increase.1),
        value: Some(increase.0),
        detail: format!("largest step increase of ln k = {:e} at r = {}", increase.0, increase.1),
    });

    checks.push(Check {
        id: "k-bounded".into(),
        pass: sup_k.0 <= k_max * (1.0 + SIGN_TOL),
        informational: false,
        witness: Some(sup_k.1),
        value: Some(sup_k.0),
        detail: format!("sup k = {} against k(0) = {k_max}", sup_k.0),
    });

    checks.push(Check {
        id: "k-prime-bounded".into(),
        pass: sup_dk.0.is_finite(),
        informational: false,
        witness: Some(sup_dk.1),
        value: Some(sup_dk.0),
        detail: format!("sup |k'| = {:e} at r = {}", sup_dk.0, sup_dk.1),
    });

    let dk0 = kernel.dk(0.0);
    checks.push(Check {
        id: "k-prime-at-zero".into(),
        pass: dk0.abs() <= SIGN_TOL,
        informational: false,
        witness: Some(0.0),
        value: Some(dk0),
        detail: format!("k'(0) = {dk0}"),
    });

    let r = integrate_half_line(|r| kernel.k(r), grid.max, 1e-10);
    checks.push(Check {
        id: "radial-integral".into(),
        pass: r.status == TailStatus::Converged,
        informational: false,
        witness: Some(r.upper),
        value: Some(r.value),
        detail: format!(
            "{:?}: integral of k over [0, inf) ≈ {:e}, shell decay ratio {:.6}",
            r.status, r.value, r.decay_ratio
        ),
    });

    // Literal reading: ∬_{(0,L)^2} k(|u - v|) du dv = 2 ∫_0^L (L - r) k(r) dr.
    let box_integral = |l: f64| 2.0 * integrate(|r| (l - r) * kernel.k(r), 0.0, l, 1e-300, 1e-10, 2000).value;
    let (l1, l2) = (1e3, 2e3);
    let (j1, j2) = (box_integral(l1), box_integral(l2));
    let growth = j2 / j1;
    checks.push(Check {
        id: "double-integral-literal".into(),
        pass: growth < 1.5,
        informational: true,
        witness: Some(l2),
        value: Some(j2),
        detail: format!(
            "box integral over (0,L)^2: {j1:e} at L={l1}, {j2:e} at L={l2} (growth x{growth:.4}); linear growth means divergence"
        ),
    });

    Ok(ValidationReport::new(id, checks))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eval_input_examples() {
        let k = InputKernel::gaussian();
        assert_eq!(k.eval(&[0.3], &[0.3], 5.0).unwrap(), 1.0);
        assert!((k.eval(&[0.0], &[1.0], 1.0).unwrap() - (-1.0f64).exp()).abs() < 1e-15);
        let k = InputKernel::log_poly(1.0, 1.0).unwrap();
        let v = k.eval(&[0.0, 0.0], &[3.0, 4.0], 2.0).unwrap();
        assert!((v - 1.0 / 11.0).abs() < 1e-15);
    }

    #[test]
    fn eval_input_rejects_bad_arguments() {
        let k = InputKernel::gaussian();
        assert!(k.eval(&[f64::NAN], &[0.0], 1.0).is_err());
        assert!(k.eval(&[0.0], &[0.0], 0.0).is_err());
        assert!(k.eval(&[0.0], &[0.0, 1.0], 1.0).is_err());
    }

    #[test]
    fn eval_output_examples() {
        let c = OutputKernel::student();
        assert_eq!(c.eval(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 1.0);
        assert_eq!(c.eval(&[0.0, 0.0], &[1.0, 0.0]).unwrap(), 0.5);
        let g = OutputKernel::gauss();
        assert!((g.eval(&[0.0], &[2.0]).unwrap() - (-4.0f64).exp()).abs() < 1e-17);
    }

    #[test]
    fn custom_profile_is_shifted_to_zero() {
        #[derive(Debug)]
        struct Shifted;
        impl WeightFunction for Shifted {
            fn name(&self) -> String {
                "shifted".into()
            }
            fn w(&self, t: f64) -> f64 {
                3.0 + t
            }
            fn dw(&self, _: f64) -> f64 {
                1.0
            }
            fn d2w(&self, _: f64) -> f64 {
                0.0
            }
        }
        let k = InputKernel::custom(Arc::new(Shifted), 2.0).unwrap();
        assert_eq!(k.w(0.0), 0.0);
        assert_eq!(k.eval(&[1.0], &[1.0], 2.0).unwrap(), 1.0);
        assert!((k.eval(&[0.0], &[1.0], 1.0).unwrap() - (-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn pair_terms_match_profile() {
        for kernel in [
            OutputKernel::student(),
            OutputKernel::cauchy(1.7).unwrap(),
            OutputKernel::gauss(),
            OutputKernel::exp(),
        ] {
            for r in [0.3, 1.0, 2.5] {
                let t = kernel.pair_terms(r * r);
                assert!((t.k - kernel.k(r)).abs() < 1e-14);
                assert!((t.ln_k - kernel.k(r).ln()).abs() < 1e-12);
                let expected = kernel.dk(r) / (r * kernel.k(r));
                assert!((t.dln_k_over_r - expected).abs() < 1e-12 * expected.abs().max(1.0));
            }
        }
    }

    #[test]
    fn gaussian_input_passes() {
        let rep = validate_input_kernel(&InputKernel::gaussian(), 2, &GridSpec::input_default()).unwrap();
        assert!(rep.overall, "{}", rep.to_json());
        let v = rep.check("tail-integral").unwrap().value.unwrap();
        // S_1 ∫ t e^{-t^2} t^2 dt = ∫_0^∞ t^3 e^{-t^2} dt = 1/2
        assert!((v - 0.5).abs() < 1e-9, "{v}");
    }

    #[test]
    fn arctan_input_fails_divergence_and_curvature() {
        let rep = validate_input_kernel(&InputKernel::arctan(1.0).unwrap(), 1, &GridSpec::input_default()).unwrap();
        assert!(!rep.overall);
        let failed = rep.failed_ids();
        assert!(failed.contains(&"w-divergent"));
        assert!(failed.contains(&"w-curvature"));
        assert!(rep.check("w-prime-positive").unwrap().pass);
        // (1 - t^2)/(1 + t^2)^2 at t = 2 is -3/25.
        let k = InputKernel::arctan(1.0).unwrap();
        assert!((k.dw(2.0) + 2.0 * k.d2w(2.0) + 0.12).abs() < 1e-15);
    }

    #[test]
    fn log_poly_borderline_integral_diverges() {
        // alpha * theta = d: (1+t)^-1 ln(1+t) is not integrable.
        let rep =
            validate_input_kernel(&InputKernel::log_poly(1.0, 1.0).unwrap(), 1, &GridSpec::input_default()).unwrap();
        assert!(rep.check("w-prime-positive").unwrap().pass);
        assert!(rep.check("w-divergent").unwrap().pass);
        assert!(rep.check("w-curvature").unwrap().pass);
        assert!(!rep.check("tail-integral").unwrap().pass);
        // Faster decay is admissible.
        let rep =
            validate_input_kernel(&InputKernel::log_poly(3.0, 1.0).unwrap(), 1, &GridSpec::input_default()).unwrap();
        assert!(rep.overall, "{}", rep.to_json());
    }

    #[test]
    fn short_grid_is_inconclusive() {
        let grid = GridSpec { max: 5.0, points: 100 };
        let rep = validate_input_kernel(&InputKernel::gaussian(), 1, &grid).unwrap();
        let c = rep.check("tail-integral").unwrap();
        assert!(!c.pass);
        assert!(c.detail.starts_with("inconclusive"));
    }

    #[test]
    fn output_validation() {
        let grid = GridSpec::output_default();
        let rep = validate_output_kernel(&OutputKernel::student(), &grid).unwrap();
        assert!(rep.overall, "{}", rep.to_json());
        let integral = rep.check("radial-integral").unwrap().value.unwrap();
        assert!((integral - std::f64::consts::FRAC_PI_2).abs() < 1e-8, "{integral}");
        assert!(!rep.check("double-integral-literal").unwrap().pass);

        let rep = validate_output_kernel(&OutputKernel::gauss(), &grid).unwrap();
        assert!(rep.overall, "{}", rep.to_json());

        let rep = validate_output_kernel(&OutputKernel::exp(), &grid).unwrap();
        assert_eq!(rep.failed_ids(), vec!["k-prime-at-zero"]);
        assert_eq!(rep.check("k-prime-at-zero").unwrap().value, Some(-1.0));

        // b = 1/2 decays like 1/r: radial integral diverges.
        let rep = validate_output_kernel(&OutputKernel::cauchy(0.5).unwrap(), &grid).unwrap();
        assert_eq!(rep.failed_ids(), vec!["radial-integral"]);
    }

    #[test]
    fn config_round_trip() {
        let cfg = KernelConfig::from_json(
            r#"{"input": {"family": "power", "a": 1.0, "theta": 2.0}, "output": {"family": "cauchy", "b": 1.0}}"#,
        )
        .unwrap();
        assert_eq!(cfg, KernelConfig::default());
        let (i, o) = cfg.build().unwrap();
        assert_eq!(i.id(), "power(a=1,theta=2)");
        assert_eq!(o.id(), "cauchy(b=1)");
        assert!(KernelConfig::from_json(r#"{"input": {"family": "nope"}, "output": {"family": "gauss"}}"#).is_err());
        let bad = KernelConfig {
            input: InputSpec::Power { a: 0.5, theta: 2.0 },
            output: OutputSpec::Gauss,
        };
        assert!(bad.build().is_err());
    }
}
