//! One-dimensional quadrature.
//!
//! [`integrate`] is a globally adaptive Gauss–Kronrod (7/15) rule on a finite
//! interval. [`integrate_half_line`] integrates a nonnegative function over
//! `[0, upper]` piece by piece on dyadic shells `[2^k, 2^(k+1)]` and classifies
//! the tail from the decay ratio of successive shell contributions, so a
//! divergent integrand is reported as such instead of returning a large number.

use serde::Serialize;

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_18,
    0.140_653_259_715_525_92,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_83,
];
// Gauss weights for the nodes XGK[1], XGK[3], XGK[5], XGK[7].
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

/// Result of a finite-interval integration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub error: f64,
    pub evaluations: usize,
}

fn gk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let fc = f(center);
    let mut kronrod = fc * WGK[7];
    let mut gauss = fc * WG[3];
    for (k, (&x, &wk)) in XGK.iter().zip(WGK.iter()).take(7).enumerate() {
        let dx = half * x;
        let pair = f(center - dx) + f(center + dx);
        kronrod += wk * pair;
        if k % 2 == 1 {
            gauss += WG[k / 2] * pair;
        }
    }
    (kronrod * half, ((kronrod - gauss) * half).abs())
}

/// Globally adaptive Gauss–Kronrod integration of `f` over `[a, b]`.
///
/// Subdivides the interval with the largest error estimate until the summed
/// error drops below `max(abs_tol, rel_tol * |value|)` or `max_intervals` is hit.
pub fn integrate<F: Fn(f64) -> f64>(
    f: F,
    a: f64,
    b: f64,
    abs_tol: f64,
    rel_tol: f64,
    max_intervals: usize,
) -> Estimate {
    if a == b {
        return Estimate {
            value: 0.0,
            error: 0.0,
            evaluations: 0,
        };
    }
    let (v, e) = gk15(&f, a, b);
    let mut intervals = vec![(a, b, v, e)];
    let mut evaluations = 15;
    loop {
        let value: f64 = intervals.iter().map(|iv| iv.2).sum();
        let error: f64 = intervals.iter().map(|iv| iv.3).sum();
        if error <= abs_tol.max(rel_tol * value.abs()) || intervals.len() >= max_intervals || !error.is_finite() {
            return Estimate {
                value,
                error,
                evaluations,
            };
        }
        let worst = intervals
            .iter()
            .enumerate()
            .max_by(|x, y| x.1 .3.total_cmp(&y.1 .3))
            .map(|(k, _)| k)
            .unwrap_or(0);
        let (lo, hi, _, _) = intervals.swap_remove(worst);
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            // Interval cannot be split further in floating point.
            let value: f64 = intervals.iter().map(|iv| iv.2).sum::<f64>() + gk15(&f, lo, hi).0;
            return Estimate {
                value,
                error,
                evaluations,
            };
        }
        let (v1, e1) = gk15(&f, lo, mid);
        let (v2, e2) = gk15(&f, mid, hi);
        evaluations += 30;
        intervals.push((lo, mid, v1, e1));
        intervals.push((mid, hi, v2, e2));
    }
}

/// Classification of a half-line integral's tail.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum TailStatus {
    /// Shell contributions decay geometrically; the integral is finite.
    Converged,
    /// Shell contributions do not decay; the integral diverges.
    Divergent,
    /// Decay too slow to call within the examined range.
    Inconclusive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HalfLineIntegral {
    /// Integral over `[0, upper]` plus the geometric tail estimate when converged.
    pub value: f64,
    pub tail_estimate: f64,
    /// Largest decay ratio among the final shells.
    pub decay_ratio: f64,
    pub upper: f64,
    pub status: TailStatus,
}

const SHELL_NEGLIGIBLE: f64 = 1e-17;
const DIVERGENT_RATIO: f64 = 1.0 - 1e-6;
const CONVERGENT_RATIO: f64 = 0.99;

/// Integrates a nonnegative `f` over `[0, upper]` on dyadic shells and judges
/// whether the integral over `[0, inf)` is finite.
pub fn integrate_half_line<F: Fn(f64) -> f64>(f: F, upper: f64, rel_tol: f64) -> HalfLineIntegral {
    let shell = |a: f64, b: f64| integrate(&f, a, b, 1e-300, rel_tol, 400).value;
    let first_end = upper.min(1.0);
    let mut total = shell(0.0, first_end);
    let mut pieces: Vec<f64> = vec![total];
    let mut lo = first_end;
    while lo < upper {
        let hi = (2.0 * lo).min(upper);
        let piece = shell(lo, hi);
        total += piece;
        pieces.push(piece);
        lo = hi;
        let k = pieces.len();
        if k >= 3 && hi < upper {
            let (p0, p1, p2) = (pieces[k - 3], pieces[k - 2], pieces[k - 1]);
            if p2 <= SHELL_NEGLIGIBLE * total && p2 <= p1 && p1 <= p0 {
                let r = if p1 > 0.0 { p2 / p1 } else { 0.0 };
                let tail = p2 * r / (1.0 - r).max(f64::EPSILON);
                return HalfLineIntegral {
                    value: total + tail,
                    tail_estimate: tail,
                    decay_ratio: r,
                    upper: hi,
                    status: TailStatus::Converged,
                };
            }
        }
    }
    // The last shell may be clipped at `upper`; judge decay on full shells only.
    let clipped = pieces.len() >= 3 && upper.log2().fract() != 0.0;
    let full: Vec<f64> = if clipped {
        pieces[1..pieces.len() - 1].to_vec()
    } else {
        pieces[1..].to_vec()
    };
    let clipped_piece = if clipped { pieces[pieces.len() - 1] } else { 0.0 };
    let ratios: Vec<f64> = full
        .windows(2)
        .rev()
        .take(3)
        .map(|w| {
            if w[0] > 0.0 {
                w[1] / w[0]
            } else if w[1] > 0.0 {
                f64::INFINITY
            } else {
                0.0
            }
        })
        .collect();
    let decay_ratio = ratios.iter().copied().fold(0.0, f64::max);
    let last = full.last().copied().unwrap_or(0.0);
    let (status, tail) = if ratios.is_empty() {
        (TailStatus::Inconclusive, f64::NAN)
    } else if decay_ratio >= DIVERGENT_RATIO {
        (TailStatus::Divergent, f64::INFINITY)
    } else {
        // Geometric tail from the last full shell, less what the clipped shell already holds.
        let tail = (last * decay_ratio / (1.0 - decay_ratio) - clipped_piece).max(0.0);
        if decay_ratio > CONVERGENT_RATIO {
            (TailStatus::Inconclusive, tail)
        } else {
            (TailStatus::Converged, tail)
        }
    };
    HalfLineIntegral {
        value: if status == TailStatus::Converged {
            total + tail
        } else {
            total
        },
        tail_estimate: tail,
        decay_ratio,
        upper,
        status,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_is_exact() {
        let est = integrate(|x| 3.0 * x * x, 0.0, 2.0, 1e-14, 1e-14, 50);
        assert!((est.value - 8.0).abs() < 1e-13);
    }

    #[test]
    fn gaussian_integral() {
        let est = integrate(|x: f64| (-x * x).exp(), -10.0, 10.0, 1e-14, 1e-14, 200);
        assert!((est.value - std::f64::consts::PI.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn half_line_exponential_converges() {
        let r = integrate_half_line(|t: f64| (-t).exp(), 1e16, 1e-13);
        assert_eq!(r.status, TailStatus::Converged);
        assert!((r.value - 1.0).abs() < 1e-12, "{}", r.value);
    }

    #[test]
    fn half_line_power_law_converges_with_tail() {
        // ∫ (1+t)^-3 dt = 1/2
        let r = integrate_half_line(|t: f64| (1.0 + t).powi(-3), 1e16, 1e-13);
        assert_eq!(r.status, TailStatus::Converged);
        assert!((r.value - 0.5).abs() < 1e-10, "{}", r.value);
    }

    #[test]
    fn half_line_harmonic_diverges() {
        let r = integrate_half_line(|t: f64| 1.0 / (1.0 + t), 1e16, 1e-12);
        assert_eq!(r.status, TailStatus::Divergent);
        let r = integrate_half_line(|t: f64| (1.0 + t).ln() / (1.0 + t), 1e16, 1e-12);
        assert_eq!(r.status, TailStatus::Divergent);
    }
}
