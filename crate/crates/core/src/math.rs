//! Small numeric helpers shared across modules.

use crate::scalar::Real;

/// `ln(1 + exp(x))` without overflow on either tail.
#[inline]
pub fn softplus<R: Real>(x: R) -> R {
    if x > R::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `1 / (1 + exp(-x))` evaluated on the non-overflowing branch.
#[inline]
pub fn sigmoid<R: Real>(x: R) -> R {
    if x >= R::zero() {
        R::one() / (R::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (R::one() + e)
    }
}

/// `ln(Σ exp(v_i))` with the max factored out; `-inf` for an all `-inf` input.
pub fn log_sum_exp<R: Real>(vals: &[R]) -> R {
    let mut m = R::neg_infinity();
    for &v in vals {
        if v > m {
            m = v;
        }
    }
    if !m.is_finite() {
        return m;
    }
    let mut acc = R::zero();
    for &v in vals {
        acc += (v - m).exp();
    }
    m + acc.ln()
}

/// Standard-normal log-density.
#[inline]
pub fn log_normal_pdf<R: Real>(x: R, mean: R, std: R) -> R {
    let z = (x - mean) / std;
    let half = R::of(0.5);
    -half * z * z - std.ln() - half * (R::of(2.0) * R::PI()).ln()
}

/// Error function, Abramowitz–Stegun 7.1.26 rational fit (|err| < 1.5e-7).
pub fn erf(x: f64) -> f64 {
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let poly = t
        * (0.254829592
            + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    sign * (1.0 - poly * (-x * x).exp())
}

/// Standard-normal CDF.
#[inline]
pub fn normal_cdf(x: f64, mean: f64, std: f64) -> f64 {
    0.5 * (1.0 + erf((x - mean) / (std * std::f64::consts::SQRT_2)))
}

/// Composite Simpson rule with `2n` panels.
pub fn simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, n: usize) -> f64 {
    let m = 2 * n.max(1);
    let h = (b - a) / m as f64;
    let mut acc = f(a) + f(b);
    for i in 1..m {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(a + h * i as f64);
    }
    acc * h / 3.0
}

/// Simpson integration split at interior breakpoints (for piecewise densities).
pub fn simpson_piecewise<F: Fn(f64) -> f64 + Copy>(
    f: F,
    a: f64,
    b: f64,
    breaks: &[f64],
    n_per_piece: usize,
) -> f64 {
    let mut knots: Vec<f64> = vec![a];
    for &t in breaks {
        if t > a && t < b {
            knots.push(t);
        }
    }
    knots.push(b);
    knots.sort_by(|x, y| x.partial_cmp(y).unwrap());
    knots
        .windows(2)
        .map(|w| {
            // keep evaluations strictly inside the piece: the integrand may
            // jump at a breakpoint and the closed-boundary value would leak
            // into the neighboring piece
            let eps = 1e-9 * (w[1] - w[0]).min(1.0);
            simpson(f, w[0] + eps, w[1] - eps, n_per_piece)
        })
        .sum()
}

/// Least-squares slope of `y` against `x`.
pub fn ls_slope(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (&xi, &yi) in x.iter().zip(y) {
        num += (xi - mx) * (yi - my);
        den += (xi - mx) * (xi - mx);
    }
    num / den
}
