//! Numeric feasibility checking of an instance on its convergence interval.
//!
//! Inside `K` the magnitudes must both be positive and their ratio strictly
//! increasing in the height. Outside a finite endpoint the up force has to
//! dominate below `K` and the down force above it (or the two magnitudes
//! must take opposite signs), and the magnitudes must stay finite there —
//! otherwise the surface range has to be restricted to `K` (bounded model,
//! cut/reverse wrappers).

use super::{AuxInfo, Interval, PsoInstance};
use crate::error::{Error, Result};
use crate::scalar::Real;

/// One probe point with its auxiliary values.
#[derive(Debug, Clone)]
pub struct Probe<R> {
    pub x: Vec<R>,
    pub aux: AuxInfo<R>,
}

/// A condition failure at a specific height and probe.
#[derive(Debug, Clone)]
pub struct Violation<R> {
    /// Stable identifier of the violated condition.
    pub condition: &'static str,
    /// Height at which it occurred.
    pub s: R,
    /// Index into the probe list.
    pub probe: usize,
}

/// Checker outcome. `feasible_on_k == false` means the instance cannot
/// converge at all; `needs_range_restriction == true` means it converges
/// only if the model range is confined to `K`.
#[derive(Debug, Clone)]
pub struct FeasibilityReport<R> {
    pub feasible_on_k: bool,
    pub needs_range_restriction: bool,
    pub violations: Vec<Violation<R>>,
}

/// Relative tolerance on consecutive ratio differences: floating-point
/// plateaus of a genuinely increasing ratio must not fail the check.
const MONOTONE_TOL: f64 = 1e-12;

/// Height grid inside `K` (finite endpoints get a 1e-9 interior margin, the
/// margin the open-interval instances need so the grid stays evaluable).
pub fn default_s_grid<R: Real>(k: &Interval<R>, n: usize) -> Vec<R> {
    let n = n.max(2);
    let margin = R::of(1e-9);
    let lo_fin = k.lo.is_finite();
    let hi_fin = k.hi.is_finite();
    let mut grid = Vec::with_capacity(n);
    if lo_fin && hi_fin {
        let lo = k.lo + margin;
        let hi = k.hi - margin;
        for i in 0..n {
            let t = R::of(i as f64 / (n - 1) as f64);
            grid.push(lo + (hi - lo) * t);
        }
    } else if lo_fin {
        // log-spaced offsets from the finite endpoint, 1e-9 .. 1e4
        for i in 0..n {
            let t = i as f64 / (n - 1) as f64;
            let off = 10f64.powf(-9.0 + 13.0 * t);
            grid.push(k.lo + R::of(off));
        }
    } else if hi_fin {
        for i in 0..n {
            let t = i as f64 / (n - 1) as f64;
            let off = 10f64.powf(-9.0 + 13.0 * t);
            grid.push(k.hi - R::of(off));
        }
        grid.reverse();
    } else {
        for i in 0..n {
            let t = R::of(i as f64 / (n - 1) as f64);
            grid.push(R::of(-30.0) + R::of(60.0) * t);
        }
    }
    grid
}

/// Probes covering a few down-density levels (`log_q` in {0, -2, 1}).
pub fn default_probes<R: Real>() -> Vec<Probe<R>> {
    [0.0, -2.0, 1.0]
        .iter()
        .map(|&lq| Probe {
            x: Vec::new(),
            aux: AuxInfo::with_log_q(R::of(lq)),
        })
        .collect()
}

/// Heights on one side outside `K`, endpoint included (a non-finite
/// magnitude at the endpoint marks the discontinuity that forces a range
/// restriction).
fn outside_grid<R: Real>(endpoint: R, other: R, below: bool) -> Vec<R> {
    let span = if other.is_finite() {
        (other - endpoint).abs()
    } else {
        endpoint.abs().max(R::one())
    };
    let offs = [0.0, 1e-6, 1e-3, 0.1, 0.5, 1.0, 3.0];
    offs.iter()
        .map(|&o| {
            let d = R::of(o) * span.max(R::one());
            if below {
                endpoint - d
            } else {
                endpoint + d
            }
        })
        .collect()
}

/// Verifies the convergence conditions of `inst` on `k`.
///
/// `s_grid` must hold at least 100 interior heights; `probes` supplies the
/// points (with aux) the magnitudes are evaluated at.
pub fn check_feasibility<R: Real>(
    inst: &PsoInstance<R>,
    k: &Interval<R>,
    s_grid: &[R],
    probes: &[Probe<R>],
) -> Result<FeasibilityReport<R>> {
    if s_grid.len() < 100 {
        return Err(Error::InvalidParam {
            name: "s_grid".into(),
            reason: format!("need at least 100 grid points, got {}", s_grid.len()),
        });
    }
    if probes.is_empty() {
        return Err(Error::InvalidParam {
            name: "probes".into(),
            reason: "need at least one probe".into(),
        });
    }

    let mut violations: Vec<Violation<R>> = Vec::new();
    let mut in_k_ok = true;
    let tol = R::of(MONOTONE_TOL);

    for (pi, probe) in probes.iter().enumerate() {
        let mut ratios: Vec<(R, R)> = Vec::with_capacity(s_grid.len());
        for &s in s_grid {
            if !k.contains(s) {
                continue;
            }
            let mu = inst.mag_up(&probe.x, s, &probe.aux);
            let md = inst.mag_down(&probe.x, s, &probe.aux);
            if !mu.is_finite() || !md.is_finite() {
                violations.push(Violation {
                    condition: "non_finite_on_k",
                    s,
                    probe: pi,
                });
                in_k_ok = false;
                continue;
            }
            if !(mu > R::zero()) {
                violations.push(Violation {
                    condition: "up_magnitude_not_positive_on_k",
                    s,
                    probe: pi,
                });
                in_k_ok = false;
            }
            if !(md > R::zero()) {
                violations.push(Violation {
                    condition: "down_magnitude_not_positive_on_k",
                    s,
                    probe: pi,
                });
                in_k_ok = false;
            }
            if mu > R::zero() && md > R::zero() {
                ratios.push((s, md / mu));
            }
        }

        // Strict growth of the ratio along the grid, with a plateau
        // tolerance; a globally flat ratio is a failure (no bijection).
        for w in ratios.windows(2) {
            let ((_, r0), (s1, r1)) = (w[0], w[1]);
            let scale = r0.abs().max(r1.abs()).max(R::one());
            if r1 - r0 < -tol * scale {
                violations.push(Violation {
                    condition: "ratio_decreasing_on_k",
                    s: s1,
                    probe: pi,
                });
                in_k_ok = false;
            }
        }
        if let (Some(&(s0, r0)), Some(&(_, r1))) = (ratios.first(), ratios.last()) {
            let scale = r0.abs().max(r1.abs()).max(R::one());
            if r1 - r0 <= tol * scale {
                violations.push(Violation {
                    condition: "ratio_not_strictly_increasing_on_k",
                    s: s0,
                    probe: pi,
                });
                in_k_ok = false;
            }
        }
    }

    // Conditions outside finite endpoints.
    let mut out_ok = true;
    for (pi, probe) in probes.iter().enumerate() {
        if k.lo.is_finite() {
            for s in outside_grid(k.lo, k.hi, true) {
                let mu = inst.mag_up(&probe.x, s, &probe.aux);
                let md = inst.mag_down(&probe.x, s, &probe.aux);
                if !mu.is_finite() || !md.is_finite() {
                    violations.push(Violation {
                        condition: "non_finite_below_k",
                        s,
                        probe: pi,
                    });
                    out_ok = false;
                    continue;
                }
                if !(mu > md || mu * md <= R::zero()) {
                    violations.push(Violation {
                        condition: "up_force_not_dominant_below_k",
                        s,
                        probe: pi,
                    });
                    out_ok = false;
                }
            }
        }
        if k.hi.is_finite() {
            for s in outside_grid(k.hi, k.lo, false) {
                let mu = inst.mag_up(&probe.x, s, &probe.aux);
                let md = inst.mag_down(&probe.x, s, &probe.aux);
                if !mu.is_finite() || !md.is_finite() {
                    violations.push(Violation {
                        condition: "non_finite_above_k",
                        s,
                        probe: pi,
                    });
                    out_ok = false;
                    continue;
                }
                if !(mu < md || mu * md <= R::zero()) {
                    violations.push(Violation {
                        condition: "down_force_not_dominant_above_k",
                        s,
                        probe: pi,
                    });
                    out_ok = false;
                }
            }
        }
    }

    Ok(FeasibilityReport {
        feasible_on_k: in_k_ok,
        needs_range_restriction: in_k_ok && !out_ok,
        violations,
    })
}
