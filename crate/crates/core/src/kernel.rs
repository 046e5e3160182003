//! Gradient-similarity diagnostics of a trained surface.
//!
//! The empirical model kernel `g(x, x') = ∇f(x)·∇f(x')` measures how much a
//! push at `x'` moves the surface at `x`. Scans of kernel value against
//! Euclidean distance expose the kernel bandwidth; the first-order step
//! check verifies that a single update moves the surface by approximately
//! `-lr · g(x, ·)`-weighted magnitudes.

use crate::batch::Batch;
use crate::error::{Error, Result};
use crate::instances::PsoInstance;
use crate::linalg::Mat;
use crate::scalar::Real;
use crate::surface::Surface;
use crate::train::{pso_update_direction, AuxFn};

/// Which similarity a scan records.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScanKind {
    /// Raw gradient similarity `g(x, x')`.
    Raw,
    /// Relative side-influence `r(x, x') = g(x, x') / g(x, x)`.
    Relative,
    /// Cosine similarity `g(x, x') / (|∇f(x)| |∇f(x')|)`.
    Cosine,
}

/// `(distance, similarity)` pairs over all unordered point pairs,
/// self-pairs included (they populate the distance-zero column).
#[derive(Debug, Clone)]
pub struct KernelScan<R> {
    pub kind: ScanKind,
    pub pairs: Vec<(R, R)>,
}

/// `∇f(x)·∇f(x')`.
pub fn grad_similarity<R: Real>(surface: &dyn Surface<R>, x: &[R], x2: &[R]) -> Result<R> {
    let g = surface.per_sample_gradients(&Batch::from_rows(&[x, x2]))?;
    Ok(dot(g.row(0), g.row(1)))
}

/// `g(x, x') / g(x, x)`; unitless side-influence of `x'` on `x`.
pub fn relative_kernel<R: Real>(surface: &dyn Surface<R>, x: &[R], x2: &[R]) -> Result<R> {
    let g = surface.per_sample_gradients(&Batch::from_rows(&[x, x2]))?;
    let self_sim = dot(g.row(0), g.row(0));
    if !(self_sim > R::zero()) {
        return Err(Error::Singular("relative kernel: zero self-similarity"));
    }
    Ok(dot(g.row(0), g.row(1)) / self_sim)
}

fn dot<R: Real>(a: &[R], b: &[R]) -> R {
    let mut acc = R::zero();
    for (x, y) in a.iter().zip(b) {
        acc += *x * *y;
    }
    acc
}

/// Gramian of gradient similarities over the point set: `G_ij = g(x_i, x_j)`.
pub fn gramian<R: Real>(surface: &dyn Surface<R>, points: &Batch<R>) -> Result<Mat<R>> {
    let grads = surface.per_sample_gradients(points)?;
    let m = points.rows();
    let mut g = Mat::zeros(m);
    for i in 0..m {
        for j in i..m {
            let v = dot(grads.row(i), grads.row(j));
            g[(i, j)] = v;
            g[(j, i)] = v;
        }
    }
    Ok(g)
}

/// Distance/similarity scan over all unordered pairs (`m(m+1)/2` of them).
/// Relative similarities normalize by the first index of the pair.
pub fn pair_scan<R: Real>(
    surface: &dyn Surface<R>,
    points: &Batch<R>,
    kind: ScanKind,
) -> Result<KernelScan<R>> {
    if points.rows() < 2 {
        return Err(Error::InvalidConfig("pair scan needs at least 2 points".into()));
    }
    let g = gramian(surface, points)?;
    let m = points.rows();
    let mut pairs = Vec::with_capacity(m * (m + 1) / 2);
    for i in 0..m {
        for j in i..m {
            let mut dist_sq = R::zero();
            for (a, b) in points.row(i).iter().zip(points.row(j)) {
                let d = *a - *b;
                dist_sq += d * d;
            }
            let sim = match kind {
                ScanKind::Raw => g[(i, j)],
                ScanKind::Relative => g[(i, j)] / g[(i, i)],
                ScanKind::Cosine => g[(i, j)] / (g[(i, i)] * g[(j, j)]).sqrt(),
            };
            pairs.push((dist_sq.sqrt(), sim));
        }
    }
    Ok(KernelScan { kind, pairs })
}

/// One record of the first-order step check at `(probe, delta)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiffRecord<R> {
    pub probe: usize,
    pub delta: R,
    /// Actual height change after the plain gradient step.
    pub df_real: R,
    /// First-order prediction `-delta * ∇f(x)·d`.
    pub df_approx: R,
    /// `|df_real - df_approx| / |df_real|`; meaningless when `degenerate`.
    pub ratio: R,
    /// Set when `|df_real|` is below 1e-14 and the ratio would divide by
    /// almost zero.
    pub degenerate: bool,
}

/// Compares real against first-order-predicted height changes for one plain
/// gradient step (no optimizer state involved) of each size in `deltas`.
pub fn differential_check<R: Real>(
    surface: &dyn Surface<R>,
    inst: &PsoInstance<R>,
    up: &Batch<R>,
    down: &Batch<R>,
    aux: &AuxFn<R>,
    probes: &Batch<R>,
    deltas: &[R],
) -> Result<Vec<DiffRecord<R>>> {
    let dir = pso_update_direction(surface, inst, up, down, aux)?;
    let f0 = surface.heights(probes)?;
    let probe_grads = surface.per_sample_gradients(probes)?;
    let theta0 = surface.param_values().to_vec();

    let mut records = Vec::with_capacity(deltas.len() * probes.rows());
    for &delta in deltas {
        if !(delta > R::zero()) {
            return Err(Error::InvalidParam {
                name: "delta".into(),
                reason: "step sizes must be positive".into(),
            });
        }
        let shifted: Vec<R> = theta0
            .iter()
            .zip(&dir)
            .map(|(&t, &d)| t - delta * d)
            .collect();
        let moved = surface.with_param_values(shifted)?;
        let f1 = moved.heights(probes)?;
        for p in 0..probes.rows() {
            let df_real = f1[p] - f0[p];
            let df_approx = -delta * dot(probe_grads.row(p), &dir);
            let degenerate = df_real.abs() < R::of(1e-14);
            let ratio = if degenerate {
                R::nan()
            } else {
                (df_real - df_approx).abs() / df_real.abs()
            };
            records.push(DiffRecord {
                probe: p,
                delta,
                df_real,
                df_approx,
                ratio,
                degenerate,
            });
        }
    }
    Ok(records)
}
