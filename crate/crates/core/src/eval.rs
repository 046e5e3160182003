//! Accuracy and consistency metrics for trained surfaces.
//!
//! The squared-error metrics compare against an exact log-pdf on held-out
//! points (held-out: the test points must not have been trained on). The
//! importance-sampling loss and the total integral need no ground truth and
//! double as convergence monitors.

use rand::RngCore;

use crate::batch::Batch;
use crate::dist::Density;
use crate::error::{Error, Result};
use crate::linalg::{Cholesky, Mat};
use crate::scalar::Real;
use crate::surface::Surface;

/// Summary of one evaluation pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport<R> {
    pub psqr: R,
    pub lsqr: R,
    pub is_err: R,
    pub total_integral: R,
    pub n_test: usize,
}

/// Mean squared error between the exponentiated surface and the true pdf
/// over test points (sampled from the target density).
pub fn psqr<R: Real>(
    surface: &dyn Surface<R>,
    true_logpdf: &dyn Fn(&[R]) -> R,
    test: &Batch<R>,
) -> Result<R> {
    let heights = surface.heights(test)?;
    let n = R::of(test.rows() as f64);
    let mut acc = R::zero();
    for (row, &f) in test.iter_rows().zip(&heights) {
        let d = true_logpdf(row).exp() - f.exp();
        acc += d * d;
    }
    Ok(acc / n)
}

/// Mean squared error between the surface and the true log-pdf; a proper
/// statistical divergence even for unnormalized models.
pub fn lsqr<R: Real>(
    surface: &dyn Surface<R>,
    true_logpdf: &dyn Fn(&[R]) -> R,
    test: &Batch<R>,
) -> Result<R> {
    let heights = surface.heights(test)?;
    let n = R::of(test.rows() as f64);
    let mut acc = R::zero();
    for (row, &f) in test.iter_rows().zip(&heights) {
        let d = true_logpdf(row) - f;
        acc += d * d;
    }
    Ok(acc / n)
}

/// The importance-sampling loss
/// `-mean f(x_up) + mean exp(f(x_down)) / p_down(x_down)`,
/// a ground-truth-free convergence monitor.
pub fn is_error<R: Real>(
    surface: &dyn Surface<R>,
    up_test: &Batch<R>,
    down_test: &Batch<R>,
    down_logpdf: &dyn Fn(&[R]) -> R,
) -> Result<R> {
    let up_heights = surface.heights(up_test)?;
    let down_heights = surface.heights(down_test)?;
    let mut up_term = R::zero();
    for &f in &up_heights {
        up_term += f;
    }
    up_term /= R::of(up_test.rows() as f64);
    let mut down_term = R::zero();
    for (row, &f) in down_test.iter_rows().zip(&down_heights) {
        down_term += (f - down_logpdf(row)).exp();
    }
    down_term /= R::of(down_test.rows() as f64);
    Ok(-up_term + down_term)
}

/// Importance-sampling estimate of `∫ exp(f)`: the mean of
/// `exp(f(x) - log p_down(x))` over fresh down samples. Close to 1 means
/// the surface is approximately normalized.
pub fn total_integral<R: Real>(
    surface: &dyn Surface<R>,
    down: &dyn Density<R>,
    n: usize,
    rng: &mut dyn RngCore,
) -> Result<R> {
    if n == 0 {
        return Err(Error::InvalidConfig("total_integral needs n > 0".into()));
    }
    // Chunked so huge n does not hold a huge batch in memory.
    let chunk = 10_000.min(n);
    let mut remaining = n;
    let mut acc = R::zero();
    while remaining > 0 {
        let take = chunk.min(remaining);
        let batch = down.sample(rng, take);
        let heights = surface.heights(&batch)?;
        for (row, &f) in batch.iter_rows().zip(&heights) {
            acc += (f - down.log_pdf(row)).exp();
        }
        remaining -= take;
    }
    Ok(acc / R::of(n as f64))
}

/// Non-negative density proxy for a raw-pdf surface: clamps negative
/// heights and points outside the down support to zero.
pub fn pdf_proxy<'a, R: Real>(
    surface: &'a dyn Surface<R>,
    down_logpdf: &'a dyn Fn(&[R]) -> R,
) -> impl Fn(&[R]) -> R + 'a {
    move |x: &[R]| {
        let f = surface
            .heights(&Batch::from_point(x))
            .map(|h| h[0])
            .unwrap_or(R::nan());
        if f < R::zero() || down_logpdf(x) == R::neg_infinity() {
            R::zero()
        } else {
            f
        }
    }
}

/// Inverse-gradient-norm uncertainty metrics of a Gramian:
/// `C1_i = 1/G_ii` and `C2_i = (G^{-1})_ii`. A singular Gramian fails only
/// the `C2` half.
pub fn uncertainty_metrics<R: Real>(g: &Mat<R>) -> (Vec<R>, Result<Vec<R>>) {
    let n = g.n();
    let c1: Vec<R> = (0..n).map(|i| g[(i, i)].recip()).collect();
    let c2 = Cholesky::new(g).map(|ch| {
        let mut diag = Vec::with_capacity(n);
        let mut e = vec![R::zero(); n];
        for i in 0..n {
            e[i] = R::one();
            let col = ch.solve(&e);
            diag.push(col[i]);
            e[i] = R::zero();
        }
        diag
    });
    (c1, c2)
}

/// Sample approximation of mutual information: the mean of a learned
/// log-ratio surface over joint pairs.
pub fn mi_estimate<R: Real>(log_ratio: &dyn Surface<R>, joint_pairs: &Batch<R>) -> Result<R> {
    if joint_pairs.rows() == 0 {
        return Err(Error::InvalidConfig("mi_estimate needs pairs".into()));
    }
    let heights = log_ratio.heights(joint_pairs)?;
    Ok(heights.iter().copied().sum::<R>() / R::of(joint_pairs.rows() as f64))
}

/// Convenience bundle: all four metrics in one report.
pub fn report<R: Real>(
    surface: &dyn Surface<R>,
    true_logpdf: Option<&dyn Fn(&[R]) -> R>,
    down: &dyn Density<R>,
    test_up: &Batch<R>,
    test_down: &Batch<R>,
    ti_samples: usize,
    rng: &mut dyn RngCore,
) -> Result<EvalReport<R>> {
    let down_lp = |x: &[R]| down.log_pdf(x);
    let (p, l) = match true_logpdf {
        Some(t) => (psqr(surface, t, test_up)?, lsqr(surface, t, test_up)?),
        None => (R::nan(), R::nan()),
    };
    Ok(EvalReport {
        psqr: p,
        lsqr: l,
        is_err: is_error(surface, test_up, test_down, &down_lp)?,
        total_integral: total_integral(surface, down, ti_samples, rng)?,
        n_test: test_up.rows(),
    })
}
