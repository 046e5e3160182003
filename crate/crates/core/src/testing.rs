//! Test-only oracles, independent of the reverse-mode implementation.
//!
//! Used by unit tests and the acceptance suite; not part of the public API.

use crate::batch::Batch;
use crate::scalar::Real;
use crate::surface::{
    forward, LayerKind, NetworkSpec, ParamVector, Preconditioner, Topology,
};

/// Central finite-difference gradient of `Σ_i coeffs_i · f(x_i)`.
///
/// Goes through `forward` only, so it stays an independent check of the
/// reverse pass.
pub fn fd_gradient<R: Real>(
    spec: &NetworkSpec<R>,
    precond: &Preconditioner<R>,
    params: &ParamVector<R>,
    x: &Batch<R>,
    coeffs: &[R],
    step: R,
) -> Vec<R> {
    let weighted = |p: &ParamVector<R>| -> R {
        forward(spec, precond, p, x)
            .unwrap()
            .iter()
            .zip(coeffs)
            .map(|(&f, &c)| f * c)
            .sum()
    };
    let mut g = vec![R::zero(); params.len()];
    let mut work = params.clone();
    for i in 0..params.len() {
        let orig = work.values()[i];
        work.values_mut()[i] = orig + step;
        let hi = weighted(&work);
        work.values_mut()[i] = orig - step;
        let lo = weighted(&work);
        work.values_mut()[i] = orig;
        g[i] = (hi - lo) / (R::of(2.0) * step);
    }
    g
}

/// Worst relative mismatch between two gradient vectors, with an absolute
/// floor so near-zero entries do not blow the ratio up.
pub fn max_rel_err<R: Real>(a: &[R], b: &[R], floor: R) -> R {
    let mut worst = R::zero();
    for (&x, &y) in a.iter().zip(b) {
        let denom = x.abs().max(y.abs()).max(floor);
        let rel = (x - y).abs() / denom;
        if rel > worst {
            worst = rel;
        }
    }
    worst
}

/// Finite differences with a self-consistency mask: a coordinate is
/// reliable when halving the step leaves the estimate unchanged to 1e-4
/// relative. Coordinates where the step straddles an activation kink fail
/// that check and must not count against the reverse pass.
pub fn fd_gradient_masked<R: Real>(
    spec: &NetworkSpec<R>,
    precond: &Preconditioner<R>,
    params: &ParamVector<R>,
    x: &Batch<R>,
    coeffs: &[R],
    step: R,
) -> (Vec<R>, Vec<bool>) {
    let full = fd_gradient(spec, precond, params, x, coeffs, step);
    let half = fd_gradient(spec, precond, params, x, coeffs, step / R::of(2.0));
    let mask = full
        .iter()
        .zip(&half)
        .map(|(&a, &b)| (a - b).abs() <= R::of(1e-4) * a.abs().max(b.abs()).max(R::of(1e-3)))
        .collect();
    (full, mask)
}

/// [`max_rel_err`] over the reliable coordinates only; panics if fewer than
/// 90% of coordinates are reliable (the oracle itself would be suspect).
pub fn max_rel_err_masked<R: Real>(a: &[R], b: &[R], mask: &[bool], floor: R) -> R {
    let kept = mask.iter().filter(|&&m| m).count();
    assert!(
        kept * 10 >= mask.len() * 9,
        "finite-difference oracle unreliable on {}/{} coordinates",
        mask.len() - kept,
        mask.len()
    );
    let mut worst = R::zero();
    for ((&x, &y), &m) in a.iter().zip(b).zip(mask) {
        if !m {
            continue;
        }
        let denom = x.abs().max(y.abs()).max(floor);
        let rel = (x - y).abs() / denom;
        if rel > worst {
            worst = rel;
        }
    }
    worst
}

/// Rewrites a block-diagonal network as the equivalent fully-connected one:
/// inner weight matrices become explicitly assembled block-diagonal dense
/// matrices. Returns the dense spec and parameters.
pub fn assemble_bd_as_fc<R: Real>(
    spec: &NetworkSpec<R>,
    params: &ParamVector<R>,
) -> (NetworkSpec<R>, ParamVector<R>) {
    let (nb, sb) = match spec.topology {
        Topology::BlockDiagonal {
            num_blocks,
            block_size,
        } => (num_blocks, block_size),
        _ => panic!("expected a block-diagonal spec"),
    };
    let width = nb * sb;
    let fc_spec = NetworkSpec {
        topology: Topology::FullyConnected { width },
        ..spec.clone()
    };
    let bd_layers = spec.layers().unwrap();
    let fc_len = fc_spec.param_len().unwrap();
    let mut values = vec![R::zero(); fc_len];
    let fc_layers = fc_spec.layers().unwrap();
    let theta = params.values();
    for (bd, fc) in bd_layers.iter().zip(&fc_layers) {
        match bd.kind {
            LayerKind::Dense => {
                values[fc.weight_offset..fc.weight_offset + fc.weight_len]
                    .copy_from_slice(&theta[bd.weight_offset..bd.weight_offset + bd.weight_len]);
            }
            LayerKind::BlockDiagonal { .. } => {
                for j in 0..nb {
                    for k in 0..sb {
                        for m in 0..sb {
                            let dense_row = j * sb + k;
                            let dense_col = j * sb + m;
                            values[fc.weight_offset + dense_row * width + dense_col] =
                                theta[bd.weight_offset + j * sb * sb + k * sb + m];
                        }
                    }
                }
            }
        }
        values[fc.bias_offset..fc.bias_offset + fc.bias_len]
            .copy_from_slice(&theta[bd.bias_offset..bd.bias_offset + bd.bias_len]);
    }
    let fc_params = ParamVector::from_values(&fc_spec, values).unwrap();
    (fc_spec, fc_params)
}

use crate::error::Result;
use crate::surface::{Model, Surface};
use std::sync::Arc;

/// Exactly linear surface `f(x) = w·x`: gradients are the inputs, so every
/// kernel identity is closed-form.
#[derive(Debug, Clone)]
pub struct LinearSurface<R> {
    pub w: Vec<R>,
}

impl<R: Real> Surface<R> for LinearSurface<R> {
    fn input_dim(&self) -> usize {
        self.w.len()
    }

    fn param_len(&self) -> usize {
        self.w.len()
    }

    fn heights(&self, x: &Batch<R>) -> Result<Vec<R>> {
        Ok(x.iter_rows()
            .map(|row| row.iter().zip(&self.w).map(|(&a, &b)| a * b).sum())
            .collect())
    }

    fn weighted_gradient(&self, x: &Batch<R>, coeffs: &[R]) -> Result<Vec<R>> {
        let mut g = vec![R::zero(); self.w.len()];
        for (row, &c) in x.iter_rows().zip(coeffs) {
            for (gi, &xi) in g.iter_mut().zip(row) {
                *gi += c * xi;
            }
        }
        Ok(g)
    }

    fn param_values(&self) -> &[R] {
        &self.w
    }

    fn with_param_values(&self, values: Vec<R>) -> Result<Box<dyn Surface<R>>> {
        Ok(Box::new(LinearSurface { w: values }))
    }
}

/// A surface whose heights come from a closed-form oracle while gradients
/// come from a wrapped network; puts the update rule exactly at a chosen
/// balance state.
#[derive(Clone)]
pub struct OracleSurface<R> {
    pub model: Model<R>,
    pub height_fn: Arc<dyn Fn(&[R]) -> R + Send + Sync>,
}

impl<R: Real> Surface<R> for OracleSurface<R> {
    fn input_dim(&self) -> usize {
        self.model.spec().input_dim
    }

    fn param_len(&self) -> usize {
        self.model.params().len()
    }

    fn heights(&self, x: &Batch<R>) -> Result<Vec<R>> {
        Ok(x.iter_rows().map(|row| (self.height_fn)(row)).collect())
    }

    fn weighted_gradient(&self, x: &Batch<R>, coeffs: &[R]) -> Result<Vec<R>> {
        self.model.weighted_gradient(x, coeffs)
    }

    fn per_sample_gradients(&self, x: &Batch<R>) -> Result<Batch<R>> {
        self.model.per_sample_gradients(x)
    }

    fn param_values(&self) -> &[R] {
        self.model.param_values()
    }

    fn with_param_values(&self, values: Vec<R>) -> Result<Box<dyn Surface<R>>> {
        let params = crate::surface::ParamVector::from_values(self.model.spec(), values)?;
        Ok(Box::new(OracleSurface {
            model: self.model.with_params(params)?,
            height_fn: self.height_fn.clone(),
        }))
    }
}
