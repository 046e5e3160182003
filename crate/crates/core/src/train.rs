//! The stochastic update, Adam, the learning-rate schedule and the training
//! loop.
//!
//! One iteration draws an up batch and a fresh down batch, weighs each
//! point's gradient by the instance magnitudes and steps the parameters
//! against the resulting direction. All randomness comes from named
//! sub-streams of the config seed, so a run is reproducible bit for bit.

use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::batch::Batch;
use crate::dist::{augment_additive_noise, Density};
use crate::error::{Error, Result};
use crate::instances::{AuxInfo, PsoInstance};
use crate::rng::{stream_rng, Stream};
use crate::scalar::Real;
use crate::surface::{Model, Surface};

/// Experiment hyper-parameters. Defaults: Adam(0.75, 0.999, 1e-10),
/// learning rate 3.5e-3 held for the first 40k iterations then decayed
/// geometrically to 3e-9 at the final iteration, batches of 1000.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig<R> {
    pub iterations: u64,
    pub batch_up: usize,
    pub batch_down: usize,
    pub lr0: R,
    pub warm_iters: u64,
    pub lr_min: R,
    pub adam_beta1: R,
    pub adam_beta2: R,
    pub adam_eps: R,
    pub seed: u64,
    /// Std of the additive up-batch augmentation noise; 0 disables it.
    pub augment_sigma: R,
    /// Metric-row cadence in iterations.
    pub eval_period: u64,
    /// Checkpoint cadence in iterations; 0 disables periodic checkpoints.
    pub checkpoint_period: u64,
    /// Optional max update-direction norm, a guard for unbounded-magnitude
    /// instances; off by default.
    pub grad_clip: Option<R>,
}

impl<R: Real> Default for TrainConfig<R> {
    fn default() -> Self {
        Self {
            iterations: 300_000,
            batch_up: 1000,
            batch_down: 1000,
            lr0: R::of(0.0035),
            warm_iters: 40_000,
            lr_min: R::of(3e-9),
            adam_beta1: R::of(0.75),
            adam_beta2: R::of(0.999),
            adam_eps: R::of(1e-10),
            seed: 0,
            augment_sigma: R::zero(),
            eval_period: 1000,
            checkpoint_period: 0,
            grad_clip: None,
        }
    }
}

impl<R: Real> TrainConfig<R> {
    pub fn validate(&self) -> Result<()> {
        if self.batch_up == 0 || self.batch_down == 0 {
            return Err(Error::InvalidConfig("batch sizes must be positive".into()));
        }
        if self.warm_iters > self.iterations {
            return Err(Error::InvalidConfig(format!(
                "warm_iters {} exceeds iterations {}",
                self.warm_iters, self.iterations
            )));
        }
        if !(self.lr0 > R::zero()) || !(self.lr_min > R::zero()) || self.lr_min > self.lr0 {
            return Err(Error::InvalidConfig(
                "need 0 < lr_min <= lr0".into(),
            ));
        }
        for (name, beta) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(beta >= R::zero() && beta < R::one()) {
                return Err(Error::InvalidConfig(format!("{name} must lie in [0,1)")));
            }
        }
        if !(self.adam_eps > R::zero()) {
            return Err(Error::InvalidConfig("adam_eps must be positive".into()));
        }
        if self.augment_sigma < R::zero() {
            return Err(Error::InvalidConfig("augment_sigma must be >= 0".into()));
        }
        if self.eval_period == 0 {
            return Err(Error::InvalidConfig("eval_period must be positive".into()));
        }
        Ok(())
    }
}

/// First/second-moment accumulators of Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<R> {
    m: Vec<R>,
    v: Vec<R>,
    step: u64,
}

impl<R: Real> AdamState<R> {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![R::zero(); len],
            v: vec![R::zero(); len],
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update with bias correction:
/// `m <- b1 m + (1-b1) g`, `v <- b2 v + (1-b2) g^2`,
/// `theta <- theta - lr * m_hat / (sqrt(v_hat) + eps)`.
pub fn adam_step<R: Real>(
    state: &mut AdamState<R>,
    params: &mut [R],
    grad: &[R],
    lr: R,
    cfg: &TrainConfig<R>,
) {
    assert_eq!(params.len(), grad.len());
    assert_eq!(params.len(), state.m.len());
    state.step += 1;
    let b1 = cfg.adam_beta1;
    let b2 = cfg.adam_beta2;
    let t = state.step as i32;
    let bc1 = R::one() - b1.powi(t);
    let bc2 = R::one() - b2.powi(t);
    for i in 0..params.len() {
        let g = grad[i];
        state.m[i] = b1 * state.m[i] + (R::one() - b1) * g;
        state.v[i] = b2 * state.v[i] + (R::one() - b2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + cfg.adam_eps);
    }
}

/// Learning rate at iteration `t`: `lr0` through the warm phase, then a
/// geometric decay that reaches `lr_min` exactly at the final iteration.
pub fn lr_at<R: Real>(t: u64, cfg: &TrainConfig<R>) -> R {
    if t <= cfg.warm_iters || cfg.iterations <= cfg.warm_iters {
        return cfg.lr0;
    }
    let frac = (t - cfg.warm_iters) as f64 / (cfg.iterations - cfg.warm_iters) as f64;
    cfg.lr0 * (cfg.lr_min / cfg.lr0).powf(R::of(frac))
}

/// Supplies the per-point auxiliary values (down log-density) to the
/// magnitude functions.
pub type AuxFn<'a, R> = dyn Fn(&[R]) -> AuxInfo<R> + 'a;

/// The stochastic update direction
/// `d = -(1/N_up) Σ M_up(x, f(x)) ∇f(x) + (1/N_down) Σ M_down(x, f(x)) ∇f(x)`,
/// realized as two weighted reverse passes.
pub fn pso_update_direction<R: Real>(
    surface: &dyn Surface<R>,
    inst: &PsoInstance<R>,
    up: &Batch<R>,
    down: &Batch<R>,
    aux: &AuxFn<R>,
) -> Result<Vec<R>> {
    if up.is_empty() || down.is_empty() {
        return Err(Error::InvalidConfig("empty batch".into()));
    }
    let n_up = R::of(up.rows() as f64);
    let (_, mut dir) = surface.coeff_weighted_gradient(up, &mut |i, row, s| {
        let a = aux(row);
        let m = inst.mag_up(row, s, &a);
        if !m.is_finite() {
            return Err(Error::NonFiniteMagnitude {
                instance: inst.name().to_string(),
                side: "up",
                index: i,
            });
        }
        Ok(-m / n_up)
    })?;
    let n_down = R::of(down.rows() as f64);
    let (_, down_part) = surface.coeff_weighted_gradient(down, &mut |i, row, s| {
        let a = aux(row);
        let m = inst.mag_down(row, s, &a);
        if !m.is_finite() {
            return Err(Error::NonFiniteMagnitude {
                instance: inst.name().to_string(),
                side: "down",
                index: i,
            });
        }
        Ok(m / n_down)
    })?;
    for (d, g) in dir.iter_mut().zip(&down_part) {
        *d += *g;
    }
    Ok(dir)
}

/// Where up batches come from.
pub enum UpSource<'a, R: Real> {
    /// A fixed dataset, cycled in epochs with a seed-derived shuffle.
    Dataset(&'a Batch<R>),
    /// Fresh draws every iteration.
    Sampler(&'a dyn Density<R>),
}

/// Where down batches come from.
pub enum DownSource<'a, R: Real> {
    /// Fresh draws from an analytic density; `aux.log_q` is its log-pdf at
    /// the full point.
    Density(&'a dyn Density<R>),
    /// Conditional estimation: rows are `[x | y]` pairs; the down batch
    /// draws `x` fresh from `x_density` and reuses dataset `y` values,
    /// independently. `aux.log_q` is `x_density`'s log-pdf of the x-part.
    ConditionalReuse {
        x_density: &'a dyn Density<R>,
        pairs: &'a Batch<R>,
        x_dim: usize,
    },
    /// Mutual-information estimation: the down batch pairs `x` and `y`
    /// drawn from *independent* dataset rows; `aux.log_q` is zero.
    IndependentPairs { pairs: &'a Batch<R>, x_dim: usize },
}

impl<'a, R: Real> DownSource<'a, R> {
    fn aux_of(&self, row: &[R]) -> AuxInfo<R> {
        match self {
            DownSource::Density(d) => AuxInfo::with_log_q(d.log_pdf(row)),
            DownSource::ConditionalReuse {
                x_density, x_dim, ..
            } => AuxInfo::with_log_q(x_density.log_pdf(&row[..*x_dim])),
            DownSource::IndependentPairs { .. } => AuxInfo::none(),
        }
    }
}

/// One metric record; times are wall-clock seconds since training started.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow<R> {
    pub iteration: u64,
    pub lr: R,
    pub psqr: R,
    pub lsqr: R,
    pub is_err: R,
    pub grad_norm: R,
    pub wall_time_s: f64,
}

/// Per-run metric records, iteration strictly increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsTrace<R> {
    pub rows: Vec<MetricsRow<R>>,
}

impl<R> Default for MetricsTrace<R> {
    fn default() -> Self {
        Self { rows: Vec::new() }
    }
}

/// Optional per-run callbacks: `metrics` computes `(psqr, lsqr, is_err)` on
/// a parameter snapshot, `checkpoint` persists one.
#[derive(Default)]
pub struct TrainHooks<'a, R: Real> {
    pub metrics: Option<Box<dyn FnMut(u64, &Model<R>) -> (R, R, R) + 'a>>,
    pub checkpoint: Option<Box<dyn FnMut(u64, &Model<R>) + 'a>>,
}

impl<'a, R: Real> TrainHooks<'a, R> {
    pub fn none() -> Self {
        Self {
            metrics: None,
            checkpoint: None,
        }
    }
}

/// Epoch-shuffled batch cursor over a dataset.
struct DatasetCycler {
    perm: Vec<usize>,
    cursor: usize,
}

impl DatasetCycler {
    fn new(len: usize) -> Self {
        Self {
            perm: (0..len).collect(),
            cursor: len, // force a shuffle on first use
        }
    }

    fn next_indices(&mut self, count: usize, rng: &mut ChaCha8Rng, out: &mut Vec<usize>) {
        out.clear();
        while out.len() < count {
            if self.cursor >= self.perm.len() {
                // Fisher-Yates reshuffle per epoch
                for i in (1..self.perm.len()).rev() {
                    let j = rng.gen_range(0..=i);
                    self.perm.swap(i, j);
                }
                self.cursor = 0;
            }
            let take = (count - out.len()).min(self.perm.len() - self.cursor);
            out.extend_from_slice(&self.perm[self.cursor..self.cursor + take]);
            self.cursor += take;
        }
    }
}

/// Builds one conditional batch pair: up rows drawn from the pair dataset,
/// down rows combining fresh `x ~ down_x` with dataset `y` values chosen
/// independently.
pub fn conditional_batch<R: Real>(
    pairs: &Batch<R>,
    x_dim: usize,
    down_x: &dyn Density<R>,
    n_up: usize,
    n_down: usize,
    rng: &mut ChaCha8Rng,
) -> (Batch<R>, Batch<R>) {
    assert!(pairs.rows() > 0, "empty pair dataset");
    assert!(x_dim < pairs.cols(), "x_dim must leave room for y");
    let up_idx: Vec<usize> = (0..n_up).map(|_| rng.gen_range(0..pairs.rows())).collect();
    let up = pairs.gather(&up_idx);

    let y_dim = pairs.cols() - x_dim;
    let mut down = Batch::zeros(n_down, pairs.cols());
    for i in 0..n_down {
        let row = down.row_mut(i);
        down_x.sample_into(rng, &mut row[..x_dim]);
        let j = rng.gen_range(0..pairs.rows());
        row[x_dim..].copy_from_slice(&pairs.row(j)[x_dim..y_dim + x_dim]);
    }
    (up, down)
}

fn independent_pair_batch<R: Real>(
    pairs: &Batch<R>,
    x_dim: usize,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Batch<R> {
    let mut out = Batch::zeros(count, pairs.cols());
    for i in 0..count {
        let xi = rng.gen_range(0..pairs.rows());
        let yi = rng.gen_range(0..pairs.rows());
        let row = out.row_mut(i);
        row[..x_dim].copy_from_slice(&pairs.row(xi)[..x_dim]);
        row[x_dim..].copy_from_slice(&pairs.row(yi)[x_dim..]);
    }
    out
}

/// Runs the training loop; returns the final model and the metric trace.
///
/// Numeric failures abort with [`Error::TrainingAborted`] carrying the last
/// completed iteration, so callers can point at their latest checkpoint.
pub fn train<R: Real>(
    mut model: Model<R>,
    inst: &PsoInstance<R>,
    up_source: UpSource<'_, R>,
    down_source: DownSource<'_, R>,
    cfg: &TrainConfig<R>,
    hooks: &mut TrainHooks<'_, R>,
) -> Result<(Model<R>, MetricsTrace<R>)> {
    cfg.validate()?;
    if let UpSource::Dataset(data) = &up_source {
        if data.rows() == 0 {
            return Err(Error::InvalidConfig("empty up dataset".into()));
        }
        if data.cols() != model.spec().input_dim {
            return Err(Error::DimMismatch(format!(
                "dataset dim {} != model input dim {}",
                data.cols(),
                model.spec().input_dim
            )));
        }
    }

    let mut rng_up = stream_rng(cfg.seed, Stream::Up);
    let mut rng_down = stream_rng(cfg.seed, Stream::Down);
    let mut rng_noise = stream_rng(cfg.seed, Stream::Noise);

    let mut cycler = match &up_source {
        UpSource::Dataset(data) => Some(DatasetCycler::new(data.rows())),
        UpSource::Sampler(_) => None,
    };
    let mut idx_buf: Vec<usize> = Vec::with_capacity(cfg.batch_up);

    let mut adam = AdamState::new(model.params().len());
    let mut trace = MetricsTrace::default();
    let started = Instant::now();
    let aux = |row: &[R]| down_source.aux_of(row);

    let record =
        |iter: u64, lr: R, grad_norm: R, model: &Model<R>, trace: &mut MetricsTrace<R>,
         hooks: &mut TrainHooks<'_, R>| {
            let (psqr, lsqr, is_err) = match hooks.metrics.as_mut() {
                Some(m) => m(iter, model),
                None => (R::nan(), R::nan(), R::nan()),
            };
            trace.rows.push(MetricsRow {
                iteration: iter,
                lr,
                psqr,
                lsqr,
                is_err,
                grad_norm,
                wall_time_s: started.elapsed().as_secs_f64(),
            });
        };

    if cfg.iterations > 0 {
        record(0, lr_at(0, cfg), R::nan(), &model, &mut trace, hooks);
    }

    for t in 1..=cfg.iterations {
        // Assemble batches for this iteration.
        let mut up = match &up_source {
            UpSource::Dataset(data) => {
                let cycler = cycler.as_mut().unwrap();
                cycler.next_indices(cfg.batch_up, &mut rng_up, &mut idx_buf);
                data.gather(&idx_buf)
            }
            UpSource::Sampler(d) => d.sample(&mut rng_up, cfg.batch_up),
        };
        if cfg.augment_sigma > R::zero() {
            augment_additive_noise(&mut up, cfg.augment_sigma, &mut rng_noise);
        }
        let down = match &down_source {
            DownSource::Density(d) => d.sample(&mut rng_down, cfg.batch_down),
            DownSource::ConditionalReuse {
                x_density,
                pairs,
                x_dim,
            } => {
                let (_, down) = conditional_batch(
                    pairs,
                    *x_dim,
                    *x_density,
                    0,
                    cfg.batch_down,
                    &mut rng_down,
                );
                down
            }
            DownSource::IndependentPairs { pairs, x_dim } => {
                independent_pair_batch(pairs, *x_dim, cfg.batch_down, &mut rng_down)
            }
        };

        let mut dir = pso_update_direction(&model, inst, &up, &down, &aux).map_err(|e| {
            Error::TrainingAborted {
                iteration: t - 1,
                cause: Box::new(e),
            }
        })?;

        let mut norm_sq = R::zero();
        for &g in &dir {
            norm_sq += g * g;
        }
        let norm = norm_sq.sqrt();
        if let Some(clip) = cfg.grad_clip {
            if norm > clip {
                let scale = clip / norm;
                for g in &mut dir {
                    *g *= scale;
                }
            }
        }

        let lr = lr_at(t, cfg);
        adam_step(&mut adam, model.params_mut().values_mut(), &dir, lr, cfg);
        if !model.params().values().iter().all(|v| v.is_finite()) {
            return Err(Error::TrainingAborted {
                iteration: t - 1,
                cause: Box::new(Error::NonFinite {
                    stage: "parameter update",
                    layer: 0,
                }),
            });
        }

        if t % cfg.eval_period == 0 || t == cfg.iterations {
            record(t, lr, norm, &model, &mut trace, hooks);
        }
        if cfg.checkpoint_period > 0 && (t % cfg.checkpoint_period == 0 || t == cfg.iterations) {
            if let Some(cb) = hooks.checkpoint.as_mut() {
                cb(t, &model);
            }
        }
    }

    Ok((model, trace))
}
