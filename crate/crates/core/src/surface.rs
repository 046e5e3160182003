//! The surface model `f(x)`: network description, parameter storage,
//! preconditioning, forward evaluation and reverse-mode gradients.
//!
//! Shapes follow one convention throughout:
//! - dense weights are row-major `[out × in]`,
//! - block-diagonal weights are `[num_blocks × block_size(out) × block_size(in)]`,
//! - a parameter vector is the concatenation `[w_1, b_1, w_2, b_2, ...]` in
//!   layer order (this layout is what checkpoints serialize).
//!
//! Layer 1 is always dense (`n → width`), the last layer is always dense
//! (`width → 1`, no activation), and the inner layers are dense or
//! block-diagonal according to the topology. With shortcuts enabled each
//! inner layer computes `u_i = act(W u_{i-1} + b) + u_{i-1}`.

use std::sync::Arc;

use crate::batch::Batch;
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};
use crate::scalar::Real;

/// Hidden-layer wiring.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Topology {
    /// All layers dense, inner width `width`.
    FullyConnected { width: usize },
    /// Inner layers split into `num_blocks` independent channels of
    /// `block_size` units each (inner width `num_blocks * block_size`).
    BlockDiagonal { num_blocks: usize, block_size: usize },
}

/// Pointwise nonlinearity of the hidden layers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation<R> {
    Relu,
    LeakyRelu { slope: R },
    Tanh,
}

/// Default leaky slope when a config does not set one.
pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;

impl<R: Real> Activation<R> {
    #[inline]
    fn apply(self, z: R) -> R {
        match self {
            Activation::Relu => {
                if z > R::zero() {
                    z
                } else {
                    R::zero()
                }
            }
            Activation::LeakyRelu { slope } => {
                if z > R::zero() {
                    z
                } else {
                    slope * z
                }
            }
            Activation::Tanh => z.tanh(),
        }
    }

    /// Applies the activation across a slice (dispatch hoisted out of the
    /// element loop).
    fn apply_slice(self, z: &mut [R]) {
        match self {
            Activation::Relu => {
                for v in z {
                    if !(*v > R::zero()) {
                        *v = R::zero();
                    }
                }
            }
            Activation::LeakyRelu { slope } => {
                for v in z {
                    if !(*v > R::zero()) {
                        *v = slope * *v;
                    }
                }
            }
            Activation::Tanh => {
                for v in z {
                    *v = v.tanh();
                }
            }
        }
    }

    /// `delta[i] = g[i] * deriv(a[i])` with the derivative taken from the
    /// activation output.
    fn deriv_mul_slice(self, a: &[R], g: &[R], delta: &mut [R]) {
        match self {
            Activation::Relu => {
                for ((&av, &gv), d) in a.iter().zip(g).zip(delta.iter_mut()) {
                    *d = if av > R::zero() { gv } else { R::zero() };
                }
            }
            Activation::LeakyRelu { slope } => {
                for ((&av, &gv), d) in a.iter().zip(g).zip(delta.iter_mut()) {
                    *d = if av > R::zero() { gv } else { slope * gv };
                }
            }
            Activation::Tanh => {
                for ((&av, &gv), d) in a.iter().zip(g).zip(delta.iter_mut()) {
                    *d = gv * (R::one() - av * av);
                }
            }
        }
    }

}

/// Final squashing of the surface height.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OutputTransform<R> {
    Identity,
    /// `f = (h_max-h_min)/2 * tanh(h) + (h_max+h_min)/2`, clamping the
    /// surface into `[h_min, h_max]`.
    Bounded { h_min: R, h_max: R },
}

impl<R: Real> OutputTransform<R> {
    #[inline]
    fn apply(self, h: R) -> R {
        match self {
            OutputTransform::Identity => h,
            OutputTransform::Bounded { h_min, h_max } => {
                let half = R::of(0.5);
                // clamp: the two-term sum can land one ulp outside the range
                (half * (h_max - h_min) * h.tanh() + half * (h_max + h_min))
                    .max(h_min)
                    .min(h_max)
            }
        }
    }

    #[inline]
    fn deriv(self, h: R) -> R {
        match self {
            OutputTransform::Identity => R::one(),
            OutputTransform::Bounded { h_min, h_max } => {
                let t = h.tanh();
                R::of(0.5) * (h_max - h_min) * (R::one() - t * t)
            }
        }
    }
}

/// Architecture description of the surface network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec<R> {
    pub input_dim: usize,
    pub topology: Topology,
    /// Total layer count including first and last dense layers; at least 2.
    pub num_layers: usize,
    pub activation: Activation<R>,
    pub shortcuts: bool,
    pub output_transform: OutputTransform<R>,
}

/// Weight-block kind of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Dense,
    BlockDiagonal { num_blocks: usize, block_size: usize },
}

/// One layer's widths and offsets into the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub kind: LayerKind,
    pub in_width: usize,
    pub out_width: usize,
    pub weight_offset: usize,
    pub weight_len: usize,
    pub bias_offset: usize,
    pub bias_len: usize,
    /// Whether the activation function follows this layer.
    pub activated: bool,
    /// Whether a residual shortcut bypasses this layer.
    pub shortcut: bool,
}

impl<R: Real> NetworkSpec<R> {
    /// Inner width (`width` or `num_blocks * block_size`).
    pub fn inner_width(&self) -> usize {
        match self.topology {
            Topology::FullyConnected { width } => width,
            Topology::BlockDiagonal {
                num_blocks,
                block_size,
            } => num_blocks * block_size,
        }
    }

    /// Checks every structural invariant and derives per-layer shapes.
    pub fn layers(&self) -> Result<Vec<LayerShape>> {
        if self.num_layers < 2 {
            return Err(Error::InvalidSpec(format!(
                "num_layers must be >= 2, got {}",
                self.num_layers
            )));
        }
        if self.input_dim == 0 {
            return Err(Error::InvalidSpec("input_dim must be positive".into()));
        }
        match self.topology {
            Topology::FullyConnected { width } if width == 0 => {
                return Err(Error::InvalidSpec("width must be positive".into()));
            }
            Topology::BlockDiagonal {
                num_blocks,
                block_size,
            } if num_blocks == 0 || block_size == 0 => {
                return Err(Error::InvalidSpec(
                    "num_blocks and block_size must be positive".into(),
                ));
            }
            _ => {}
        }
        if let Activation::LeakyRelu { slope } = self.activation {
            if !(slope > R::zero() && slope < R::one()) {
                return Err(Error::InvalidSpec(format!(
                    "leaky_relu slope must lie in (0,1), got {slope}"
                )));
            }
        }
        if let OutputTransform::Bounded { h_min, h_max } = self.output_transform {
            if !(h_min < h_max) || !h_min.is_finite() || !h_max.is_finite() {
                return Err(Error::InvalidSpec(format!(
                    "bounded output requires h_min < h_max, got [{h_min}, {h_max}]"
                )));
            }
        }
        if self.shortcuts && self.num_layers < 3 {
            return Err(Error::InvalidSpec(
                "shortcuts need at least one inner layer (num_layers >= 3)".into(),
            ));
        }

        let width = self.inner_width();
        let mut layers = Vec::with_capacity(self.num_layers);
        let mut offset = 0usize;
        for idx in 1..=self.num_layers {
            let (kind, in_w, out_w) = if idx == 1 {
                (LayerKind::Dense, self.input_dim, width)
            } else if idx == self.num_layers {
                (LayerKind::Dense, width, 1)
            } else {
                match self.topology {
                    Topology::FullyConnected { .. } => (LayerKind::Dense, width, width),
                    Topology::BlockDiagonal {
                        num_blocks,
                        block_size,
                    } => (
                        LayerKind::BlockDiagonal {
                            num_blocks,
                            block_size,
                        },
                        width,
                        width,
                    ),
                }
            };
            let weight_len = match kind {
                LayerKind::Dense => in_w * out_w,
                LayerKind::BlockDiagonal {
                    num_blocks,
                    block_size,
                } => num_blocks * block_size * block_size,
            };
            let inner = idx > 1 && idx < self.num_layers;
            let shortcut = self.shortcuts && inner;
            if shortcut && in_w != out_w {
                return Err(Error::InvalidSpec(format!(
                    "shortcut at layer {idx} needs matching widths, got {in_w} -> {out_w}"
                )));
            }
            layers.push(LayerShape {
                kind,
                in_width: in_w,
                out_width: out_w,
                weight_offset: offset,
                weight_len,
                bias_offset: offset + weight_len,
                bias_len: out_w,
                activated: idx < self.num_layers,
                shortcut,
            });
            offset += weight_len + out_w;
        }
        Ok(layers)
    }

    /// Total parameter count implied by the spec.
    pub fn param_len(&self) -> Result<usize> {
        Ok(self
            .layers()?
            .last()
            .map(|l| l.bias_offset + l.bias_len)
            .unwrap_or(0))
    }

    pub fn validate(&self) -> Result<()> {
        self.layers().map(|_| ())
    }
}

/// Flat parameter storage laid out per [`NetworkSpec::layers`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector<R> {
    values: Vec<R>,
}

impl<R: Real> ParamVector<R> {
    /// Wraps raw values, checking length and finiteness against the spec.
    pub fn from_values(spec: &NetworkSpec<R>, values: Vec<R>) -> Result<Self> {
        let want = spec.param_len()?;
        if values.len() != want {
            return Err(Error::DimMismatch(format!(
                "parameter vector has {} entries, spec wants {want}",
                values.len()
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidSpec(
                "parameter vector contains non-finite entries".into(),
            ));
        }
        Ok(Self { values })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.values.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn values(&self) -> &[R] {
        &self.values
    }

    #[inline]
    pub fn values_mut(&mut self) -> &mut [R] {
        &mut self.values
    }
}

type BiasFn<R> = Arc<dyn Fn(&[R]) -> R + Send + Sync>;

/// Input standardization plus optional height bias added to the raw output.
///
/// With a height bias of `log p_down` and a zero-initialized final layer the
/// initial surface coincides with the down log-density exactly.
#[derive(Clone)]
pub struct Preconditioner<R> {
    mean: Vec<R>,
    std: Vec<R>,
    height_bias: Option<BiasFn<R>>,
}

impl<R: Real> Preconditioner<R> {
    pub fn new(mean: Vec<R>, std: Vec<R>) -> Result<Self> {
        if mean.len() != std.len() {
            return Err(Error::DimMismatch(format!(
                "mean has {} entries, std has {}",
                mean.len(),
                std.len()
            )));
        }
        if !std.iter().all(|s| *s > R::zero() && s.is_finite()) {
            return Err(Error::InvalidSpec(
                "preconditioner std entries must be positive and finite".into(),
            ));
        }
        Ok(Self {
            mean,
            std,
            height_bias: None,
        })
    }

    /// No-op preconditioner (zero mean, unit std, no bias).
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![R::zero(); dim],
            std: vec![R::one(); dim],
            height_bias: None,
        }
    }

    /// Mean/std fitted per dimension from data.
    pub fn fit(data: &Batch<R>) -> Result<Self> {
        if data.rows() == 0 {
            return Err(Error::InvalidDistribution(
                "cannot fit preconditioner on empty data".into(),
            ));
        }
        let n = data.cols();
        let count = R::of(data.rows() as f64);
        let mut mean = vec![R::zero(); n];
        for row in data.iter_rows() {
            for (m, &x) in mean.iter_mut().zip(row) {
                *m += x;
            }
        }
        for m in &mut mean {
            *m /= count;
        }
        let mut var = vec![R::zero(); n];
        for row in data.iter_rows() {
            for ((v, &m), &x) in var.iter_mut().zip(&mean).zip(row) {
                let d = x - m;
                *v += d * d;
            }
        }
        let std: Vec<R> = var.iter().map(|v| (*v / count).sqrt()).collect();
        if !std.iter().all(|s| *s > R::zero()) {
            return Err(Error::InvalidDistribution(
                "degenerate dimension: zero sample variance".into(),
            ));
        }
        Self::new(mean, std)
    }

    pub fn with_height_bias(mut self, bias: BiasFn<R>) -> Self {
        self.height_bias = Some(bias);
        self
    }

    pub fn clear_height_bias(mut self) -> Self {
        self.height_bias = None;
        self
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    #[inline]
    pub fn mean(&self) -> &[R] {
        &self.mean
    }

    #[inline]
    pub fn std(&self) -> &[R] {
        &self.std
    }

    pub fn has_height_bias(&self) -> bool {
        self.height_bias.is_some()
    }

    pub fn bias_at(&self, x: &[R]) -> R {
        match &self.height_bias {
            Some(f) => f(x),
            None => R::zero(),
        }
    }

    pub fn normalize(&self, x: &[R], out: &mut [R]) {
        for i in 0..x.len() {
            out[i] = (x[i] - self.mean[i]) / self.std[i];
        }
    }

    pub fn denormalize(&self, x: &[R], out: &mut [R]) {
        for i in 0..x.len() {
            out[i] = x[i] * self.std[i] + self.mean[i];
        }
    }
}

impl<R> std::fmt::Debug for Preconditioner<R> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Preconditioner")
            .field("dim", &self.mean.len())
            .field("height_bias", &self.height_bias.is_some())
            .finish()
    }
}

/// Anything that exposes heights and parameter gradients: the trainer and
/// diagnostics are written against this, so oracle surrogates can stand in
/// for a real network.
pub trait Surface<R: Real>: Send + Sync {
    fn input_dim(&self) -> usize;
    fn param_len(&self) -> usize;

    /// `f(x_i)` for every row of the batch.
    fn heights(&self, x: &Batch<R>) -> Result<Vec<R>>;

    /// Gradient of `Σ_i coeffs_i · f(x_i)` with respect to the parameters,
    /// computed in one reverse pass.
    fn weighted_gradient(&self, x: &Batch<R>, coeffs: &[R]) -> Result<Vec<R>>;

    /// Row `i` holds `∇f(x_i)`.
    fn per_sample_gradients(&self, x: &Batch<R>) -> Result<Batch<R>> {
        let mut out = Batch::zeros(x.rows(), self.param_len());
        for i in 0..x.rows() {
            let single = Batch::from_point(x.row(i));
            let g = self.weighted_gradient(&single, &[R::one()])?;
            out.row_mut(i).copy_from_slice(&g);
        }
        Ok(out)
    }

    /// Heights and the gradient of `Σ_i coeff(i, x_i, f(x_i)) · f(x_i)` in
    /// one pass; `coeff` sees each row with its height. Implementations can
    /// reuse the forward cache for the reverse sweep.
    fn coeff_weighted_gradient(
        &self,
        x: &Batch<R>,
        coeff: &mut dyn FnMut(usize, &[R], R) -> Result<R>,
    ) -> Result<(Vec<R>, Vec<R>)> {
        let heights = self.heights(x)?;
        let mut coeffs = Vec::with_capacity(heights.len());
        for (i, (&s, row)) in heights.iter().zip(x.iter_rows()).enumerate() {
            coeffs.push(coeff(i, row, s)?);
        }
        let g = self.weighted_gradient(x, &coeffs)?;
        Ok((heights, g))
    }

    /// Flat view of the current parameters.
    fn param_values(&self) -> &[R];

    /// Same surface with replaced parameters (used by step diagnostics).
    fn with_param_values(&self, values: Vec<R>) -> Result<Box<dyn Surface<R>>>;
}

/// Spec + preconditioner + parameters: a callable surface.
#[derive(Debug, Clone)]
pub struct Model<R> {
    spec: NetworkSpec<R>,
    precond: Preconditioner<R>,
    params: ParamVector<R>,
}

impl<R: Real> Model<R> {
    pub fn new(
        spec: NetworkSpec<R>,
        precond: Preconditioner<R>,
        params: ParamVector<R>,
    ) -> Result<Self> {
        spec.validate()?;
        if precond.dim() != spec.input_dim {
            return Err(Error::DimMismatch(format!(
                "preconditioner dim {} != input dim {}",
                precond.dim(),
                spec.input_dim
            )));
        }
        if params.len() != spec.param_len()? {
            return Err(Error::DimMismatch(format!(
                "parameter vector has {} entries, spec wants {}",
                params.len(),
                spec.param_len()?
            )));
        }
        Ok(Self {
            spec,
            precond,
            params,
        })
    }

    /// Spec-initialized model (Xavier weights, zero biases).
    pub fn init(
        spec: NetworkSpec<R>,
        precond: Preconditioner<R>,
        seed: u64,
        zero_last_layer: bool,
    ) -> Result<Self> {
        let params = init_params(&spec, seed, zero_last_layer)?;
        Self::new(spec, precond, params)
    }

    pub fn spec(&self) -> &NetworkSpec<R> {
        &self.spec
    }

    pub fn precond(&self) -> &Preconditioner<R> {
        &self.precond
    }

    pub fn params(&self) -> &ParamVector<R> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamVector<R> {
        &mut self.params
    }

    /// Same architecture with replaced parameters.
    pub fn with_params(&self, params: ParamVector<R>) -> Result<Self> {
        Self::new(self.spec.clone(), self.precond.clone(), params)
    }
}

impl<R: Real> Surface<R> for Model<R> {
    fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    fn param_len(&self) -> usize {
        self.params.len()
    }

    fn heights(&self, x: &Batch<R>) -> Result<Vec<R>> {
        forward(&self.spec, &self.precond, &self.params, x)
    }

    fn weighted_gradient(&self, x: &Batch<R>, coeffs: &[R]) -> Result<Vec<R>> {
        param_gradient(&self.spec, &self.precond, &self.params, x, coeffs)
    }

    fn per_sample_gradients(&self, x: &Batch<R>) -> Result<Batch<R>> {
        per_sample_gradients(&self.spec, &self.precond, &self.params, x)
    }

    fn coeff_weighted_gradient(
        &self,
        x: &Batch<R>,
        coeff: &mut dyn FnMut(usize, &[R], R) -> Result<R>,
    ) -> Result<(Vec<R>, Vec<R>)> {
        let layers = self.spec.layers()?;
        let pass = run_forward(&self.spec, &self.precond, &self.params, x)?;
        let mut coeffs = Vec::with_capacity(pass.heights.len());
        for (i, (&s, row)) in pass.heights.iter().zip(x.iter_rows()).enumerate() {
            coeffs.push(coeff(i, row, s)?);
        }
        let grad = backward(&self.spec, &self.params, &pass, &coeffs, &layers, x.rows());
        let heights = pass.recycle_keep_heights();
        if !grad.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                stage: "gradient",
                layer: 0,
            });
        }
        Ok((heights, grad))
    }

    fn param_values(&self) -> &[R] {
        self.params.values()
    }

    fn with_param_values(&self, values: Vec<R>) -> Result<Box<dyn Surface<R>>> {
        let params = ParamVector::from_values(&self.spec, values)?;
        Ok(Box::new(self.with_params(params)?))
    }
}

/// Xavier-uniform weights (`limit = sqrt(6/(fan_in+fan_out))`, per block for
/// block-diagonal layers), zero biases. With `zero_last_layer` the final
/// dense layer is exactly zero so the initial surface equals the height bias.
pub fn init_params<R: Real>(
    spec: &NetworkSpec<R>,
    seed: u64,
    zero_last_layer: bool,
) -> Result<ParamVector<R>> {
    let layers = spec.layers()?;
    let total = layers.last().map(|l| l.bias_offset + l.bias_len).unwrap();
    let mut values = vec![R::zero(); total];
    let mut rng = stream_rng(seed, Stream::Init);
    let last = layers.len();
    for (i, layer) in layers.iter().enumerate() {
        if zero_last_layer && i + 1 == last {
            break;
        }
        let (fan_in, fan_out) = match layer.kind {
            LayerKind::Dense => (layer.in_width, layer.out_width),
            LayerKind::BlockDiagonal { block_size, .. } => (block_size, block_size),
        };
        let limit = (R::of(6.0) / R::of((fan_in + fan_out) as f64)).sqrt();
        let w = &mut values[layer.weight_offset..layer.weight_offset + layer.weight_len];
        for v in w {
            *v = R::uniform(&mut rng, -limit, limit);
        }
        // biases stay zero
    }
    ParamVector::from_values(spec, values)
}

struct ForwardPass<R> {
    /// Normalized input `u_0`.
    u0: Vec<R>,
    /// `a_1..a_{L-1}`: activation outputs of the hidden layers.
    acts: Vec<Vec<R>>,
    /// Post-shortcut layer outputs where they differ from the activation
    /// (`u_{i+1} = a_i + u_i`); `None` when `u_{i+1} == a_i`.
    shortcut_sums: Vec<Option<Vec<R>>>,
    /// Pre-transform height `net(x) + bias(x)` per sample.
    pre: Vec<R>,
    heights: Vec<R>,
}

impl<R: Real> ForwardPass<R> {
    /// Returns all buffers to the thread-local pool.
    fn recycle(self) {
        R::give_buf(self.u0);
        for a in self.acts {
            R::give_buf(a);
        }
        for s in self.shortcut_sums.into_iter().flatten() {
            R::give_buf(s);
        }
    }

    /// Like [`recycle`](Self::recycle) but keeps the heights alive.
    fn recycle_keep_heights(mut self) -> Vec<R> {
        let heights = std::mem::take(&mut self.heights);
        self.recycle();
        heights
    }

    /// Input `u_i` of layer `i`.
    fn input_of(&self, i: usize) -> &[R] {
        if i == 0 {
            &self.u0
        } else {
            match &self.shortcut_sums[i - 1] {
                Some(u) => u,
                None => &self.acts[i - 1],
            }
        }
    }
}

/// Dot product with four independent accumulators; the serial `acc +=`
/// chain otherwise caps throughput at one add per FP-add latency, and
/// `chunks_exact` keeps the lane indexing bounds-check free.
#[inline]
fn dot_unrolled<R: Real>(a: &[R], b: &[R]) -> R {
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    let (mut s0, mut s1, mut s2, mut s3) = (R::zero(), R::zero(), R::zero(), R::zero());
    for (x, y) in (&mut ca).zip(&mut cb) {
        s0 += x[0] * y[0];
        s1 += x[1] * y[1];
        s2 += x[2] * y[2];
        s3 += x[3] * y[3];
    }
    let mut rest = R::zero();
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        rest += x * y;
    }
    ((s0 + s1) + (s2 + s3)) + rest
}

fn dense_forward<R: Real>(w: &[R], b: &[R], input: &[R], rows: usize, in_w: usize, out_w: usize) -> Vec<R> {
    let mut out = R::take_buf(rows * out_w);
    for (x, y) in input.chunks_exact(in_w).zip(out.chunks_exact_mut(out_w)) {
        for ((wrow, &bias), y_o) in w.chunks_exact(in_w).zip(b).zip(y.iter_mut()) {
            *y_o = bias + dot_unrolled(wrow, x);
        }
    }
    let _ = rows;
    out
}

fn bd_forward<R: Real>(w: &[R], b: &[R], input: &[R], rows: usize, nb: usize, sb: usize) -> Vec<R> {
    let width = nb * sb;
    let mut out = R::take_buf(rows * width);
    for (x, y) in input.chunks_exact(width).zip(out.chunks_exact_mut(width)) {
        let mut blocks = x
            .chunks_exact(sb)
            .zip(y.chunks_exact_mut(sb))
            .zip(w.chunks_exact(sb * sb))
            .zip(b.chunks_exact(sb));
        for (((xb, yb), wb), bb) in &mut blocks {
            for ((wrow, &bias), y_k) in wb.chunks_exact(sb).zip(bb).zip(yb.iter_mut()) {
                *y_k = bias + dot_unrolled(wrow, xb);
            }
        }
    }
    let _ = rows;
    out
}

fn run_forward<R: Real>(
    spec: &NetworkSpec<R>,
    precond: &Preconditioner<R>,
    params: &ParamVector<R>,
    x: &Batch<R>,
) -> Result<ForwardPass<R>> {
    let layers = spec.layers()?;
    if x.cols() != spec.input_dim {
        return Err(Error::DimMismatch(format!(
            "input batch has {} columns, spec wants {}",
            x.cols(),
            spec.input_dim
        )));
    }
    if params.len() != spec.param_len()? {
        return Err(Error::DimMismatch("parameter length mismatch".into()));
    }
    let rows = x.rows();
    let theta = params.values();

    let mut u0 = R::take_buf(rows * spec.input_dim);
    for r in 0..rows {
        precond.normalize(x.row(r), &mut u0[r * spec.input_dim..(r + 1) * spec.input_dim]);
    }
    if !u0.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite {
            stage: "input normalization",
            layer: 0,
        });
    }

    let mut pass = ForwardPass {
        u0,
        acts: Vec::with_capacity(layers.len().saturating_sub(1)),
        shortcut_sums: Vec::with_capacity(layers.len().saturating_sub(1)),
        pre: Vec::new(),
        heights: Vec::new(),
    };

    let mut final_out = Vec::new();
    for (i, layer) in layers.iter().enumerate() {
        let input = pass.input_of(i);
        let w = &theta[layer.weight_offset..layer.weight_offset + layer.weight_len];
        let b = &theta[layer.bias_offset..layer.bias_offset + layer.bias_len];
        let mut z = match layer.kind {
            LayerKind::Dense => dense_forward(w, b, input, rows, layer.in_width, layer.out_width),
            LayerKind::BlockDiagonal {
                num_blocks,
                block_size,
            } => bd_forward(w, b, input, rows, num_blocks, block_size),
        };
        if !z.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                stage: "forward",
                layer: i + 1,
            });
        }
        if layer.activated {
            spec.activation.apply_slice(&mut z);
            let sum = if layer.shortcut {
                let prev = pass.input_of(i);
                Some(z.iter().zip(prev).map(|(&a, &p)| a + p).collect())
            } else {
                None
            };
            pass.acts.push(z);
            pass.shortcut_sums.push(sum);
        } else {
            final_out = z;
        }
    }

    pass.pre = Vec::with_capacity(rows);
    pass.heights = Vec::with_capacity(rows);
    for r in 0..rows {
        let p = final_out[r] + precond.bias_at(x.row(r));
        let f = spec.output_transform.apply(p);
        if !f.is_finite() {
            return Err(Error::NonFinite {
                stage: "output transform",
                layer: layers.len(),
            });
        }
        pass.pre.push(p);
        pass.heights.push(f);
    }

    Ok(pass)
}

/// Surface heights `f(x_i)` for a batch.
pub fn forward<R: Real>(
    spec: &NetworkSpec<R>,
    precond: &Preconditioner<R>,
    params: &ParamVector<R>,
    x: &Batch<R>,
) -> Result<Vec<R>> {
    Ok(run_forward(spec, precond, params, x)?.recycle_keep_heights())
}

/// Weight/bias gradients and the input-side gradient of one layer.
///
/// `delta` is `dL/dz` for this layer; returns `dL/du` for its input.
fn layer_backward<R: Real>(
    layer: &LayerShape,
    theta: &[R],
    grad: &mut [R],
    input: &[R],
    delta: &[R],
    rows: usize,
) -> Vec<R> {
    let w = &theta[layer.weight_offset..layer.weight_offset + layer.weight_len];
    let gw = layer.weight_offset;
    let gb = layer.bias_offset;
    let (in_w, out_w) = (layer.in_width, layer.out_width);
    let mut g_prev = R::take_buf(rows * in_w);

    match layer.kind {
        LayerKind::Dense => {
            for r in 0..rows {
                let d = &delta[r * out_w..(r + 1) * out_w];
                let x = &input[r * in_w..(r + 1) * in_w];
                let gp = &mut g_prev[r * in_w..(r + 1) * in_w];
                for (o, &dv) in d.iter().enumerate() {
                    if dv == R::zero() {
                        continue;
                    }
                    let wrow = &w[o * in_w..(o + 1) * in_w];
                    let grow = &mut grad[gw + o * in_w..gw + (o + 1) * in_w];
                    for (((g, &xv), gpv), &wv) in
                        grow.iter_mut().zip(x).zip(gp.iter_mut()).zip(wrow)
                    {
                        *g += dv * xv;
                        *gpv += dv * wv;
                    }
                    grad[gb + o] += dv;
                }
            }
        }
        LayerKind::BlockDiagonal {
            num_blocks: nb,
            block_size: sb,
        } => {
            let width = nb * sb;
            for r in 0..rows {
                let d = &delta[r * width..(r + 1) * width];
                let x = &input[r * width..(r + 1) * width];
                let gp = &mut g_prev[r * width..(r + 1) * width];
                for j in 0..nb {
                    let db = &d[j * sb..(j + 1) * sb];
                    let xb = &x[j * sb..(j + 1) * sb];
                    let gpb = &mut gp[j * sb..(j + 1) * sb];
                    let wb = &w[j * sb * sb..(j + 1) * sb * sb];
                    for (k, &dv) in db.iter().enumerate() {
                        if dv == R::zero() {
                            continue;
                        }
                        let wrow = &wb[k * sb..(k + 1) * sb];
                        let base = gw + j * sb * sb + k * sb;
                        let grow = &mut grad[base..base + sb];
                        for (((g, &xv), gpv), &wv) in
                            grow.iter_mut().zip(xb).zip(gpb.iter_mut()).zip(wrow)
                        {
                            *g += dv * xv;
                            *gpv += dv * wv;
                        }
                        grad[gb + j * sb + k] += dv;
                    }
                }
            }
        }
    }
    g_prev
}

fn backward<R: Real>(
    spec: &NetworkSpec<R>,
    params: &ParamVector<R>,
    pass: &ForwardPass<R>,
    coeffs: &[R],
    layers: &[LayerShape],
    rows: usize,
) -> Vec<R> {
    let theta = params.values();
    let mut grad = vec![R::zero(); theta.len()];
    let last = layers.len() - 1;

    // dL/dz of the final dense layer.
    let mut delta_last = R::take_buf(rows);
    for (d, (&c, &p)) in delta_last.iter_mut().zip(coeffs.iter().zip(&pass.pre)) {
        *d = c * spec.output_transform.deriv(p);
    }
    // dL/du flowing into the final layer's input u_last.
    let mut g_u = layer_backward(
        &layers[last],
        theta,
        &mut grad,
        pass.input_of(last),
        &delta_last,
        rows,
    );
    R::give_buf(delta_last);

    // Hidden layers, top down. Entering iteration i, g_u is dL/du_{i+1}
    // where u_{i+1} = act_i (+ u_i when layer i carries a shortcut).
    for i in (0..last).rev() {
        let layer = &layers[i];
        let a = &pass.acts[i];
        let mut delta = R::take_buf(g_u.len());
        spec.activation.deriv_mul_slice(a, &g_u, &mut delta);
        let mut g_in = layer_backward(layer, theta, &mut grad, pass.input_of(i), &delta, rows);
        R::give_buf(delta);
        if layer.shortcut {
            for (gi, gu) in g_in.iter_mut().zip(&g_u) {
                *gi += *gu;
            }
        }
        R::give_buf(std::mem::replace(&mut g_u, g_in));
    }
    R::give_buf(g_u);

    grad
}

/// Gradient of `Σ_i coeffs_i · f(x_i)` with respect to the parameters.
pub fn param_gradient<R: Real>(
    spec: &NetworkSpec<R>,
    precond: &Preconditioner<R>,
    params: &ParamVector<R>,
    x: &Batch<R>,
    coeffs: &[R],
) -> Result<Vec<R>> {
    if coeffs.len() != x.rows() {
        return Err(Error::DimMismatch(format!(
            "{} coefficients for {} rows",
            coeffs.len(),
            x.rows()
        )));
    }
    let layers = spec.layers()?;
    let pass = run_forward(spec, precond, params, x)?;
    let grad = backward(spec, params, &pass, coeffs, &layers, x.rows());
    pass.recycle();
    if !grad.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite {
            stage: "gradient",
            layer: 0,
        });
    }
    Ok(grad)
}

/// Per-row gradients; row `i` equals `param_gradient` over `{x_i}` with
/// coefficient one.
pub fn per_sample_gradients<R: Real>(
    spec: &NetworkSpec<R>,
    precond: &Preconditioner<R>,
    params: &ParamVector<R>,
    x: &Batch<R>,
) -> Result<Batch<R>> {
    let mut out = Batch::zeros(x.rows(), params.len());
    for i in 0..x.rows() {
        let single = Batch::from_point(x.row(i));
        let g = param_gradient(spec, precond, params, &single, &[R::one()])?;
        out.row_mut(i).copy_from_slice(&g);
    }
    Ok(out)
}

/// One block-diagonal layer: `V[i,j,k] = Σ_m W[j,k,m]·v[i,j,m]`, bias added
/// per block, then the activation. Shapes: `w` is `[nb×sb×sb]`, `b` is
/// `[nb×sb]`, `v` is `[batch×nb×sb]`, all flattened row-major.
pub fn bd_layer_apply<R: Real>(
    w: &[R],
    b: &[R],
    v: &[R],
    batch: usize,
    num_blocks: usize,
    block_size: usize,
    activation: Activation<R>,
) -> Vec<R> {
    assert_eq!(w.len(), num_blocks * block_size * block_size, "weight shape");
    assert_eq!(b.len(), num_blocks * block_size, "bias shape");
    assert_eq!(v.len(), batch * num_blocks * block_size, "input shape");
    let mut out = bd_forward(w, b, v, batch, num_blocks, block_size);
    for x in &mut out {
        *x = activation.apply(*x);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testing::{
        assemble_bd_as_fc, fd_gradient_masked, max_rel_err, max_rel_err_masked,
    };
    use approx::assert_relative_eq;
    use rand::Rng;

    fn small_bd_spec() -> NetworkSpec<f64> {
        NetworkSpec {
            input_dim: 3,
            topology: Topology::BlockDiagonal {
                num_blocks: 2,
                block_size: 4,
            },
            num_layers: 4,
            activation: Activation::LeakyRelu { slope: 0.01 },
            shortcuts: false,
            output_transform: OutputTransform::Identity,
        }
    }

    fn random_batch(rng: &mut impl Rng, rows: usize, cols: usize) -> Batch<f64> {
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect();
        Batch::from_flat(data, rows, cols)
    }

    #[test]
    fn fc_param_count_by_hand() {
        // 2*8+8 + 8*8+8 + 8*1+1 = 105
        let spec = NetworkSpec::<f64> {
            input_dim: 2,
            topology: Topology::FullyConnected { width: 8 },
            num_layers: 3,
            activation: Activation::Relu,
            shortcuts: false,
            output_transform: OutputTransform::Identity,
        };
        assert_eq!(spec.param_len().unwrap(), 105);
    }

    #[test]
    fn bd_param_count_by_hand() {
        // layer1: 3*8+8 = 32; two BD layers: 2*(2*16+8) = 80; last: 8+1 = 9
        assert_eq!(small_bd_spec().param_len().unwrap(), 32 + 80 + 9);
    }

    #[test]
    fn init_is_deterministic() {
        let spec = small_bd_spec();
        let a = init_params(&spec, 99, false).unwrap();
        let b = init_params(&spec, 99, false).unwrap();
        assert_eq!(a.values(), b.values());
        let c = init_params(&spec, 100, false).unwrap();
        assert_ne!(a.values(), c.values());
    }

    #[test]
    fn spec_validation_rejects_bad_configs() {
        let mut spec = small_bd_spec();
        spec.num_layers = 1;
        assert!(spec.validate().is_err());

        let mut spec = small_bd_spec();
        spec.activation = Activation::LeakyRelu { slope: 1.5 };
        assert!(spec.validate().is_err());

        let mut spec = small_bd_spec();
        spec.output_transform = OutputTransform::Bounded {
            h_min: 2.0,
            h_max: -3.0,
        };
        assert!(spec.validate().is_err());

        let mut spec = small_bd_spec();
        spec.num_layers = 2;
        spec.shortcuts = true;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn zero_last_layer_makes_height_bias_exact() {
        let spec = small_bd_spec();
        let bias: BiasFn<f64> = Arc::new(|x: &[f64]| -0.5 * x.iter().map(|v| v * v).sum::<f64>());
        let precond = Preconditioner::new(vec![0.1, -0.2, 0.3], vec![1.0, 2.0, 0.5])
            .unwrap()
            .with_height_bias(bias.clone());
        let params = init_params(&spec, 7, true).unwrap();
        let mut rng = crate::rng::stream_rng(1, crate::rng::Stream::Diag);
        let x = random_batch(&mut rng, 20, 3);
        let h = forward(&spec, &precond, &params, &x).unwrap();
        for (i, &f) in h.iter().enumerate() {
            assert_relative_eq!(f, bias(x.row(i)), epsilon = 1e-15);
        }
    }

    #[test]
    fn dot_product_forward() {
        // Two-layer net emulating f = w.x on positive inputs: identity first
        // layer under relu, final weights w = (1, 2); x = (3, 4) gives 11.
        let spec = NetworkSpec::<f64> {
            input_dim: 2,
            topology: Topology::FullyConnected { width: 2 },
            num_layers: 2,
            activation: Activation::Relu,
            shortcuts: false,
            output_transform: OutputTransform::Identity,
        };
        let mut values = vec![0.0; spec.param_len().unwrap()];
        values[0] = 1.0; // W1 = I
        values[3] = 1.0;
        values[6] = 1.0; // W2 = (1, 2)
        values[7] = 2.0;
        let params = ParamVector::from_values(&spec, values).unwrap();
        let precond = Preconditioner::identity(2);
        let h = forward(&spec, &precond, &params, &Batch::from_point(&[3.0, 4.0])).unwrap();
        assert_relative_eq!(h[0], 11.0, epsilon = 1e-15);

        // Gradient of the final layer weights is the (relu-passed) input.
        let g = param_gradient(&spec, &precond, &params, &Batch::from_point(&[3.0, 4.0]), &[1.0])
            .unwrap();
        assert_relative_eq!(g[6], 3.0, epsilon = 1e-15);
        assert_relative_eq!(g[7], 4.0, epsilon = 1e-15);
    }

    #[test]
    fn bounded_transform_saturates_and_stays_in_range() {
        let spec = NetworkSpec::<f64> {
            input_dim: 1,
            topology: Topology::FullyConnected { width: 2 },
            num_layers: 2,
            activation: Activation::Relu,
            shortcuts: false,
            output_transform: OutputTransform::Bounded {
                h_min: -3.0,
                h_max: 5.0,
            },
        };
        // Push the pre-transform height far positive.
        let mut values = vec![0.0; spec.param_len().unwrap()];
        values[0] = 100.0;
        values[4] = 100.0; // final weight
        let params = ParamVector::from_values(&spec, values).unwrap();
        let precond = Preconditioner::identity(1);
        let h = forward(&spec, &precond, &params, &Batch::from_point(&[10.0])).unwrap();
        assert_relative_eq!(h[0], 5.0, epsilon = 1e-9);

        // Random nets never leave [h_min, h_max].
        let params = init_params(&spec, 3, false).unwrap();
        let mut rng = crate::rng::stream_rng(2, crate::rng::Stream::Diag);
        let x = random_batch(&mut rng, 50, 1);
        for f in forward(&spec, &precond, &params, &x).unwrap() {
            assert!((-3.0..=5.0).contains(&f));
        }
    }

    #[test]
    fn zero_coefficients_give_zero_gradient() {
        let spec = small_bd_spec();
        let params = init_params(&spec, 5, false).unwrap();
        let precond = Preconditioner::identity(3);
        let mut rng = crate::rng::stream_rng(3, crate::rng::Stream::Diag);
        let x = random_batch(&mut rng, 4, 3);
        let g = param_gradient(&spec, &precond, &params, &x, &[0.0; 4]).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_matches_finite_differences_across_configs() {
        let configs: Vec<NetworkSpec<f64>> = vec![
            small_bd_spec(),
            NetworkSpec {
                input_dim: 3,
                topology: Topology::FullyConnected { width: 6 },
                num_layers: 3,
                activation: Activation::Tanh,
                shortcuts: false,
                output_transform: OutputTransform::Identity,
            },
            NetworkSpec {
                input_dim: 2,
                topology: Topology::FullyConnected { width: 5 },
                num_layers: 4,
                activation: Activation::LeakyRelu { slope: 0.05 },
                shortcuts: true,
                output_transform: OutputTransform::Bounded {
                    h_min: -4.0,
                    h_max: 2.0,
                },
            },
            NetworkSpec {
                input_dim: 2,
                topology: Topology::BlockDiagonal {
                    num_blocks: 3,
                    block_size: 3,
                },
                num_layers: 5,
                activation: Activation::Tanh,
                shortcuts: true,
                output_transform: OutputTransform::Identity,
            },
        ];
        let mut rng = crate::rng::stream_rng(4, crate::rng::Stream::Diag);
        for (k, spec) in configs.iter().enumerate() {
            let params = init_params(spec, 10 + k as u64, false).unwrap();
            let precond = Preconditioner::identity(spec.input_dim);
            let x = random_batch(&mut rng, 5, spec.input_dim);
            let coeffs: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let g = param_gradient(spec, &precond, &params, &x, &coeffs).unwrap();
            let (fd, mask) = fd_gradient_masked(spec, &precond, &params, &x, &coeffs, 1e-5);
            let err = max_rel_err_masked(&g, &fd, &mask, 1e-6);
            assert!(err < 1e-4, "config {k}: rel err {err}");
        }
    }

    #[test]
    fn per_sample_gradients_match_weighted_sum() {
        let spec = small_bd_spec();
        let params = init_params(&spec, 21, false).unwrap();
        let precond = Preconditioner::identity(3);
        let mut rng = crate::rng::stream_rng(5, crate::rng::Stream::Diag);
        let x = random_batch(&mut rng, 6, 3);
        let coeffs: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let rows = per_sample_gradients(&spec, &precond, &params, &x).unwrap();
        // B = 1: row equals param_gradient with coefficient one.
        let single = param_gradient(&spec, &precond, &params, &Batch::from_point(x.row(0)), &[1.0])
            .unwrap();
        assert_eq!(rows.row(0), single.as_slice());

        // Linearity: coefficient-weighted rows reproduce the batched pass.
        let g = param_gradient(&spec, &precond, &params, &x, &coeffs).unwrap();
        let mut combo = vec![0.0; g.len()];
        for (i, &c) in coeffs.iter().enumerate() {
            for (j, v) in rows.row(i).iter().enumerate() {
                combo[j] += c * v;
            }
        }
        assert!(max_rel_err(&g, &combo, 1e-9) < 1e-12);
    }

    #[test]
    fn bd_layer_apply_matches_dense_assembly() {
        let (nb, sb, batch) = (2, 3, 4);
        let mut rng = crate::rng::stream_rng(6, crate::rng::Stream::Diag);
        let w: Vec<f64> = (0..nb * sb * sb).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..nb * sb).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..batch * nb * sb).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let got = bd_layer_apply(&w, &b, &v, batch, nb, sb, Activation::<f64>::Tanh);

        // Oracle: assemble the dense block-diagonal matrix and multiply.
        let width = nb * sb;
        let mut dense = vec![0.0; width * width];
        for j in 0..nb {
            for k in 0..sb {
                for m in 0..sb {
                    dense[(j * sb + k) * width + (j * sb + m)] = w[j * sb * sb + k * sb + m];
                }
            }
        }
        for r in 0..batch {
            for o in 0..width {
                let mut acc = b[o];
                for i in 0..width {
                    acc += dense[o * width + i] * v[r * width + i];
                }
                let expect = acc.tanh();
                assert!((got[r * width + o] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bd_layer_identity_blocks_pass_input_through() {
        let (nb, sb, batch) = (2, 2, 3);
        let mut w = vec![0.0; nb * sb * sb];
        for j in 0..nb {
            for k in 0..sb {
                w[j * sb * sb + k * sb + k] = 1.0;
            }
        }
        let b = vec![0.0; nb * sb];
        let v: Vec<f64> = (0..batch * nb * sb).map(|i| i as f64 * 0.25 - 1.0).collect();
        let out = bd_layer_apply(&w, &b, &v, batch, nb, sb, Activation::LeakyRelu { slope: 0.5 });
        for (o, x) in out.iter().zip(&v) {
            let expect = if *x > 0.0 { *x } else { 0.5 * x };
            assert!((o - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn bd_network_equals_masked_fc_network() {
        let spec = small_bd_spec();
        let params = init_params(&spec, 31, false).unwrap();
        let precond = Preconditioner::identity(3);
        let (fc_spec, fc_params) = assemble_bd_as_fc(&spec, &params);
        let mut rng = crate::rng::stream_rng(7, crate::rng::Stream::Diag);
        let x = random_batch(&mut rng, 8, 3);

        let h_bd = forward(&spec, &precond, &params, &x).unwrap();
        let h_fc = forward(&fc_spec, &precond, &fc_params, &x).unwrap();
        for (a, b) in h_bd.iter().zip(&h_fc) {
            assert!((a - b).abs() < 1e-10);
        }

        // Gradients agree on shared parameters (dense entries of the mask).
        let coeffs: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let g_bd = param_gradient(&spec, &precond, &params, &x, &coeffs).unwrap();
        let g_fc = param_gradient(&fc_spec, &precond, &fc_params, &x, &coeffs).unwrap();
        let bd_layers = spec.layers().unwrap();
        let fc_layers = fc_spec.layers().unwrap();
        let width = spec.inner_width();
        for (bd, fc) in bd_layers.iter().zip(&fc_layers) {
            match bd.kind {
                LayerKind::Dense => {
                    for i in 0..bd.weight_len {
                        assert!((g_bd[bd.weight_offset + i] - g_fc[fc.weight_offset + i]).abs() < 1e-10);
                    }
                }
                LayerKind::BlockDiagonal {
                    num_blocks: nb,
                    block_size: sb,
                } => {
                    for j in 0..nb {
                        for k in 0..sb {
                            for m in 0..sb {
                                let bd_idx = bd.weight_offset + j * sb * sb + k * sb + m;
                                let fc_idx =
                                    fc.weight_offset + (j * sb + k) * width + (j * sb + m);
                                assert!((g_bd[bd_idx] - g_fc[fc_idx]).abs() < 1e-10);
                            }
                        }
                    }
                }
            }
            for i in 0..bd.bias_len {
                assert!((g_bd[bd.bias_offset + i] - g_fc[fc.bias_offset + i]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn preconditioner_round_trips() {
        let p = Preconditioner::new(vec![1.5, -0.25], vec![0.3, 4.0]).unwrap();
        let x = [0.7f64, -3.1];
        let mut norm = [0.0; 2];
        let mut back = [0.0; 2];
        p.normalize(&x, &mut norm);
        p.denormalize(&norm, &mut back);
        for (a, b) in x.iter().zip(&back) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
        assert!(Preconditioner::new(vec![0.0], vec![0.0]).is_err());
    }

    #[test]
    fn overflowing_forward_reports_layer() {
        let spec = NetworkSpec::<f64> {
            input_dim: 1,
            topology: Topology::FullyConnected { width: 2 },
            num_layers: 2,
            activation: Activation::Relu,
            shortcuts: false,
            output_transform: OutputTransform::Identity,
        };
        let mut values = vec![0.0; spec.param_len().unwrap()];
        values[0] = 1e308;
        values[4] = 1e308;
        let params = ParamVector::from_values(&spec, values).unwrap();
        let precond = Preconditioner::identity(1);
        let err = forward(&spec, &precond, &params, &Batch::from_point(&[1e10])).unwrap_err();
        match err {
            Error::NonFinite { layer, .. } => assert_eq!(layer, 1),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn shortcut_forward_matches_manual_composition() {
        let spec = NetworkSpec::<f64> {
            input_dim: 2,
            topology: Topology::FullyConnected { width: 2 },
            num_layers: 3,
            activation: Activation::Tanh,
            shortcuts: true,
            output_transform: OutputTransform::Identity,
        };
        let params = init_params(&spec, 77, false).unwrap();
        let precond = Preconditioner::identity(2);
        let x = [0.3, -0.8];
        let h = forward(&spec, &precond, &params, &Batch::from_point(&x)).unwrap();

        let t = params.values();
        let l = spec.layers().unwrap();
        let a1 = [
            (t[l[0].weight_offset] * x[0] + t[l[0].weight_offset + 1] * x[1] + t[l[0].bias_offset]).tanh(),
            (t[l[0].weight_offset + 2] * x[0] + t[l[0].weight_offset + 3] * x[1] + t[l[0].bias_offset + 1]).tanh(),
        ];
        let a2 = [
            (t[l[1].weight_offset] * a1[0] + t[l[1].weight_offset + 1] * a1[1] + t[l[1].bias_offset]).tanh() + a1[0],
            (t[l[1].weight_offset + 2] * a1[0] + t[l[1].weight_offset + 3] * a1[1] + t[l[1].bias_offset + 1]).tanh() + a1[1],
        ];
        let out = t[l[2].weight_offset] * a2[0] + t[l[2].weight_offset + 1] * a2[1] + t[l[2].bias_offset];
        assert_relative_eq!(h[0], out, epsilon = 1e-14);
    }
}

#[cfg(test)]
mod perf_probe {
    use super::*;
    use std::time::Instant;

    #[test]
    #[ignore]
    fn time_step_pieces() {
        let spec = NetworkSpec::<f64> {
            input_dim: 1,
            topology: Topology::BlockDiagonal { num_blocks: 8, block_size: 16 },
            num_layers: 4,
            activation: Activation::LeakyRelu { slope: 0.01 },
            shortcuts: false,
            output_transform: OutputTransform::Identity,
        };
        let params = init_params(&spec, 1, false).unwrap();
        let precond = Preconditioner::identity(1);
        let mut rng = crate::rng::stream_rng(1, crate::rng::Stream::Diag);
        use rand::Rng;
        let rows = 256;
        let x = Batch::from_flat((0..rows).map(|_| rng.gen_range(-2.0..2.0)).collect(), rows, 1);
        let layers = spec.layers().unwrap();
        let n = 2000;

        // forward once to get a pass
        let pass = run_forward(&spec, &precond, &params, &x).unwrap();
        let coeffs: Vec<f64> = (0..rows).map(|_| 0.5).collect();

        let t0 = Instant::now();
        for _ in 0..n {
            std::hint::black_box(backward(&spec, &params, &pass, &coeffs, &layers, rows));
        }
        println!("backward only: {:.1} us", t0.elapsed().as_micros() as f64 / n as f64);

        // memset cost of the z buffers
        let t0 = Instant::now();
        for _ in 0..n {
            let z1 = vec![0.0f64; rows * 128];
            let z2 = vec![0.0f64; rows * 128];
            let z3 = vec![0.0f64; rows * 128];
            let g = vec![0.0f64; params.len()];
            std::hint::black_box((z1, z2, z3, g));
        }
        println!("buffer allocs: {:.1} us", t0.elapsed().as_micros() as f64 / n as f64);

        // finiteness scans
        let z = vec![0.5f64; rows * 128];
        let t0 = Instant::now();
        for _ in 0..n {
            for _ in 0..3 {
                std::hint::black_box(z.iter().all(|v| v.is_finite()));
            }
        }
        println!("finite scans x3: {:.1} us", t0.elapsed().as_micros() as f64 / n as f64);

        // activation slices
        let mut z = vec![0.5f64; rows * 128];
        let t0 = Instant::now();
        for _ in 0..n {
            for _ in 0..3 {
                spec.activation.apply_slice(&mut z);
            }
        }
        println!("activation x3: {:.1} us", t0.elapsed().as_micros() as f64 / n as f64);
    }

    #[test]
    #[ignore]
    fn time_forward_pieces() {
        let spec = NetworkSpec::<f64> {
            input_dim: 1,
            topology: Topology::BlockDiagonal { num_blocks: 8, block_size: 16 },
            num_layers: 4,
            activation: Activation::LeakyRelu { slope: 0.01 },
            shortcuts: false,
            output_transform: OutputTransform::Identity,
        };
        let params = init_params(&spec, 1, false).unwrap();
        let precond = Preconditioner::identity(1);
        let mut rng = crate::rng::stream_rng(1, crate::rng::Stream::Diag);
        use rand::Rng;
        let x = Batch::from_flat((0..256).map(|_| rng.gen_range(-2.0..2.0)).collect(), 256, 1);
        let n = 2000;

        let t0 = Instant::now();
        for _ in 0..n {
            let _ = std::hint::black_box(run_forward(&spec, &precond, &params, &x).unwrap());
        }
        println!("run_forward: {:.1} us", t0.elapsed().as_micros() as f64 / n as f64);

        // raw layer calls with preallocated input
        let layers = spec.layers().unwrap();
        let theta = params.values();
        let u0: Vec<f64> = (0..256).map(|i| x.flat()[i]).collect();
        let l = &layers[0];
        let t0 = Instant::now();
        for _ in 0..n {
            let z = dense_forward(
                &theta[l.weight_offset..l.weight_offset + l.weight_len],
                &theta[l.bias_offset..l.bias_offset + l.bias_len],
                &u0, 256, 1, 128,
            );
            std::hint::black_box(z);
        }
        println!("layer1 dense 1->128: {:.1} us", t0.elapsed().as_micros() as f64 / n as f64);

        let z1 = dense_forward(
            &theta[l.weight_offset..l.weight_offset + l.weight_len],
            &theta[l.bias_offset..l.bias_offset + l.bias_len],
            &u0, 256, 1, 128,
        );
        let l = &layers[1];
        let t0 = Instant::now();
        for _ in 0..n {
            let z = bd_forward(
                &theta[l.weight_offset..l.weight_offset + l.weight_len],
                &theta[l.bias_offset..l.bias_offset + l.bias_len],
                &z1, 256, 8, 16,
            );
            std::hint::black_box(z);
        }
        println!("bd layer 8x16: {:.1} us", t0.elapsed().as_micros() as f64 / n as f64);
    }
}
