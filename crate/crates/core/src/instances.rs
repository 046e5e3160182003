//! Magnitude-function pairs: the instance registry, instance wrappers and a
//! numeric feasibility checker.
//!
//! An instance is the pair `(M_up, M_down)` evaluated at `(x, s, aux)` where
//! `s` is the current surface height and `aux.log_q` carries `log p_down(x)`
//! for the instances that need it. Density-estimation magnitudes act through
//! the log difference `d = s - log_q`. Where a closed-form loss exists, the
//! instance also stores the antiderivative pair so the empirical loss can be
//! assembled and differentiated for cross-checks; `convergence` holds the
//! map `T(x, z)` from the density ratio `z` to the optimal surface height.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::math::{sigmoid, softplus};
use crate::scalar::Real;

mod feasibility;

pub use feasibility::{check_feasibility, default_probes, default_s_grid, FeasibilityReport, Probe, Violation};

/// Per-point side information for magnitude evaluation.
///
/// `log_q` is the down-density log value at the point; `extra` carries the
/// one auxiliary scalar some derived instances need (e.g. a generator
/// log-density for conditional-ratio estimation).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AuxInfo<R> {
    pub log_q: R,
    pub extra: Option<R>,
}

impl<R: Real> AuxInfo<R> {
    /// Aux for a known down log-density value.
    pub fn with_log_q(log_q: R) -> Self {
        Self {
            log_q,
            extra: None,
        }
    }

    /// Aux for ratio instances that ignore the down density.
    pub fn none() -> Self {
        Self {
            log_q: R::zero(),
            extra: None,
        }
    }
}

/// Open interval with infinite endpoints allowed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval<R> {
    pub lo: R,
    pub hi: R,
}

impl<R: Real> Interval<R> {
    pub fn open(lo: R, hi: R) -> Self {
        Self { lo, hi }
    }

    pub fn all() -> Self {
        Self {
            lo: R::neg_infinity(),
            hi: R::infinity(),
        }
    }

    pub fn positive() -> Self {
        Self {
            lo: R::zero(),
            hi: R::infinity(),
        }
    }

    pub fn negative() -> Self {
        Self {
            lo: R::neg_infinity(),
            hi: R::zero(),
        }
    }

    pub fn contains(&self, s: R) -> bool {
        s > self.lo && s < self.hi
    }
}

type InstFn<R> = Arc<dyn Fn(&[R], R, &AuxInfo<R>) -> R + Send + Sync>;

/// A named pair of magnitude callables with convergence metadata.
#[derive(Clone)]
pub struct PsoInstance<R> {
    name: String,
    mag_up: InstFn<R>,
    mag_down: InstFn<R>,
    /// `T(x, z)`: density ratio to converged height; `None` when the instance
    /// has no functional target (e.g. `unit`).
    convergence: Option<InstFn<R>>,
    interval: Interval<R>,
    /// Antiderivative pair of the magnitudes, when the loss is printable.
    primitives: Option<(InstFn<R>, InstFn<R>)>,
}

impl<R: Real> PsoInstance<R> {
    pub fn new(name: impl Into<String>, up: InstFn<R>, down: InstFn<R>, k: Interval<R>) -> Self {
        Self {
            name: name.into(),
            mag_up: up,
            mag_down: down,
            convergence: None,
            interval: k,
            primitives: None,
        }
    }

    pub fn with_convergence(mut self, t: InstFn<R>) -> Self {
        self.convergence = Some(t);
        self
    }

    pub fn with_primitives(mut self, up: InstFn<R>, down: InstFn<R>) -> Self {
        self.primitives = Some((up, down));
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn interval(&self) -> Interval<R> {
        self.interval
    }

    #[inline]
    pub fn mag_up(&self, x: &[R], s: R, aux: &AuxInfo<R>) -> R {
        (self.mag_up)(x, s, aux)
    }

    #[inline]
    pub fn mag_down(&self, x: &[R], s: R, aux: &AuxInfo<R>) -> R {
        (self.mag_down)(x, s, aux)
    }

    /// Magnitude ratio `R(x, s) = M_down / M_up`.
    pub fn ratio(&self, x: &[R], s: R, aux: &AuxInfo<R>) -> R {
        self.mag_down(x, s, aux) / self.mag_up(x, s, aux)
    }

    pub fn has_convergence(&self) -> bool {
        self.convergence.is_some()
    }

    /// Height the surface converges to at density ratio `z`, when known.
    pub fn target(&self, x: &[R], z: R, aux: &AuxInfo<R>) -> Option<R> {
        self.convergence.as_ref().map(|t| t(x, z, aux))
    }

    pub fn has_primitives(&self) -> bool {
        self.primitives.is_some()
    }

    /// Antiderivative values `(M̃_up, M̃_down)` at `(x, s)`, when known.
    pub fn primitive_terms(&self, x: &[R], s: R, aux: &AuxInfo<R>) -> Option<(R, R)> {
        self.primitives
            .as_ref()
            .map(|(u, d)| (u(x, s, aux), d(x, s, aux)))
    }
}

impl<R> std::fmt::Debug for PsoInstance<R> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PsoInstance")
            .field("name", &self.name)
            .finish()
    }
}

fn f<R: Real>(g: impl Fn(&[R], R, &AuxInfo<R>) -> R + Send + Sync + 'static) -> InstFn<R> {
    Arc::new(g)
}

fn log_density_target<R: Real>() -> InstFn<R> {
    f(|_x, z, aux: &AuxInfo<R>| aux.log_q + z.ln())
}

fn log_ratio_target<R: Real>() -> InstFn<R> {
    f(|_x, z, _aux: &AuxInfo<R>| z.ln())
}

fn ratio_target<R: Real>() -> InstFn<R> {
    f(|_x, z, _aux: &AuxInfo<R>| z)
}

/// The bounded log-density-estimation family. `M_up = (exp(a·d)+1)^(-1/a)`
/// and `M_down = (exp(-a·d)+1)^(-1/a)` with `d = s - log_q`, evaluated in
/// the log domain so huge `|d|` stays finite. `a = 1` is noise-contrastive
/// estimation; `a -> inf` approaches the max-normalized variant.
pub fn make_pso_lde<R: Real>(alpha: R) -> Result<PsoInstance<R>> {
    if !(alpha > R::zero()) || !alpha.is_finite() {
        return Err(Error::InvalidParam {
            name: "alpha".into(),
            reason: format!("must be a positive finite real, got {alpha}"),
        });
    }
    let up = f(move |_x, s, aux: &AuxInfo<R>| {
        let d = s - aux.log_q;
        (-softplus(alpha * d) / alpha).exp()
    });
    let down = f(move |_x, s, aux: &AuxInfo<R>| {
        let d = s - aux.log_q;
        (-softplus(-(alpha * d)) / alpha).exp()
    });
    Ok(
        PsoInstance::new(format!("pso_lde({alpha})"), up, down, Interval::all())
            .with_convergence(log_density_target()),
    )
}

/// Max-normalized log-density estimation: `M_up = exp(-max(d,0))`,
/// `M_down = exp(min(d,0))`.
pub fn make_pso_max<R: Real>() -> PsoInstance<R> {
    let up = f(|_x, s, aux: &AuxInfo<R>| (-(s - aux.log_q).max(R::zero())).exp());
    let down = f(|_x, s, aux: &AuxInfo<R>| (s - aux.log_q).min(R::zero()).exp());
    PsoInstance::new("pso_max", up, down, Interval::all()).with_convergence(log_density_target())
}

/// Plain density estimation: `M_up = p_down(x)`, `M_down = s`; converges to
/// the raw pdf.
pub fn make_deeppdf<R: Real>() -> PsoInstance<R> {
    PsoInstance::new(
        "deeppdf",
        f(|_x, _s, aux: &AuxInfo<R>| aux.log_q.exp()),
        f(|_x, s, _aux: &AuxInfo<R>| s),
        Interval::positive(),
    )
    .with_convergence(f(|_x, z, aux: &AuxInfo<R>| aux.log_q.exp() * z))
    .with_primitives(
        f(|_x, s, aux: &AuxInfo<R>| aux.log_q.exp() * s),
        f(|_x, s, _aux| R::of(0.5) * s * s),
    )
}

/// Parameters for [`make_named`], keyed by name (`alpha`, `d`, `a`, `b`, `m`).
#[derive(Debug, Clone, Default)]
pub struct InstanceParams {
    map: BTreeMap<String, f64>,
}

impl InstanceParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(mut self, key: &str, value: f64) -> Self {
        self.map.insert(key.to_string(), value);
        self
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.map.get(key).copied()
    }

    fn require(&self, instance: &'static str, param: &'static str) -> Result<f64> {
        self.get(param)
            .ok_or(Error::MissingParam { instance, param })
    }
}

/// Every name [`make_named`] accepts.
pub fn registry_names() -> &'static [&'static str] {
    &[
        "pso_lde",
        "pso_max",
        "deeppdf",
        "nce",
        "is",
        "polynomial",
        "inverse_polynomial",
        "inverse_is",
        "root_density",
        "log_variant_1",
        "log_variant_2",
        "log_variant_3",
        "log_variant_4",
        "log_variant_5",
        "unit",
        "ebgan",
        "ulsif",
        "kliep",
        "gan_critic",
        "gan_critic_log",
        "ndmr",
        "ndmlr",
        "power_div",
        "reversed_kl",
        "balanced_ratio",
        "log_density_ratio",
        "square",
        "logistic",
        "exponential",
        "lsgan",
        "kl_div",
        "reverse_kl_div",
        "lipschitz",
        "ldar",
        "ldtr",
        "cond_density",
        "cond_log_density",
        "cond_nce",
        "cond_pso_lde",
        "cond_gan_critic",
        "cond_logistic",
    ]
}

/// Builds a registry instance by name. Magnitudes follow the tabulated
/// forms; `K` and `T` metadata come from the same rows. Conditional names
/// share their unconditional magnitude shapes (the conditioning changes the
/// batch construction, not the pointwise weights).
pub fn make_named<R: Real>(name: &str, params: &InstanceParams) -> Result<PsoInstance<R>> {
    let inst = match name {
        "pso_lde" => {
            let alpha = params.require("pso_lde", "alpha")?;
            make_pso_lde(R::of(alpha))?
        }
        "pso_max" => make_pso_max(),
        "deeppdf" | "cond_density" => {
            let mut i = make_deeppdf();
            i.name = name.to_string();
            i
        }
        "nce" | "cond_nce" => {
            let mut i = make_pso_lde(R::one())?;
            i.name = name.to_string();
            i.primitives = Some((
                f(|_x, s, aux: &AuxInfo<R>| -softplus(-(s - aux.log_q))),
                f(|_x, s, aux: &AuxInfo<R>| softplus(s - aux.log_q)),
            ));
            i
        }
        "cond_pso_lde" => {
            let alpha = params.require("cond_pso_lde", "alpha")?;
            let mut i = make_pso_lde(R::of(alpha))?;
            i.name = format!("cond_pso_lde({alpha})");
            i
        }
        // Unbounded log-density estimators. `is` doubles as log_variant_2 and
        // as the conditional log-density estimator; `inverse_is` doubles as
        // log_variant_3.
        "is" | "log_variant_2" | "cond_log_density" => PsoInstance::new(
            name,
            f(|_x, _s, _aux: &AuxInfo<R>| R::one()),
            f(|_x, s, aux: &AuxInfo<R>| (s - aux.log_q).exp()),
            Interval::all(),
        )
        .with_convergence(log_density_target())
        .with_primitives(
            f(|_x, s, _aux| s),
            f(|_x, s, aux: &AuxInfo<R>| (s - aux.log_q).exp()),
        ),
        "inverse_is" | "log_variant_3" => PsoInstance::new(
            name,
            f(|_x, s, aux: &AuxInfo<R>| (aux.log_q - s).exp()),
            f(|_x, _s, _aux: &AuxInfo<R>| R::one()),
            Interval::all(),
        )
        .with_convergence(log_density_target())
        .with_primitives(
            f(|_x, s, aux: &AuxInfo<R>| -(aux.log_q - s).exp()),
            f(|_x, s, _aux| s),
        ),
        "polynomial" => PsoInstance::new(
            name,
            f(|_x, s, aux: &AuxInfo<R>| (s - aux.log_q).exp()),
            f(|_x, s, aux: &AuxInfo<R>| (R::of(2.0) * (s - aux.log_q)).exp()),
            Interval::all(),
        )
        .with_convergence(log_density_target())
        .with_primitives(
            f(|_x, s, aux: &AuxInfo<R>| (s - aux.log_q).exp()),
            f(|_x, s, aux: &AuxInfo<R>| R::of(0.5) * (R::of(2.0) * (s - aux.log_q)).exp()),
        ),
        "inverse_polynomial" => PsoInstance::new(
            name,
            f(|_x, s, aux: &AuxInfo<R>| (R::of(2.0) * (aux.log_q - s)).exp()),
            f(|_x, s, aux: &AuxInfo<R>| (aux.log_q - s).exp()),
            Interval::all(),
        )
        .with_convergence(log_density_target())
        .with_primitives(
            f(|_x, s, aux: &AuxInfo<R>| -R::of(0.5) * (R::of(2.0) * (aux.log_q - s)).exp()),
            f(|_x, s, aux: &AuxInfo<R>| -(aux.log_q - s).exp()),
        ),
        "root_density" => {
            let d = params.require("root_density", "d")?;
            if d < 1.0 {
                return Err(Error::InvalidParam {
                    name: "d".into(),
                    reason: format!("root order must be >= 1, got {d}"),
                });
            }
            let dr = R::of(d);
            PsoInstance::new(
                format!("root_density({d})"),
                f(|_x, _s, aux: &AuxInfo<R>| aux.log_q.exp()),
                f(move |_x, s, _aux: &AuxInfo<R>| s.abs().powf(dr) * s.signum()),
                Interval::positive(),
            )
            .with_convergence(f(move |_x, z, aux: &AuxInfo<R>| {
                (aux.log_q.exp() * z).powf(dr.recip())
            }))
            .with_primitives(
                f(|_x, s, aux: &AuxInfo<R>| aux.log_q.exp() * s),
                f(move |_x, s, _aux: &AuxInfo<R>| {
                    s.abs().powf(dr + R::one()) / (dr + R::one())
                }),
            )
        }
        "log_variant_1" => PsoInstance::new(
            name,
            f(|_x, _s, aux: &AuxInfo<R>| aux.log_q.exp()),
            f(|_x, s, _aux: &AuxInfo<R>| s.exp()),
            Interval::all(),
        )
        .with_convergence(log_density_target())
        .with_primitives(
            f(|_x, s, aux: &AuxInfo<R>| aux.log_q.exp() * s),
            f(|_x, s, _aux: &AuxInfo<R>| s.exp()),
        ),
        "log_variant_4" => PsoInstance::new(
            name,
            f(|_x, s, aux: &AuxInfo<R>| (R::of(0.5) * (aux.log_q - s)).exp()),
            f(|_x, s, aux: &AuxInfo<R>| (R::of(0.5) * (s - aux.log_q)).exp()),
            Interval::all(),
        )
        .with_convergence(log_density_target())
        .with_primitives(
            f(|_x, s, aux: &AuxInfo<R>| -R::of(2.0) * (R::of(0.5) * (aux.log_q - s)).exp()),
            f(|_x, s, aux: &AuxInfo<R>| R::of(2.0) * (R::of(0.5) * (s - aux.log_q)).exp()),
        ),
        "log_variant_5" => PsoInstance::new(
            name,
            f(|_x, s, aux: &AuxInfo<R>| (aux.log_q + s).exp()),
            f(|_x, s, _aux: &AuxInfo<R>| (R::of(2.0) * s).exp()),
            Interval::all(),
        )
        .with_convergence(log_density_target())
        .with_primitives(
            f(|_x, s, aux: &AuxInfo<R>| (aux.log_q + s).exp()),
            f(|_x, s, _aux: &AuxInfo<R>| R::of(0.5) * (R::of(2.0) * s).exp()),
        ),
        "unit" => PsoInstance::new(
            name,
            f(|_x, _s, _aux: &AuxInfo<R>| R::one()),
            f(|_x, _s, _aux: &AuxInfo<R>| R::one()),
            Interval::all(),
        )
        .with_primitives(f(|_x, s, _aux| s), f(|_x, s, _aux| s)),
        "ebgan" => {
            let m = params.require("ebgan", "m")?;
            let mr = R::of(m);
            PsoInstance::new(
                format!("ebgan({m})"),
                f(|_x, _s, _aux: &AuxInfo<R>| -R::one()),
                f(move |_x, s, _aux: &AuxInfo<R>| {
                    if s < mr {
                        -R::one()
                    } else {
                        R::zero()
                    }
                }),
                Interval::open(R::zero(), mr),
            )
            .with_primitives(
                f(|_x, s, _aux: &AuxInfo<R>| -s),
                f(move |_x, s, _aux: &AuxInfo<R>| (mr - s).max(R::zero())),
            )
        }
        "ulsif" => PsoInstance::new(
            name,
            f(|_x, _s, _aux: &AuxInfo<R>| R::one()),
            f(|_x, s, _aux: &AuxInfo<R>| s),
            Interval::positive(),
        )
        .with_convergence(ratio_target())
        .with_primitives(f(|_x, s, _aux| s), f(|_x, s, _aux| R::of(0.5) * s * s)),
        "kliep" => PsoInstance::new(
            name,
            f(|_x, s, _aux: &AuxInfo<R>| s.recip()),
            f(|_x, _s, _aux: &AuxInfo<R>| R::one()),
            Interval::positive(),
        )
        .with_convergence(ratio_target())
        .with_primitives(
            f(|_x, s, _aux: &AuxInfo<R>| s.ln()),
            f(|_x, s, _aux| s - R::one()),
        ),
        "gan_critic" | "cond_gan_critic" => PsoInstance::new(
            name,
            f(|_x, s, _aux: &AuxInfo<R>| s.recip()),
            f(|_x, s, _aux: &AuxInfo<R>| (R::one() - s).recip()),
            Interval::open(R::zero(), R::one()),
        )
        .with_convergence(f(|_x, z, _aux: &AuxInfo<R>| z / (R::one() + z)))
        .with_primitives(
            f(|_x, s, _aux: &AuxInfo<R>| s.ln()),
            f(|_x, s, _aux: &AuxInfo<R>| -(R::one() - s).ln()),
        ),
        "gan_critic_log" => PsoInstance::new(
            name,
            f(|_x, s, _aux: &AuxInfo<R>| (-s).exp()),
            f(|_x, s, _aux: &AuxInfo<R>| (R::one() - s.exp()).recip()),
            Interval::negative(),
        )
        .with_convergence(f(|_x, z, _aux: &AuxInfo<R>| (z / (R::one() + z)).ln()))
        .with_primitives(
            f(|_x, s, _aux: &AuxInfo<R>| -(-s).exp()),
            f(|_x, s, _aux: &AuxInfo<R>| s - (R::one() - s.exp()).ln()),
        ),
        "ndmr" => PsoInstance::new(
            name,
            f(|_x, _s, _aux: &AuxInfo<R>| R::one()),
            f(|_x, s, _aux: &AuxInfo<R>| R::of(2.0) * s),
            Interval::open(R::zero(), R::one()),
        )
        .with_convergence(f(|_x, z, _aux: &AuxInfo<R>| R::of(0.5) * z))
        .with_primitives(f(|_x, s, _aux| s), f(|_x, s, _aux| s * s)),
        "ndmlr" => PsoInstance::new(
            name,
            f(|_x, _s, _aux: &AuxInfo<R>| R::one()),
            f(|_x, s, _aux: &AuxInfo<R>| R::of(2.0) * s.exp()),
            Interval::negative(),
        )
        .with_convergence(f(|_x, z, _aux: &AuxInfo<R>| (R::of(0.5) * z).ln()))
        .with_primitives(
            f(|_x, s, _aux| s),
            f(|_x, s, _aux: &AuxInfo<R>| R::of(2.0) * s.exp()),
        ),
        "power_div" => {
            let alpha = params.require("power_div", "alpha")?;
            if alpha <= 0.0 {
                return Err(Error::InvalidParam {
                    name: "alpha".into(),
                    reason: format!("power-divergence order must be positive, got {alpha}"),
                });
            }
            let a = R::of(alpha);
            PsoInstance::new(
                format!("power_div({alpha})"),
                f(move |_x, s, _aux: &AuxInfo<R>| s.powf(a - R::one())),
                f(move |_x, s, _aux: &AuxInfo<R>| s.powf(a)),
                Interval::positive(),
            )
            .with_convergence(ratio_target())
            .with_primitives(
                f(move |_x, s, _aux: &AuxInfo<R>| s.powf(a) / a),
                f(move |_x, s, _aux: &AuxInfo<R>| s.powf(a + R::one()) / (a + R::one())),
            )
        }
        "reversed_kl" => PsoInstance::new(
            name,
            f(|_x, s, _aux: &AuxInfo<R>| (s * s).recip()),
            f(|_x, s, _aux: &AuxInfo<R>| s.recip()),
            Interval::positive(),
        )
        .with_convergence(ratio_target())
        .with_primitives(
            f(|_x, s, _aux: &AuxInfo<R>| -s.recip()),
            f(|_x, s, _aux: &AuxInfo<R>| s.ln()),
        ),
        "balanced_ratio" => PsoInstance::new(
            name,
            f(|_x, s, _aux: &AuxInfo<R>| (s + R::one()).recip()),
            f(|_x, s, _aux: &AuxInfo<R>| s / (s + R::one())),
            Interval::positive(),
        )
        .with_convergence(ratio_target())
        .with_primitives(
            f(|_x, s, _aux: &AuxInfo<R>| (s + R::one()).ln()),
            f(|_x, s, _aux: &AuxInfo<R>| s - (s + R::one()).ln()),
        ),
        "log_density_ratio" => PsoInstance::new(
            name,
            f(|_x, _s, _aux: &AuxInfo<R>| R::one()),
            f(|_x, s, _aux: &AuxInfo<R>| s.exp()),
            Interval::all(),
        )
        .with_convergence(log_ratio_target())
        .with_primitives(f(|_x, s, _aux| s), f(|_x, s, _aux: &AuxInfo<R>| s.exp())),
        "square" => PsoInstance::new(
            name,
            f(|_x, s, _aux: &AuxInfo<R>| R::one() - s),
            f(|_x, s, _aux: &AuxInfo<R>| R::one() + s),
            Interval::open(-R::one(), R::one()),
        )
        .with_convergence(f(|_x, z, _aux: &AuxInfo<R>| {
            (z - R::one()) / (z + R::one())
        }))
        .with_primitives(
            f(|_x, s, _aux: &AuxInfo<R>| {
                let t = R::one() - s;
                -R::of(0.5) * t * t
            }),
            f(|_x, s, _aux: &AuxInfo<R>| {
                let t = R::one() + s;
                R::of(0.5) * t * t
            }),
        ),
        "logistic" | "cond_logistic" => PsoInstance::new(
            name,
            f(|_x, s, _aux: &AuxInfo<R>| sigmoid(-s)),
            f(|_x, s, _aux: &AuxInfo<R>| sigmoid(s)),
            Interval::all(),
        )
        .with_convergence(log_ratio_target())
        .with_primitives(
            f(|_x, s, _aux: &AuxInfo<R>| -softplus(-s)),
            f(|_x, s, _aux: &AuxInfo<R>| softplus(s)),
        ),
        "exponential" => PsoInstance::new(
            name,
            f(|_x, s, _aux: &AuxInfo<R>| (-s).exp()),
            f(|_x, s, _aux: &AuxInfo<R>| s.exp()),
            Interval::all(),
        )
        .with_convergence(f(|_x, z, _aux: &AuxInfo<R>| R::of(0.5) * z.ln()))
        .with_primitives(
            f(|_x, s, _aux: &AuxInfo<R>| -(-s).exp()),
            f(|_x, s, _aux: &AuxInfo<R>| s.exp()),
        ),
        "lsgan" => {
            let a = params.require("lsgan", "a")?;
            let b = params.require("lsgan", "b")?;
            if !(a < b) {
                return Err(Error::InvalidParam {
                    name: "a,b".into(),
                    reason: format!("lsgan requires a < b, got a={a}, b={b}"),
                });
            }
            let (ar, br) = (R::of(a), R::of(b));
            PsoInstance::new(
                format!("lsgan({a},{b})"),
                f(move |_x, s, _aux: &AuxInfo<R>| br - s),
                f(move |_x, s, _aux: &AuxInfo<R>| s - ar),
                Interval::open(ar, br),
            )
            .with_convergence(f(move |_x, z, _aux: &AuxInfo<R>| {
                (br * z + ar) / (z + R::one())
            }))
            .with_primitives(
                f(move |_x, s, _aux: &AuxInfo<R>| {
                    let t = br - s;
                    -R::of(0.5) * t * t
                }),
                f(move |_x, s, _aux: &AuxInfo<R>| {
                    let t = s - ar;
                    R::of(0.5) * t * t
                }),
            )
        }
        "kl_div" => PsoInstance::new(
            name,
            f(|_x, _s, _aux: &AuxInfo<R>| R::one()),
            f(|_x, s, _aux: &AuxInfo<R>| (s - R::one()).exp()),
            Interval::all(),
        )
        .with_convergence(f(|_x, z, _aux: &AuxInfo<R>| R::one() + z.ln()))
        .with_primitives(
            f(|_x, s, _aux| s),
            f(|_x, s, _aux: &AuxInfo<R>| (s - R::one()).exp()),
        ),
        "reverse_kl_div" => PsoInstance::new(
            name,
            f(|_x, _s, _aux: &AuxInfo<R>| R::one()),
            f(|_x, s, _aux: &AuxInfo<R>| (-s).recip()),
            Interval::negative(),
        )
        .with_convergence(f(|_x, z, _aux: &AuxInfo<R>| -z.recip()))
        .with_primitives(
            f(|_x, s, _aux| s),
            f(|_x, s, _aux: &AuxInfo<R>| -R::one() - (-s).ln()),
        ),
        "lipschitz" => PsoInstance::new(
            name,
            f(|_x, s, _aux: &AuxInfo<R>| R::one() - s / (s * s + R::one()).sqrt()),
            f(|_x, s, _aux: &AuxInfo<R>| R::one() + s / (s * s + R::one()).sqrt()),
            Interval::all(),
        )
        .with_convergence(f(|_x, z, _aux: &AuxInfo<R>| {
            R::of(0.5) * (z.sqrt() - z.sqrt().recip())
        }))
        .with_primitives(
            f(|_x, s, _aux: &AuxInfo<R>| s - (s * s + R::one()).sqrt()),
            f(|_x, s, _aux: &AuxInfo<R>| s + (s * s + R::one()).sqrt()),
        ),
        "ldar" => PsoInstance::new(
            name,
            f(|_x, s, _aux: &AuxInfo<R>| sigmoid(-s.tan())),
            f(|_x, s, _aux: &AuxInfo<R>| sigmoid(s.tan())),
            Interval::open(-R::FRAC_PI_2(), R::FRAC_PI_2()),
        )
        .with_convergence(f(|_x, z, _aux: &AuxInfo<R>| z.ln().atan())),
        "ldtr" => PsoInstance::new(
            name,
            f(|_x, s, _aux: &AuxInfo<R>| (R::one() - s).sqrt()),
            f(|_x, s, _aux: &AuxInfo<R>| (R::one() + s).sqrt()),
            Interval::open(-R::one(), R::one()),
        )
        .with_convergence(f(|_x, z, _aux: &AuxInfo<R>| z.ln().tanh()))
        .with_primitives(
            f(|_x, s, _aux: &AuxInfo<R>| -R::of(2.0 / 3.0) * (R::one() - s).powf(R::of(1.5))),
            f(|_x, s, _aux: &AuxInfo<R>| R::of(2.0 / 3.0) * (R::one() + s).powf(R::of(1.5))),
        ),
        other => return Err(Error::UnknownInstance(other.to_string())),
    };
    Ok(inst)
}

/// Divides both magnitudes by `|M_up| + |M_down|`, bounding outputs to
/// `[-1, 1]` without moving the balance point.
pub fn wrap_bounded<R: Real>(inst: PsoInstance<R>) -> PsoInstance<R> {
    let up = inst.mag_up.clone();
    let down = inst.mag_down.clone();
    let up2 = inst.mag_up.clone();
    let dn2 = inst.mag_down.clone();
    let denom_up = move |x: &[R], s: R, aux: &AuxInfo<R>| {
        up(x, s, aux).abs() + down(x, s, aux).abs()
    };
    let up3 = inst.mag_up.clone();
    let dn3 = inst.mag_down.clone();
    let denom_dn = move |x: &[R], s: R, aux: &AuxInfo<R>| {
        up3(x, s, aux).abs() + dn3(x, s, aux).abs()
    };
    PsoInstance {
        name: format!("bounded({})", inst.name),
        mag_up: f(move |x, s, aux| up2(x, s, aux) / denom_up(x, s, aux)),
        mag_down: f(move |x, s, aux| dn2(x, s, aux) / denom_dn(x, s, aux)),
        convergence: inst.convergence,
        interval: inst.interval,
        primitives: None,
    }
}

/// Which side of the threshold triggers a cut/reverse wrapper.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThresholdSide {
    Above,
    Below,
}

/// Which magnitude a cut/reverse wrapper modifies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForceSel {
    Up,
    Down,
}

fn wrap_indicator<R: Real>(
    inst: PsoInstance<R>,
    phi: R,
    side: ThresholdSide,
    force: ForceSel,
    factor: R,
    tag: &str,
) -> PsoInstance<R> {
    let name = format!("{tag}({phi}, {})", inst.name);
    let wrap = |g: InstFn<R>| -> InstFn<R> {
        f(move |x, s, aux| {
            let v = g(x, s, aux);
            let triggered = match side {
                ThresholdSide::Above => s > phi,
                ThresholdSide::Below => s < phi,
            };
            if triggered {
                factor * v
            } else {
                v
            }
        })
    };
    let (mag_up, mag_down) = match force {
        ForceSel::Up => (wrap(inst.mag_up), inst.mag_down),
        ForceSel::Down => (inst.mag_up, wrap(inst.mag_down)),
    };
    PsoInstance {
        name,
        mag_up,
        mag_down,
        convergence: inst.convergence,
        interval: inst.interval,
        primitives: None,
    }
}

/// Zeroes the selected magnitude once the height crosses `phi` on `side`,
/// removing that force past the threshold.
pub fn wrap_cut_at<R: Real>(
    inst: PsoInstance<R>,
    phi: R,
    side: ThresholdSide,
    force: ForceSel,
) -> PsoInstance<R> {
    wrap_indicator(inst, phi, side, force, R::zero(), "cut_at")
}

/// Negates the selected magnitude once the height crosses `phi` on `side`,
/// turning the force around so the surface oscillates at the threshold.
pub fn wrap_reverse_at<R: Real>(
    inst: PsoInstance<R>,
    phi: R,
    side: ThresholdSide,
    force: ForceSel,
) -> PsoInstance<R> {
    wrap_indicator(inst, phi, side, force, -R::one(), "reverse_at")
}
