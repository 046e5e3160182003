//! Probabilistic surface optimization (PSO).
//!
//! A PSO run trains a scalar surface `f(x)` by pushing it up at samples of
//! one density and down at samples of another, with pointwise *magnitude*
//! weights deciding how hard each sample pushes. The ratio of the two
//! magnitudes fixes the statistical target the surface converges to
//! (log-density, density, density ratios, conditional densities).
//!
//! The crate is split along that pipeline:
//!
//! - [`surface`]: the model `f(x)` — fully-connected and block-diagonal
//!   networks with input normalization, height bias and manual reverse-mode
//!   gradients.
//! - [`instances`]: the magnitude-pair registry, instance wrappers and a
//!   numeric feasibility checker.
//! - [`dist`]: benchmark densities with exact log-pdf and exact sampling.
//! - [`train`]: the stochastic update, Adam, the learning-rate schedule and
//!   the training loop.
//! - [`eval`]: accuracy and consistency metrics.
//! - [`kernel`]: gradient-similarity diagnostics of the trained model.
//!
//! All numerics are generic over the scalar type through [`Real`]; the
//! `*64` aliases below fix `f64`, which is what the CLI and the shipped
//! experiments use.

pub mod batch;
pub mod dist;
pub mod error;
pub mod eval;
pub mod instances;
pub mod kernel;
pub mod linalg;
pub mod math;
pub mod rng;
pub mod scalar;
pub mod surface;
#[doc(hidden)]
pub mod testing;
pub mod train;

pub use batch::Batch;
pub use error::{Error, Result};
pub use scalar::Real;
pub use surface::Surface;

/// `f64` model: spec + preconditioner + parameters.
pub type Model64 = surface::Model<f64>;
/// `f64` network description.
pub type NetworkSpec64 = surface::NetworkSpec<f64>;
/// `f64` parameter storage.
pub type ParamVector64 = surface::ParamVector<f64>;
/// `f64` input preconditioner.
pub type Preconditioner64 = surface::Preconditioner<f64>;
/// `f64` magnitude-function pair.
pub type PsoInstance64 = instances::PsoInstance<f64>;
/// `f64` sample batch.
pub type Batch64 = Batch<f64>;
/// `f64` training configuration.
pub type TrainConfig64 = train::TrainConfig<f64>;
/// `f64` square matrix.
pub type Mat64 = linalg::Mat<f64>;
