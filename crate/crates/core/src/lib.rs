//! Current-magnitude-saturated inverter control toolkit.
//!
//! The plant is a two-state dq-frame current model whose update passes
//! through a radial magnitude limiter. The crate provides:
//!
//! - [`model`]: plant construction, saturation, power/current maps and
//!   closed-loop simulation;
//! - [`certify`]: the spectral-norm stability certificate for static gains,
//!   its robustness to resistance increases, a trajectory-level Lyapunov
//!   auditor, and a boundary fixed-point ("stuck state") finder;
//! - [`synthesis`]: LQR baseline synthesis and spectral-norm-constrained
//!   least-squares gain fitting;
//! - [`mpc`]: the saturated finite-horizon optimal control problem, a
//!   rolling-horizon MPC loop, and dataset generation for fitting;
//! - [`fullorder`]: the 12-state inverter model (PLL, inner loops, LCL
//!   filter) and the model-comparison experiment;
//! - [`harness`]: the end-to-end baseline-vs-fit experiment pipeline.
//!
//! All numerics are generic over the scalar type through [`scalar::Real`]
//! (implemented for `f32` and `f64`); the `*64`/`*32` aliases below pin the
//! common concrete choices.

pub mod certify;
pub mod error;
pub mod fullorder;
pub mod harness;
pub mod linalg;
pub mod model;
pub mod mpc;
pub mod scalar;
pub mod synthesis;

pub use error::{Error, Result};
pub use scalar::{real, Real};

/// f64 concrete aliases (the default working precision).
pub type Vec2_64 = linalg::Vec2<f64>;
pub type Mat2_64 = linalg::Mat2<f64>;
pub type State64 = model::State<f64>;
pub type Input64 = model::Input<f64>;
pub type PlantParams64 = model::PlantParams<f64>;
pub type LinearPlant64 = model::LinearPlant<f64>;
pub type Trajectory64 = model::Trajectory<f64>;
pub type Gain64 = certify::Gain<f64>;
pub type Dataset64 = synthesis::Dataset<f64>;
pub type LqrWeights64 = synthesis::LqrWeights<f64>;
pub type FullOrderState64 = fullorder::FullOrderState<f64>;
pub type FullOrderParams64 = fullorder::FullOrderParams<f64>;

/// f32 concrete aliases.
pub type Vec2_32 = linalg::Vec2<f32>;
pub type Mat2_32 = linalg::Mat2<f32>;
pub type State32 = model::State<f32>;
pub type Input32 = model::Input<f32>;
pub type PlantParams32 = model::PlantParams<f32>;
pub type LinearPlant32 = model::LinearPlant<f32>;
pub type Gain32 = certify::Gain<f32>;
