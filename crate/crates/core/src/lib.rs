//! Numerical laboratory for HJM-type stochastic evolution equations on a
//! discretized forward-curve space.
//!
//! The crate simulates `dr = (A r + alpha(r)) dt + sum_i sigma_i(r) dB^i`
//! with `A = d/dx` realized as an exact grid shift, propagates the first
//! variation and its inverse adjoint along each path, assembles Malliavin
//! covariance matrices for finite families of linear functionals, and checks
//! the iterated Lie-bracket (Hormander) condition numerically.

pub mod brackets;
pub mod error;
pub mod fields;
pub mod grid;
pub mod h0;
pub mod malliavin;
pub mod oracles;
pub mod shapes;
pub mod sim;

pub use error::{Error, Result};
pub use fields::{DriftMode, FieldModel, FieldSpec, GateFn, GateSpec, ModelSpec, Taper};
pub use grid::{make_grid, BoundaryMode, Curve, GridSpec, LinearFunctional, Metric};
pub use shapes::CurveSpec;
pub use sim::{PathBundle, Scheme, SimConfig};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
