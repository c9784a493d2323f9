//! Finite-horizon LQR synthesis for linear systems with multiplicative noise,
//! built on system level parameterizations over block-lower-triangular
//! operators.

// NaN must fail the parameter checks, hence the negated comparisons.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::too_many_arguments)]

pub mod blt;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod model;
pub mod qp;
pub mod rng;
pub mod scenario;
pub mod sls;
pub mod sysid;
pub mod uncertainty;

pub use blt::{BltLayout, BltOperator, StackedSignal};
pub use error::{Error, Result};
pub use model::{DeltaDist, MultNoiseSystem, NoiseTrace, Trajectory};
