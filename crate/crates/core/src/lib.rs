//! Variational data assimilation with adjoint gradients, second-order
//! adjoint Hessian-vector products and matrix-free uncertainty estimates.
//!
//! The crate is organised bottom-up: [`model`] defines normalized states
//! and the dynamics trait, [`integrator`] advances them with explicit
//! Euler, [`observation`] turns trajectories into costs, [`adjoint`]
//! differentiates those costs, and [`optimize`] finds optima and inverts
//! the Hessian along chosen directions. [`phasefield`] is the reference
//! model and [`harness`] runs twin experiments on it.

pub mod adjoint;
pub mod error;
pub mod harness;
pub mod integrator;
pub mod io;
pub mod linear;
pub mod model;
pub mod observation;
pub mod optimize;
pub mod phasefield;

pub use adjoint::{gradient, hvp, GradientResult, Linearization, Problem};
pub use error::{Error, Result};
pub use integrator::{integrate, TimeGrid, Trajectory};
pub use model::{from_psi, to_psi, Bounds, Model, PsiVector, StateVector};
pub use observation::{CostKind, ObservationOperator, ObservationSeries, Projection, Sigma};
pub use optimize::{
    conjugate_residual, minimize, multi_uncertainty, uncertainty, CrConfig, LbfgsConfig, UncertaintyResult,
};
pub use phasefield::{PfGrid, PfParams, PhaseField};
