//! Accelerated probabilistic state estimation for single-phase distribution grids.
//!
//! The crate solves sequences of weighted-least-squares state estimation
//! problems over sampled measurement profiles. Each profile is first attempted
//! with a reduced-order model (RMSE) built from an exact second-order expansion
//! of the residual equations in Cartesian voltage coordinates; candidate
//! solutions are screened against the full-order model with recycled QR
//! factors, and rejected profiles fall back to a conventional Gauss-Newton/QR
//! solver whose solution conditionally expands the reduced basis.
//!
//! Module map:
//! - [`grid`]: network graph, incidence/admittance assembly, coordinate changes.
//! - [`measurement`]: device sets, covariance, profiles, residual assembly.
//! - [`physics`]: injection/flow/magnitude functions, Jacobians, constant
//!   Cartesian Hessians, and the exact weighted quadratic expansion.
//! - [`solver`]: full-order Gauss-Newton via QR, plus the gain-matrix variant.
//! - [`rom`]: subspace management, projected operators, reduced Newton solve,
//!   dynamic subspace expansion.
//! - [`apse`]: the orchestration loop (reduce, solve, test, fall back, expand).
//! - [`harness`]: Monte-Carlo experiment reproduction (uncertainty regions,
//!   profile synthesis, batch runs, statistics).

pub mod apse;
pub mod grid;
pub mod harness;
pub mod measurement;
pub mod physics;
pub mod rom;
pub mod solver;

pub use crate::apse::{accept_test, apse_run, bootstrap, ApseConfig, ApseResult, RecycledFactors};
pub use crate::grid::{AdmittanceModel, CartesianState, GridError, NetworkGraph, PolarState};
pub use crate::measurement::{
    assemble_residual, squared_magnitude_transform, validate_redundancy, CovarianceModel,
    MagnitudeForm, MeasurementProfile, MeasurementSet,
};
pub use crate::physics::{HessianTensor, JacobianBlocks, QuadraticResidualModel};
pub use crate::rom::{ReducedOperators, RmseConfig, Subspace};
pub use crate::solver::{gnvqr_solve, SolveReport, SolverConfig, SolverError, WlsProblem};
