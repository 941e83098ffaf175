//! Full-order Gauss-Newton state estimation via QR factorization, plus the
//! gain-matrix (normal equations) variant used as a cross-check.
//!
//! The QR path factors the weighted Jacobian fresh at every iteration with a
//! Householder factorization; the gain-matrix path solves
//! `(J' S^-1 J) dx = -J' S^-1 r` through a Cholesky factorization and exists
//! to validate the QR step, not to drive production solves.

use crate::grid::{AdmittanceModel, GridError, PolarState};
use crate::measurement::{
    assemble_residual, validate_redundancy, CovarianceModel, MagnitudeForm, MeasurementError,
    MeasurementProfile, MeasurementSet,
};
use crate::physics::jacobian_polar;
use nalgebra::{DMatrix, DVector};
use std::time::{Duration, Instant};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("measurement redundancy not satisfied: {rows} rows for {state_dim} states")]
    NotRedundant { rows: usize, state_dim: usize },
    #[error("weighted Jacobian is rank deficient (observability lost): min |R_kk| = {min_diag:.3e}, max |R_kk| = {max_diag:.3e}")]
    Observability { min_diag: f64, max_diag: f64 },
    #[error("gain matrix is singular or ill-conditioned (condition estimate {cond_estimate:.3e})")]
    IllConditioned { cond_estimate: f64 },
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Measurement(#[from] MeasurementError),
}

/// Convergence and guard settings for the Gauss-Newton iteration.
#[derive(Debug, Clone, Copy)]
pub struct SolverConfig {
    /// Convergence threshold on the infinity norm of the state step (pu).
    pub step_tol: f64,
    pub max_iters: usize,
    /// Iterates whose smallest voltage magnitude falls below this are
    /// treated as divergent.
    pub min_magnitude: f64,
    /// Steps larger than this (pu, infinity norm) abort the iteration.
    pub divergence_guard: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            step_tol: 1e-6,
            max_iters: 25,
            min_magnitude: 0.05,
            divergence_guard: 10.0,
        }
    }
}

/// Outcome of one full-order solve.
#[derive(Debug, Clone)]
pub struct SolveReport {
    pub state: PolarState,
    pub iterations: usize,
    pub final_step_norm: f64,
    pub converged: bool,
    pub wall_time: Duration,
}

/// True iff the step is strictly below the tolerance in infinity norm.
pub fn step_converged(step: &DVector<f64>, config: &SolverConfig) -> bool {
    step.amax() < config.step_tol
}

/// One weighted-least-squares estimation problem: network, devices, weights,
/// and the magnitude-row form. Immutable and shareable across solves.
#[derive(Debug, Clone)]
pub struct WlsProblem {
    model: AdmittanceModel,
    set: MeasurementSet,
    cov: CovarianceModel,
    form: MagnitudeForm,
}

impl WlsProblem {
    pub fn new(
        model: AdmittanceModel,
        set: MeasurementSet,
        cov: CovarianceModel,
        form: MagnitudeForm,
    ) -> Result<Self, SolverError> {
        let report = validate_redundancy(&set, model.graph().state_dim());
        if !report.satisfied {
            return Err(SolverError::NotRedundant {
                rows: report.rows,
                state_dim: report.state_dim,
            });
        }
        assert_eq!(cov.rows(), set.rows(), "covariance rows must match the set");
        Ok(Self {
            model,
            set,
            cov,
            form,
        })
    }

    pub fn model(&self) -> &AdmittanceModel {
        &self.model
    }

    pub fn set(&self) -> &MeasurementSet {
        &self.set
    }

    pub fn covariance(&self) -> &CovarianceModel {
        &self.cov
    }

    pub fn form(&self) -> MagnitudeForm {
        self.form
    }

    pub fn rows(&self) -> usize {
        self.set.rows()
    }

    pub fn state_dim(&self) -> usize {
        2 * self.model.graph().state_dim()
    }

    pub fn residual(
        &self,
        x: &PolarState,
        profile: &MeasurementProfile,
    ) -> Result<DVector<f64>, MeasurementError> {
        assemble_residual(x, profile, &self.set, &self.model, self.form)
    }

    pub fn weighted_residual(
        &self,
        x: &PolarState,
        profile: &MeasurementProfile,
    ) -> Result<DVector<f64>, MeasurementError> {
        Ok(self
            .residual(x, profile)?
            .component_mul(self.cov.weight_sqrt()))
    }

    pub fn jacobian(&self, x: &PolarState) -> DMatrix<f64> {
        jacobian_polar(&self.model, &self.set, x, self.form)
    }

    pub fn weighted_jacobian(&self, x: &PolarState) -> DMatrix<f64> {
        let mut j = self.jacobian(x);
        let w = self.cov.weight_sqrt();
        for r in 0..j.nrows() {
            let s = w[r];
            for c in 0..j.ncols() {
                j[(r, c)] *= s;
            }
        }
        j
    }

    /// Gradient of the WLS objective, `J' S^-1 r`.
    pub fn gradient(
        &self,
        x: &PolarState,
        profile: &MeasurementProfile,
    ) -> Result<DVector<f64>, MeasurementError> {
        let jw = self.weighted_jacobian(x);
        let rw = self.weighted_residual(x, profile)?;
        Ok(jw.transpose() * rw)
    }
}

/// Gauss-Newton step from the normal equations: solves
/// `(J' S^-1 J) dx = -J' S^-1 r` by Cholesky factorization.
pub fn gain_matrix_step(
    residual: &DVector<f64>,
    jacobian: &DMatrix<f64>,
    cov: &CovarianceModel,
) -> Result<DVector<f64>, SolverError> {
    let w = cov.weight_sqrt();
    let mut jw = jacobian.clone();
    for r in 0..jw.nrows() {
        let s = w[r];
        for c in 0..jw.ncols() {
            jw[(r, c)] *= s;
        }
    }
    let rw = residual.component_mul(w);
    let gain = jw.transpose() * &jw;
    let rhs = -(jw.transpose() * rw);
    match gain.clone().cholesky() {
        Some(chol) => Ok(chol.solve(&rhs)),
        None => {
            // Cholesky failed: report a condition estimate from the spectrum.
            let eigs = gain.symmetric_eigenvalues();
            let max = eigs.amax();
            let min = eigs.iter().cloned().fold(f64::INFINITY, f64::min);
            Err(SolverError::IllConditioned {
                cond_estimate: if min > 0.0 { max / min } else { f64::INFINITY },
            })
        }
    }
}

/// QR back-solve of the weighted linearized system: `dx` minimizing
/// `|S^-1/2 J dx + S^-1/2 r|_2`, computed as `-R^-1 Q' r_w`.
///
/// Fails with an observability error when the triangular factor is rank
/// deficient.
pub(crate) fn qr_step(jw: &DMatrix<f64>, rw: &DVector<f64>) -> Result<DVector<f64>, SolverError> {
    let qr = jw.clone().qr();
    let r = qr.r();
    let mut min_diag = f64::INFINITY;
    let mut max_diag: f64 = 0.0;
    for k in 0..r.nrows().min(r.ncols()) {
        let d = r[(k, k)].abs();
        min_diag = min_diag.min(d);
        max_diag = max_diag.max(d);
    }
    let rank_ok = min_diag > max_diag * 1e-12; // false also for NaN
    if !rank_ok {
        return Err(SolverError::Observability { min_diag, max_diag });
    }
    let qtr = qr.q().transpose() * rw;
    let step = r
        .solve_upper_triangular(&qtr)
        .ok_or(SolverError::Observability { min_diag, max_diag })?;
    Ok(-step)
}

/// Full-order Gauss-Newton via QR: iterates
/// `x <- x - R^-1 (Q' S^-1/2 r(x))` with a fresh factorization per iteration
/// until the step drops below `step_tol` or the iteration budget is spent.
///
/// Non-convergence is reported in the result, not as an error; only loss of
/// observability (rank deficiency) is an error.
pub fn gnvqr_solve(
    problem: &WlsProblem,
    profile: &MeasurementProfile,
    x0: &PolarState,
    config: &SolverConfig,
) -> Result<SolveReport, SolverError> {
    let start = Instant::now();
    let mut x = x0.clone();
    let mut final_step_norm = f64::INFINITY;

    for iter in 1..=config.max_iters {
        let rw = problem.weighted_residual(&x, profile)?;
        let jw = problem.weighted_jacobian(&x);
        let step = qr_step(&jw, &rw)?;
        let norm = step.amax();
        final_step_norm = norm;

        if !norm.is_finite() || norm > config.divergence_guard {
            return Ok(SolveReport {
                state: x,
                iterations: iter,
                final_step_norm: norm,
                converged: false,
                wall_time: start.elapsed(),
            });
        }

        let next = x.as_vector() + step;
        match PolarState::from_vector(&next) {
            Ok(s) if s.magnitudes().min() >= config.min_magnitude => x = s,
            _ => {
                return Ok(SolveReport {
                    state: x,
                    iterations: iter,
                    final_step_norm: norm,
                    converged: false,
                    wall_time: start.elapsed(),
                });
            }
        }

        if norm < config.step_tol {
            return Ok(SolveReport {
                state: x,
                iterations: iter,
                final_step_norm: norm,
                converged: true,
                wall_time: start.elapsed(),
            });
        }
    }

    Ok(SolveReport {
        state: x,
        iterations: config.max_iters,
        final_step_norm,
        converged: false,
        wall_time: start.elapsed(),
    })
}
