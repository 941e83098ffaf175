//! Orchestration of the accelerated estimator over a measurement-profile
//! stream: reduced solve, full-order acceptance test with recycled QR
//! factors, Gauss-Newton fallback, and conditional basis expansion.
//!
//! Every emitted state either passed the recycled-factor step test or is a
//! converged full-order solution; there is no third path. The profile loop is
//! sequential because basis growth is order-dependent.

use crate::grid::{CartesianState, GridError, PolarState};
use crate::measurement::{
    squared_magnitude_transform, MeasurementError, MeasurementProfile,
};
use crate::physics::QuadraticResidualModel;
use crate::rom::{
    dse_update, init_subspace, lift, reduce_profile, rmse_solve, DseOutcome, ReducedOperators,
    RmseConfig, RomError, Subspace,
};
use crate::solver::{gnvqr_solve, SolverConfig, SolverError, WlsProblem};
use nalgebra::{DMatrix, DVector};
use std::time::{Duration, Instant};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ApseError {
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Rom(#[from] RomError),
    #[error(transparent)]
    Measurement(#[from] MeasurementError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("bootstrap solve did not converge (final step {final_step:.3e})")]
    BootstrapDiverged { final_step: f64 },
}

/// Tuning for the accelerated loop. One tolerance drives both the acceptance
/// test and full-order convergence.
#[derive(Debug, Clone)]
pub struct ApseConfig {
    /// Shared tolerance for the acceptance test and the Gauss-Newton step.
    pub eps_n: f64,
    pub gn: SolverConfig,
    pub rmse: RmseConfig,
    /// Basis expansion threshold, relative to the solution norm.
    pub expansion_tol: f64,
    /// Profile count after which the reduced Hessian stops expanding.
    pub hessian_cap: usize,
    /// Refresh the recycled factors at the fallback solution instead of
    /// keeping the bootstrap factors for the whole run.
    pub refresh_factors_on_fallback: bool,
    /// Fraction of accepted profiles re-solved with the full-order path to
    /// record the state discrepancy (0 disables spot checks).
    pub spot_check_fraction: f64,
}

impl Default for ApseConfig {
    fn default() -> Self {
        let eps_n = 1e-6;
        Self {
            eps_n,
            gn: SolverConfig {
                step_tol: eps_n,
                ..SolverConfig::default()
            },
            rmse: RmseConfig::default(),
            expansion_tol: 1e-8,
            hessian_cap: 50,
            refresh_factors_on_fallback: false,
            spot_check_fraction: 0.0,
        }
    }
}

impl ApseConfig {
    /// Keeps the Gauss-Newton step tolerance tied to `eps_n`.
    pub fn with_eps_n(mut self, eps_n: f64) -> Self {
        self.eps_n = eps_n;
        self.gn.step_tol = eps_n;
        self
    }
}

/// Thin QR factors of the weighted polar Jacobian at a reference state,
/// recycled across acceptance tests.
#[derive(Debug, Clone)]
pub struct RecycledFactors {
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    /// Number of acceptance tests served since factorization.
    staleness: usize,
}

impl RecycledFactors {
    pub fn q_factor(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn r_factor(&self) -> &DMatrix<f64> {
        &self.r
    }

    pub fn staleness(&self) -> usize {
        self.staleness
    }

    /// Hypothetical Gauss-Newton step `-R^-1 Q' r_w` under the recycled
    /// factors.
    pub fn step(&self, weighted_residual: &DVector<f64>) -> Option<DVector<f64>> {
        let qtr = self.q.tr_mul(weighted_residual);
        self.r.solve_upper_triangular(&qtr).map(|s| -s)
    }
}

/// Thin Householder QR of the weighted Jacobian at `x_ref`.
pub fn prefactor(problem: &WlsProblem, x_ref: &PolarState) -> Result<RecycledFactors, SolverError> {
    let jw = problem.weighted_jacobian(x_ref);
    let qr = jw.qr();
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
    Ok(RecycledFactors {
        q: qr.q(),
        r,
        staleness: 0,
    })
}

/// Step-size acceptance test: the candidate passes when the hypothetical
/// Gauss-Newton step computed from the recycled factors and a fresh residual
/// stays below `eps_n` in infinity norm.
pub fn accept_test(
    factors: &mut RecycledFactors,
    problem: &WlsProblem,
    x_candidate: &PolarState,
    profile: &MeasurementProfile,
    eps_n: f64,
) -> Result<(bool, f64), ApseError> {
    factors.staleness += 1;
    let rw = problem.weighted_residual(x_candidate, profile)?;
    let value = match factors.step(&rw) {
        Some(step) => step.amax(),
        None => f64::INFINITY,
    };
    Ok((value < eps_n, value))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolvePath {
    RmseAccepted,
    FallbackGnvqr,
}

impl SolvePath {
    pub fn as_str(&self) -> &'static str {
        match self {
            SolvePath::RmseAccepted => "rmse-accepted",
            SolvePath::FallbackGnvqr => "fallback-gnvqr",
        }
    }
}

/// Per-profile outcome record.
#[derive(Debug, Clone)]
pub struct ApseResult {
    pub profile_id: u64,
    pub path: SolvePath,
    pub state: PolarState,
    pub converged: bool,
    pub rmse_iters: usize,
    pub gnvqr_iters: usize,
    pub basis_size_at_solve: usize,
    pub accept_test_value: f64,
    pub wall_time: Duration,
    /// Infinity-norm gap to a paired full-order re-solve, when spot-checked.
    pub paired_delta: Option<f64>,
}

/// Bootstrap artifacts: the reference solution and everything derived at it.
pub struct Bootstrap {
    pub x0: PolarState,
    pub x_c0: CartesianState,
    pub qrm: QuadraticResidualModel,
    pub factors: RecycledFactors,
    pub subspace: Subspace,
    pub operators: ReducedOperators,
    pub gnvqr_iters: usize,
}

/// Solves the first profile with the full-order solver from a flat start and
/// assembles the expansion, recycled factors, and seed subspace at it.
///
/// The delta-method covariance adjustment is fixed here, at the bootstrap
/// profile, and recycled for the whole run.
pub fn bootstrap(
    problem: &WlsProblem,
    profile0: &MeasurementProfile,
    config: &ApseConfig,
) -> Result<Bootstrap, ApseError> {
    let p = problem.model().graph().state_dim();
    let flat = PolarState::flat(p, problem.model().graph().slack_voltage());
    let report = gnvqr_solve(problem, profile0, &flat, &config.gn)?;
    if !report.converged {
        return Err(ApseError::BootstrapDiverged {
            final_step: report.final_step_norm,
        });
    }
    let x0 = report.state;
    let x_c0 = x0.to_cartesian();

    let (_, adjusted_cov) = squared_magnitude_transform(profile0, problem.covariance())?;
    let qrm = QuadraticResidualModel::build(problem.model(), problem.set(), &adjusted_cov, &x_c0);
    let factors = prefactor(problem, &x0)?;
    let (subspace, operators) = init_subspace(&qrm, config.expansion_tol, config.hessian_cap)?;
    Ok(Bootstrap {
        x0,
        x_c0,
        qrm,
        factors,
        subspace,
        operators,
        gnvqr_iters: report.iterations,
    })
}

/// Outcome of a full profile-stream run.
pub struct ApseRun {
    pub results: Vec<ApseResult>,
    pub subspace: Subspace,
    pub operators: ReducedOperators,
    pub factors: RecycledFactors,
}

/// Runs the accelerated loop over a profile stream.
///
/// Per profile: project the transformed measurement, solve the reduced
/// system, lift, and test on the full-order model; on rejection solve with
/// Gauss-Newton warm-started at the lifted state and conditionally expand the
/// basis with the converged solution. A fallback that fails to converge is
/// recorded and the run continues.
pub fn apse_run(
    problem: &WlsProblem,
    boot: Bootstrap,
    profiles: &[MeasurementProfile],
    config: &ApseConfig,
) -> Result<ApseRun, ApseError> {
    let Bootstrap {
        x_c0,
        qrm,
        mut factors,
        mut subspace,
        mut operators,
        ..
    } = boot;
    let x_c0_vec = x_c0.as_vector();
    let mut results = Vec::with_capacity(profiles.len());

    for (index, profile) in profiles.iter().enumerate() {
        let started = Instant::now();
        operators.note_profile();
        let basis_size_at_solve = subspace.q();

        let weighted = qrm.weighted_transformed_profile(profile)?;
        let reduced_meas = reduce_profile(&operators, &weighted);
        let rmse = rmse_solve(&operators, &reduced_meas, &config.rmse);

        let lifted = lift(&subspace, &x_c0_vec, &rmse.delta);
        let lifted_polar = lifted.to_polar();

        let (accepted, accept_value) = match &lifted_polar {
            Ok(state) => accept_test(&mut factors, problem, state, profile, config.eps_n)?,
            Err(_) => (false, f64::INFINITY),
        };

        if accepted {
            let state = lifted_polar.expect("accepted candidates converted");
            let paired_delta = if spot_check(index, config.spot_check_fraction) {
                let re = gnvqr_solve(problem, profile, &state, &config.gn)?;
                Some((re.state.as_vector() - state.as_vector()).amax())
            } else {
                None
            };
            results.push(ApseResult {
                profile_id: profile.profile_id,
                path: SolvePath::RmseAccepted,
                state,
                converged: true,
                rmse_iters: rmse.iterations,
                gnvqr_iters: 0,
                basis_size_at_solve,
                accept_test_value: accept_value,
                wall_time: started.elapsed(),
                paired_delta,
            });
            continue;
        }

        // fallback: warm start at the lifted state when it is usable
        let p = problem.model().graph().state_dim();
        let warm = lifted_polar
            .ok()
            .filter(|s| s.magnitudes().min() >= config.gn.min_magnitude)
            .unwrap_or_else(|| PolarState::flat(p, problem.model().graph().slack_voltage()));
        let report = gnvqr_solve(problem, profile, &warm, &config.gn)?;
        if report.converged {
            let solution_cartesian = report.state.to_cartesian();
            if dse_update(&mut subspace, &mut operators, &solution_cartesian, &qrm)?
                != DseOutcome::NoChange
                && config.refresh_factors_on_fallback
            {
                factors = prefactor(problem, &report.state)?;
            }
        }
        results.push(ApseResult {
            profile_id: profile.profile_id,
            path: SolvePath::FallbackGnvqr,
            state: report.state,
            converged: report.converged,
            rmse_iters: rmse.iterations,
            gnvqr_iters: report.iterations,
            basis_size_at_solve,
            accept_test_value: accept_value,
            wall_time: started.elapsed(),
            paired_delta: None,
        });
    }

    Ok(ApseRun {
        results,
        subspace,
        operators,
        factors,
    })
}

/// Deterministic spot-check schedule: every `1/fraction`-th profile.
fn spot_check(index: usize, fraction: f64) -> bool {
    if fraction <= 0.0 {
        return false;
    }
    if fraction >= 1.0 {
        return true;
    }
    let period = (1.0 / fraction).round() as usize;
    index.is_multiple_of(period.max(1))
}
