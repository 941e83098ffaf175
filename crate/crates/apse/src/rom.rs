//! Reduced-order model: orthonormal subspace management, projected operators,
//! the reduced Newton-like iteration, and dynamic subspace expansion with
//! incremental operator updates.
//!
//! The reduced residual is the projection of the exact expansion through
//! `(J0 V)'`: `r_hat(d) = R_hat + G_hat d + 0.5 H_hat (d kron d) - r_hat_meas`
//! where `G_hat = (J0 V)'(J0 V)` and the reduced Hessian is kept as one dense
//! `q_h x q_h` symmetric block per reduced output row. Once the configured
//! number of profiles has been processed, the reduced Hessian stops expanding
//! and later basis columns extend only the linear operators; solutions that
//! need quadratic accuracy in the new directions fail the full-order
//! acceptance test and route to the fallback solver.

use crate::grid::CartesianState;
use crate::physics::QuadraticResidualModel;
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RomError {
    #[error("zero initial state cannot seed the subspace")]
    ZeroInitialState,
    #[error("reduced gain matrix is not positive definite (degenerate basis)")]
    DegenerateBasis,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("basis checkpoint: {0}")]
    Io(#[from] std::io::Error),
    #[error("basis checkpoint: {0}")]
    Csv(#[from] csv::Error),
    #[error("basis checkpoint: {0}")]
    Format(String),
}

/// Reduced Newton iteration settings.
#[derive(Debug, Clone, Copy)]
pub struct RmseConfig {
    /// Convergence threshold on the infinity norm of the reduced step.
    pub step_tol: f64,
    pub max_iters: usize,
    /// Reduced iterates beyond this magnitude abort as divergent.
    pub divergence_guard: f64,
}

impl Default for RmseConfig {
    fn default() -> Self {
        Self {
            step_tol: 1e-10,
            max_iters: 50,
            divergence_guard: 1e3,
        }
    }
}

/// Orthonormal basis of the solution subspace (`2p x q`).
#[derive(Debug, Clone)]
pub struct Subspace {
    basis: DMatrix<f64>,
    /// Expansion threshold relative to the norm of the projected solution.
    expansion_tol: f64,
}

impl Subspace {
    /// Wraps an existing orthonormal basis (e.g. a completed or checkpointed
    /// one); the orthonormality defect must be at rounding level.
    pub fn from_basis(basis: DMatrix<f64>, expansion_tol: f64) -> Result<Self, RomError> {
        let s = Self {
            basis,
            expansion_tol,
        };
        if s.orthonormality_defect() > 1e-10 {
            return Err(RomError::Format(format!(
                "basis is not orthonormal (defect {:.3e})",
                s.orthonormality_defect()
            )));
        }
        Ok(s)
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn q(&self) -> usize {
        self.basis.ncols()
    }

    pub fn expansion_tol(&self) -> f64 {
        self.expansion_tol
    }

    /// `max |V'V - I|`, the orthonormality defect.
    pub fn orthonormality_defect(&self) -> f64 {
        let gram = self.basis.transpose() * &self.basis;
        let mut defect: f64 = 0.0;
        for a in 0..gram.nrows() {
            for b in 0..gram.ncols() {
                let want = if a == b { 1.0 } else { 0.0 };
                defect = defect.max((gram[(a, b)] - want).abs());
            }
        }
        defect
    }
}

/// Projected operators for the current basis.
#[derive(Debug, Clone)]
pub struct ReducedOperators {
    /// `J0 V`, rows x q.
    jv: DMatrix<f64>,
    /// `(J0 V)' R0`, length q.
    r_hat: DVector<f64>,
    /// `(J0 V)'(J0 V)`, q x q symmetric positive definite.
    gain: DMatrix<f64>,
    gain_chol: Cholesky<f64, Dyn>,
    /// Reduced Hessian: one `q_h x q_h` block per reduced output row.
    h_rows: Vec<DMatrix<f64>>,
    hessian_cap: usize,
    profiles_seen: usize,
}

impl ReducedOperators {
    pub fn q(&self) -> usize {
        self.jv.ncols()
    }

    pub fn jv(&self) -> &DMatrix<f64> {
        &self.jv
    }

    pub fn r_hat(&self) -> &DVector<f64> {
        &self.r_hat
    }

    pub fn gain(&self) -> &DMatrix<f64> {
        &self.gain
    }

    /// Dimension of the (possibly frozen) reduced Hessian.
    pub fn hessian_dim(&self) -> usize {
        self.h_rows.len()
    }

    pub fn hessian_rows(&self) -> &[DMatrix<f64>] {
        &self.h_rows
    }

    pub fn hessian_cap(&self) -> usize {
        self.hessian_cap
    }

    pub fn profiles_seen(&self) -> usize {
        self.profiles_seen
    }

    /// Counts one processed profile against the Hessian expansion budget.
    pub fn note_profile(&mut self) {
        self.profiles_seen += 1;
    }

    /// Whether the reduced Hessian still expands with the basis.
    pub fn hessian_active(&self) -> bool {
        self.profiles_seen < self.hessian_cap
    }

    /// Reduced residual `R_hat + G_hat d + quad(d) - r_hat_meas`.
    ///
    /// Quadratic contributions exist only on the rows and coordinates covered
    /// by the (possibly frozen) reduced Hessian.
    pub fn reduced_residual(&self, delta: &DVector<f64>, reduced_meas: &DVector<f64>) -> DVector<f64> {
        let mut r = &self.r_hat + &self.gain * delta;
        let qh = self.h_rows.len();
        if qh > 0 {
            let d = delta.rows(0, qh.min(delta.len())).into_owned();
            for (a, h) in self.h_rows.iter().enumerate() {
                r[a] += 0.5 * (d.transpose() * h * &d)[(0, 0)];
            }
        }
        r - reduced_meas
    }

    /// Rebuilds all operators from scratch for a given basis. Used to restore
    /// a checkpointed basis; the incremental path is the production update.
    pub fn assemble(
        qrm: &QuadraticResidualModel,
        basis: &DMatrix<f64>,
        hessian_dim: usize,
        hessian_cap: usize,
        profiles_seen: usize,
    ) -> Result<Self, RomError> {
        if basis.nrows() != qrm.state_dim() {
            return Err(RomError::DimensionMismatch {
                expected: qrm.state_dim(),
                got: basis.nrows(),
            });
        }
        let jv = qrm.jacobian() * basis;
        let r_hat = jv.transpose() * qrm.r_const();
        let gain = jv.transpose() * &jv;
        let gain_chol = gain.clone().cholesky().ok_or(RomError::DegenerateBasis)?;

        let qh = hessian_dim.min(basis.ncols());
        let mut h_rows = Vec::with_capacity(qh);
        if qh > 0 {
            let sub_basis = basis.columns(0, qh).into_owned();
            let hess = qrm.hessian();
            let projected: Vec<DMatrix<f64>> = (0..hess.rows())
                .map(|i| hess.row(i).project(&sub_basis))
                .collect();
            for a in 0..qh {
                let mut acc = DMatrix::zeros(qh, qh);
                for (i, pr) in projected.iter().enumerate() {
                    acc += pr * jv[(i, a)];
                }
                h_rows.push(acc);
            }
        }
        Ok(Self {
            jv,
            r_hat,
            gain,
            gain_chol,
            h_rows,
            hessian_cap,
            profiles_seen,
        })
    }
}

/// Seeds the subspace with the normalized bootstrap solution and assembles
/// the initial reduced operators.
pub fn init_subspace(
    qrm: &QuadraticResidualModel,
    expansion_tol: f64,
    hessian_cap: usize,
) -> Result<(Subspace, ReducedOperators), RomError> {
    let x0 = qrm.x_c0();
    let norm = x0.norm();
    if norm == 0.0 {
        return Err(RomError::ZeroInitialState);
    }
    let basis = DMatrix::from_column_slice(x0.len(), 1, x0.as_slice()) / norm;
    let ops = ReducedOperators::assemble(qrm, &basis, 1, hessian_cap, 0)?;
    Ok((
        Subspace {
            basis,
            expansion_tol,
        },
        ops,
    ))
}

/// Projects a weighted measurement vector into the reduced space:
/// `(J0 V)' r_w`. Cost is linear in rows x q.
pub fn reduce_profile(ops: &ReducedOperators, weighted_profile: &DVector<f64>) -> DVector<f64> {
    ops.jv.tr_mul(weighted_profile)
}

#[derive(Debug, Clone)]
pub struct RmseSolution {
    pub delta: DVector<f64>,
    pub converged: bool,
    pub iterations: usize,
}

/// Reduced Newton-like iteration `d <- d - G_hat^-1 r_hat(d)` from the
/// origin, converging on the reduced step norm.
pub fn rmse_solve(
    ops: &ReducedOperators,
    reduced_meas: &DVector<f64>,
    config: &RmseConfig,
) -> RmseSolution {
    let q = ops.q();
    let mut delta = DVector::zeros(q);
    for iter in 1..=config.max_iters {
        let r = ops.reduced_residual(&delta, reduced_meas);
        let step = ops.gain_chol.solve(&r);
        delta -= &step;
        let norm = step.amax();
        if !norm.is_finite() || delta.amax() > config.divergence_guard {
            return RmseSolution {
                delta,
                converged: false,
                iterations: iter,
            };
        }
        if norm < config.step_tol {
            return RmseSolution {
                delta,
                converged: true,
                iterations: iter,
            };
        }
    }
    RmseSolution {
        delta,
        converged: false,
        iterations: config.max_iters,
    }
}

/// Lifts reduced coordinates back to the full Cartesian state:
/// `x_c = x_c0 + V d`.
pub fn lift(subspace: &Subspace, x_c0: &DVector<f64>, delta: &DVector<f64>) -> CartesianState {
    CartesianState::from_vector(&(x_c0 + subspace.basis() * delta))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DseOutcome {
    /// Basis grew by one column.
    Expanded { new_q: usize },
    /// The solution was already captured by the basis.
    NoChange,
}

/// Dynamic subspace expansion: projects a converged full-order solution out
/// of the basis and, when the out-of-span component is significant, appends
/// it as a new orthonormal column while incrementally extending the reduced
/// operators.
pub fn dse_update(
    subspace: &mut Subspace,
    ops: &mut ReducedOperators,
    x_c: &CartesianState,
    qrm: &QuadraticResidualModel,
) -> Result<DseOutcome, RomError> {
    let x = x_c.as_vector();
    if x.len() != subspace.basis.nrows() {
        return Err(RomError::DimensionMismatch {
            expected: subspace.basis.nrows(),
            got: x.len(),
        });
    }
    let v = &x - &subspace.basis * (subspace.basis.transpose() * &x);
    let threshold = subspace.expansion_tol * x.norm();
    if v.norm() <= threshold {
        return Ok(DseOutcome::NoChange);
    }

    // re-orthogonalize the residual once more before normalizing; a second
    // projection pass keeps the defect at rounding level even for nearly
    // in-span directions
    let mut u = &v - &subspace.basis * (subspace.basis.transpose() * &v);
    let norm = u.norm();
    if norm <= f64::EPSILON * x.norm() {
        return Ok(DseOutcome::NoChange);
    }
    u /= norm;

    let old_q = subspace.q();
    let extend_hessian = ops.hessian_active() && ops.h_rows.len() == old_q;

    // incremental linear-operator extension
    let jv_new = qrm.jacobian() * &u;
    let r_new = jv_new.dot(qrm.r_const());
    let border = ops.jv.transpose() * &jv_new;
    let corner = jv_new.dot(&jv_new);

    let rows = ops.jv.nrows();
    let mut jv = DMatrix::zeros(rows, old_q + 1);
    jv.columns_mut(0, old_q).copy_from(&ops.jv);
    jv.column_mut(old_q).copy_from(&jv_new);

    let mut r_hat = DVector::zeros(old_q + 1);
    r_hat.rows_mut(0, old_q).copy_from(&ops.r_hat);
    r_hat[old_q] = r_new;

    let mut gain = DMatrix::zeros(old_q + 1, old_q + 1);
    gain.view_mut((0, 0), (old_q, old_q)).copy_from(&ops.gain);
    for a in 0..old_q {
        gain[(a, old_q)] = border[a];
        gain[(old_q, a)] = border[a];
    }
    gain[(old_q, old_q)] = corner;
    let gain_chol = gain.clone().cholesky().ok_or(RomError::DegenerateBasis)?;

    let mut new_basis = DMatrix::zeros(subspace.basis.nrows(), old_q + 1);
    new_basis.columns_mut(0, old_q).copy_from(&subspace.basis);
    new_basis.column_mut(old_q).copy_from(&u);

    if extend_hessian {
        // borders of the existing reduced rows and the entire new row
        let hess = qrm.hessian();
        let n_meas = hess.rows();
        let mut vt_hu = DMatrix::zeros(old_q, n_meas); // column i = V' H_i u
        let mut uhu = DVector::zeros(n_meas);
        for i in 0..n_meas {
            let t = hess.row(i).mul_vec(&u);
            vt_hu.column_mut(i).copy_from(&(subspace.basis.transpose() * &t));
            uhu[i] = u.dot(&t);
        }
        // border column for reduced row a: sum_i JV[i,a] * (V' H_i u)
        let borders = &vt_hu * &ops.jv; // old_q x old_q: column a
        let corners = ops.jv.transpose() * &uhu; // old_q

        for (a, h) in ops.h_rows.iter_mut().enumerate() {
            let mut grown = DMatrix::zeros(old_q + 1, old_q + 1);
            grown.view_mut((0, 0), (old_q, old_q)).copy_from(h);
            for b in 0..old_q {
                grown[(b, old_q)] = borders[(b, a)];
                grown[(old_q, b)] = borders[(b, a)];
            }
            grown[(old_q, old_q)] = corners[a];
            *h = grown;
        }

        // new reduced output row: sum_i jv_new[i] * (V+' H_i V+)
        let mut new_row = DMatrix::zeros(old_q + 1, old_q + 1);
        for i in 0..n_meas {
            let w = jv_new[i];
            if w != 0.0 {
                new_row += hess.row(i).project(&new_basis) * w;
            }
        }
        ops.h_rows.push(new_row);
    }

    subspace.basis = new_basis;
    ops.gain_chol = gain_chol;
    ops.jv = jv;
    ops.r_hat = r_hat;
    ops.gain = gain;

    // drift beyond rounding would invalidate the projected operators; rebuild
    // from scratch in that case
    if subspace.orthonormality_defect() > 1e-12 {
        let qh = ops.h_rows.len();
        *ops = ReducedOperators::assemble(
            qrm,
            &subspace.basis,
            qh,
            ops.hessian_cap,
            ops.profiles_seen,
        )?;
    }

    Ok(DseOutcome::Expanded {
        new_q: subspace.q(),
    })
}

/// Writes the basis as CSV (one row per state coordinate) for warm-starting
/// later runs.
pub fn save_basis(path: &Path, subspace: &Subspace) -> Result<(), RomError> {
    let mut w = csv::Writer::from_path(path)?;
    let b = subspace.basis();
    w.write_record((0..b.ncols()).map(|c| format!("v{c}")))?;
    for r in 0..b.nrows() {
        w.write_record((0..b.ncols()).map(|c| b[(r, c)].to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_basis(path: &Path, expansion_tol: f64) -> Result<Subspace, RomError> {
    let mut rd = csv::Reader::from_path(path)?;
    let cols = rd.headers()?.len();
    let mut values: Vec<f64> = Vec::new();
    let mut rows = 0;
    for rec in rd.records() {
        let rec = rec?;
        if rec.len() != cols {
            return Err(RomError::Format("ragged basis file".into()));
        }
        for s in rec.iter() {
            values.push(
                s.parse::<f64>()
                    .map_err(|e| RomError::Format(e.to_string()))?,
            );
        }
        rows += 1;
    }
    let basis = DMatrix::from_row_slice(rows, cols, &values);
    Subspace::from_basis(basis, expansion_tol)
}
