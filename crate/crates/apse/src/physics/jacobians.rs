//! Measurement Jacobians in polar and Cartesian coordinates.
//!
//! Rows follow the crate-wide measurement order `[magnitudes; flows;
//! injections]` with (P, Q) device pairs adjacent. Polar columns are
//! `[d/dV, d/dtheta]`; Cartesian columns are `[d/dV_re, d/dV_im]`.
//!
//! The polar and Cartesian paths are derived and coded independently (polar
//! from the phasor product rule, Cartesian from the affine current/voltage
//! structure), so their chain-rule consistency is a meaningful cross-check
//! rather than a tautology.

use crate::grid::{AdmittanceModel, CartesianState, PolarState};
use crate::measurement::{CovarianceModel, MagnitudeForm, MeasurementSet};
use crate::physics::{full_voltage, full_voltage_cartesian};
use nalgebra::DMatrix;
use num_complex::Complex64;

/// Cartesian Jacobian split by measurement kind.
///
/// In the squared-magnitude form every entry is affine in the Cartesian
/// state, and each magnitude row has exactly two nonzeros.
#[derive(Debug, Clone)]
pub struct JacobianBlocks {
    pub mag: DMatrix<f64>,
    pub flow: DMatrix<f64>,
    pub inj: DMatrix<f64>,
}

impl JacobianBlocks {
    /// Rows stacked in measurement order.
    pub fn stacked(&self) -> DMatrix<f64> {
        let cols = self.mag.ncols().max(self.flow.ncols()).max(self.inj.ncols());
        let rows = self.mag.nrows() + self.flow.nrows() + self.inj.nrows();
        let mut out = DMatrix::zeros(rows, cols);
        out.rows_mut(0, self.mag.nrows()).copy_from(&self.mag);
        out.rows_mut(self.mag.nrows(), self.flow.nrows())
            .copy_from(&self.flow);
        out.rows_mut(self.mag.nrows() + self.flow.nrows(), self.inj.nrows())
            .copy_from(&self.inj);
        out
    }

    /// Stacked rows scaled by the inverse square-root covariance.
    pub fn weighted_stacked(&self, cov: &CovarianceModel) -> DMatrix<f64> {
        let mut j = self.stacked();
        scale_rows(&mut j, cov);
        j
    }
}

pub(crate) fn scale_rows(j: &mut DMatrix<f64>, cov: &CovarianceModel) {
    let w = cov.weight_sqrt();
    debug_assert_eq!(j.nrows(), w.len());
    for r in 0..j.nrows() {
        let s = w[r];
        for c in 0..j.ncols() {
            j[(r, c)] *= s;
        }
    }
}

/// Stacked polar Jacobian of the measured rows at `x`.
pub fn jacobian_polar(
    model: &AdmittanceModel,
    set: &MeasurementSet,
    x: &PolarState,
    form: MagnitudeForm,
) -> DMatrix<f64> {
    let graph = model.graph();
    let p = graph.state_dim();
    let u = full_voltage(graph, x);
    let currents = model.ybus() * &u;
    let mut j = DMatrix::zeros(set.rows(), 2 * p);

    // magnitude rows: selection (plain) or 2V selection (squared); d/dtheta = 0
    for (i, &b) in set.mag_buses().iter().enumerate() {
        let k = graph.state_index(b).expect("validated non-slack");
        j[(i, k)] = match form {
            MagnitudeForm::Plain => 1.0,
            MagnitudeForm::Squared => 2.0 * x.magnitudes()[k],
        };
    }

    // flow rows: f_l = u_a conj(y (u_a - u_b)), derivatives only at the endpoints
    let mut row = set.mag_rows();
    for &l in set.flow_lines() {
        let e = graph.edges()[l];
        let y = model.line_admittances()[l];
        let w = u[e.sending];
        let c = y * (u[e.sending] - u[e.receiving]);
        for (bus, sigma) in [(e.sending, 1.0), (e.receiving, -1.0)] {
            let Some(k) = graph.state_index(bus) else {
                continue;
            };
            let phase = Complex64::from_polar(1.0, x.angles()[k]);
            let send_term = if bus == e.sending {
                phase * c.conj()
            } else {
                Complex64::ZERO
            };
            let dv = send_term + w * y.conj() * sigma * phase.conj();
            let send_term_t = if bus == e.sending {
                Complex64::i() * w * c.conj()
            } else {
                Complex64::ZERO
            };
            let dt = send_term_t - Complex64::i() * w * y.conj() * sigma * u[bus].conj();
            j[(row, k)] = dv.re;
            j[(row, p + k)] = dt.re;
            j[(row + 1, k)] = dv.im;
            j[(row + 1, p + k)] = dt.im;
        }
        row += 2;
    }

    // injection rows: s_g = u_g conj(i_g), i = Y u
    for &g in set.inj_buses() {
        let kg = graph.state_index(g).expect("validated non-slack");
        let ug = u[g];
        let ig_conj = currents[g].conj();
        for (k, &h) in graph.state_buses().iter().enumerate() {
            let y_gh = model.ybus()[(g, h)];
            let diagonal = k == kg;
            if y_gh == Complex64::ZERO && !diagonal {
                continue;
            }
            let phase = Complex64::from_polar(1.0, x.angles()[k]);
            let mut dv = ug * y_gh.conj() * phase.conj();
            let mut dt = -Complex64::i() * ug * (y_gh * u[h]).conj();
            if diagonal {
                dv += phase * ig_conj;
                dt += Complex64::i() * ug * ig_conj;
            }
            j[(row, k)] = dv.re;
            j[(row, p + k)] = dt.re;
            j[(row + 1, k)] = dv.im;
            j[(row + 1, p + k)] = dt.im;
        }
        row += 2;
    }
    j
}

/// Cartesian Jacobian blocks of the measured rows at `xc`.
pub fn jacobian_cartesian(
    model: &AdmittanceModel,
    set: &MeasurementSet,
    xc: &CartesianState,
    form: MagnitudeForm,
) -> JacobianBlocks {
    let graph = model.graph();
    let p = graph.state_dim();
    let u = full_voltage_cartesian(graph, xc);
    let currents = model.ybus() * &u;

    let mut mag = DMatrix::zeros(set.mag_rows(), 2 * p);
    for (i, &b) in set.mag_buses().iter().enumerate() {
        let k = graph.state_index(b).expect("validated non-slack");
        let (re, im) = (xc.real()[k], xc.imag()[k]);
        match form {
            MagnitudeForm::Squared => {
                mag[(i, k)] = 2.0 * re;
                mag[(i, p + k)] = 2.0 * im;
            }
            MagnitudeForm::Plain => {
                let v = re.hypot(im);
                mag[(i, k)] = re / v;
                mag[(i, p + k)] = im / v;
            }
        }
    }

    let mut flow = DMatrix::zeros(set.flow_rows(), 2 * p);
    for (idx, &l) in set.flow_lines().iter().enumerate() {
        let e = graph.edges()[l];
        let y = model.line_admittances()[l];
        let w = u[e.sending];
        let c = y * (u[e.sending] - u[e.receiving]);
        let row = 2 * idx;
        for (bus, sigma) in [(e.sending, 1.0), (e.receiving, -1.0)] {
            let Some(k) = graph.state_index(bus) else {
                continue;
            };
            let send = if bus == e.sending {
                c.conj()
            } else {
                Complex64::ZERO
            };
            let dvr = send + w * y.conj() * sigma;
            let dvi = Complex64::i() * send - Complex64::i() * w * y.conj() * sigma;
            flow[(row, k)] = dvr.re;
            flow[(row, p + k)] = dvi.re;
            flow[(row + 1, k)] = dvr.im;
            flow[(row + 1, p + k)] = dvi.im;
        }
    }

    let mut inj = DMatrix::zeros(set.inj_rows(), 2 * p);
    for (idx, &g) in set.inj_buses().iter().enumerate() {
        let kg = graph.state_index(g).expect("validated non-slack");
        let ug = u[g];
        let ig_conj = currents[g].conj();
        let row = 2 * idx;
        for (k, &h) in graph.state_buses().iter().enumerate() {
            let y_gh = model.ybus()[(g, h)];
            let diagonal = k == kg;
            if y_gh == Complex64::ZERO && !diagonal {
                continue;
            }
            let mut dvr = ug * y_gh.conj();
            let mut dvi = -Complex64::i() * ug * y_gh.conj();
            if diagonal {
                dvr += ig_conj;
                dvi += Complex64::i() * ig_conj;
            }
            inj[(row, k)] = dvr.re;
            inj[(row, p + k)] = dvi.re;
            inj[(row + 1, k)] = dvr.im;
            inj[(row + 1, p + k)] = dvi.im;
        }
    }

    JacobianBlocks { mag, flow, inj }
}
