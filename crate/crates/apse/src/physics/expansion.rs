//! Exact weighted second-order expansion of the residual equations around a
//! Cartesian reference state.
//!
//! With squared magnitude rows, every residual function is a polynomial of
//! total degree two in the Cartesian state, so the expansion
//! `r(dx) = R0 + J0 dx + 0.5 H (dx kron dx) - r_meas` holds for every
//! deviation, not just small ones. The constant, Jacobian, and Hessian terms
//! are all pre-scaled by the inverse square-root covariance.

use crate::grid::{AdmittanceModel, CartesianState};
use crate::measurement::{
    CovarianceModel, MagnitudeForm, MeasurementError, MeasurementProfile, MeasurementSet,
};
use crate::physics::hessians::{hessian_tensors, HessianTensor};
use crate::physics::jacobians::jacobian_cartesian;
use crate::physics::{eval_flows_cartesian, eval_injections_cartesian};
use nalgebra::{DMatrix, DVector};

/// Weighted constants of the exact expansion: the residual value, Jacobian,
/// and per-row Hessians at the expansion point.
#[derive(Debug, Clone)]
pub struct QuadraticResidualModel {
    x_c0: DVector<f64>,
    r_const: DVector<f64>,
    jacobian: DMatrix<f64>,
    hessian: HessianTensor,
    weight_sqrt: DVector<f64>,
    mag_rows: usize,
}

impl QuadraticResidualModel {
    /// Assembles the expansion at `x_c0` under an already-adjusted covariance
    /// (magnitude rows squared, delta-method weights).
    pub fn build(
        model: &AdmittanceModel,
        set: &MeasurementSet,
        adjusted_cov: &CovarianceModel,
        x_c0: &CartesianState,
    ) -> Self {
        assert_eq!(adjusted_cov.rows(), set.rows(), "covariance row mismatch");
        let graph = model.graph();
        let p = graph.state_dim();
        assert_eq!(x_c0.dim(), p, "expansion point dimension mismatch");

        let w = adjusted_cov.weight_sqrt().clone();

        // unweighted constants: [M^2; F; S] in row order
        let mut r0 = DVector::zeros(set.rows());
        for (i, &b) in set.mag_buses().iter().enumerate() {
            let k = graph.state_index(b).expect("validated non-slack");
            r0[i] = x_c0.real()[k].powi(2) + x_c0.imag()[k].powi(2);
        }
        let flows = eval_flows_cartesian(model, x_c0, set.flow_lines())
            .expect("flow lines validated by the measurement set");
        let mut row = set.mag_rows();
        for k in 0..set.flow_lines().len() {
            r0[row] = flows[k].re;
            r0[row + 1] = flows[k].im;
            row += 2;
        }
        let injections = eval_injections_cartesian(model, x_c0);
        for &b in set.inj_buses() {
            let s = injections[graph.state_index(b).expect("validated non-slack")];
            r0[row] = s.re;
            r0[row + 1] = s.im;
            row += 2;
        }
        let r_const = r0.component_mul(&w);

        let jacobian =
            jacobian_cartesian(model, set, x_c0, MagnitudeForm::Squared).weighted_stacked(adjusted_cov);
        let hessian = hessian_tensors(model, set).scale_rows(&w);

        Self {
            x_c0: x_c0.as_vector(),
            r_const,
            jacobian,
            hessian,
            weight_sqrt: w,
            mag_rows: set.mag_rows(),
        }
    }

    /// Expansion point as a stacked `[V_re; V_im]` vector.
    pub fn x_c0(&self) -> &DVector<f64> {
        &self.x_c0
    }

    /// Weighted residual constant at the expansion point.
    pub fn r_const(&self) -> &DVector<f64> {
        &self.r_const
    }

    /// Weighted Cartesian Jacobian at the expansion point.
    pub fn jacobian(&self) -> &DMatrix<f64> {
        &self.jacobian
    }

    /// Weighted per-row Hessians.
    pub fn hessian(&self) -> &HessianTensor {
        &self.hessian
    }

    pub fn weight_sqrt(&self) -> &DVector<f64> {
        &self.weight_sqrt
    }

    pub fn rows(&self) -> usize {
        self.r_const.len()
    }

    pub fn state_dim(&self) -> usize {
        self.x_c0.len()
    }

    /// Squares the magnitude rows of a profile and applies the reference
    /// weights, producing the right-hand side the expansion subtracts.
    pub fn weighted_transformed_profile(
        &self,
        profile: &MeasurementProfile,
    ) -> Result<DVector<f64>, MeasurementError> {
        let mut v = profile.concat();
        for i in 0..self.mag_rows {
            let m = v[i];
            if m <= 0.0 {
                return Err(MeasurementError::NonPositiveMagnitude(i));
            }
            v[i] = m * m;
        }
        Ok(v.component_mul(&self.weight_sqrt))
    }

    /// Exact weighted residual at `x_c0 + delta` for a weighted transformed
    /// profile: `R0 + J0 delta + 0.5 H (delta kron delta) - r_meas`.
    pub fn residual(&self, delta: &DVector<f64>, weighted_profile: &DVector<f64>) -> DVector<f64> {
        let mut r = &self.r_const + &self.jacobian * delta;
        r += self.hessian.quad_action(delta);
        r -= weighted_profile;
        r
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measurement::squared_magnitude_transform;
    use crate::physics::test_fixtures::{perturbed_state, three_bus};
    use nalgebra::DVector;

    fn setup() -> (
        AdmittanceModel,
        MeasurementSet,
        CovarianceModel,
        QuadraticResidualModel,
        MeasurementProfile,
    ) {
        let model = three_bus();
        let g = model.graph();
        let buses: Vec<usize> = g.state_buses().to_vec();
        let lines: Vec<usize> = (0..g.edge_count()).collect();
        let set = MeasurementSet::new(g, buses.clone(), lines, buses).unwrap();
        let cov = CovarianceModel::from_sigmas(&set, 0.004, 0.01, 0.02).unwrap();

        // reference profile drawn from a nearby state
        let truth = perturbed_state(2, 100);
        let mag = crate::physics::eval_magnitudes(g, &truth, set.mag_buses()).unwrap();
        let flows = crate::physics::eval_flows(&model, &truth, set.flow_lines()).unwrap();
        let inj = crate::physics::eval_injections(&model, &truth);
        let mut fv = Vec::new();
        for f in flows.iter() {
            fv.push(f.re);
            fv.push(f.im);
        }
        let mut sv = Vec::new();
        for &b in set.inj_buses() {
            let s = inj[g.state_index(b).unwrap()];
            sv.push(s.re);
            sv.push(s.im);
        }
        let profile = MeasurementProfile::new(
            0,
            &set,
            mag,
            DVector::from_vec(fv),
            DVector::from_vec(sv),
        )
        .unwrap();
        let (_, adj_cov) = squared_magnitude_transform(&profile, &cov).unwrap();
        let x_c0 = perturbed_state(2, 101).to_cartesian();
        let qrm = QuadraticResidualModel::build(&model, &set, &adj_cov, &x_c0);
        (model, set, adj_cov, qrm, profile)
    }

    /// Direct weighted residual evaluated natively in Cartesian coordinates.
    fn direct_residual(
        model: &AdmittanceModel,
        set: &MeasurementSet,
        cov: &CovarianceModel,
        xc: &CartesianState,
        profile: &MeasurementProfile,
    ) -> DVector<f64> {
        let g = model.graph();
        let mut r = DVector::zeros(set.rows());
        for (i, &b) in set.mag_buses().iter().enumerate() {
            let k = g.state_index(b).unwrap();
            let m2 = xc.real()[k].powi(2) + xc.imag()[k].powi(2);
            r[i] = m2 - profile.mag()[i].powi(2);
        }
        let flows = eval_flows_cartesian(model, xc, set.flow_lines()).unwrap();
        let mut row = set.mag_rows();
        for k in 0..set.flow_lines().len() {
            r[row] = flows[k].re - profile.flow()[2 * k];
            r[row + 1] = flows[k].im - profile.flow()[2 * k + 1];
            row += 2;
        }
        let inj = eval_injections_cartesian(model, xc);
        for (k, &b) in set.inj_buses().iter().enumerate() {
            let s = inj[g.state_index(b).unwrap()];
            r[row] = s.re - profile.inj()[2 * k];
            r[row + 1] = s.im - profile.inj()[2 * k + 1];
            row += 2;
        }
        r.component_mul(cov.weight_sqrt())
    }

    #[test]
    fn zero_deviation_returns_constant_minus_profile() {
        let (_, _, _, qrm, profile) = setup();
        let wp = qrm.weighted_transformed_profile(&profile).unwrap();
        let r = qrm.residual(&DVector::zeros(4), &wp);
        let want = qrm.r_const() - &wp;
        assert_eq!(r, want);
    }

    #[test]
    fn expansion_is_exact_for_large_deviations() {
        let (model, set, cov, qrm, profile) = setup();
        let wp = qrm.weighted_transformed_profile(&profile).unwrap();
        // deterministic deviations with |dx|_inf = 0.5
        let deviations = [
            DVector::from_vec(vec![0.5, -0.5, 0.25, 0.5]),
            DVector::from_vec(vec![-0.31, 0.5, -0.5, 0.12]),
            DVector::from_vec(vec![0.04, -0.27, 0.5, -0.44]),
        ];
        for d in &deviations {
            let expansion = qrm.residual(d, &wp);
            let xc = CartesianState::from_vector(&(qrm.x_c0() + d));
            let direct = direct_residual(&model, &set, &cov, &xc, &profile);
            let scale = direct.amax().max(1.0);
            assert!(
                (expansion - direct).amax() <= 1e-10 * scale,
                "expansion diverges from direct evaluation"
            );
        }
    }

    // Polarization-style identity: r(2d) - r(0) - 2(r(d) - r(0)) isolates the
    // pure quadratic term, which must equal 2 * (0.5 d' H d) = d' H d.
    #[test]
    fn polarization_identity_isolates_quadratic() {
        let (_, _, _, qrm, profile) = setup();
        let wp = qrm.weighted_transformed_profile(&profile).unwrap();
        let d = DVector::from_vec(vec![0.2, -0.1, 0.3, -0.25]);
        let r0 = qrm.residual(&DVector::zeros(4), &wp);
        let r1 = qrm.residual(&d, &wp);
        let r2 = qrm.residual(&(2.0 * &d), &wp);
        let isolated = r2 - &r0 - 2.0 * (r1 - &r0);
        let quad = qrm.hessian().quad_action(&d) * 2.0;
        assert!((isolated - quad).amax() <= 1e-12);
    }
}
