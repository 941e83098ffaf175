//! Injection, flow, and magnitude functions with their polar/Cartesian
//! Jacobians, the constant Cartesian Hessians, and the exact weighted
//! quadratic residual expansion.
//!
//! Full complex voltage vectors (slack included) are formed internally; the
//! slack row/column is dropped once when restricting to state coordinates.
//! All evaluation functions are pure given immutable model inputs.

mod expansion;
mod hessians;
mod jacobians;

pub use expansion::QuadraticResidualModel;
pub use hessians::{hessian_tensors, HessianTensor, SparseSymmetric};
pub use jacobians::{jacobian_cartesian, jacobian_polar, JacobianBlocks};

use crate::grid::{AdmittanceModel, CartesianState, NetworkGraph, PolarState};
use nalgebra::DVector;
use num_complex::Complex64;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PhysicsError {
    #[error("line index {0} out of range")]
    LineOutOfRange(usize),
    #[error("bus {0} is the substation and carries no state")]
    SlackBus(usize),
    #[error("bus index {0} out of range")]
    BusOutOfRange(usize),
}

/// Full complex voltage vector (length n) from a polar state, slack inserted.
pub(crate) fn full_voltage(graph: &NetworkGraph, x: &PolarState) -> DVector<Complex64> {
    let mut u = DVector::from_element(graph.bus_count(), Complex64::ZERO);
    u[graph.substation()] = graph.slack_voltage();
    for (k, &b) in graph.state_buses().iter().enumerate() {
        u[b] = x.phasor(k);
    }
    u
}

/// Full complex voltage vector from a Cartesian state.
pub(crate) fn full_voltage_cartesian(
    graph: &NetworkGraph,
    xc: &CartesianState,
) -> DVector<Complex64> {
    let mut u = DVector::from_element(graph.bus_count(), Complex64::ZERO);
    u[graph.substation()] = graph.slack_voltage();
    for (k, &b) in graph.state_buses().iter().enumerate() {
        u[b] = xc.phasor(k);
    }
    u
}

/// Complex power injections at all non-slack buses (state order):
/// `s_k = u_k * conj((Y u)_k)`.
fn injections_from_voltage(model: &AdmittanceModel, u: &DVector<Complex64>) -> DVector<Complex64> {
    let graph = model.graph();
    let currents = model.ybus() * u;
    DVector::from_iterator(
        graph.state_dim(),
        graph
            .state_buses()
            .iter()
            .map(|&b| u[b] * currents[b].conj()),
    )
}

/// Sending-end complex power per requested line:
/// `f_l = u_send * conj(y_l (u_send - u_recv))`.
fn flows_from_voltage(
    model: &AdmittanceModel,
    u: &DVector<Complex64>,
    lines: &[usize],
) -> Result<DVector<Complex64>, PhysicsError> {
    let graph = model.graph();
    let mut out = DVector::from_element(lines.len(), Complex64::ZERO);
    for (k, &l) in lines.iter().enumerate() {
        if l >= graph.edge_count() {
            return Err(PhysicsError::LineOutOfRange(l));
        }
        let e = graph.edges()[l];
        let current = model.line_admittances()[l] * (u[e.sending] - u[e.receiving]);
        out[k] = u[e.sending] * current.conj();
    }
    Ok(out)
}

/// Complex line currents `y_l (u_send - u_recv)` for the requested lines.
pub fn eval_line_currents(
    model: &AdmittanceModel,
    x: &PolarState,
    lines: &[usize],
) -> Result<DVector<Complex64>, PhysicsError> {
    let graph = model.graph();
    let u = full_voltage(graph, x);
    let mut out = DVector::from_element(lines.len(), Complex64::ZERO);
    for (k, &l) in lines.iter().enumerate() {
        if l >= graph.edge_count() {
            return Err(PhysicsError::LineOutOfRange(l));
        }
        let e = graph.edges()[l];
        out[k] = model.line_admittances()[l] * (u[e.sending] - u[e.receiving]);
    }
    Ok(out)
}

/// Complex power injections at all non-slack buses, state order.
pub fn eval_injections(model: &AdmittanceModel, x: &PolarState) -> DVector<Complex64> {
    injections_from_voltage(model, &full_voltage(model.graph(), x))
}

pub fn eval_injections_cartesian(
    model: &AdmittanceModel,
    xc: &CartesianState,
) -> DVector<Complex64> {
    injections_from_voltage(model, &full_voltage_cartesian(model.graph(), xc))
}

/// Sending-end complex power on the measured lines.
pub fn eval_flows(
    model: &AdmittanceModel,
    x: &PolarState,
    lines: &[usize],
) -> Result<DVector<Complex64>, PhysicsError> {
    flows_from_voltage(model, &full_voltage(model.graph(), x), lines)
}

pub fn eval_flows_cartesian(
    model: &AdmittanceModel,
    xc: &CartesianState,
    lines: &[usize],
) -> Result<DVector<Complex64>, PhysicsError> {
    flows_from_voltage(model, &full_voltage_cartesian(model.graph(), xc), lines)
}

/// Voltage magnitudes at the measured buses (coordinate selection).
pub fn eval_magnitudes(
    graph: &NetworkGraph,
    x: &PolarState,
    buses: &[usize],
) -> Result<DVector<f64>, PhysicsError> {
    let mut out = DVector::zeros(buses.len());
    for (i, &b) in buses.iter().enumerate() {
        if b >= graph.bus_count() {
            return Err(PhysicsError::BusOutOfRange(b));
        }
        let k = graph.state_index(b).ok_or(PhysicsError::SlackBus(b))?;
        out[i] = x.magnitudes()[k];
    }
    Ok(out)
}


#[cfg(test)]
mod tests {
    use super::test_fixtures::*;
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::DVector;

    #[test]
    fn flat_state_no_shunts_zero_injection() {
        let model = two_bus();
        let x = PolarState::flat(1, model.graph().slack_voltage());
        let s = eval_injections(&model, &x);
        assert!(s[0].norm() < 1e-15);
    }

    #[test]
    fn two_bus_injection_hand_arithmetic() {
        // V1 = 1<0 (slack), V2 = 0.98<-0.02, y = 1 - 10j; scalar complex oracle.
        let model = two_bus();
        let x = PolarState::new(
            DVector::from_vec(vec![0.98]),
            DVector::from_vec(vec![-0.02]),
        )
        .unwrap();
        let s = eval_injections(&model, &x);
        assert_relative_eq!(s[0].re, -0.2153909401279104, max_relative = 1e-13);
        assert_relative_eq!(s[0].im, -0.1744413719729968, max_relative = 1e-13);
    }

    // Naive per-bus double-loop oracle: s_i = u_i * conj(sum_k Y_ik u_k).
    #[test]
    fn injections_match_double_loop_oracle() {
        let model = three_bus();
        let x = perturbed_state(2, 42);
        let s = eval_injections(&model, &x);
        let u = full_voltage(model.graph(), &x);
        let yb = model.ybus();
        for (k, &b) in model.graph().state_buses().iter().enumerate() {
            let mut i = Complex64::ZERO;
            for j in 0..3 {
                i += yb[(b, j)] * u[j];
            }
            let want = u[b] * i.conj();
            assert_relative_eq!(s[k].re, want.re, max_relative = 1e-14);
            assert_relative_eq!(s[k].im, want.im, max_relative = 1e-14);
        }
    }

    #[test]
    fn open_line_has_zero_flow() {
        let g = NetworkGraph::new(
            vec![1, 2],
            vec![crate::grid::Edge {
                sending: 0,
                receiving: 1,
            }],
            1,
            Complex64::new(1.0, 0.0),
        )
        .unwrap();
        let model = AdmittanceModel::new(g, vec![Complex64::ZERO], vec![Complex64::ZERO; 2])
            .unwrap();
        let x = perturbed_state(1, 7);
        let f = eval_flows(&model, &x, &[0]).unwrap();
        assert_eq!(f[0], Complex64::ZERO);
    }

    #[test]
    fn leaf_bus_flow_equals_injection() {
        // Line oriented 2 -> 1 so the sending end is the non-slack leaf: with
        // no shunt there, the power leaving bus 2 equals its injection.
        let g = NetworkGraph::new(
            vec![1, 2],
            vec![crate::grid::Edge {
                sending: 1,
                receiving: 0,
            }],
            1,
            Complex64::new(1.0, 0.0),
        )
        .unwrap();
        let model = AdmittanceModel::new(
            g,
            vec![Complex64::new(1.0, -10.0)],
            vec![Complex64::ZERO; 2],
        )
        .unwrap();
        let x = PolarState::new(
            DVector::from_vec(vec![0.98]),
            DVector::from_vec(vec![-0.02]),
        )
        .unwrap();
        let f = eval_flows(&model, &x, &[0]).unwrap();
        let s = eval_injections(&model, &x);
        assert_relative_eq!(f[0].re, s[0].re, max_relative = 1e-13);
        assert_relative_eq!(f[0].im, s[0].im, max_relative = 1e-13);
    }

    // Power-balance oracle on the radial chain: sending flow minus the sum of
    // downstream injections equals the series loss, which is non-negative for
    // resistive lines.
    #[test]
    fn radial_losses_nonnegative() {
        let g = NetworkGraph::new(
            vec![1, 2, 3],
            vec![
                crate::grid::Edge {
                    sending: 0,
                    receiving: 1,
                },
                crate::grid::Edge {
                    sending: 1,
                    receiving: 2,
                },
            ],
            1,
            Complex64::new(1.0, 0.0),
        )
        .unwrap();
        let model = AdmittanceModel::new(
            g,
            vec![Complex64::new(2.0, -8.0), Complex64::new(1.0, -5.0)],
            vec![Complex64::ZERO; 3],
        )
        .unwrap();
        let x = PolarState::new(
            DVector::from_vec(vec![0.97, 0.955]),
            DVector::from_vec(vec![-0.02, -0.035]),
        )
        .unwrap();
        let f = eval_flows(&model, &x, &[0, 1]).unwrap();
        let s = eval_injections(&model, &x);
        // leaf line: with no shunts the leaf injection is the power the leaf
        // sends back into the line, so sending flow + leaf injection = series loss
        let loss_line1 = f[1].re + s[1].re;
        assert!(loss_line1 >= -1e-12, "loss {loss_line1} negative");
        // head line: the middle bus splits its injection between both lines
        let flow_mid_to_slack = s[0].re - f[1].re;
        let loss_line0 = f[0].re + flow_mid_to_slack;
        assert!(loss_line0 >= -1e-12, "loss {loss_line0} negative");
    }

    #[test]
    fn magnitudes_select_coordinates() {
        let model = three_bus();
        let x = perturbed_state(2, 3);
        let all = eval_magnitudes(model.graph(), &x, &[1, 2]).unwrap();
        assert_eq!(all[0], x.magnitudes()[0]);
        assert_eq!(all[1], x.magnitudes()[1]);
        let single = eval_magnitudes(model.graph(), &x, &[2]).unwrap();
        assert_eq!(single[0], x.magnitudes()[1]);
    }

    #[test]
    fn magnitudes_reject_slack() {
        let model = three_bus();
        let x = perturbed_state(2, 3);
        assert!(matches!(
            eval_magnitudes(model.graph(), &x, &[0]),
            Err(PhysicsError::SlackBus(0))
        ));
    }

    #[test]
    fn flow_unknown_line_rejected() {
        let model = two_bus();
        let x = perturbed_state(1, 5);
        assert!(matches!(
            eval_flows(&model, &x, &[3]),
            Err(PhysicsError::LineOutOfRange(3))
        ));
    }

    #[test]
    fn cartesian_and_polar_evaluation_agree() {
        let model = three_bus();
        let x = perturbed_state(2, 11);
        let xc = x.to_cartesian();
        let sp = eval_injections(&model, &x);
        let sc = eval_injections_cartesian(&model, &xc);
        for k in 0..2 {
            assert_relative_eq!(sp[k].re, sc[k].re, max_relative = 1e-13);
            assert_relative_eq!(sp[k].im, sc[k].im, max_relative = 1e-13);
        }
    }
}
