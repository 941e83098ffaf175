//! Single-phase network model: graph, incidence/admittance assembly, and
//! polar/Cartesian state coordinates.
//!
//! Quantities that include the substation bus are "full" (dimension `n` or
//! `m x n`); state vectors exclude the substation (`p = n - 1`). The slack
//! row/column is dropped at exactly one place, [`NetworkGraph::state_buses`],
//! so every module indexes states consistently.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::f64::consts::PI;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("malformed graph: {0}")]
    MalformedGraph(String),
    #[error("graph is not connected ({unreached} buses unreachable from the substation)")]
    Disconnected { unreached: usize },
    #[error("dimension mismatch: expected {expected} {what}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("degenerate state: zero voltage magnitude at state index {index}")]
    DegenerateState { index: usize },
    #[error("non-positive voltage magnitude at state index {index}")]
    NonPositiveMagnitude { index: usize },
    #[error("unknown bus id {0}")]
    UnknownBus(u32),
    #[error("network file: {0}")]
    Io(#[from] std::io::Error),
    #[error("network file: {0}")]
    Parse(#[from] serde_json::Error),
}

/// One directed line; the first endpoint is the sending end.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Edge {
    pub sending: usize,
    pub receiving: usize,
}

/// Connected single-phase network graph with one substation (slack) bus.
#[derive(Debug, Clone)]
pub struct NetworkGraph {
    bus_ids: Vec<u32>,
    edges: Vec<Edge>,
    substation: usize,
    slack_voltage: Complex64,
    /// Non-slack bus indices in ascending order; position = state index.
    state_buses: Vec<usize>,
    /// bus index -> state index (usize::MAX for the substation).
    state_of_bus: Vec<usize>,
}

impl NetworkGraph {
    pub fn new(
        bus_ids: Vec<u32>,
        edges: Vec<Edge>,
        substation_id: u32,
        slack_voltage: Complex64,
    ) -> Result<Self, GridError> {
        let n = bus_ids.len();
        if n < 2 {
            return Err(GridError::MalformedGraph(
                "network needs at least two buses".into(),
            ));
        }
        let mut seen = HashMap::new();
        for (i, id) in bus_ids.iter().enumerate() {
            if seen.insert(*id, i).is_some() {
                return Err(GridError::MalformedGraph(format!("duplicate bus id {id}")));
            }
        }
        let substation = *seen
            .get(&substation_id)
            .ok_or(GridError::UnknownBus(substation_id))?;
        for (k, e) in edges.iter().enumerate() {
            if e.sending >= n || e.receiving >= n {
                return Err(GridError::MalformedGraph(format!(
                    "edge {k} references a bus outside 0..{n}"
                )));
            }
            if e.sending == e.receiving {
                return Err(GridError::MalformedGraph(format!(
                    "edge {k} has identical endpoints"
                )));
            }
        }
        if slack_voltage.norm() == 0.0 {
            return Err(GridError::MalformedGraph("zero slack voltage".into()));
        }

        // connectivity from the substation over undirected edges
        let mut adj = vec![Vec::new(); n];
        for e in &edges {
            adj[e.sending].push(e.receiving);
            adj[e.receiving].push(e.sending);
        }
        let mut reached = vec![false; n];
        let mut stack = vec![substation];
        reached[substation] = true;
        while let Some(b) = stack.pop() {
            for &nb in &adj[b] {
                if !reached[nb] {
                    reached[nb] = true;
                    stack.push(nb);
                }
            }
        }
        let unreached = reached.iter().filter(|r| !**r).count();
        if unreached > 0 {
            return Err(GridError::Disconnected { unreached });
        }

        let state_buses: Vec<usize> = (0..n).filter(|&b| b != substation).collect();
        let mut state_of_bus = vec![usize::MAX; n];
        for (k, &b) in state_buses.iter().enumerate() {
            state_of_bus[b] = k;
        }
        Ok(Self {
            bus_ids,
            edges,
            substation,
            slack_voltage,
            state_buses,
            state_of_bus,
        })
    }

    pub fn bus_count(&self) -> usize {
        self.bus_ids.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// p = n - 1, the number of unknown complex voltages.
    pub fn state_dim(&self) -> usize {
        self.bus_count() - 1
    }

    pub fn substation(&self) -> usize {
        self.substation
    }

    pub fn slack_voltage(&self) -> Complex64 {
        self.slack_voltage
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn bus_ids(&self) -> &[u32] {
        &self.bus_ids
    }

    pub fn bus_index(&self, id: u32) -> Option<usize> {
        self.bus_ids.iter().position(|&b| b == id)
    }

    /// Non-slack bus indices in state order.
    pub fn state_buses(&self) -> &[usize] {
        &self.state_buses
    }

    /// State index of a bus, or `None` for the substation.
    pub fn state_index(&self, bus: usize) -> Option<usize> {
        let k = self.state_of_bus[bus];
        (k != usize::MAX).then_some(k)
    }
}

/// Signed incidence matrix and the sending-end selector.
///
/// Row `l` of the incidence has +1 at the sending bus and -1 at the receiving
/// bus of edge `l`; the selector is `(|E| + E) / 2`, one 1 per row at the
/// sending end.
pub fn build_incidence(graph: &NetworkGraph) -> (DMatrix<f64>, DMatrix<f64>) {
    let (m, n) = (graph.edge_count(), graph.bus_count());
    let mut incidence = DMatrix::zeros(m, n);
    let mut selector = DMatrix::zeros(m, n);
    for (l, e) in graph.edges().iter().enumerate() {
        incidence[(l, e.sending)] = 1.0;
        incidence[(l, e.receiving)] = -1.0;
        selector[(l, e.sending)] = 1.0;
    }
    (incidence, selector)
}

/// Network admittance data with the assembled bus admittance matrix.
#[derive(Debug, Clone)]
pub struct AdmittanceModel {
    graph: NetworkGraph,
    line_admittances: Vec<Complex64>,
    shunt_admittances: Vec<Complex64>,
    ybus: DMatrix<Complex64>,
}

impl AdmittanceModel {
    /// Assembles the bus admittance matrix from line and shunt admittances by
    /// stamping each line into its four incident entries (the sparse
    /// equivalent of the incidence triple product), then adding shunts on the
    /// diagonal.
    pub fn new(
        graph: NetworkGraph,
        line_admittances: Vec<Complex64>,
        shunt_admittances: Vec<Complex64>,
    ) -> Result<Self, GridError> {
        if line_admittances.len() != graph.edge_count() {
            return Err(GridError::DimensionMismatch {
                what: "line admittances",
                expected: graph.edge_count(),
                got: line_admittances.len(),
            });
        }
        if shunt_admittances.len() != graph.bus_count() {
            return Err(GridError::DimensionMismatch {
                what: "shunt admittances",
                expected: graph.bus_count(),
                got: shunt_admittances.len(),
            });
        }
        let n = graph.bus_count();
        let mut ybus = DMatrix::from_element(n, n, Complex64::ZERO);
        for (e, &y) in graph.edges().iter().zip(&line_admittances) {
            ybus[(e.sending, e.sending)] += y;
            ybus[(e.receiving, e.receiving)] += y;
            ybus[(e.sending, e.receiving)] -= y;
            ybus[(e.receiving, e.sending)] -= y;
        }
        for (b, &y) in shunt_admittances.iter().enumerate() {
            ybus[(b, b)] += y;
        }
        Ok(Self {
            graph,
            line_admittances,
            shunt_admittances,
            ybus,
        })
    }

    pub fn graph(&self) -> &NetworkGraph {
        &self.graph
    }

    pub fn ybus(&self) -> &DMatrix<Complex64> {
        &self.ybus
    }

    pub fn line_admittances(&self) -> &[Complex64] {
        &self.line_admittances
    }

    pub fn shunt_admittances(&self) -> &[Complex64] {
        &self.shunt_admittances
    }

    pub fn incidence(&self) -> DMatrix<f64> {
        build_incidence(&self.graph).0
    }

    pub fn sending_selector(&self) -> DMatrix<f64> {
        build_incidence(&self.graph).1
    }
}

/// Voltage state in polar coordinates at all non-slack buses.
#[derive(Debug, Clone, PartialEq)]
pub struct PolarState {
    magnitudes: DVector<f64>,
    angles: DVector<f64>,
}

impl PolarState {
    pub fn new(magnitudes: DVector<f64>, angles: DVector<f64>) -> Result<Self, GridError> {
        if magnitudes.len() != angles.len() {
            return Err(GridError::DimensionMismatch {
                what: "angles",
                expected: magnitudes.len(),
                got: angles.len(),
            });
        }
        if let Some(i) = magnitudes.iter().position(|&v| v <= 0.0) {
            return Err(GridError::NonPositiveMagnitude { index: i });
        }
        Ok(Self { magnitudes, angles })
    }

    /// Flat start: every bus at the slack voltage.
    pub fn flat(p: usize, slack_voltage: Complex64) -> Self {
        Self {
            magnitudes: DVector::from_element(p, slack_voltage.norm()),
            angles: DVector::from_element(p, slack_voltage.arg()),
        }
    }

    pub fn dim(&self) -> usize {
        self.magnitudes.len()
    }

    pub fn magnitudes(&self) -> &DVector<f64> {
        &self.magnitudes
    }

    pub fn angles(&self) -> &DVector<f64> {
        &self.angles
    }

    /// Stacked vector `[V; theta]`.
    pub fn as_vector(&self) -> DVector<f64> {
        let p = self.dim();
        let mut v = DVector::zeros(2 * p);
        v.rows_mut(0, p).copy_from(&self.magnitudes);
        v.rows_mut(p, p).copy_from(&self.angles);
        v
    }

    pub fn from_vector(x: &DVector<f64>) -> Result<Self, GridError> {
        let p = x.len() / 2;
        Self::new(x.rows(0, p).into_owned(), x.rows(p, p).into_owned())
    }

    pub fn to_cartesian(&self) -> CartesianState {
        let real = self.magnitudes.zip_map(&self.angles, |v, t| v * t.cos());
        let imag = self.magnitudes.zip_map(&self.angles, |v, t| v * t.sin());
        CartesianState { real, imag }
    }

    /// Complex voltage at state index `k`.
    pub fn phasor(&self, k: usize) -> Complex64 {
        Complex64::from_polar(self.magnitudes[k], self.angles[k])
    }
}

/// Voltage state in Cartesian coordinates, `x_c = [V_re; V_im]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CartesianState {
    real: DVector<f64>,
    imag: DVector<f64>,
}

impl CartesianState {
    pub fn new(real: DVector<f64>, imag: DVector<f64>) -> Result<Self, GridError> {
        if real.len() != imag.len() {
            return Err(GridError::DimensionMismatch {
                what: "imaginary parts",
                expected: real.len(),
                got: imag.len(),
            });
        }
        Ok(Self { real, imag })
    }

    pub fn dim(&self) -> usize {
        self.real.len()
    }

    pub fn real(&self) -> &DVector<f64> {
        &self.real
    }

    pub fn imag(&self) -> &DVector<f64> {
        &self.imag
    }

    pub fn as_vector(&self) -> DVector<f64> {
        let p = self.dim();
        let mut v = DVector::zeros(2 * p);
        v.rows_mut(0, p).copy_from(&self.real);
        v.rows_mut(p, p).copy_from(&self.imag);
        v
    }

    pub fn from_vector(x: &DVector<f64>) -> Self {
        let p = x.len() / 2;
        Self {
            real: x.rows(0, p).into_owned(),
            imag: x.rows(p, p).into_owned(),
        }
    }

    pub fn phasor(&self, k: usize) -> Complex64 {
        Complex64::new(self.real[k], self.imag[k])
    }

    /// Converts to polar with angles normalized into `(-pi, pi]`.
    pub fn to_polar(&self) -> Result<PolarState, GridError> {
        let p = self.dim();
        let mut mags = DVector::zeros(p);
        let mut angs = DVector::zeros(p);
        for k in 0..p {
            let (re, im) = (self.real[k], self.imag[k]);
            let v = re.hypot(im);
            if v == 0.0 {
                return Err(GridError::DegenerateState { index: k });
            }
            mags[k] = v;
            angs[k] = normalize_angle(im.atan2(re));
        }
        PolarState::new(mags, angs)
    }
}

/// Wraps an angle into `(-pi, pi]`.
pub fn normalize_angle(theta: f64) -> f64 {
    let mut t = theta % (2.0 * PI);
    if t <= -PI {
        t += 2.0 * PI;
    } else if t > PI {
        t -= 2.0 * PI;
    }
    t
}

// ---------------------------------------------------------------------------
// Network description file (JSON)
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
pub struct NetworkFile {
    pub buses: Vec<BusEntry>,
    pub lines: Vec<LineEntry>,
    pub slack: SlackEntry,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct BusEntry {
    pub id: u32,
    #[serde(default)]
    pub shunt_g: f64,
    #[serde(default)]
    pub shunt_b: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct LineEntry {
    pub from: u32,
    pub to: u32,
    pub g: f64,
    pub b: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SlackEntry {
    pub id: u32,
    pub v_re: f64,
    pub v_im: f64,
}

impl NetworkFile {
    pub fn load(path: &Path) -> Result<Self, GridError> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Builds the validated admittance model; all values are per-unit.
    pub fn into_model(self) -> Result<AdmittanceModel, GridError> {
        let bus_ids: Vec<u32> = self.buses.iter().map(|b| b.id).collect();
        let index: HashMap<u32, usize> =
            bus_ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();
        let mut edges = Vec::with_capacity(self.lines.len());
        let mut y_line = Vec::with_capacity(self.lines.len());
        for ln in &self.lines {
            let sending = *index.get(&ln.from).ok_or(GridError::UnknownBus(ln.from))?;
            let receiving = *index.get(&ln.to).ok_or(GridError::UnknownBus(ln.to))?;
            edges.push(Edge { sending, receiving });
            y_line.push(Complex64::new(ln.g, ln.b));
        }
        let y_shunt: Vec<Complex64> = self
            .buses
            .iter()
            .map(|b| Complex64::new(b.shunt_g, b.shunt_b))
            .collect();
        let slack_voltage = Complex64::new(self.slack.v_re, self.slack.v_im);
        let graph = NetworkGraph::new(bus_ids, edges, self.slack.id, slack_voltage)?;
        AdmittanceModel::new(graph, y_line, y_shunt)
    }
}

pub fn load_network(path: &Path) -> Result<AdmittanceModel, GridError> {
    NetworkFile::load(path)?.into_model()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn two_bus_graph() -> NetworkGraph {
        NetworkGraph::new(
            vec![1, 2],
            vec![Edge {
                sending: 0,
                receiving: 1,
            }],
            1,
            Complex64::new(1.0, 0.0),
        )
        .unwrap()
    }

    #[test]
    fn incidence_two_bus() {
        let (e, e1) = build_incidence(&two_bus_graph());
        assert_eq!(e, DMatrix::from_row_slice(1, 2, &[1.0, -1.0]));
        assert_eq!(e1, DMatrix::from_row_slice(1, 2, &[1.0, 0.0]));
    }

    #[test]
    fn incidence_three_bus_chain() {
        let g = NetworkGraph::new(
            vec![0, 1, 2],
            vec![
                Edge {
                    sending: 0,
                    receiving: 1,
                },
                Edge {
                    sending: 1,
                    receiving: 2,
                },
            ],
            0,
            Complex64::new(1.0, 0.0),
        )
        .unwrap();
        let (e, _) = build_incidence(&g);
        assert_eq!(
            e,
            DMatrix::from_row_slice(2, 3, &[1.0, -1.0, 0.0, 0.0, 1.0, -1.0])
        );
    }

    // Brute-force column-sum oracle over small enumerated graphs: each column
    // sums to out-degree minus in-degree, and every row sums to zero.
    #[test]
    fn incidence_column_sums() {
        let cases: Vec<Vec<(usize, usize)>> = vec![
            vec![(0, 1), (1, 2), (2, 0)],         // directed ring
            vec![(0, 1), (0, 2), (0, 3)],         // star
            vec![(0, 1), (1, 2), (2, 3), (1, 3)], // meshed
        ];
        for edges in cases {
            let n = edges.iter().flat_map(|&(a, b)| [a, b]).max().unwrap() + 1;
            let g = NetworkGraph::new(
                (0..n as u32).collect(),
                edges
                    .iter()
                    .map(|&(a, b)| Edge {
                        sending: a,
                        receiving: b,
                    })
                    .collect(),
                0,
                Complex64::new(1.0, 0.0),
            )
            .unwrap();
            let (e, e1) = build_incidence(&g);
            for b in 0..n {
                let out = edges.iter().filter(|&&(a, _)| a == b).count() as f64;
                let inn = edges.iter().filter(|&&(_, r)| r == b).count() as f64;
                assert_eq!(e.column(b).sum(), out - inn);
            }
            for l in 0..edges.len() {
                assert_eq!(e.row(l).sum(), 0.0);
                assert_eq!(e1.row(l).sum(), 1.0);
            }
            // selector identity E1 = (|E| + E)/2
            let abs_e = e.map(f64::abs);
            assert_eq!((abs_e + &e) * 0.5, e1);
        }
        // ring: every column sums to zero
        let g = NetworkGraph::new(
            vec![0, 1, 2],
            vec![
                Edge {
                    sending: 0,
                    receiving: 1,
                },
                Edge {
                    sending: 1,
                    receiving: 2,
                },
                Edge {
                    sending: 2,
                    receiving: 0,
                },
            ],
            0,
            Complex64::new(1.0, 0.0),
        )
        .unwrap();
        let (e, _) = build_incidence(&g);
        for b in 0..3 {
            assert_eq!(e.column(b).sum(), 0.0);
        }
    }

    #[test]
    fn duplicate_endpoints_rejected() {
        let err = NetworkGraph::new(
            vec![0, 1],
            vec![Edge {
                sending: 1,
                receiving: 1,
            }],
            0,
            Complex64::new(1.0, 0.0),
        )
        .unwrap_err();
        assert!(matches!(err, GridError::MalformedGraph(_)));
    }

    #[test]
    fn disconnected_rejected() {
        let err = NetworkGraph::new(
            vec![0, 1, 2],
            vec![Edge {
                sending: 0,
                receiving: 1,
            }],
            0,
            Complex64::new(1.0, 0.0),
        )
        .unwrap_err();
        assert!(matches!(err, GridError::Disconnected { unreached: 1 }));
    }

    #[test]
    fn ybus_two_bus_hand_expansion() {
        let y = Complex64::new(1.0, -10.0);
        let model = AdmittanceModel::new(
            two_bus_graph(),
            vec![y],
            vec![Complex64::ZERO, Complex64::ZERO],
        )
        .unwrap();
        let yb = model.ybus();
        assert_eq!(yb[(0, 0)], y);
        assert_eq!(yb[(1, 1)], y);
        assert_eq!(yb[(0, 1)], -y);
        assert_eq!(yb[(1, 0)], -y);
    }

    #[test]
    fn ybus_zero_lines_is_shunt_diagonal() {
        let g = two_bus_graph();
        let shunts = vec![Complex64::new(0.1, 0.5), Complex64::new(0.0, -0.3)];
        let model = AdmittanceModel::new(g, vec![Complex64::ZERO], shunts.clone()).unwrap();
        let yb = model.ybus();
        for i in 0..2 {
            for j in 0..2 {
                let want = if i == j { shunts[i] } else { Complex64::ZERO };
                assert_eq!(yb[(i, j)], want);
            }
        }
    }

    /// Dense triple-product oracle, accumulating over lines in index order and
    /// adding shunts last so the result is bit-identical to the stamped
    /// assembly.
    fn dense_ybus_oracle(model: &AdmittanceModel) -> DMatrix<Complex64> {
        let g = model.graph();
        let (e, _) = build_incidence(g);
        let n = g.bus_count();
        let mut yb = DMatrix::from_element(n, n, Complex64::ZERO);
        for l in 0..g.edge_count() {
            let y = model.line_admittances()[l];
            for a in 0..n {
                for b in 0..n {
                    let c = e[(l, a)] * e[(l, b)];
                    if c != 0.0 {
                        yb[(a, b)] += y * c;
                    }
                }
            }
        }
        for b in 0..n {
            yb[(b, b)] += model.shunt_admittances()[b];
        }
        yb
    }

    #[test]
    fn ybus_matches_dense_triple_product_exactly() {
        let g = NetworkGraph::new(
            vec![0, 1, 2],
            vec![
                Edge {
                    sending: 0,
                    receiving: 1,
                },
                Edge {
                    sending: 1,
                    receiving: 2,
                },
            ],
            0,
            Complex64::new(1.0, 0.0),
        )
        .unwrap();
        let model = AdmittanceModel::new(
            g,
            vec![Complex64::new(2.0, -8.0), Complex64::new(1.5, -6.0)],
            vec![
                Complex64::new(0.0, 0.01),
                Complex64::new(0.0, 0.02),
                Complex64::new(0.0, 0.03),
            ],
        )
        .unwrap();
        let oracle = dense_ybus_oracle(&model);
        assert_eq!(model.ybus(), &oracle);
    }

    #[test]
    fn ybus_dimension_mismatch() {
        let err = AdmittanceModel::new(two_bus_graph(), vec![], vec![Complex64::ZERO; 2])
            .unwrap_err();
        assert!(matches!(err, GridError::DimensionMismatch { .. }));
    }

    #[test]
    fn polar_to_cartesian_axis_cases() {
        let s = PolarState::new(DVector::from_vec(vec![1.0]), DVector::from_vec(vec![0.0]))
            .unwrap();
        let c = s.to_cartesian();
        assert_eq!(c.real()[0], 1.0);
        assert_eq!(c.imag()[0], 0.0);

        let s = PolarState::new(
            DVector::from_vec(vec![1.0]),
            DVector::from_vec(vec![std::f64::consts::FRAC_PI_2]),
        )
        .unwrap();
        let c = s.to_cartesian();
        assert!(c.real()[0].abs() <= 1e-15);
        assert_relative_eq!(c.imag()[0], 1.0);
    }

    #[test]
    fn cartesian_to_polar_axis_cases() {
        let c = CartesianState::new(DVector::from_vec(vec![1.0]), DVector::from_vec(vec![0.0]))
            .unwrap();
        let s = c.to_polar().unwrap();
        assert_eq!(s.magnitudes()[0], 1.0);
        assert_eq!(s.angles()[0], 0.0);

        let c = CartesianState::new(DVector::from_vec(vec![0.0]), DVector::from_vec(vec![-1.0]))
            .unwrap();
        let s = c.to_polar().unwrap();
        assert_relative_eq!(s.magnitudes()[0], 1.0);
        assert_relative_eq!(s.angles()[0], -std::f64::consts::FRAC_PI_2);
    }

    #[test]
    fn cartesian_to_polar_zero_magnitude_errors() {
        let c = CartesianState::new(DVector::from_vec(vec![0.0]), DVector::from_vec(vec![0.0]))
            .unwrap();
        assert!(matches!(
            c.to_polar(),
            Err(GridError::DegenerateState { index: 0 })
        ));
    }

    #[test]
    fn angle_normalization_range() {
        assert_eq!(normalize_angle(PI), PI);
        assert_eq!(normalize_angle(-PI), PI);
        assert_relative_eq!(normalize_angle(3.0 * PI / 2.0), -PI / 2.0, epsilon = 1e-15);
    }

    proptest! {
        // Round-trip oracle: polar -> cartesian -> polar within 1e-14 relative
        // for magnitudes in [0.5, 1.5].
        #[test]
        fn polar_cartesian_round_trip(
            v in proptest::collection::vec(0.5f64..1.5, 1..8),
            t in proptest::collection::vec(-PI * 0.999..PI, 1..8),
        ) {
            let p = v.len().min(t.len());
            let state = PolarState::new(
                DVector::from_vec(v[..p].to_vec()),
                DVector::from_vec(t[..p].to_vec()),
            ).unwrap();
            let back = state.to_cartesian().to_polar().unwrap();
            for k in 0..p {
                prop_assert!((back.magnitudes()[k] - state.magnitudes()[k]).abs()
                    <= 1e-14 * state.magnitudes()[k]);
                prop_assert!((back.angles()[k] - state.angles()[k]).abs() <= 1e-13);
            }
        }
    }

    #[test]
    fn network_file_round_trip() {
        let path = std::path::Path::new(concat!(
            env!("CARGO_MANIFEST_DIR"),
            "/data/feeder33.json"
        ));
        let model = load_network(path).unwrap();
        assert_eq!(model.graph().bus_count(), 33);
        assert_eq!(model.graph().edge_count(), 32);
        assert_eq!(model.graph().state_dim(), 32);
        assert_eq!(model.graph().substation(), 0);
        let yb = model.ybus();
        // reciprocal lines give a symmetric admittance matrix
        assert_eq!(yb, &yb.transpose());
        // radial feeder: ybus row sums are the shunts (zero here)
        for i in 0..33 {
            let s: Complex64 = (0..33).map(|j| yb[(i, j)]).sum();
            assert!(s.norm() < 1e-9 * yb[(i, i)].norm());
        }
    }
}
