//! Measurement device sets, covariance model, measurement profiles, and the
//! squared-magnitude residual transform.
//!
//! Row ordering is fixed crate-wide as `[magnitudes; flows; injections]`,
//! with the active/reactive components of each flow or injection device in
//! adjacent rows (P then Q). Flow devices sit at the sending end of their
//! line by construction; a receiving-end placement is not representable.

use crate::grid::{AdmittanceModel, NetworkGraph, PolarState};
use crate::physics;
use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MeasurementError {
    #[error("bus index {0} out of range")]
    BusOutOfRange(usize),
    #[error("line index {0} out of range")]
    LineOutOfRange(usize),
    #[error("{kind} device duplicated at index {index}")]
    DuplicateDevice { kind: &'static str, index: usize },
    #[error("substation bus {0} cannot carry a {1} measurement")]
    SubstationDevice(usize, &'static str),
    #[error("non-positive variance at row {0}")]
    NonPositiveVariance(usize),
    #[error("non-positive magnitude measurement at row {0}")]
    NonPositiveMagnitude(usize),
    #[error("profile has {got} {what} values, expected {expected}")]
    ProfileShape {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("profiles file: {0}")]
    Io(#[from] std::io::Error),
    #[error("profiles file: {0}")]
    Csv(#[from] csv::Error),
    #[error("profiles file: {0}")]
    Format(String),
    #[error("measurement layout file: {0}")]
    Parse(#[from] serde_json::Error),
    #[error(transparent)]
    Physics(#[from] crate::physics::PhysicsError),
}

/// How magnitude measurements enter the residual: as measured volts, or as
/// squared volts with delta-method-adjusted weights (the form under which
/// the residual equations are exactly quadratic in Cartesian coordinates).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MagnitudeForm {
    Plain,
    Squared,
}

/// Which buses and lines carry measurement devices.
///
/// `mag_buses`, `inj_buses` hold internal bus indices (substation excluded);
/// `flow_lines` holds edge indices. Each flow/injection device contributes an
/// adjacent (P, Q) row pair.
#[derive(Debug, Clone)]
pub struct MeasurementSet {
    mag_buses: Vec<usize>,
    flow_lines: Vec<usize>,
    inj_buses: Vec<usize>,
}

impl MeasurementSet {
    pub fn new(
        graph: &NetworkGraph,
        mag_buses: Vec<usize>,
        flow_lines: Vec<usize>,
        inj_buses: Vec<usize>,
    ) -> Result<Self, MeasurementError> {
        let n = graph.bus_count();
        let mut seen = HashSet::new();
        for &b in &mag_buses {
            if b >= n {
                return Err(MeasurementError::BusOutOfRange(b));
            }
            if b == graph.substation() {
                return Err(MeasurementError::SubstationDevice(b, "magnitude"));
            }
            if !seen.insert(b) {
                return Err(MeasurementError::DuplicateDevice {
                    kind: "magnitude",
                    index: b,
                });
            }
        }
        seen.clear();
        for &l in &flow_lines {
            if l >= graph.edge_count() {
                return Err(MeasurementError::LineOutOfRange(l));
            }
            if !seen.insert(l) {
                return Err(MeasurementError::DuplicateDevice {
                    kind: "flow",
                    index: l,
                });
            }
        }
        seen.clear();
        for &b in &inj_buses {
            if b >= n {
                return Err(MeasurementError::BusOutOfRange(b));
            }
            if b == graph.substation() {
                return Err(MeasurementError::SubstationDevice(b, "injection"));
            }
            if !seen.insert(b) {
                return Err(MeasurementError::DuplicateDevice {
                    kind: "injection",
                    index: b,
                });
            }
        }
        Ok(Self {
            mag_buses,
            flow_lines,
            inj_buses,
        })
    }

    pub fn mag_buses(&self) -> &[usize] {
        &self.mag_buses
    }

    pub fn flow_lines(&self) -> &[usize] {
        &self.flow_lines
    }

    pub fn inj_buses(&self) -> &[usize] {
        &self.inj_buses
    }

    pub fn mag_rows(&self) -> usize {
        self.mag_buses.len()
    }

    pub fn flow_rows(&self) -> usize {
        2 * self.flow_lines.len()
    }

    pub fn inj_rows(&self) -> usize {
        2 * self.inj_buses.len()
    }

    pub fn rows(&self) -> usize {
        self.mag_rows() + self.flow_rows() + self.inj_rows()
    }

    /// Stable per-row device labels, used as CSV headers.
    pub fn row_labels(&self, graph: &NetworkGraph) -> Vec<String> {
        let ids = graph.bus_ids();
        let mut labels = Vec::with_capacity(self.rows());
        for &b in &self.mag_buses {
            labels.push(format!("vm_{}", ids[b]));
        }
        for &l in &self.flow_lines {
            let e = graph.edges()[l];
            labels.push(format!("pf_{}_{}", ids[e.sending], ids[e.receiving]));
            labels.push(format!("qf_{}_{}", ids[e.sending], ids[e.receiving]));
        }
        for &b in &self.inj_buses {
            labels.push(format!("pi_{}", ids[b]));
            labels.push(format!("qi_{}", ids[b]));
        }
        labels
    }
}

/// Redundancy diagnostics: the device rows must exceed the state dimension.
#[derive(Debug, Clone, Copy)]
pub struct RedundancyReport {
    pub rows: usize,
    pub state_dim: usize,
    pub satisfied: bool,
    /// rows - 2p; non-positive means the WLS problem is underdetermined.
    pub margin: i64,
}

/// True iff the total row count exceeds twice the complex state count.
pub fn validate_redundancy(set: &MeasurementSet, p: usize) -> RedundancyReport {
    let rows = set.rows();
    RedundancyReport {
        rows,
        state_dim: 2 * p,
        satisfied: rows > 2 * p,
        margin: rows as i64 - 2 * p as i64,
    }
}

/// Diagonal measurement covariance with the cached inverse square root.
#[derive(Debug, Clone)]
pub struct CovarianceModel {
    variances: DVector<f64>,
    weight_sqrt: DVector<f64>,
}

impl CovarianceModel {
    pub fn new(variances: DVector<f64>) -> Result<Self, MeasurementError> {
        if let Some(i) = variances.iter().position(|&v| v <= 0.0) {
            return Err(MeasurementError::NonPositiveVariance(i));
        }
        let weight_sqrt = variances.map(|v| 1.0 / v.sqrt());
        Ok(Self {
            variances,
            weight_sqrt,
        })
    }

    /// Builds row-ordered variances from per-kind standard deviations.
    pub fn from_sigmas(
        set: &MeasurementSet,
        sigma_mag: f64,
        sigma_flow: f64,
        sigma_inj: f64,
    ) -> Result<Self, MeasurementError> {
        let mut v = Vec::with_capacity(set.rows());
        v.extend(std::iter::repeat_n(sigma_mag * sigma_mag, set.mag_rows()));
        v.extend(std::iter::repeat_n(sigma_flow * sigma_flow, set.flow_rows()));
        v.extend(std::iter::repeat_n(sigma_inj * sigma_inj, set.inj_rows()));
        Self::new(DVector::from_vec(v))
    }

    pub fn variances(&self) -> &DVector<f64> {
        &self.variances
    }

    /// Diagonal of the inverse square-root covariance.
    pub fn weight_sqrt(&self) -> &DVector<f64> {
        &self.weight_sqrt
    }

    pub fn rows(&self) -> usize {
        self.variances.len()
    }
}

/// One sampled measurement vector in `[magnitudes; flows; injections]` order.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementProfile {
    pub profile_id: u64,
    mag: DVector<f64>,
    flow: DVector<f64>,
    inj: DVector<f64>,
}

impl MeasurementProfile {
    pub fn new(
        profile_id: u64,
        set: &MeasurementSet,
        mag: DVector<f64>,
        flow: DVector<f64>,
        inj: DVector<f64>,
    ) -> Result<Self, MeasurementError> {
        if mag.len() != set.mag_rows() {
            return Err(MeasurementError::ProfileShape {
                what: "magnitude",
                expected: set.mag_rows(),
                got: mag.len(),
            });
        }
        if flow.len() != set.flow_rows() {
            return Err(MeasurementError::ProfileShape {
                what: "flow",
                expected: set.flow_rows(),
                got: flow.len(),
            });
        }
        if inj.len() != set.inj_rows() {
            return Err(MeasurementError::ProfileShape {
                what: "injection",
                expected: set.inj_rows(),
                got: inj.len(),
            });
        }
        Ok(Self {
            profile_id,
            mag,
            flow,
            inj,
        })
    }

    pub fn mag(&self) -> &DVector<f64> {
        &self.mag
    }

    pub fn flow(&self) -> &DVector<f64> {
        &self.flow
    }

    pub fn inj(&self) -> &DVector<f64> {
        &self.inj
    }

    /// Concatenated measurement vector in row order.
    pub fn concat(&self) -> DVector<f64> {
        let mut v = DVector::zeros(self.mag.len() + self.flow.len() + self.inj.len());
        v.rows_mut(0, self.mag.len()).copy_from(&self.mag);
        v.rows_mut(self.mag.len(), self.flow.len())
            .copy_from(&self.flow);
        v.rows_mut(self.mag.len() + self.flow.len(), self.inj.len())
            .copy_from(&self.inj);
        v
    }

    pub fn rows(&self) -> usize {
        self.mag.len() + self.flow.len() + self.inj.len()
    }
}

/// Residual `r(x) = [M(x) - m; F(x) - f; S(x) - s]` over the measured rows.
///
/// With [`MagnitudeForm::Squared`], magnitude rows become
/// `M(x)^2 - m^2` (the form whose Cartesian expansion is exact).
pub fn assemble_residual(
    x: &PolarState,
    profile: &MeasurementProfile,
    set: &MeasurementSet,
    model: &AdmittanceModel,
    form: MagnitudeForm,
) -> Result<DVector<f64>, MeasurementError> {
    let graph = model.graph();
    let mags = physics::eval_magnitudes(graph, x, set.mag_buses())?;
    let flows = physics::eval_flows(model, x, set.flow_lines())?;
    let injections = physics::eval_injections(model, x);

    let mut r = DVector::zeros(set.rows());
    for (i, _) in set.mag_buses().iter().enumerate() {
        r[i] = match form {
            MagnitudeForm::Plain => mags[i] - profile.mag()[i],
            MagnitudeForm::Squared => mags[i] * mags[i] - profile.mag()[i] * profile.mag()[i],
        };
    }
    let base = set.mag_rows();
    for (k, _) in set.flow_lines().iter().enumerate() {
        r[base + 2 * k] = flows[k].re - profile.flow()[2 * k];
        r[base + 2 * k + 1] = flows[k].im - profile.flow()[2 * k + 1];
    }
    let base = set.mag_rows() + set.flow_rows();
    for (k, &b) in set.inj_buses().iter().enumerate() {
        let s = injections[graph.state_index(b).expect("validated non-slack")];
        r[base + 2 * k] = s.re - profile.inj()[2 * k];
        r[base + 2 * k + 1] = s.im - profile.inj()[2 * k + 1];
    }
    Ok(r)
}

/// Squares the magnitude measurement rows and compensates the associated
/// variances to first order: `var(V^2) ~ (2 V)^2 var(V)`.
///
/// Flow and injection rows pass through unchanged. The adjusted variances
/// depend on the profile's own magnitude readings, so the transform is
/// recomputed per profile wherever a standalone squared-form problem is
/// solved; pipelines that recycle weighted operators fix the adjusted
/// covariance once at a reference profile.
pub fn squared_magnitude_transform(
    profile: &MeasurementProfile,
    covariance: &CovarianceModel,
) -> Result<(MeasurementProfile, CovarianceModel), MeasurementError> {
    let mut mag = profile.mag().clone();
    let mut variances = covariance.variances().clone();
    for i in 0..mag.len() {
        let m = mag[i];
        if m <= 0.0 {
            return Err(MeasurementError::NonPositiveMagnitude(i));
        }
        mag[i] = m * m;
        variances[i] *= (2.0 * m) * (2.0 * m);
    }
    let transformed = MeasurementProfile {
        profile_id: profile.profile_id,
        mag,
        flow: profile.flow().clone(),
        inj: profile.inj().clone(),
    };
    Ok((transformed, CovarianceModel::new(variances)?))
}

// ---------------------------------------------------------------------------
// Measurement layout file (JSON) and profile CSV round-trip
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
pub struct LayoutFile {
    /// Bus ids (file ids, not internal indices).
    pub mag_buses: Vec<u32>,
    /// Edge indices into the network file's line list.
    pub flow_lines: Vec<usize>,
    pub inj_buses: Vec<u32>,
    pub sigmas: LayoutSigmas,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct LayoutSigmas {
    pub mag: f64,
    pub flow: f64,
    pub inj: f64,
}

impl LayoutFile {
    pub fn load(path: &Path) -> Result<Self, MeasurementError> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn into_set(
        self,
        graph: &NetworkGraph,
    ) -> Result<(MeasurementSet, CovarianceModel), MeasurementError> {
        let resolve = |ids: &[u32]| -> Result<Vec<usize>, MeasurementError> {
            ids.iter()
                .map(|&id| {
                    graph
                        .bus_index(id)
                        .ok_or(MeasurementError::Format(format!("unknown bus id {id}")))
                })
                .collect()
        };
        let set = MeasurementSet::new(
            graph,
            resolve(&self.mag_buses)?,
            self.flow_lines,
            resolve(&self.inj_buses)?,
        )?;
        let cov =
            CovarianceModel::from_sigmas(&set, self.sigmas.mag, self.sigmas.flow, self.sigmas.inj)?;
        Ok((set, cov))
    }
}

pub fn load_layout(
    path: &Path,
    graph: &NetworkGraph,
) -> Result<(MeasurementSet, CovarianceModel), MeasurementError> {
    LayoutFile::load(path)?.into_set(graph)
}

/// Writes profiles as CSV: `profile_id` then one column per device row.
pub fn write_profiles_csv(
    path: &Path,
    set: &MeasurementSet,
    graph: &NetworkGraph,
    profiles: &[MeasurementProfile],
) -> Result<(), MeasurementError> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["profile_id".to_string()];
    header.extend(set.row_labels(graph));
    w.write_record(&header)?;
    for p in profiles {
        let mut rec = vec![p.profile_id.to_string()];
        rec.extend(p.concat().iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_profiles_csv(
    path: &Path,
    set: &MeasurementSet,
    graph: &NetworkGraph,
) -> Result<Vec<MeasurementProfile>, MeasurementError> {
    let mut r = csv::Reader::from_path(path)?;
    let expected_header: Vec<String> = std::iter::once("profile_id".to_string())
        .chain(set.row_labels(graph))
        .collect();
    let header: Vec<String> = r.headers()?.iter().map(|s| s.to_string()).collect();
    if header != expected_header {
        return Err(MeasurementError::Format(format!(
            "profile header does not match the measurement layout (expected {} columns)",
            expected_header.len()
        )));
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let id: u64 = rec
            .get(0)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| MeasurementError::Format("bad profile_id".into()))?;
        let values: Result<Vec<f64>, _> = rec.iter().skip(1).map(|s| s.parse::<f64>()).collect();
        let values = values.map_err(|e| MeasurementError::Format(e.to_string()))?;
        if values.len() != set.rows() {
            return Err(MeasurementError::ProfileShape {
                what: "csv row",
                expected: set.rows(),
                got: values.len(),
            });
        }
        let mag = DVector::from_vec(values[..set.mag_rows()].to_vec());
        let flow = DVector::from_vec(
            values[set.mag_rows()..set.mag_rows() + set.flow_rows()].to_vec(),
        );
        let inj = DVector::from_vec(values[set.mag_rows() + set.flow_rows()..].to_vec());
        out.push(MeasurementProfile::new(id, set, mag, flow, inj)?);
    }
    Ok(out)
}
