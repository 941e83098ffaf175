//! Constant per-row Hessians of the squared-magnitude, flow, and injection
//! residual functions in Cartesian coordinates.
//!
//! Each measurement row `i` owns a sparse symmetric matrix `H_i` such that
//! the quadratic term of the exact residual expansion is `0.5 * dx' H_i dx`.
//! The full Hessian stack is never materialized as a `rows x (2p)^2` matrix;
//! both the quadratic action and the reduced projection are computed row-wise
//! from the sparse entries.

use crate::grid::AdmittanceModel;
use crate::measurement::MeasurementSet;
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

/// Sparse symmetric matrix stored as upper-triangle `(row, col, value)`
/// entries with `row <= col`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseSymmetric {
    dim: usize,
    entries: Vec<(u32, u32, f64)>,
}

impl SparseSymmetric {
    pub fn new(dim: usize, mut entries: Vec<(u32, u32, f64)>) -> Self {
        for e in &mut entries {
            if e.0 > e.1 {
                std::mem::swap(&mut e.0, &mut e.1);
            }
        }
        entries.retain(|e| e.2 != 0.0);
        entries.sort_unstable_by_key(|e| (e.0, e.1));
        Self { dim, entries }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    /// `v' H v`.
    pub fn quad_form(&self, v: &DVector<f64>) -> f64 {
        let mut acc = 0.0;
        for &(j, k, h) in &self.entries {
            let (j, k) = (j as usize, k as usize);
            if j == k {
                acc += h * v[j] * v[j];
            } else {
                acc += 2.0 * h * v[j] * v[k];
            }
        }
        acc
    }

    /// `u' H v`, bitwise symmetric in its arguments (products are grouped so
    /// swapping `u` and `v` evaluates the identical operation sequence).
    pub fn bilinear(&self, u: &DVector<f64>, v: &DVector<f64>) -> f64 {
        let mut acc = 0.0;
        for &(j, k, h) in &self.entries {
            let (j, k) = (j as usize, k as usize);
            if j == k {
                acc += h * (u[j] * v[j]);
            } else {
                acc += h * (u[j] * v[k] + u[k] * v[j]);
            }
        }
        acc
    }

    /// `H v` as a dense vector.
    pub fn mul_vec(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim);
        for &(j, k, h) in &self.entries {
            let (j, k) = (j as usize, k as usize);
            if j == k {
                out[j] += h * v[j];
            } else {
                out[j] += h * v[k];
                out[k] += h * v[j];
            }
        }
        out
    }

    /// `V' H V` for a `dim x q` basis, as a dense `q x q` symmetric matrix.
    pub fn project(&self, basis: &DMatrix<f64>) -> DMatrix<f64> {
        let q = basis.ncols();
        let mut out = DMatrix::zeros(q, q);
        for &(j, k, h) in &self.entries {
            let (j, k) = (j as usize, k as usize);
            for a in 0..q {
                let bja = basis[(j, a)];
                let bka = basis[(k, a)];
                for b in 0..q {
                    if j == k {
                        out[(a, b)] += h * bja * basis[(j, b)];
                    } else {
                        out[(a, b)] += h * (bja * basis[(k, b)] + bka * basis[(j, b)]);
                    }
                }
            }
        }
        out
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.dim, self.dim);
        for &(j, k, h) in &self.entries {
            let (j, k) = (j as usize, k as usize);
            out[(j, k)] += h;
            if j != k {
                out[(k, j)] += h;
            }
        }
        out
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            dim: self.dim,
            entries: self.entries.iter().map(|&(j, k, h)| (j, k, h * s)).collect(),
        }
    }
}

/// One constant sparse symmetric Hessian per measurement row.
#[derive(Debug, Clone, PartialEq)]
pub struct HessianTensor {
    dim: usize,
    rows: Vec<SparseSymmetric>,
}

impl HessianTensor {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> usize {
        self.rows.len()
    }

    pub fn row(&self, i: usize) -> &SparseSymmetric {
        &self.rows[i]
    }

    /// Quadratic action `[0.5 * dx' H_i dx]_i` over all rows.
    pub fn quad_action(&self, dx: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.rows.len(),
            self.rows.iter().map(|h| 0.5 * h.quad_form(dx)),
        )
    }

    /// Bilinear action `[u' H_i v]_i` over all rows (no 1/2 factor).
    pub fn bilinear_action(&self, u: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.rows.len(), self.rows.iter().map(|h| h.bilinear(u, v)))
    }

    /// Row-scales the tensor, e.g. by the inverse square-root covariance.
    pub fn scale_rows(&self, weights: &DVector<f64>) -> Self {
        assert_eq!(weights.len(), self.rows.len());
        Self {
            dim: self.dim,
            rows: self
                .rows
                .iter()
                .zip(weights.iter())
                .map(|(h, &w)| h.scaled(w))
                .collect(),
        }
    }
}

/// Builds the constant Cartesian Hessians for every measured row.
///
/// The construction depends only on the admittances and the device set, never
/// on an evaluation point.
pub fn hessian_tensors(model: &AdmittanceModel, set: &MeasurementSet) -> HessianTensor {
    let graph = model.graph();
    let p = graph.state_dim();
    let dim = 2 * p;
    let mut rows = Vec::with_capacity(set.rows());

    // squared-magnitude rows: 0.5 * dx' H dx = dVr_i^2 + dVi_i^2
    for &b in set.mag_buses() {
        let k = graph.state_index(b).expect("validated non-slack") as u32;
        rows.push(SparseSymmetric::new(
            dim,
            vec![(k, k, 2.0), (p as u32 + k, p as u32 + k, 2.0)],
        ));
    }

    // flow rows: bilinear in (sending voltage, line current)
    for &l in set.flow_lines() {
        let e = graph.edges()[l];
        let yc = model.line_admittances()[l].conj();
        let mut complex_entries: Vec<(u32, u32, Complex64)> = Vec::new();
        if let Some(ka) = graph.state_index(e.sending) {
            let (ka, pu) = (ka as u32, p as u32);
            complex_entries.push((ka, ka, 2.0 * yc));
            complex_entries.push((pu + ka, pu + ka, 2.0 * yc));
            if let Some(kb) = graph.state_index(e.receiving) {
                let kb = kb as u32;
                complex_entries.push((ka, kb, -yc));
                complex_entries.push((pu + ka, pu + kb, -yc));
                complex_entries.push((ka, pu + kb, Complex64::i() * yc));
                complex_entries.push((kb, pu + ka, -Complex64::i() * yc));
            }
        }
        rows.push(realize(dim, &complex_entries, Part::Re));
        rows.push(realize(dim, &complex_entries, Part::Im));
    }

    // injection rows: bilinear in (own voltage, injected current)
    for &g in set.inj_buses() {
        let kg = graph.state_index(g).expect("validated non-slack");
        let mut complex_entries: Vec<(u32, u32, Complex64)> = Vec::new();
        for (k, &h) in graph.state_buses().iter().enumerate() {
            let c = model.ybus()[(g, h)].conj();
            if c == Complex64::ZERO {
                continue;
            }
            let (kg32, k32, pu) = (kg as u32, k as u32, p as u32);
            if k == kg {
                complex_entries.push((kg32, kg32, 2.0 * c));
                complex_entries.push((pu + kg32, pu + kg32, 2.0 * c));
            } else {
                complex_entries.push((kg32, k32, c));
                complex_entries.push((pu + kg32, pu + k32, c));
                complex_entries.push((kg32, pu + k32, -Complex64::i() * c));
                complex_entries.push((k32, pu + kg32, Complex64::i() * c));
            }
        }
        rows.push(realize(dim, &complex_entries, Part::Re));
        rows.push(realize(dim, &complex_entries, Part::Im));
    }

    HessianTensor { dim, rows }
}

enum Part {
    Re,
    Im,
}

fn realize(dim: usize, entries: &[(u32, u32, Complex64)], part: Part) -> SparseSymmetric {
    SparseSymmetric::new(
        dim,
        entries
            .iter()
            .map(|&(j, k, z)| {
                let v = match part {
                    Part::Re => z.re,
                    Part::Im => z.im,
                };
                (j, k, v)
            })
            .collect(),
    )
}
