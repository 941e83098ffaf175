//! Shared fixtures for the integration and acceptance suites: the 33-bus
//! desk feeder, its measurement layouts, and consistent profile synthesis.
#![allow(dead_code)] // each test binary uses a different subset

use apse::grid::{load_network, AdmittanceModel, PolarState};
use apse::harness::{
    prepare_experiment, synthesize_profiles, Experiment, ExperimentConfig, SampleBatch,
    SynthesizedBatch,
};
use apse::measurement::{
    load_layout, CovarianceModel, MagnitudeForm, MeasurementProfile, MeasurementSet,
};
use apse::solver::WlsProblem;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};

pub fn data_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data").join(name)
}

pub fn feeder33() -> AdmittanceModel {
    load_network(&data_path("feeder33.json")).expect("feeder data ships with the crate")
}

/// Problem with the full measurement complement (magnitudes + flows +
/// injections everywhere).
pub fn full_problem(form: MagnitudeForm) -> WlsProblem {
    let model = feeder33();
    let graph = model.graph().clone();
    let (set, cov) =
        load_layout(&data_path("meters33_full.json"), &graph).expect("full layout parses");
    WlsProblem::new(model, set, cov, form).expect("full complement is redundant")
}

/// The shipped Monte-Carlo experiment (UQ layout, two uncertainty regions).
pub fn experiment() -> Experiment {
    let cfg = ExperimentConfig::load(&data_path("experiment33.json")).expect("config parses");
    prepare_experiment(cfg, &data_path("")).expect("experiment prepares")
}

/// Synthesizes a consistent (noise-free) stream from the shipped experiment,
/// overriding the sample count for cheap tests.
pub fn consistent_stream(exp: &Experiment, samples: usize, seed: u64) -> SynthesizedBatch {
    synthesize_profiles(
        exp.problem.model(),
        exp.problem.set(),
        exp.problem.covariance(),
        &exp.nominal_injections,
        &exp.regions,
        SampleBatch {
            sample_count: samples,
            seed,
        },
        exp.config.noise_seed,
        0.0,
    )
    .expect("synthesis succeeds")
}

/// Measurement profile evaluated exactly at a state (consistent by
/// construction).
pub fn profile_at(
    problem: &WlsProblem,
    truth: &PolarState,
    id: u64,
) -> MeasurementProfile {
    let model = problem.model();
    let graph = model.graph();
    let set: &MeasurementSet = problem.set();
    let mag = apse::physics::eval_magnitudes(graph, truth, set.mag_buses()).unwrap();
    let flows = apse::physics::eval_flows(model, truth, set.flow_lines()).unwrap();
    let inj = apse::physics::eval_injections(model, truth);
    let mut fv = Vec::with_capacity(set.flow_rows());
    for f in flows.iter() {
        fv.push(f.re);
        fv.push(f.im);
    }
    let mut sv = Vec::with_capacity(set.inj_rows());
    for &b in set.inj_buses() {
        let s = inj[graph.state_index(b).unwrap()];
        sv.push(s.re);
        sv.push(s.im);
    }
    MeasurementProfile::new(id, set, mag, DVector::from_vec(fv), DVector::from_vec(sv)).unwrap()
}

/// Random operating state near the flat profile.
pub fn random_state(p: usize, rng: &mut ChaCha8Rng) -> PolarState {
    let mags = DVector::from_fn(p, |_, _| rng.random_range(0.9..1.1));
    let angs = DVector::from_fn(p, |_, _| rng.random_range(-0.15..0.15));
    PolarState::new(mags, angs).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Covariance of the full layout (handy for direct-evaluation oracles).
pub fn full_covariance(problem: &WlsProblem) -> CovarianceModel {
    problem.covariance().clone()
}

/// Max absolute difference normalized by the larger max-entry scale.
pub fn rel_gap_mat(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax() / a.amax().max(b.amax()).max(1e-300)
}

pub fn rel_gap_vec(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).amax() / a.amax().max(b.amax()).max(1e-300)
}
