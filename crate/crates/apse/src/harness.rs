//! Monte-Carlo experiment harness: uncertainty regions with uniform load
//! perturbations, synthetic measurement-profile generation, batch execution
//! over both solver paths, and statistics output.
//!
//! Profile synthesis draws per-bus load factors inside each uncertainty
//! region, solves the exactly-determined power flow for the ground truth,
//! evaluates the measured quantities there, adds Gaussian noise (scaled by
//! `noise_scale`) to the non-region measurements, and publishes the drawn
//! values themselves as the region members' injection pseudo-measurements.

use crate::apse::{apse_run, bootstrap, ApseConfig, ApseError, SolvePath};
use crate::grid::{load_network, AdmittanceModel, GridError, PolarState};
use crate::measurement::{
    load_layout, write_profiles_csv, CovarianceModel, MagnitudeForm, MeasurementError,
    MeasurementProfile, MeasurementSet,
};
use crate::physics::{
    eval_flows, eval_line_currents, eval_magnitudes, jacobian_polar,
};
use crate::rom::save_basis;
use crate::solver::{gnvqr_solve, SolverConfig, SolverError, WlsProblem};
use nalgebra::{Complex, DVector};
use num_complex::Complex64;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("power flow diverged for sample {sample} after {redraws} redraws")]
    InfeasibleSample { sample: usize, redraws: usize },
    #[error("uncertainty region '{region}' bus {bus} carries no injection measurement")]
    RegionWithoutInjection { region: String, bus: u32 },
    #[error("uncertainty region '{region}' bounds are not ordered: {lower} !< {upper}")]
    BadRegionBounds {
        region: String,
        lower: f64,
        upper: f64,
    },
    #[error("experiment config: {0}")]
    Config(String),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Measurement(#[from] MeasurementError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Apse(#[from] ApseError),
    #[error(transparent)]
    Rom(#[from] crate::rom::RomError),
    #[error("output: {0}")]
    Io(#[from] std::io::Error),
    #[error("output: {0}")]
    Csv(#[from] csv::Error),
    #[error("output: {0}")]
    Json(#[from] serde_json::Error),
}

/// Load buses whose injection pseudo-measurements are uniformly uncertain.
#[derive(Debug, Clone)]
pub struct UncertaintyRegion {
    pub id: String,
    /// Internal bus indices.
    pub buses: Vec<usize>,
    /// Bounds as fractions of the nominal load, e.g. -0.5 / +0.5.
    pub lower: f64,
    pub upper: f64,
}

impl UncertaintyRegion {
    pub fn validate(&self, set: &MeasurementSet, graph_ids: &[u32]) -> Result<(), HarnessError> {
        if self.lower >= self.upper {
            return Err(HarnessError::BadRegionBounds {
                region: self.id.clone(),
                lower: self.lower,
                upper: self.upper,
            });
        }
        for &b in &self.buses {
            if !set.inj_buses().contains(&b) {
                return Err(HarnessError::RegionWithoutInjection {
                    region: self.id.clone(),
                    bus: graph_ids.get(b).copied().unwrap_or(b as u32),
                });
            }
        }
        Ok(())
    }
}

/// Monte-Carlo batch description.
#[derive(Debug, Clone, Copy)]
pub struct SampleBatch {
    pub sample_count: usize,
    pub seed: u64,
}

/// Newton solve of the exactly-determined injection system `S(x) = s_spec`.
///
/// `injections` holds the specified complex injections at all non-slack buses
/// in state order (consumption negative). Converges on the mismatch infinity
/// norm; divergence is an infeasibility error so callers can redraw.
pub fn solve_power_flow(
    model: &AdmittanceModel,
    injections: &DVector<Complex64>,
    mismatch_tol: f64,
    max_iters: usize,
) -> Result<PolarState, HarnessError> {
    let graph = model.graph();
    let p = graph.state_dim();
    assert_eq!(injections.len(), p, "one complex injection per non-slack bus");
    // injection "measurements" at every non-slack bus form a square system
    let all = MeasurementSet::new(graph, vec![], vec![], graph.state_buses().to_vec())
        .expect("state buses are valid injection sites");

    let mut x = PolarState::flat(p, graph.slack_voltage());
    for _ in 0..max_iters {
        let s = crate::physics::eval_injections(model, &x);
        let mut mismatch = DVector::zeros(2 * p);
        for k in 0..p {
            let d = s[k] - injections[k];
            mismatch[2 * k] = d.re;
            mismatch[2 * k + 1] = d.im;
        }
        if mismatch.amax() <= mismatch_tol {
            return Ok(x);
        }
        let j = jacobian_polar(model, &all, &x, MagnitudeForm::Plain);
        let Some(step) = j.lu().solve(&mismatch) else {
            break;
        };
        if step.amax() >= 10.0 {
            break;
        }
        let next = x.as_vector() - step;
        match PolarState::from_vector(&next) {
            Ok(s) if s.magnitudes().min() > 0.05 => x = s,
            _ => break,
        }
    }
    Err(HarnessError::InfeasibleSample {
        sample: 0,
        redraws: 0,
    })
}

/// Synthesized stream with its ground-truth states.
pub struct SynthesizedBatch {
    pub profiles: Vec<MeasurementProfile>,
    pub truths: Vec<PolarState>,
    pub redraws: usize,
}

const REDRAW_CAP: usize = 100;
const PF_TOL: f64 = 1e-10;
const PF_ITERS: usize = 40;

/// Draws uncertainty-region load factors, solves the power flow, and
/// assembles one measurement profile per sample.
#[allow(clippy::too_many_arguments)]
pub fn synthesize_profiles(
    model: &AdmittanceModel,
    set: &MeasurementSet,
    cov: &CovarianceModel,
    nominal_injections: &DVector<Complex64>,
    regions: &[UncertaintyRegion],
    batch: SampleBatch,
    noise_seed: u64,
    noise_scale: f64,
) -> Result<SynthesizedBatch, HarnessError> {
    let graph = model.graph();
    for r in regions {
        r.validate(set, graph.bus_ids())?;
    }
    let mut draw_rng = ChaCha8Rng::seed_from_u64(batch.seed);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let unit_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let sigmas: DVector<f64> = cov.variances().map(f64::sqrt);

    let in_region: Vec<bool> = {
        let mut mask = vec![false; graph.bus_count()];
        for r in regions {
            for &b in &r.buses {
                mask[b] = true;
            }
        }
        mask
    };

    let mut profiles = Vec::with_capacity(batch.sample_count);
    let mut truths = Vec::with_capacity(batch.sample_count);
    let mut total_redraws = 0usize;

    for sample in 0..batch.sample_count {
        let mut redraws = 0usize;
        let (injections, truth) = loop {
            let mut injections = nominal_injections.clone();
            for r in regions {
                for &b in &r.buses {
                    let k = graph.state_index(b).expect("regions exclude the slack");
                    let factor = 1.0 + draw_rng.random_range(r.lower..r.upper);
                    injections[k] *= Complex::from(factor);
                }
            }
            match solve_power_flow(model, &injections, PF_TOL, PF_ITERS) {
                Ok(truth) => break (injections, truth),
                Err(_) => {
                    redraws += 1;
                    if redraws > REDRAW_CAP {
                        return Err(HarnessError::InfeasibleSample { sample, redraws });
                    }
                }
            }
        };
        total_redraws += redraws;

        let mags = eval_magnitudes(graph, &truth, set.mag_buses())
            .expect("measured buses validated");
        let flows = eval_flows(model, &truth, set.flow_lines()).expect("measured lines validated");

        let mut mag = DVector::zeros(set.mag_rows());
        for i in 0..set.mag_rows() {
            mag[i] = mags[i] + noise_scale * sigmas[i] * unit_normal.sample(&mut noise_rng);
        }
        let mut flow = DVector::zeros(set.flow_rows());
        let base = set.mag_rows();
        for k in 0..set.flow_lines().len() {
            flow[2 * k] =
                flows[k].re + noise_scale * sigmas[base + 2 * k] * unit_normal.sample(&mut noise_rng);
            flow[2 * k + 1] = flows[k].im
                + noise_scale * sigmas[base + 2 * k + 1] * unit_normal.sample(&mut noise_rng);
        }
        let mut inj = DVector::zeros(set.inj_rows());
        let base = set.mag_rows() + set.flow_rows();
        for (k, &b) in set.inj_buses().iter().enumerate() {
            let s = injections[graph.state_index(b).expect("non-slack")];
            // the drawn value IS the pseudo-measurement inside a region;
            // noise is drawn regardless to keep the stream aligned across
            // noise scales
            let np = noise_scale * sigmas[base + 2 * k] * unit_normal.sample(&mut noise_rng);
            let nq = noise_scale * sigmas[base + 2 * k + 1] * unit_normal.sample(&mut noise_rng);
            if in_region[b] {
                inj[2 * k] = s.re;
                inj[2 * k + 1] = s.im;
            } else {
                inj[2 * k] = s.re + np;
                inj[2 * k + 1] = s.im + nq;
            }
        }

        profiles.push(MeasurementProfile::new(sample as u64, set, mag, flow, inj)?);
        truths.push(truth);
    }

    Ok(SynthesizedBatch {
        profiles,
        truths,
        redraws: total_redraws,
    })
}

/// Which solver paths a batch exercises.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Comparison {
    Apse,
    Gnvqr,
    Both,
}

impl Comparison {
    pub fn runs_apse(self) -> bool {
        matches!(self, Comparison::Apse | Comparison::Both)
    }

    pub fn runs_gnvqr(self) -> bool {
        matches!(self, Comparison::Gnvqr | Comparison::Both)
    }
}

/// Batch execution settings beyond the solver tuning itself.
#[derive(Debug, Clone)]
pub struct BatchConfig {
    pub comparison: Comparison,
    pub apse: ApseConfig,
    /// Worker threads for the independent-profile path; 0 = all cores.
    pub threads: usize,
    /// Internal bus indices whose voltage magnitudes are monitored.
    pub monitored_buses: Vec<usize>,
    /// Edge indices whose current magnitudes are monitored.
    pub monitored_lines: Vec<usize>,
    pub histogram_bins: usize,
}

/// Per-profile batch record across the executed paths.
#[derive(Debug, Clone)]
pub struct ProfileOutcome {
    pub profile_id: u64,
    pub path: Option<SolvePath>,
    pub apse_converged: Option<bool>,
    pub gnvqr_converged: Option<bool>,
    pub rmse_iters: usize,
    pub apse_gnvqr_iters: usize,
    pub gnvqr_iters: usize,
    pub accept_test_value: f64,
    pub basis_size: usize,
    pub apse_seconds: f64,
    pub gnvqr_seconds: f64,
    /// Infinity-norm state gap between the two paths (both-mode only).
    pub paired_delta: Option<f64>,
}

/// Aggregated batch results.
pub struct RunStatistics {
    pub outcomes: Vec<ProfileOutcome>,
    /// label -> samples, one entry per monitored bus, per executed path.
    pub voltage_samples_apse: BTreeMap<String, Vec<f64>>,
    pub voltage_samples_gnvqr: BTreeMap<String, Vec<f64>>,
    pub current_samples_apse: BTreeMap<String, Vec<f64>>,
    pub current_samples_gnvqr: BTreeMap<String, Vec<f64>>,
    pub histogram_bins: usize,
    pub comparison: Comparison,
    pub total_apse_seconds: f64,
    pub total_gnvqr_seconds: f64,
    pub fallbacks: usize,
    pub final_basis_size: usize,
    pub bootstrap_gnvqr_iters: usize,
    pub sample_count: usize,
    /// Estimated states per executed path, in stream order.
    pub apse_states: Vec<(u64, PolarState)>,
    pub gnvqr_states: Vec<(u64, PolarState)>,
    pub final_subspace: Option<crate::rom::Subspace>,
}

/// Executes the selected solver path(s) over a synthesized stream.
///
/// The first profile bootstraps the expansion point and is not part of the
/// timed stream; the independent full-order path warm-starts every profile
/// from the bootstrap solution so results are independent of worker order.
pub fn run_batch(
    problem: &WlsProblem,
    profiles: &[MeasurementProfile],
    cfg: &BatchConfig,
) -> Result<RunStatistics, HarnessError> {
    assert!(
        profiles.len() >= 2,
        "need a bootstrap profile plus at least one stream profile"
    );
    let graph = problem.model().graph();
    let boot = bootstrap(problem, &profiles[0], &cfg.apse)?;
    let bootstrap_iters = boot.gnvqr_iters;
    let x_warm = boot.x0.clone();
    let stream = &profiles[1..];

    let apse_outcome = if cfg.comparison.runs_apse() {
        Some(apse_run(problem, boot, stream, &cfg.apse)?)
    } else {
        None
    };

    let gn_results: Option<Vec<(u64, crate::solver::SolveReport)>> =
        if cfg.comparison.runs_gnvqr() {
            let solve_one = |p: &MeasurementProfile| {
                let t = Instant::now();
                let mut rep = gnvqr_solve(problem, p, &x_warm, &cfg.apse.gn)?;
                rep.wall_time = t.elapsed();
                Ok::<_, SolverError>((p.profile_id, rep))
            };
            let results: Result<Vec<_>, SolverError> = if cfg.threads == 1 {
                stream.iter().map(solve_one).collect()
            } else {
                use rayon::prelude::*;
                let pool = rayon::ThreadPoolBuilder::new()
                    .num_threads(cfg.threads)
                    .build()
                    .map_err(|e| HarnessError::Config(e.to_string()))?;
                pool.install(|| stream.par_iter().map(solve_one).collect())
            };
            Some(results?)
        } else {
            None
        };

    // merge per-profile records deterministically by stream order
    let mut outcomes = Vec::with_capacity(stream.len());
    let mut total_apse = 0.0;
    let mut total_gnvqr = 0.0;
    let mut fallbacks = 0usize;
    for (i, profile) in stream.iter().enumerate() {
        let a = apse_outcome.as_ref().map(|r| &r.results[i]);
        let g = gn_results.as_ref().map(|v| &v[i].1);
        if let Some(a) = a {
            total_apse += a.wall_time.as_secs_f64();
            if a.path == SolvePath::FallbackGnvqr {
                fallbacks += 1;
            }
        }
        if let Some(g) = g {
            total_gnvqr += g.wall_time.as_secs_f64();
        }
        let paired_delta = match (a, g) {
            (Some(a), Some(g)) => {
                Some((a.state.as_vector() - g.state.as_vector()).amax())
            }
            _ => a.and_then(|a| a.paired_delta),
        };
        outcomes.push(ProfileOutcome {
            profile_id: profile.profile_id,
            path: a.map(|a| a.path),
            apse_converged: a.map(|a| a.converged),
            gnvqr_converged: g.map(|g| g.converged),
            rmse_iters: a.map(|a| a.rmse_iters).unwrap_or(0),
            apse_gnvqr_iters: a.map(|a| a.gnvqr_iters).unwrap_or(0),
            gnvqr_iters: g.map(|g| g.iterations).unwrap_or(0),
            accept_test_value: a.map(|a| a.accept_test_value).unwrap_or(f64::NAN),
            basis_size: a.map(|a| a.basis_size_at_solve).unwrap_or(0),
            apse_seconds: a.map(|a| a.wall_time.as_secs_f64()).unwrap_or(0.0),
            gnvqr_seconds: g.map(|g| g.wall_time.as_secs_f64()).unwrap_or(0.0),
            paired_delta,
        });
    }

    // monitored-quantity samples per executed path
    let bus_label = |b: usize| format!("bus_{}", graph.bus_ids()[b]);
    let line_label = |l: usize| {
        let e = graph.edges()[l];
        format!("line_{}_{}", graph.bus_ids()[e.sending], graph.bus_ids()[e.receiving])
    };
    let mut voltage_samples_apse: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut voltage_samples_gnvqr: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut current_samples_apse: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut current_samples_gnvqr: BTreeMap<String, Vec<f64>> = BTreeMap::new();

    let collect = |state: &PolarState,
                       volt: &mut BTreeMap<String, Vec<f64>>,
                       curr: &mut BTreeMap<String, Vec<f64>>|
     -> Result<(), HarnessError> {
        for &b in &cfg.monitored_buses {
            let k = graph
                .state_index(b)
                .ok_or_else(|| HarnessError::Config("monitored bus is the substation".into()))?;
            volt.entry(bus_label(b)).or_default().push(state.magnitudes()[k]);
        }
        if !cfg.monitored_lines.is_empty() {
            let currents = eval_line_currents(problem.model(), state, &cfg.monitored_lines)
                .map_err(|e| HarnessError::Config(e.to_string()))?;
            for (j, &l) in cfg.monitored_lines.iter().enumerate() {
                curr.entry(line_label(l)).or_default().push(currents[j].norm());
            }
        }
        Ok(())
    };

    if let Some(run) = &apse_outcome {
        for r in &run.results {
            collect(&r.state, &mut voltage_samples_apse, &mut current_samples_apse)?;
        }
    }
    if let Some(results) = &gn_results {
        for (_, rep) in results {
            collect(&rep.state, &mut voltage_samples_gnvqr, &mut current_samples_gnvqr)?;
        }
    }

    let apse_states = apse_outcome
        .as_ref()
        .map(|run| {
            run.results
                .iter()
                .map(|r| (r.profile_id, r.state.clone()))
                .collect()
        })
        .unwrap_or_default();
    let gnvqr_states = gn_results
        .as_ref()
        .map(|v| v.iter().map(|(id, rep)| (*id, rep.state.clone())).collect())
        .unwrap_or_default();

    Ok(RunStatistics {
        outcomes,
        voltage_samples_apse,
        voltage_samples_gnvqr,
        current_samples_apse,
        current_samples_gnvqr,
        histogram_bins: cfg.histogram_bins,
        comparison: cfg.comparison,
        total_apse_seconds: total_apse,
        total_gnvqr_seconds: total_gnvqr,
        fallbacks,
        final_basis_size: apse_outcome.as_ref().map(|r| r.subspace.q()).unwrap_or(0),
        bootstrap_gnvqr_iters: bootstrap_iters,
        sample_count: stream.len(),
        apse_states,
        gnvqr_states,
        final_subspace: apse_outcome.map(|r| r.subspace),
    })
}

/// Equal-width histogram preserving total mass; degenerate samples collapse
/// into a single bin.
pub fn histogram(samples: &[f64], bins: usize) -> Vec<(f64, f64, usize)> {
    if samples.is_empty() || bins == 0 {
        return Vec::new();
    }
    let lo = samples.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = samples.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        return vec![(lo, hi, samples.len())];
    }
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &s in samples {
        let idx = (((s - lo) / width) as usize).min(bins - 1);
        counts[idx] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(i, c)| (lo + i as f64 * width, lo + (i + 1) as f64 * width, c))
        .collect()
}

/// Two-sample Kolmogorov-Smirnov statistic.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return f64::NAN;
    }
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(f64::total_cmp);
    sb.sort_by(f64::total_cmp);
    let (mut ia, mut ib) = (0usize, 0usize);
    let mut d: f64 = 0.0;
    while ia < sa.len() && ib < sb.len() {
        let v = sa[ia].min(sb[ib]);
        while ia < sa.len() && sa[ia] == v {
            ia += 1;
        }
        while ib < sb.len() && sb[ib] == v {
            ib += 1;
        }
        let fa = ia as f64 / sa.len() as f64;
        let fb = ib as f64 / sb.len() as f64;
        d = d.max((fa - fb).abs());
    }
    d
}

/// Machine-readable run summary (also serialized to `summary.json`).
#[derive(Debug, Serialize)]
pub struct Summary {
    pub sample_count: usize,
    pub comparison: Comparison,
    pub fallback_count: usize,
    pub late_fallback_rate: f64,
    /// Profiles on which an executed path failed to converge.
    pub failed_profiles: usize,
    pub final_basis_size: usize,
    pub bootstrap_gnvqr_iters: usize,
    pub total_apse_seconds: f64,
    pub total_gnvqr_seconds: f64,
    /// total gnvqr time / total apse time (both-mode only).
    pub speedup_ratio: Option<f64>,
    pub max_paired_delta: Option<f64>,
    pub ks_voltage: BTreeMap<String, f64>,
}

/// Writes histogram, timing, acceptance-rate CSVs and the JSON summary into
/// `out_dir` (layout: `histograms/`, `timing/`, `summary.json`).
pub fn summarize(stats: &RunStatistics, out_dir: &Path) -> Result<Summary, HarnessError> {
    std::fs::create_dir_all(out_dir.join("histograms"))?;
    std::fs::create_dir_all(out_dir.join("timing"))?;

    let write_hists = |name: &str,
                       apse: &BTreeMap<String, Vec<f64>>,
                       gnvqr: &BTreeMap<String, Vec<f64>>|
     -> Result<(), HarnessError> {
        let mut w = csv::Writer::from_path(out_dir.join("histograms").join(name))?;
        w.write_record(["path", "quantity", "bin_lo", "bin_hi", "count"])?;
        for (path, map) in [("apse", apse), ("gnvqr", gnvqr)] {
            for (label, samples) in map {
                for (lo, hi, c) in histogram(samples, stats.histogram_bins) {
                    w.write_record([
                        path,
                        label,
                        &lo.to_string(),
                        &hi.to_string(),
                        &c.to_string(),
                    ])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    };
    write_hists(
        "voltage_magnitude.csv",
        &stats.voltage_samples_apse,
        &stats.voltage_samples_gnvqr,
    )?;
    write_hists(
        "current_magnitude.csv",
        &stats.current_samples_apse,
        &stats.current_samples_gnvqr,
    )?;

    // per-profile table; timing columns are the last two
    let mut w = csv::Writer::from_path(out_dir.join("timing").join("timing.csv"))?;
    w.write_record([
        "profile_id",
        "path",
        "rmse_iters",
        "apse_gnvqr_iters",
        "gnvqr_iters",
        "accept_test_value",
        "basis_size",
        "apse_seconds",
        "gnvqr_seconds",
    ])?;
    for o in &stats.outcomes {
        w.write_record([
            o.profile_id.to_string(),
            o.path.map(|p| p.as_str().to_string()).unwrap_or_default(),
            o.rmse_iters.to_string(),
            o.apse_gnvqr_iters.to_string(),
            o.gnvqr_iters.to_string(),
            format!("{:.6e}", o.accept_test_value),
            o.basis_size.to_string(),
            format!("{:.9}", o.apse_seconds),
            format!("{:.9}", o.gnvqr_seconds),
        ])?;
    }
    w.flush()?;

    // acceptance-rate curve: cumulative and rolling fraction of accepted profiles
    let mut w = csv::Writer::from_path(out_dir.join("timing").join("acceptance_rate.csv"))?;
    w.write_record(["profile_index", "accepted", "cumulative_rate", "rolling_100"])?;
    let mut accepted_so_far = 0usize;
    let window: &mut Vec<bool> = &mut Vec::new();
    for (i, o) in stats.outcomes.iter().enumerate() {
        let accepted = o.path == Some(SolvePath::RmseAccepted);
        accepted_so_far += accepted as usize;
        window.push(accepted);
        if window.len() > 100 {
            window.remove(0);
        }
        let rolling = window.iter().filter(|&&a| a).count() as f64 / window.len() as f64;
        w.write_record([
            i.to_string(),
            (accepted as u8).to_string(),
            format!("{:.6}", accepted_so_far as f64 / (i + 1) as f64),
            format!("{rolling:.6}"),
        ])?;
    }
    w.flush()?;

    let late_window = stats.outcomes.len().min(500);
    let late_fallback_rate = if late_window == 0 || !stats.comparison.runs_apse() {
        f64::NAN
    } else {
        let tail = &stats.outcomes[stats.outcomes.len() - late_window..];
        tail.iter()
            .filter(|o| o.path == Some(SolvePath::FallbackGnvqr))
            .count() as f64
            / late_window as f64
    };

    let speedup_ratio = (stats.comparison == Comparison::Both && stats.total_apse_seconds > 0.0)
        .then(|| stats.total_gnvqr_seconds / stats.total_apse_seconds);

    let max_paired_delta = stats
        .outcomes
        .iter()
        .filter_map(|o| o.paired_delta)
        .fold(None, |acc: Option<f64>, d| Some(acc.map_or(d, |a| a.max(d))));

    let mut ks_voltage = BTreeMap::new();
    if stats.comparison == Comparison::Both {
        for (label, a) in &stats.voltage_samples_apse {
            if let Some(b) = stats.voltage_samples_gnvqr.get(label) {
                ks_voltage.insert(label.clone(), ks_statistic(a, b));
            }
        }
    }

    let failed_profiles = stats
        .outcomes
        .iter()
        .filter(|o| o.apse_converged == Some(false) || o.gnvqr_converged == Some(false))
        .count();

    let summary = Summary {
        sample_count: stats.sample_count,
        comparison: stats.comparison,
        fallback_count: stats.fallbacks,
        late_fallback_rate,
        failed_profiles,
        final_basis_size: stats.final_basis_size,
        bootstrap_gnvqr_iters: stats.bootstrap_gnvqr_iters,
        total_apse_seconds: stats.total_apse_seconds,
        total_gnvqr_seconds: stats.total_gnvqr_seconds,
        speedup_ratio,
        max_paired_delta,
        ks_voltage,
    };
    std::fs::write(
        out_dir.join("summary.json"),
        serde_json::to_vec_pretty(&summary)?,
    )?;
    Ok(summary)
}

// ---------------------------------------------------------------------------
// Experiment configuration file
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub network: String,
    pub measurements: String,
    /// Consumed power per load bus (positive values, per-unit).
    pub loads: Vec<LoadEntry>,
    #[serde(default)]
    pub uncertainty_regions: Vec<RegionEntry>,
    pub sample_count: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_noise_seed")]
    pub noise_seed: u64,
    #[serde(default)]
    pub noise_scale: f64,
    #[serde(default = "default_eps_n")]
    pub eps_n: f64,
    #[serde(default = "default_expansion_tol")]
    pub expansion_tol: f64,
    #[serde(default = "default_hessian_cap")]
    pub hessian_cap: usize,
    #[serde(default = "default_max_gn_iters")]
    pub max_gn_iters: usize,
    #[serde(default = "default_comparison")]
    pub comparison: Comparison,
    #[serde(default)]
    pub monitored_buses: Vec<u32>,
    #[serde(default)]
    pub monitored_lines: Vec<usize>,
    #[serde(default = "default_bins")]
    pub histogram_bins: usize,
    #[serde(default)]
    pub threads: usize,
}

fn default_seed() -> u64 {
    1
}
fn default_noise_seed() -> u64 {
    2
}
fn default_eps_n() -> f64 {
    1e-6
}
fn default_expansion_tol() -> f64 {
    1e-8
}
fn default_hessian_cap() -> usize {
    50
}
fn default_max_gn_iters() -> usize {
    25
}
fn default_comparison() -> Comparison {
    Comparison::Both
}
fn default_bins() -> usize {
    40
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LoadEntry {
    pub bus: u32,
    pub p: f64,
    pub q: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegionEntry {
    pub id: String,
    pub buses: Vec<u32>,
    pub lower: f64,
    pub upper: f64,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| HarnessError::Config(e.to_string()))
    }
}

/// Fully assembled experiment, ready to run.
pub struct Experiment {
    pub problem: WlsProblem,
    pub nominal_injections: DVector<Complex64>,
    pub regions: Vec<UncertaintyRegion>,
    pub config: ExperimentConfig,
}

/// Resolves file references (relative to `base_dir`), builds the estimation
/// problem, and validates the regions.
pub fn prepare_experiment(
    config: ExperimentConfig,
    base_dir: &Path,
) -> Result<Experiment, HarnessError> {
    let model = load_network(&base_dir.join(&config.network))?;
    let graph = model.graph().clone();
    let (set, cov) = load_layout(&base_dir.join(&config.measurements), &graph)?;

    let mut nominal = DVector::from_element(graph.state_dim(), Complex64::ZERO);
    for l in &config.loads {
        let b = graph
            .bus_index(l.bus)
            .ok_or_else(|| HarnessError::Config(format!("unknown load bus {}", l.bus)))?;
        let k = graph
            .state_index(b)
            .ok_or_else(|| HarnessError::Config("load at the substation".into()))?;
        nominal[k] = -Complex64::new(l.p, l.q); // consumption -> injection
    }

    let regions: Vec<UncertaintyRegion> = config
        .uncertainty_regions
        .iter()
        .map(|r| {
            let buses: Result<Vec<usize>, HarnessError> = r
                .buses
                .iter()
                .map(|&id| {
                    graph
                        .bus_index(id)
                        .ok_or_else(|| HarnessError::Config(format!("unknown region bus {id}")))
                })
                .collect();
            Ok(UncertaintyRegion {
                id: r.id.clone(),
                buses: buses?,
                lower: r.lower,
                upper: r.upper,
            })
        })
        .collect::<Result<_, HarnessError>>()?;

    let problem = WlsProblem::new(model, set, cov, MagnitudeForm::Plain)?;
    for r in &regions {
        r.validate(problem.set(), problem.model().graph().bus_ids())?;
    }
    Ok(Experiment {
        problem,
        nominal_injections: nominal,
        regions,
        config,
    })
}

/// End-to-end experiment: synthesize, run the batch, write outputs.
///
/// Emits `profiles.csv` (the synthesized stream), per-profile state tables
/// under `states/`, statistics files, and the basis checkpoint.
pub fn run_experiment(exp: &Experiment, out_dir: &Path) -> Result<Summary, HarnessError> {
    let cfg = &exp.config;
    let batch = SampleBatch {
        sample_count: cfg.sample_count,
        seed: cfg.seed,
    };
    let synth = synthesize_profiles(
        exp.problem.model(),
        exp.problem.set(),
        exp.problem.covariance(),
        &exp.nominal_injections,
        &exp.regions,
        batch,
        cfg.noise_seed,
        cfg.noise_scale,
    )?;

    std::fs::create_dir_all(out_dir)?;
    write_profiles_csv(
        &out_dir.join("profiles.csv"),
        exp.problem.set(),
        exp.problem.model().graph(),
        &synth.profiles,
    )?;

    let graph = exp.problem.model().graph();
    let monitored_buses: Vec<usize> = cfg
        .monitored_buses
        .iter()
        .filter_map(|&id| graph.bus_index(id))
        .collect();
    let apse_cfg = ApseConfig {
        gn: SolverConfig {
            step_tol: cfg.eps_n,
            max_iters: cfg.max_gn_iters,
            ..SolverConfig::default()
        },
        expansion_tol: cfg.expansion_tol,
        hessian_cap: cfg.hessian_cap,
        ..ApseConfig::default()
    }
    .with_eps_n(cfg.eps_n);
    let batch_cfg = BatchConfig {
        comparison: cfg.comparison,
        apse: apse_cfg,
        threads: cfg.threads,
        monitored_buses,
        monitored_lines: cfg.monitored_lines.clone(),
        histogram_bins: cfg.histogram_bins,
    };

    let stats = run_batch(&exp.problem, &synth.profiles, &batch_cfg)?;
    write_states(&exp.problem, &stats, out_dir)?;
    summarize(&stats, out_dir)
}

/// Writes `states/estimates_{apse,gnvqr}.csv` plus the basis checkpoint from
/// the batch results.
fn write_states(
    problem: &WlsProblem,
    stats: &RunStatistics,
    out_dir: &Path,
) -> Result<(), HarnessError> {
    std::fs::create_dir_all(out_dir.join("states"))?;
    let graph = problem.model().graph();
    let header: Vec<String> = std::iter::once("profile_id".to_string())
        .chain(
            graph
                .state_buses()
                .iter()
                .map(|&b| format!("v_{}", graph.bus_ids()[b])),
        )
        .chain(
            graph
                .state_buses()
                .iter()
                .map(|&b| format!("theta_{}", graph.bus_ids()[b])),
        )
        .collect();

    let write = |name: &str, rows: &[(u64, PolarState)]| -> Result<(), HarnessError> {
        let mut w = csv::Writer::from_path(out_dir.join("states").join(name))?;
        w.write_record(&header)?;
        for (id, state) in rows {
            let mut rec = vec![id.to_string()];
            rec.extend(state.magnitudes().iter().map(|v| v.to_string()));
            rec.extend(state.angles().iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    };

    if stats.comparison.runs_apse() {
        write("estimates_apse.csv", &stats.apse_states)?;
        if let Some(sub) = &stats.final_subspace {
            save_basis(&out_dir.join("basis.csv"), sub)?;
        }
    }
    if stats.comparison.runs_gnvqr() {
        write("estimates_gnvqr.csv", &stats.gnvqr_states)?;
    }
    Ok(())
}
