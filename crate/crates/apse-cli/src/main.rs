//! Command-line entry point: file validation, single-shot estimation, and
//! batch Monte-Carlo runs.
//!
//! Exit codes: 0 success, 1 usage/parse error, 2 non-convergence or
//! observability failure, 3 I/O error.

use apse::harness::{self, Comparison, ExperimentConfig};
use apse::measurement::{load_layout, read_profiles_csv, validate_redundancy};
use apse::solver::{gnvqr_solve, SolverConfig, SolverError, WlsProblem};
use apse::{grid, MagnitudeForm, PolarState};
use clap::{Args, Parser, Subcommand, ValueEnum};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const EXIT_USAGE: u8 = 1;
const EXIT_SOLVE: u8 = 2;
const EXIT_IO: u8 = 3;

#[derive(Parser)]
#[command(
    name = "apse",
    about = "Accelerated probabilistic state estimation for distribution grids",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse and validate network + measurement files; report redundancy,
    /// connectivity, and observability.
    Validate(ValidateArgs),
    /// Solve one weighted-least-squares estimation problem and write the
    /// state table.
    Estimate(EstimateArgs),
    /// Run a Monte-Carlo experiment (APSE, plain Gauss-Newton, or both).
    Batch(BatchArgs),
}

#[derive(Args)]
struct ValidateArgs {
    /// Network description JSON.
    #[arg(long)]
    network: PathBuf,
    /// Measurement layout JSON.
    #[arg(long)]
    measurements: PathBuf,
}

#[derive(Args)]
struct EstimateArgs {
    #[arg(long)]
    network: PathBuf,
    #[arg(long)]
    measurements: PathBuf,
    /// Profiles CSV (headers must match the layout).
    #[arg(long)]
    profiles: PathBuf,
    /// Which profile row to estimate.
    #[arg(long, default_value_t = 0)]
    profile_index: usize,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Gauss-Newton step tolerance (pu).
    #[arg(long, default_value_t = 1e-6)]
    eps_n: f64,
    /// Maximum Gauss-Newton iterations.
    #[arg(long, default_value_t = 25)]
    max_iters: usize,
    /// Estimate with squared magnitude rows and delta-method weights.
    #[arg(long, default_value_t = false)]
    squared_magnitudes: bool,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum CompareArg {
    Apse,
    Gnvqr,
    Both,
}

#[derive(Args)]
struct BatchArgs {
    /// Experiment configuration JSON.
    #[arg(long)]
    experiment: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Override the load-draw seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the sample count.
    #[arg(long)]
    samples: Option<usize>,
    /// Override the shared acceptance/convergence tolerance.
    #[arg(long)]
    eps_n: Option<f64>,
    /// Override the relative basis expansion threshold.
    #[arg(long)]
    expansion_tol: Option<f64>,
    /// Override the reduced-Hessian profile cap.
    #[arg(long)]
    hessian_cap: Option<usize>,
    /// Which solver path(s) to run.
    #[arg(long, value_enum)]
    compare: Option<CompareArg>,
    /// Worker threads for the independent full-order path (0 = all cores).
    #[arg(long)]
    threads: Option<usize>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // keep clap's rendered help/usage but force the documented code
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Validate(args) => cmd_validate(&args),
        Command::Estimate(args) => cmd_estimate(&args),
        Command::Batch(args) => cmd_batch(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn exit_code_for(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(solver) = cause.downcast_ref::<SolverError>() {
            return match solver {
                SolverError::Observability { .. } | SolverError::NotRedundant { .. } => EXIT_SOLVE,
                SolverError::IllConditioned { .. } => EXIT_SOLVE,
                _ => EXIT_USAGE,
            };
        }
        if cause.downcast_ref::<apse::apse::ApseError>().is_some() {
            return EXIT_SOLVE;
        }
        if let Some(h) = cause.downcast_ref::<harness::HarnessError>() {
            return match h {
                harness::HarnessError::Io(_)
                | harness::HarnessError::Csv(_)
                | harness::HarnessError::Json(_) => EXIT_IO,
                harness::HarnessError::InfeasibleSample { .. } => EXIT_SOLVE,
                _ => EXIT_USAGE,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return EXIT_IO;
        }
        if cause.downcast_ref::<NonConvergence>().is_some() {
            return EXIT_SOLVE;
        }
    }
    EXIT_USAGE
}

#[derive(Debug)]
struct NonConvergence {
    final_step: f64,
    iterations: usize,
}

impl std::fmt::Display for NonConvergence {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "estimation did not converge after {} iterations (final step {:.3e})",
            self.iterations, self.final_step
        )
    }
}

impl std::error::Error for NonConvergence {}

fn load_problem(
    network: &Path,
    measurements: &Path,
    form: MagnitudeForm,
) -> anyhow::Result<WlsProblem> {
    let model = grid::load_network(network)?;
    let graph = model.graph().clone();
    let (set, cov) = load_layout(measurements, &graph)?;
    Ok(WlsProblem::new(model, set, cov, form)?)
}

fn cmd_validate(args: &ValidateArgs) -> anyhow::Result<()> {
    let model = grid::load_network(&args.network)?;
    let graph = model.graph().clone();
    let (set, cov) = load_layout(&args.measurements, &graph)?;
    let p = graph.state_dim();
    let report = validate_redundancy(&set, p);
    println!(
        "network: {} buses, {} lines, substation id {}",
        graph.bus_count(),
        graph.edge_count(),
        graph.bus_ids()[graph.substation()]
    );
    println!(
        "measurements: {} magnitude rows, {} flow rows, {} injection rows",
        set.mag_rows(),
        set.flow_rows(),
        set.inj_rows()
    );
    println!(
        "redundancy: {} rows vs {} states (margin {})",
        report.rows, report.state_dim, report.margin
    );
    if !report.satisfied {
        anyhow::bail!(SolverError::NotRedundant {
            rows: report.rows,
            state_dim: report.state_dim,
        });
    }

    // observability at flat start
    let problem = WlsProblem::new(model, set, cov, MagnitudeForm::Plain)?;
    let flat = PolarState::flat(p, problem.model().graph().slack_voltage());
    apse::apse::prefactor(&problem, &flat)?;
    println!("observability: full-rank weighted Jacobian at flat start");
    Ok(())
}

fn cmd_estimate(args: &EstimateArgs) -> anyhow::Result<()> {
    let form = if args.squared_magnitudes {
        MagnitudeForm::Squared
    } else {
        MagnitudeForm::Plain
    };
    let problem = load_problem(&args.network, &args.measurements, form)?;
    let graph = problem.model().graph();
    let profiles = read_profiles_csv(&args.profiles, problem.set(), graph)?;
    let profile = profiles.get(args.profile_index).ok_or_else(|| {
        anyhow::anyhow!(
            "profile index {} out of range ({} profiles)",
            args.profile_index,
            profiles.len()
        )
    })?;

    // per-profile delta-method weights for the squared form
    let problem = if args.squared_magnitudes {
        let (_, adjusted) =
            apse::measurement::squared_magnitude_transform(profile, problem.covariance())?;
        WlsProblem::new(
            problem.model().clone(),
            problem.set().clone(),
            adjusted,
            MagnitudeForm::Squared,
        )?
    } else {
        problem
    };

    let cfg = SolverConfig {
        step_tol: args.eps_n,
        max_iters: args.max_iters,
        ..SolverConfig::default()
    };
    let p = problem.model().graph().state_dim();
    let flat = PolarState::flat(p, problem.model().graph().slack_voltage());
    let report = gnvqr_solve(&problem, profile, &flat, &cfg)?;

    std::fs::create_dir_all(&args.out)?;
    let graph = problem.model().graph();
    let mut w = csv::Writer::from_path(args.out.join("state.csv"))?;
    w.write_record(["bus_id", "v_pu", "theta_rad"])?;
    let slack = graph.slack_voltage();
    w.write_record([
        graph.bus_ids()[graph.substation()].to_string(),
        slack.norm().to_string(),
        slack.arg().to_string(),
    ])?;
    for (k, &b) in graph.state_buses().iter().enumerate() {
        w.write_record([
            graph.bus_ids()[b].to_string(),
            report.state.magnitudes()[k].to_string(),
            report.state.angles()[k].to_string(),
        ])?;
    }
    w.flush()?;

    let residual = problem.residual(&report.state, profile)?;
    let weighted = problem.weighted_residual(&report.state, profile)?;
    let summary = serde_json::json!({
        "converged": report.converged,
        "iterations": report.iterations,
        "final_step_norm": report.final_step_norm,
        "residual_inf_norm": residual.amax(),
        "weighted_residual_norm": weighted.norm(),
        "profile_id": profile.profile_id,
        "magnitude_form": if args.squared_magnitudes { "squared" } else { "plain" },
    });
    std::fs::write(
        args.out.join("estimate.json"),
        serde_json::to_vec_pretty(&summary)?,
    )?;

    eprintln!(
        "estimate: converged={} iterations={} final_step={:.3e} ({:.1} ms)",
        report.converged,
        report.iterations,
        report.final_step_norm,
        report.wall_time.as_secs_f64() * 1e3
    );
    if !report.converged {
        anyhow::bail!(NonConvergence {
            final_step: report.final_step_norm,
            iterations: report.iterations,
        });
    }
    Ok(())
}

fn cmd_batch(args: &BatchArgs) -> anyhow::Result<()> {
    let mut config = ExperimentConfig::load(&args.experiment)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(samples) = args.samples {
        config.sample_count = samples;
    }
    if let Some(eps) = args.eps_n {
        config.eps_n = eps;
    }
    if let Some(tol) = args.expansion_tol {
        config.expansion_tol = tol;
    }
    if let Some(cap) = args.hessian_cap {
        config.hessian_cap = cap;
    }
    if let Some(cmp) = args.compare {
        config.comparison = match cmp {
            CompareArg::Apse => Comparison::Apse,
            CompareArg::Gnvqr => Comparison::Gnvqr,
            CompareArg::Both => Comparison::Both,
        };
    }
    if let Some(threads) = args.threads {
        config.threads = threads;
    }

    let base_dir = args
        .experiment
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let experiment = harness::prepare_experiment(config, &base_dir)?;
    let summary = harness::run_experiment(&experiment, &args.out)?;

    eprintln!(
        "batch: {} profiles, {} fallbacks, final basis {}, apse {:.2}s, gnvqr {:.2}s{}",
        summary.sample_count,
        summary.fallback_count,
        summary.final_basis_size,
        summary.total_apse_seconds,
        summary.total_gnvqr_seconds,
        summary
            .speedup_ratio
            .map(|s| format!(", speedup {s:.2}x"))
            .unwrap_or_default()
    );
    println!("{}", args.out.join("summary.json").display());
    // the run is a failure only when more than 1% of profiles went unsolved
    if summary.failed_profiles as f64 > 0.01 * summary.sample_count as f64 {
        anyhow::bail!(NonConvergence {
            final_step: f64::NAN,
            iterations: summary.failed_profiles,
        });
    }
    Ok(())
}
