//! `gridcert` command-line tool.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use num_complex::Complex64;

use gridcert::constraints::{BusValues, SecurityFile, SecuritySpec};
use gridcert::grid::{ComplexValue, GridFile, GridModel};
use gridcert::load_flow::{
    continuation_trace_partial, is_nonsingular, solve_load_flow, trace_to_csv, ContinuationOptions,
    LoadFlowError, NewtonOptions, PowerPath, DEFAULT_SIGMA_TOL,
};
use gridcert::moment::P0Options;
use gridcert::oracle::{
    boundary_probe, brute_force_admissibility, brute_force_path, uniqueness_probe,
    BoundaryProbeOptions, BruteForceOptions,
};
use gridcert::pipeline::{max_kappa, Certifier, KappaSearch, PipelineError, PipelineOptions};
use gridcert::report::{
    constraint_entries, AdmissibilityOutcome, AdmissibilityReport, LoadflowReport, MaxKappaOutcome,
    MaxKappaReport, OracleReport, Probe, Report, ReportBody, VsetOutcome, VsetReport,
};
use gridcert::uncertainty::{UncertaintyFile, UncertaintySet};
use gridcert::vset::{LambdaSchedule, ScheduleMode};

const EXIT_OK: u8 = 0;
const EXIT_UNKNOWN: u8 = 2;
const EXIT_PRECONDITION: u8 = 3;
const EXIT_INPUT: u8 = 4;

#[derive(Parser, Debug)]
#[command(name = "gridcert", version, about = "Admissibility certificates for uncertain power injections")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Worker threads (defaults to the number of cores).
    #[arg(long, global = true)]
    parallel: Option<usize>,
    /// Seed for every randomised step.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Write the JSON report here instead of standard output.
    #[arg(long, global = true)]
    report: Option<PathBuf>,
    /// Zero all wall-clock fields so reports are byte-for-byte reproducible.
    #[arg(long, global = true)]
    no_timings: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Calibrate the auxiliary set and emit the voltage set `V`.
    Vset {
        #[command(flatten)]
        grid: GridArgs,
        #[command(flatten)]
        calib: CalibArgs,
    },
    /// Certify one uncertainty set.
    Admissibility {
        #[command(flatten)]
        grid: GridArgs,
        #[command(flatten)]
        set: SetArgs,
        #[command(flatten)]
        calib: CalibArgs,
    },
    /// Largest admissible scaling of an uncertainty template.
    MaxKappa {
        #[command(flatten)]
        grid: GridArgs,
        #[command(flatten)]
        set: SetArgs,
        #[command(flatten)]
        calib: CalibArgs,
        /// Bisection stops once the bracket is narrower than this.
        #[arg(long, default_value_t = 0.01)]
        resolution: f64,
        #[arg(long, default_value_t = 0.01)]
        kappa_min: f64,
        #[arg(long, default_value_t = 1.0)]
        kappa_max: f64,
    },
    /// Brute-force probes that look for counterexamples.
    Oracle {
        #[command(flatten)]
        grid: GridArgs,
        #[command(flatten)]
        set: SetArgs,
        #[command(flatten)]
        calib: CalibArgs,
        #[arg(long, value_enum, default_value_t = ProbeArg::Paths)]
        probe: ProbeArg,
        /// Random injection paths (paths probe).
        #[arg(long, default_value_t = 200)]
        paths: usize,
        /// Continuation steps per path.
        #[arg(long, default_value_t = 100)]
        steps: usize,
        /// Ray directions (boundary probe).
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
        /// Voltage pairs (uniqueness probe).
        #[arg(long, default_value_t = 500)]
        trials: usize,
        /// Directory receiving one trajectory CSV per path.
        #[arg(long)]
        csv_dir: Option<PathBuf>,
    },
    /// Follow the load-flow solution along a straight injection path.
    Loadflow {
        #[arg(long)]
        grid: PathBuf,
        /// Target injections: JSON list of `{"re", "im"}`, one per PQ bus.
        #[arg(long)]
        injection: PathBuf,
        /// Starting injections; zero when omitted.
        #[arg(long)]
        from: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        steps: usize,
        /// Write the trajectory as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct GridArgs {
    #[arg(long)]
    grid: PathBuf,
    #[arg(long)]
    security: PathBuf,
}

#[derive(Args, Debug)]
struct SetArgs {
    #[arg(long)]
    uncertainty: PathBuf,
    /// Initial voltages as a JSON list of `{"re", "im"}`; the zero-load voltage when omitted.
    #[arg(long)]
    initial: Option<PathBuf>,
    /// Relaxation order of the boundary programs.
    #[arg(long, default_value_t = 2)]
    order: u32,
}

#[derive(Args, Debug)]
struct CalibArgs {
    /// Fraction of the branch limits used for the auxiliary caps.
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long, default_value_t = 0.1)]
    lambda_start: f64,
    /// Geometric schedule factor.
    #[arg(long, conflicts_with = "lambda_step")]
    lambda_ratio: Option<f64>,
    /// Arithmetic schedule increment.
    #[arg(long)]
    lambda_step: Option<f64>,
    /// Stop once the largest nodal cap exceeds this.
    #[arg(long, default_value_t = 1.0)]
    lambda_cap: f64,
    /// Reference nodal currents: a JSON number or list.
    #[arg(long)]
    inode_ref_file: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum ProbeArg {
    Paths,
    Boundary,
    Uniqueness,
}

#[derive(Debug)]
struct InputError(String);

type CliResult<T> = Result<T, InputError>;

fn read(path: &Path, what: &str) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| InputError(format!("{what} file {}: {e}", path.display())))
}

fn write(path: &Path, contents: &str) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| InputError(format!("cannot write {}: {e}", path.display())))
}

fn load_grid(path: &Path) -> CliResult<GridModel> {
    let text = read(path, "grid")?;
    let file = GridFile::from_json_str(&text).map_err(|e| InputError(format!("{}: {e}", path.display())))?;
    file.build().map_err(|e| InputError(format!("{}: {e}", path.display())))
}

struct Security {
    spec: SecuritySpec,
    beta: Option<f64>,
    i_node_ref: Option<Vec<f64>>,
}

fn load_security(path: &Path, model: &GridModel) -> CliResult<Security> {
    let text = read(path, "security")?;
    let ctx = |e: String| InputError(format!("{}: {e}", path.display()));
    let file = SecurityFile::from_json_str(&text).map_err(|e| ctx(e.to_string()))?;
    Ok(Security {
        spec: file.to_spec(model).map_err(|e| ctx(e.to_string()))?,
        beta: file.beta,
        i_node_ref: file.i_node_ref(model).map_err(|e| ctx(e.to_string()))?,
    })
}

fn load_uncertainty(path: &Path) -> CliResult<UncertaintyFile> {
    let text = read(path, "uncertainty")?;
    UncertaintyFile::from_json_str(&text).map_err(|e| InputError(format!("{}: {e}", path.display())))
}

fn load_complex_list(path: &Path, what: &str, n: usize) -> CliResult<DVector<Complex64>> {
    let text = read(path, what)?;
    let values: Vec<ComplexValue> =
        serde_json::from_str(&text).map_err(|e| InputError(format!("{}: {e}", path.display())))?;
    if values.len() != n {
        return Err(InputError(format!(
            "{}: expected {n} values, one per PQ bus, got {}",
            path.display(),
            values.len()
        )));
    }
    if values.iter().any(|c| !c.is_finite()) {
        return Err(InputError(format!("{}: non-finite value", path.display())));
    }
    Ok(DVector::from_iterator(n, values.into_iter().map(Complex64::from)))
}

fn schedule(calib: &CalibArgs) -> LambdaSchedule {
    let mode = match (calib.lambda_ratio, calib.lambda_step) {
        (_, Some(step)) => ScheduleMode::Step(step),
        (Some(ratio), None) => ScheduleMode::Ratio(ratio),
        (None, None) => LambdaSchedule::default().mode,
    };
    LambdaSchedule {
        start: calib.lambda_start,
        mode,
        cap: calib.lambda_cap,
    }
}

fn pipeline_options(calib: &CalibArgs, security: &Security, model: &GridModel, order: u32) -> CliResult<PipelineOptions> {
    let i_node_ref = match &calib.inode_ref_file {
        Some(path) => {
            let text = read(path, "nodal reference")?;
            let values: BusValues =
                serde_json::from_str(&text).map_err(|e| InputError(format!("{}: {e}", path.display())))?;
            Some(
                values
                    .expand(model.n_pq(), "i_node_ref")
                    .map_err(|e| InputError(format!("{}: {e}", path.display())))?,
            )
        }
        None => security.i_node_ref.clone(),
    };
    Ok(PipelineOptions {
        beta: calib.beta.or(security.beta).unwrap_or(1.0),
        i_node_ref,
        schedule: schedule(calib),
        p0: P0Options {
            omega: order,
            ..P0Options::default()
        },
        ..PipelineOptions::default()
    })
}

fn certifier(grid: &GridArgs, calib: &CalibArgs, order: u32) -> CliResult<Certifier> {
    let model = load_grid(&grid.grid)?;
    let security = load_security(&grid.security, &model)?;
    let opts = pipeline_options(calib, &security, &model, order)?;
    Certifier::new(model, security.spec, opts).map_err(|e| InputError(e.to_string()))
}

fn initial_voltage(set: &SetArgs, model: &GridModel) -> CliResult<DVector<Complex64>> {
    match &set.initial {
        Some(path) => load_complex_list(path, "initial voltage", model.n_pq()),
        None => Ok(model.w().clone()),
    }
}

fn strip_timings(body: &mut ReportBody) {
    match body {
        ReportBody::Vset(r) => {
            r.steps.iter_mut().for_each(|s| s.wall_time_s = 0.0);
            r.p1.iter_mut().for_each(|s| s.wall_time_s = 0.0);
        }
        ReportBody::Admissibility(r) => {
            if let Some(v) = &mut r.verdict {
                *v = v.without_timings();
            }
        }
        ReportBody::MaxKappa(r) => {
            for t in &mut r.trials {
                t.verdict = t.verdict.without_timings();
            }
        }
        ReportBody::Oracle(_) | ReportBody::Loadflow(_) => {}
    }
}

fn run_vset(grid: &GridArgs, calib: &CalibArgs) -> CliResult<(ReportBody, u8)> {
    let c = certifier(grid, calib, P0Options::default().omega)?;
    let report = match (&c.calibration, &c.v_set) {
        (Ok(cal), Some(v)) => (
            VsetReport {
                outcome: VsetOutcome::Calibrated,
                schedule: c.opts.schedule,
                lambda_star: Some(cal.lambda_star),
                stop: Some(cal.stop),
                aux: Some(cal.aux.clone()),
                steps: cal.steps.clone(),
                p1: cal.records.clone(),
                constraints: constraint_entries(v),
                error: None,
            },
            EXIT_OK,
        ),
        (Err(e), _) => (
            VsetReport {
                outcome: VsetOutcome::CalibrationFailed,
                schedule: c.opts.schedule,
                lambda_star: None,
                stop: None,
                aux: None,
                steps: vec![],
                p1: vec![],
                constraints: vec![],
                error: Some(e.to_string()),
            },
            EXIT_UNKNOWN,
        ),
        (Ok(_), None) => unreachable!("V is assembled whenever calibration succeeds"),
    };
    Ok((ReportBody::Vset(report.0), report.1))
}

fn run_admissibility(grid: &GridArgs, set: &SetArgs, calib: &CalibArgs) -> CliResult<(ReportBody, u8)> {
    let c = certifier(grid, calib, set.order)?;
    let v0 = initial_voltage(set, &c.model)?;
    let u = load_uncertainty(&set.uncertainty)?.to_set();
    let (report, code) = match c.test(&v0, &u) {
        Ok(verdict) => {
            let (outcome, code) = if verdict.is_admissible() {
                (AdmissibilityOutcome::Admissible, EXIT_OK)
            } else {
                (AdmissibilityOutcome::Unknown, EXIT_UNKNOWN)
            };
            (
                AdmissibilityReport {
                    outcome,
                    verdict: Some(verdict),
                    error: None,
                },
                code,
            )
        }
        Err(PipelineError::PreconditionViolated(msg)) => (
            AdmissibilityReport {
                outcome: AdmissibilityOutcome::PreconditionViolated,
                verdict: None,
                error: Some(msg),
            },
            EXIT_PRECONDITION,
        ),
        Err(e) => return Err(InputError(e.to_string())),
    };
    Ok((ReportBody::Admissibility(report), code))
}

fn run_max_kappa(
    grid: &GridArgs,
    set: &SetArgs,
    calib: &CalibArgs,
    search: KappaSearch,
) -> CliResult<(ReportBody, u8)> {
    let c = certifier(grid, calib, set.order)?;
    let v0 = initial_voltage(set, &c.model)?;
    let template = load_uncertainty(&set.uncertainty)?.template();
    let empty = |outcome, error: String| MaxKappaReport {
        outcome,
        search,
        kappa_star: None,
        first_unknown: None,
        trials: vec![],
        error: Some(error),
    };
    let (report, code) = match max_kappa(&c, &v0, &template, &search) {
        Ok(r) => (
            MaxKappaReport {
                outcome: MaxKappaOutcome::Found,
                search,
                kappa_star: Some(r.kappa_star),
                first_unknown: r.first_unknown,
                trials: r.trials,
                error: None,
            },
            EXIT_OK,
        ),
        Err(e @ PipelineError::NoAdmissibleKappa { .. }) => {
            (empty(MaxKappaOutcome::NoAdmissibleKappa, e.to_string()), EXIT_UNKNOWN)
        }
        Err(PipelineError::PreconditionViolated(msg)) => {
            (empty(MaxKappaOutcome::PreconditionViolated, msg), EXIT_PRECONDITION)
        }
        Err(e) => return Err(InputError(e.to_string())),
    };
    Ok((ReportBody::MaxKappa(report), code))
}

struct OracleArgs<'a> {
    grid: &'a GridArgs,
    set: &'a SetArgs,
    calib: &'a CalibArgs,
    probe: ProbeArg,
    paths: usize,
    steps: usize,
    samples: usize,
    trials: usize,
    csv_dir: Option<&'a Path>,
    seed: u64,
}

fn run_oracle(a: OracleArgs) -> CliResult<(ReportBody, u8)> {
    let c = certifier(a.grid, a.calib, a.set.order)?;
    let v0 = initial_voltage(a.set, &c.model)?;
    let u: UncertaintySet = load_uncertainty(&a.set.uncertainty)?.to_set();
    u.validate(c.model.n_pq())
        .map_err(|e| InputError(format!("{}: {e}", a.set.uncertainty.display())))?;
    let mut report = OracleReport {
        probe: match a.probe {
            ProbeArg::Paths => Probe::Paths,
            ProbeArg::Boundary => Probe::Boundary,
            ProbeArg::Uniqueness => Probe::Uniqueness,
        },
        seed: a.seed,
        attempts: 0,
        violations: vec![],
        boundary_hits: vec![],
        collisions: vec![],
        error: None,
    };
    let (cal, v_set) = match (&c.calibration, &c.v_set) {
        (Ok(cal), Some(v)) => (cal, v),
        (Err(e), _) => {
            report.error = Some(e.to_string());
            return Ok((ReportBody::Oracle(report), EXIT_UNKNOWN));
        }
        (Ok(_), None) => unreachable!("V is assembled whenever calibration succeeds"),
    };
    match a.probe {
        ProbeArg::Paths => {
            let opts = BruteForceOptions {
                n_paths: a.paths,
                n_steps: a.steps,
                seed: a.seed,
                ..BruteForceOptions::default()
            };
            report.attempts = a.paths;
            report.violations = brute_force_admissibility(&c.model, v_set, &v0, &u, &opts);
            if let Some(dir) = a.csv_dir {
                fs::create_dir_all(dir)
                    .map_err(|e| InputError(format!("cannot create {}: {e}", dir.display())))?;
                let copts = ContinuationOptions {
                    n_steps: a.steps,
                    ..ContinuationOptions::default()
                };
                for p in 0..a.paths {
                    let path = brute_force_path(&c.model, &v0, &u, &opts, p);
                    let (trace, _) = continuation_trace_partial(&c.model, &path, &v0, &copts);
                    write(&dir.join(format!("path_{p:04}.csv")), &trace_to_csv(&trace))?;
                }
            }
        }
        ProbeArg::Boundary => {
            let opts = BoundaryProbeOptions {
                n_samples: a.samples,
                seed: a.seed,
                ..BoundaryProbeOptions::default()
            };
            report.attempts = a.samples;
            report.boundary_hits = boundary_probe(&c.model, v_set, &u, &v0, &opts);
        }
        ProbeArg::Uniqueness => {
            report.attempts = a.trials;
            report.collisions = uniqueness_probe(&c.model, &cal.aux, a.trials, a.seed);
        }
    }
    Ok((ReportBody::Oracle(report), EXIT_OK))
}

fn run_loadflow(
    grid: &Path,
    injection: &Path,
    from: Option<&Path>,
    steps: usize,
    csv: Option<&Path>,
) -> CliResult<(ReportBody, u8)> {
    let model = load_grid(grid)?;
    let n = model.n_pq();
    let target = load_complex_list(injection, "injection", n)?;
    let (start_s, start_v) = match from {
        Some(p) => {
            let s = load_complex_list(p, "starting injection", n)?;
            match solve_load_flow(&model, &s, model.w(), &NewtonOptions::default()) {
                Ok(sol) => (s, sol.v),
                Err(e) => {
                    let report = LoadflowReport {
                        converged: false,
                        n_steps: steps,
                        t_last_good: None,
                        v_final: vec![],
                        min_singular_value: None,
                        error: Some(format!("no solution at the starting injection: {e}")),
                    };
                    return Ok((ReportBody::Loadflow(report), EXIT_UNKNOWN));
                }
            }
        }
        None => (DVector::zeros(n), model.w().clone()),
    };
    let opts = ContinuationOptions {
        n_steps: steps,
        ..ContinuationOptions::default()
    };
    let path = PowerPath::segment(start_s, target);
    let (trace, err) = continuation_trace_partial(&model, &path, &start_v, &opts);
    if let Some(p) = csv {
        write(p, &trace_to_csv(&trace))?;
    }
    let last = trace.last();
    let report = LoadflowReport {
        converged: err.is_none(),
        n_steps: steps,
        t_last_good: last.map(|p| p.t),
        v_final: last.map_or_else(Vec::new, |p| p.v.iter().map(|&z| z.into()).collect()),
        min_singular_value: last.map(|p| is_nonsingular(&model, &p.v, DEFAULT_SIGMA_TOL).min_singular_value),
        error: err.map(|e: LoadFlowError| e.to_string()),
    };
    let code = if report.converged { EXIT_OK } else { EXIT_UNKNOWN };
    Ok((ReportBody::Loadflow(report), code))
}

fn dispatch(cli: &Cli) -> CliResult<(ReportBody, u8)> {
    match &cli.command {
        Command::Vset { grid, calib } => run_vset(grid, calib),
        Command::Admissibility { grid, set, calib } => run_admissibility(grid, set, calib),
        Command::MaxKappa {
            grid,
            set,
            calib,
            resolution,
            kappa_min,
            kappa_max,
        } => run_max_kappa(
            grid,
            set,
            calib,
            KappaSearch {
                kappa_min: *kappa_min,
                kappa_max: *kappa_max,
                resolution: *resolution,
            },
        ),
        Command::Oracle {
            grid,
            set,
            calib,
            probe,
            paths,
            steps,
            samples,
            trials,
            csv_dir,
        } => run_oracle(OracleArgs {
            grid,
            set,
            calib,
            probe: *probe,
            paths: *paths,
            steps: *steps,
            samples: *samples,
            trials: *trials,
            csv_dir: csv_dir.as_deref(),
            seed: cli.seed,
        }),
        Command::Loadflow {
            grid,
            injection,
            from,
            steps,
            csv,
        } => run_loadflow(grid, injection, from.as_deref(), *steps, csv.as_deref()),
    }
}

fn run(cli: &Cli) -> CliResult<u8> {
    let (mut body, code) = dispatch(cli)?;
    if cli.no_timings {
        strip_timings(&mut body);
    }
    let text = Report::new(body).to_json();
    match &cli.report {
        Some(path) => write(path, &text)?,
        None => println!("{text}"),
    }
    Ok(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // usage errors share the input-error code; help and version are successes
            let code = if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let pool = match cli.parallel {
        Some(0) => {
            eprintln!("error: --parallel must be at least 1");
            return ExitCode::from(EXIT_INPUT);
        }
        Some(n) => rayon::ThreadPoolBuilder::new().num_threads(n).build(),
        None => rayon::ThreadPoolBuilder::new().build(),
    };
    let pool = match pool {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker pool: {e}");
            return ExitCode::from(EXIT_INPUT);
        }
    };
    match pool.install(|| run(&cli)) {
        Ok(code) => ExitCode::from(code),
        Err(InputError(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_INPUT)
        }
    }
}
