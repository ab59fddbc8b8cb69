//! Command-line front end for `bilevel-adapt`.
//!
//! ```text
//! bilevel-adapt solve  --problem p1 --epsilon 0.1 --variant acgm --out runs/p1
//! bilevel-adapt sweep  --problem p2 --epsilons 0.2,0.1,0.05 --variant adagn --out runs/p2
//! bilevel-adapt check  --problem p3 --suite all
//! bilevel-adapt replay --manifest runs/p1/manifest.json --out runs/p1-again
//! ```
//!
//! Exit codes: 0 success, 1 failed check, 2 bad arguments or input, 3 numeric
//! failure or truncated inner solve.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checks;
pub mod manifest;
pub mod output;

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use bilevel_adapt::driver::{self, Overrides, SolveFailure, SolveReport, SolverConfig, Variant};
use bilevel_adapt::problems::{ProblemSpec, DEFAULT_SEED};
use bilevel_adapt::{BilevelProblem, Error};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::checks::Suite;
use crate::manifest::RunManifest;
use crate::output::{summary_csv, to_json, trace_csv, SummaryRow};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_ARGUMENT: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// Overrides `--parallel` when set.
pub const THREADS_ENV: &str = "BILEVEL_ADAPT_THREADS";

#[derive(Parser, Debug)]
#[command(
    name = "bilevel-adapt",
    version,
    about = "Adaptive fully first-order bilevel solver"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one solve and write trace.csv, report.json and manifest.json.
    Solve(SolveArgs),
    /// Run one solve per epsilon and write summary.csv.
    Sweep(SweepArgs),
    /// Run gradient, PL and hypergradient checks on a problem.
    Check(CheckArgs),
    /// Rerun the solve recorded in a manifest.
    Replay(ReplayArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum VariantArg {
    Adagn,
    Acgm,
    Baseline,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum SuiteArg {
    Gradients,
    Pl,
    Hypergradient,
    All,
}

#[derive(Args, Debug, Clone)]
struct RunArgs {
    /// Built-in id (p1, p2, p3) or path to a problem JSON file.
    #[arg(long)]
    problem: String,
    #[arg(long, value_enum, default_value = "adagn")]
    variant: VariantArg,
    #[arg(long, default_value_t = 1.0)]
    a0: f64,
    #[arg(long, default_value_t = 1.0)]
    b0: f64,
    #[arg(long, default_value_t = 1.0)]
    c0: f64,
    #[arg(long, default_value_t = 2.0)]
    alpha: f64,
    #[arg(long = "L01", default_value_t = 1.0)]
    l01: f64,
    #[arg(long = "L02", default_value_t = 1.0)]
    l02: f64,
    #[arg(long)]
    out: PathBuf,
    /// Seed for generated problems.
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// Keep x_t in report.json regardless of dimension.
    #[arg(long)]
    store_x: bool,
    #[arg(long = "override-T")]
    override_t: Option<usize>,
    #[arg(long)]
    override_sigma: Option<f64>,
    #[arg(long)]
    override_eps_z: Option<f64>,
    #[arg(long)]
    override_eps_y: Option<f64>,
    /// Restart the inner AdaGrad-Norm states at every outer iteration.
    #[arg(long)]
    reset_inner_state: bool,
    #[arg(long)]
    inner_cap: Option<usize>,
    #[arg(long)]
    outer_cap: Option<usize>,
    /// Starting point, comma separated; a single value is broadcast.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    x0: Option<Vec<f64>>,
}

#[derive(Args, Debug)]
struct SolveArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    epsilon: f64,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, value_delimiter = ',', required = true)]
    epsilons: Vec<f64>,
    /// Maximum number of concurrent solves.
    #[arg(long, default_value_t = 1)]
    parallel: usize,
}

#[derive(Args, Debug)]
struct CheckArgs {
    #[arg(long)]
    problem: String,
    #[arg(long, value_enum, default_value = "all")]
    suite: SuiteArg,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
}

#[derive(Args, Debug)]
struct ReplayArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Argument(_)
        | Error::Dimension { .. }
        | Error::Format(_)
        | Error::Json(_)
        | Error::Io(_)
        | Error::Unsupported(_) => EXIT_ARGUMENT,
        Error::Numeric { .. }
        | Error::Precondition(_)
        | Error::Divergence { .. }
        | Error::Truncated { .. }
        | Error::Diagnostic(_) => EXIT_NUMERIC,
    }
}

fn status_word(err: &Error) -> &'static str {
    match err {
        Error::Truncated { .. } => "truncated",
        Error::Numeric { .. } => "numeric",
        Error::Divergence { .. } => "diverged",
        _ => "error",
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                EXIT_ARGUMENT
            } else {
                EXIT_OK
            };
        }
    };
    let result = match cli.command {
        Command::Solve(a) => cmd_solve(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Check(a) => cmd_check(a),
        Command::Replay(a) => cmd_replay(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn load_problem(arg: &str, seed: u64) -> Result<(ProblemSpec, Box<dyn BilevelProblem>), Error> {
    let spec = ProblemSpec::resolve(arg, seed)?;
    let problem = spec.instantiate()?;
    Ok((spec, problem))
}

fn build_config(
    run: &RunArgs,
    epsilon: f64,
    spec: &ProblemSpec,
    problem: &dyn BilevelProblem,
) -> Result<SolverConfig, Error> {
    let variant = match run.variant {
        VariantArg::Adagn => Variant::Adagn,
        VariantArg::Acgm => Variant::Acgm,
        VariantArg::Baseline => Variant::TunedBaseline,
    };
    let x0 = match &run.x0 {
        None => spec.default_x0()?,
        Some(v) if v.len() == 1 => vec![v[0]; problem.dim_x()],
        Some(v) => v.clone(),
    };
    let mut config = SolverConfig::new(epsilon, variant, x0, problem.dim_y())?;
    config.a0 = run.a0;
    config.b0 = run.b0;
    config.c0 = run.c0;
    config.alpha = run.alpha;
    config.l01 = run.l01;
    config.l02 = run.l02;
    config.store_x = run.store_x;
    config.reset_inner_state = run.reset_inner_state;
    if let Some(cap) = run.inner_cap {
        config.inner_cap = cap;
    }
    if let Some(cap) = run.outer_cap {
        config.outer_cap = cap;
    }
    config.overrides = Overrides {
        total_iters: run.override_t,
        eps_z: run.override_eps_z,
        eps_y: run.override_eps_y,
        sigma: run.override_sigma,
    };
    config.validate()?;
    if config.x0.dim() != problem.dim_x() {
        return Err(Error::Argument(format!(
            "--x0 has {} entries but the problem has d_x = {}",
            config.x0.dim(),
            problem.dim_x()
        )));
    }
    Ok(config)
}

#[derive(Serialize)]
struct ReportFile<'a> {
    status: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    failed_at: Option<usize>,
    best_exact_norm: Option<f64>,
    report: &'a SolveReport,
}

/// Writes the three per-run artifacts and returns the run's exit code.
fn write_run(
    dir: &Path,
    mut manifest: RunManifest,
    outcome: &Result<SolveReport, SolveFailure>,
) -> Result<i32, Error> {
    fs::create_dir_all(dir)?;
    let (report, status, error, failed_at, code) = match outcome {
        Ok(r) => (r, "ok", None, None, EXIT_OK),
        Err(f) => (
            f.partial.as_ref(),
            status_word(&f.error),
            Some(f.error.to_string()),
            Some(f.t),
            exit_code(&f.error),
        ),
    };
    manifest.wall_clock.wall_seconds = report.wall_time_seconds;
    fs::write(dir.join("trace.csv"), trace_csv(report))?;
    let file = ReportFile {
        status,
        error,
        failed_at,
        best_exact_norm: report.best_exact_norm(),
        report,
    };
    fs::write(dir.join("report.json"), to_json(&file)?)?;
    fs::write(dir.join("manifest.json"), to_json(&manifest)?)?;
    Ok(code)
}

fn announce(outcome: &Result<SolveReport, SolveFailure>, dir: &Path) {
    match outcome {
        Ok(r) => println!(
            "{}: T = {}, best hyper_norm = {:.6e} at t = {}, gradients f/g = {}/{} -> {}",
            r.problem_id,
            r.schedule.total_iters,
            r.best_hyper_norm,
            r.best_t,
            r.total_grad_f,
            r.total_grad_g,
            dir.display()
        ),
        Err(f) => eprintln!("error: {f}"),
    }
}

fn cmd_solve(args: SolveArgs) -> Result<i32, Error> {
    let (spec, problem) = load_problem(&args.run.problem, args.run.seed)?;
    let config = build_config(&args.run, args.epsilon, &spec, problem.as_ref())?;
    let manifest = RunManifest::new(args.run.seed, config.clone(), spec);
    let outcome = driver::solve(problem.as_ref(), &config);
    announce(&outcome, &args.run.out);
    write_run(&args.run.out, manifest, &outcome)
}

fn thread_count(flag: usize) -> Result<usize, Error> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|n| *n > 0)
            .ok_or_else(|| {
                Error::Argument(format!(
                    "{THREADS_ENV} must be a positive integer, got {v:?}"
                ))
            }),
        Err(_) if flag == 0 => Err(Error::Argument("--parallel must be at least 1".into())),
        Err(_) => Ok(flag),
    }
}

fn cmd_sweep(args: SweepArgs) -> Result<i32, Error> {
    let threads = thread_count(args.parallel)?;
    let (spec, problem) = load_problem(&args.run.problem, args.run.seed)?;
    let base = build_config(&args.run, args.epsilons[0], &spec, problem.as_ref())?;
    let outcomes = driver::sweep(problem.as_ref(), &base, &args.epsilons, threads)?;
    fs::create_dir_all(&args.run.out)?;
    let mut rows = Vec::with_capacity(outcomes.len());
    let mut first_failure = None;
    for (&epsilon, outcome) in args.epsilons.iter().zip(&outcomes) {
        let dir = args.run.out.join(format!("eps_{epsilon}"));
        let config = SolverConfig {
            epsilon,
            ..base.clone()
        };
        let manifest = RunManifest::new(args.run.seed, config, spec.clone());
        announce(outcome, &dir);
        let code = write_run(&dir, manifest, outcome)?;
        let row = match outcome {
            Ok(r) => SummaryRow::from_report(epsilon, r, "ok"),
            Err(f) => SummaryRow::from_report(epsilon, &f.partial, status_word(&f.error)),
        };
        if code != EXIT_OK && first_failure.is_none() {
            first_failure = Some(code);
        }
        rows.push(row);
    }
    fs::write(args.run.out.join("summary.csv"), summary_csv(&rows))?;
    let any_ok = outcomes.iter().any(Result::is_ok);
    Ok(if any_ok {
        EXIT_OK
    } else {
        first_failure.unwrap_or(EXIT_NUMERIC)
    })
}

fn cmd_check(args: CheckArgs) -> Result<i32, Error> {
    let (spec, problem) = load_problem(&args.problem, args.seed)?;
    let suite = match args.suite {
        SuiteArg::Gradients => Suite::Gradients,
        SuiteArg::Pl => Suite::Pl,
        SuiteArg::Hypergradient => Suite::Hypergradient,
        SuiteArg::All => Suite::All,
    };
    let rows = checks::run_suite(&spec, problem.as_ref(), suite, args.seed)?;
    print!("{}", checks::format_table(&rows));
    let _ = std::io::stdout().flush();
    let failed: Vec<_> = rows.iter().filter(|r| !r.passed).collect();
    for r in &failed {
        eprintln!(
            "check failed: {} = {:e}, tolerance {:e}",
            r.quantity, r.value, r.tolerance
        );
    }
    Ok(if failed.is_empty() {
        EXIT_OK
    } else {
        EXIT_CHECK_FAILED
    })
}

fn cmd_replay(args: ReplayArgs) -> Result<i32, Error> {
    let manifest = RunManifest::from_json_str(&fs::read_to_string(&args.manifest)?)?;
    let problem = manifest.problem.instantiate()?;
    let outcome = driver::solve(problem.as_ref(), &manifest.config);
    announce(&outcome, &args.out);
    let fresh = RunManifest::new(
        manifest.seed,
        manifest.config.clone(),
        manifest.problem.clone(),
    );
    write_run(&args.out, fresh, &outcome)
}
