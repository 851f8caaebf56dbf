//! `cgqn`: generate quadratic programs, race CG against quasi-Newton
//! schemes, and run the randomized verification batteries.

mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use cgqn_core::cg::cg_run;
use cgqn_core::lab::{build_report, DEFAULT_REL_TOL};
use cgqn_core::problem::{random_spd_problem, QuadraticProblem, SpectrumSpec};
use cgqn_core::qn::{qn_run, AlphaPair, Schedule, UpdateScheme, WStrategy};
use cgqn_core::verify::{property_names, run_suite, VerifyConfig};
use cgqn_core::Error;

use output::{report_csv, to_json_bytes, write_atomic};

const EXIT_NOT_PARALLEL: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_BREAKDOWN: u8 = 3;

#[derive(Parser)]
#[command(
    name = "cgqn",
    version,
    about = "CG / quasi-Newton search-direction parallelism harness"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a random SPD problem (or the 2x2 fixture) to problem.json.
    Generate {
        #[command(flatten)]
        spectrum: SpectrumArgs,
        /// Emit a named fixture instead of a random instance.
        #[arg(long, value_enum, conflicts_with_all = ["n", "eigs", "cond"])]
        fixture: Option<Fixture>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Run CG and a quasi-Newton scheme side by side and compare directions.
    Race(RaceArgs),
    /// Run the randomized property batteries.
    Verify {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Restrict random instances to this dimension.
        #[arg(long)]
        n: Option<usize>,
        /// Run a single property.
        #[arg(long)]
        property: Option<String>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct SpectrumArgs {
    #[arg(long)]
    n: Option<usize>,
    /// Comma-separated eigenvalues.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    eigs: Option<Vec<f64>>,
    /// Condition number of a log-spaced spectrum on [1, cond].
    #[arg(long)]
    cond: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Fixture {
    /// H = diag(2,4), c = (-2,-4), x0 = 0.
    Qpa,
}

#[derive(Clone, Copy, ValueEnum)]
enum SchemeName {
    Broyden,
    Sr1,
    Rank1,
    Delta1,
    WIdentity,
    WPrev,
}

#[derive(Args)]
struct RaceArgs {
    /// Problem file written by `generate`.
    #[arg(long, conflicts_with_all = ["n", "eigs", "cond"])]
    problem: Option<PathBuf>,
    #[command(flatten)]
    spectrum: SpectrumArgs,
    #[arg(long, value_enum)]
    scheme: SchemeName,
    /// Broyden parameters per iteration; the last one repeats.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    phi: Option<Vec<f64>>,
    /// Rank-one parameter pairs `alpha_prev:alpha` per iteration.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    alphas: Option<Vec<String>>,
    /// Target scalings delta per iteration.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    delta: Option<Vec<f64>>,
    #[arg(long, default_value_t = 1e-10)]
    tol: f64,
    /// Defaults to n + 5.
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

/// Failure with an exit code.
#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Usage(e.to_string())
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CGQN_LOG", "error")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate {
            spectrum,
            fixture,
            out,
        } => cmd_generate(&spectrum, fixture, &out),
        Command::Race(args) => cmd_race(&args),
        Command::Verify {
            trials,
            seed,
            n,
            property,
            out,
        } => cmd_verify(
            VerifyConfig {
                trials,
                seed,
                n,
                property,
            },
            &out,
        ),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_USAGE)
        }
    }
}

fn build_problem(args: &SpectrumArgs) -> Result<(QuadraticProblem, SpectrumSpec), CliError> {
    let spec = match (&args.eigs, args.cond) {
        (Some(_), Some(_)) => return Err(usage("--eigs and --cond are mutually exclusive")),
        (Some(eigs), None) => {
            if let Some(n) = args.n {
                if n != eigs.len() {
                    return Err(usage(format!(
                        "--n {n} does not match {} eigenvalues",
                        eigs.len()
                    )));
                }
            }
            SpectrumSpec::new(eigs.clone(), args.seed)?
        }
        (None, Some(cond)) => {
            let n = args.n.ok_or_else(|| usage("--cond requires --n"))?;
            SpectrumSpec::log_spaced(n, cond, args.seed)?
        }
        (None, None) => return Err(usage("give --eigs, or --n with --cond")),
    };
    Ok((random_spd_problem(&spec), spec))
}

fn cmd_generate(args: &SpectrumArgs, fixture: Option<Fixture>, out: &Path) -> Result<u8, CliError> {
    let (qp, cond, seed) = match fixture {
        Some(Fixture::Qpa) => (QuadraticProblem::qp_a(), 2.0, None),
        None => {
            let (qp, spec) = build_problem(args)?;
            (qp, spec.condition_number(), Some(spec.seed()))
        }
    };
    let path = write_atomic(out, "problem.json", qp.to_json()?.as_bytes())?;
    match seed {
        Some(seed) => println!("n = {}, cond = {cond}, seed = {seed}", qp.n()),
        None => println!("n = {}, cond = {cond}, fixture", qp.n()),
    }
    println!("wrote {}", path.display());
    Ok(0)
}

fn parse_alpha(text: &str) -> Result<AlphaPair, CliError> {
    let (a, b) = text
        .split_once(':')
        .ok_or_else(|| usage(format!("alpha pair '{text}' must look like a:b")))?;
    let parse = |s: &str| {
        s.trim()
            .parse::<f64>()
            .map_err(|_| usage(format!("bad number '{s}' in alpha pair '{text}'")))
    };
    Ok(AlphaPair::new(parse(a)?, parse(b)?)?)
}

fn schedule<T: Copy>(values: Option<Vec<T>>, flag: &str) -> Result<Schedule<T>, CliError> {
    values
        .and_then(Schedule::from_values)
        .ok_or_else(|| usage(format!("{flag} needs at least one value")))
}

fn build_scheme(args: &RaceArgs) -> Result<UpdateScheme, CliError> {
    let scheme = match args.scheme {
        SchemeName::Broyden => UpdateScheme::broyden(schedule(
            Some(args.phi.clone().unwrap_or(vec![0.0])),
            "--phi",
        )?)?,
        SchemeName::Sr1 => UpdateScheme::Sr1Secant,
        SchemeName::Rank1 => {
            let pairs = args
                .alphas
                .as_ref()
                .ok_or_else(|| usage("--scheme rank1 requires --alphas"))?
                .iter()
                .map(|s| parse_alpha(s))
                .collect::<Result<Vec<_>, _>>()?;
            UpdateScheme::general_rank_one(schedule(Some(pairs), "--alphas")?)?
        }
        SchemeName::Delta1 => {
            let deltas = args
                .delta
                .clone()
                .ok_or_else(|| usage("--scheme delta1 requires --delta"))?;
            UpdateScheme::rank_one_for_delta(schedule(Some(deltas), "--delta")?)?
        }
        SchemeName::WIdentity => UpdateScheme::WBased(WStrategy::Identity),
        SchemeName::WPrev => UpdateScheme::WBased(WStrategy::PreviousB),
    };
    let stray = |set: bool, flag: &str| -> Result<(), CliError> {
        if set {
            Err(usage(format!(
                "{flag} does not apply to --scheme {}",
                scheme.name()
            )))
        } else {
            Ok(())
        }
    };
    stray(
        args.phi.is_some() && !matches!(args.scheme, SchemeName::Broyden),
        "--phi",
    )?;
    stray(
        args.alphas.is_some() && !matches!(args.scheme, SchemeName::Rank1),
        "--alphas",
    )?;
    stray(
        args.delta.is_some() && !matches!(args.scheme, SchemeName::Delta1),
        "--delta",
    )?;
    Ok(scheme)
}

#[derive(Serialize)]
struct RaceSummary {
    scheme: &'static str,
    n: usize,
    tol: f64,
    verdict_tol: f64,
    r_cg: usize,
    r_qn: usize,
    cg_converged: bool,
    qn_converged: bool,
    truncated: bool,
    max_angle_residual: f64,
    max_w_residual: f64,
    max_u_residual: f64,
    max_assumption_residual: f64,
    max_delta_error: f64,
    breakdown: Option<String>,
    verdict: &'static str,
}

fn cmd_race(args: &RaceArgs) -> Result<u8, CliError> {
    if args.tol.is_nan() || args.tol <= 0.0 {
        return Err(usage("--tol must be positive"));
    }
    let scheme = build_scheme(args)?;
    let qp = match &args.problem {
        Some(path) => QuadraticProblem::load(path)?,
        None => {
            let (qp, _) = build_problem(&args.spectrum)?;
            write_atomic(&args.out, "problem.json", qp.to_json()?.as_bytes())?;
            qp
        }
    };
    let max_iter = args
        .max_iter
        .unwrap_or(qp.n() + cgqn_core::cg::TERMINATION_SLACK);
    log::info!(
        "race: scheme {}, n = {}, tol = {}, max_iter = {max_iter}",
        scheme.name(),
        qp.n(),
        args.tol
    );

    let cg = cg_run(&qp, args.tol, max_iter)?;
    let qn = qn_run(&qp, &scheme, args.tol, max_iter);
    let report = build_report(&cg, &qn, &scheme);
    let parallel = report.is_parallel(DEFAULT_REL_TOL);
    let verdict = match (&qn.abort, parallel) {
        (Some(_), _) => "BREAKDOWN",
        (None, true) => "PARALLEL",
        (None, false) => "NOT_PARALLEL",
    };
    let summary = RaceSummary {
        scheme: scheme.name(),
        n: qp.n(),
        tol: args.tol,
        verdict_tol: DEFAULT_REL_TOL,
        r_cg: report.r_cg,
        r_qn: report.r_qn,
        cg_converged: cg.converged,
        qn_converged: qn.trace.converged,
        truncated: report.truncated,
        max_angle_residual: report.max_angle(),
        max_w_residual: report.max_w_residual(),
        max_u_residual: report.max_u_residual(),
        max_assumption_residual: report.max_assumption_residual(),
        max_delta_error: report.max_delta_error(),
        breakdown: qn.abort.as_ref().map(|e| e.to_string()),
        verdict,
    };
    write_atomic(&args.out, "race.csv", report_csv(&report).as_bytes())?;
    write_atomic(&args.out, "race.json", &to_json_bytes(&summary))?;

    println!(
        "{verdict}: scheme {}, r_cg = {}, r_qn = {}, max angle {:.3e}, max delta error {:.3e}",
        summary.scheme,
        summary.r_cg,
        summary.r_qn,
        summary.max_angle_residual,
        summary.max_delta_error
    );
    if let Some(e) = &qn.abort {
        eprintln!("breakdown at k = {}: {e}", qn.b.len());
        return Ok(EXIT_BREAKDOWN);
    }
    Ok(if parallel && scheme.claims_parallelism() {
        0
    } else {
        EXIT_NOT_PARALLEL
    })
}

fn cmd_verify(cfg: VerifyConfig, out: &Path) -> Result<u8, CliError> {
    if let Some(name) = &cfg.property {
        if !property_names().contains(&name.as_str()) {
            return Err(usage(format!(
                "unknown property '{name}'; known: {}",
                property_names().join(", ")
            )));
        }
    }
    let report = run_suite(&cfg)?;
    let path = write_atomic(out, "verify.json", &to_json_bytes(&report))?;
    for p in &report.properties {
        let status = match (p.ran, p.passed) {
            (false, _) => "SKIP",
            (true, true) => "PASS",
            (true, false) => "FAIL",
        };
        println!(
            "{status} {:<20} samples {:>5}  failures {:>3}  breakdowns {:>3}  max residual {:.3e}",
            p.name, p.samples, p.failures, p.breakdowns, p.max_residual
        );
    }
    println!("wrote {}", path.display());
    Ok(if report.passed { 0 } else { EXIT_NOT_PARALLEL })
}
