//! `qsg`: solve, generate, run experiments, verify.
//!
//! Exit codes: 0 success, 1 other failure (including failed verify suites),
//! 2 usage, 3 bad input file, 4 infeasible, 5 solver timeout,
//! 6 configuration, 7 instance too large for the method.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use qsg_core::experiment::{run_experiment, write_outputs, ExperimentConfig, ExperimentKind};
use qsg_core::milp::{build_pwla, solver_from_env, DEFAULT_PIECES};
use qsg_core::model::{instance_to_string, Overrides};
use qsg_core::search::{DEFAULT_EPSILON, DEFAULT_XI};
use qsg_core::verify::{run_suites, scoreboard, Level, VerifyOptions};
use qsg_core::{generate_instance, read_instance, solve, HybridOptions, Method, QsgError};

#[derive(Parser)]
#[command(name = "qsg", version, about = "Center selection and security allocation against a quantal-response attacker")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one instance file and print the report as JSON.
    Solve(SolveArgs),
    /// Write a random instance file.
    Generate(GenerateArgs),
    /// Run an experiment suite and write CSV files.
    Experiment(ExperimentArgs),
    /// Run the self-check suites.
    Verify(VerifyArgs),
    /// Export the piecewise-linear MILP at one threshold in LP format.
    ExportLp(ExportArgs),
}

#[derive(Args)]
struct Tolerances {
    /// Bisection tolerance in utility units.
    #[arg(long, default_value_t = DEFAULT_EPSILON)]
    epsilon: f64,
    /// Inner dual-gap tolerance; at most epsilon / 100.
    #[arg(long, default_value_t = DEFAULT_XI)]
    xi: f64,
    /// External MILP solver command; defaults to $QSG_MILP_SOLVER.
    #[arg(long)]
    solver_cmd: Option<String>,
    /// External solver time limit in seconds.
    #[arg(long, default_value_t = 600.0)]
    timeout: f64,
}

#[derive(Args)]
struct SolveArgs {
    instance: PathBuf,
    #[arg(long, default_value = "hybrid")]
    method: Method,
    #[command(flatten)]
    tol: Tolerances,
    /// Pieces per center in the piecewise-linear model.
    #[arg(long, default_value_t = DEFAULT_PIECES)]
    pieces: usize,
    /// Run the hybrid's exact leg even when the heuristic is certified.
    #[arg(long)]
    force_exact: bool,
    /// Also write the report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateArgs {
    /// Number of centers.
    #[arg(long, short)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Parameter override `key=value` (lambda, m, C, N_P, L, beta); repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExperimentArgs {
    /// pwla_convergence, expected_reward, scalability or fairness.
    kind: Option<ExperimentKind>,
    /// TOML configuration; command-line flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    sizes: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    budgets: Vec<f64>,
    #[arg(long)]
    repetitions: Option<usize>,
    /// Seed of the first run; run i uses seed + i.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    methods: Vec<Method>,
    #[arg(long, value_delimiter = ',')]
    pieces: Vec<usize>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    xi: Option<f64>,
    #[arg(long)]
    solver_cmd: Option<String>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value = "fast")]
    level: Level,
}

#[derive(Args)]
struct ExportArgs {
    instance: PathBuf,
    /// Utility threshold of the parametric problem.
    #[arg(long, allow_hyphen_values = true)]
    delta0: f64,
    #[arg(long, default_value_t = DEFAULT_PIECES)]
    pieces: usize,
    #[arg(long)]
    out: PathBuf,
}

fn exit_code(e: &QsgError) -> u8 {
    match e.root_cause() {
        QsgError::Parse { .. }
        | QsgError::Validation(_)
        | QsgError::InvalidSize(_)
        | QsgError::InvalidIndex { .. }
        | QsgError::Io(_) => 3,
        QsgError::Infeasible(_) => 4,
        QsgError::Timeout { .. } => 5,
        QsgError::Config(_) => 6,
        QsgError::SizeLimit { .. } => 7,
        _ => 1,
    }
}

fn timeout(seconds: f64) -> Result<Duration, QsgError> {
    Duration::try_from_secs_f64(seconds)
        .map_err(|_| QsgError::Config(format!("timeout must be a nonnegative number of seconds, got {seconds}")))
}

fn cmd_solve(a: SolveArgs) -> Result<(), QsgError> {
    let instance = read_instance(&a.instance)?;
    let opts = HybridOptions {
        epsilon: a.tol.epsilon,
        xi: a.tol.xi,
        pieces: a.pieces,
        solver_command: a.tol.solver_cmd.or_else(solver_from_env),
        solver_timeout: timeout(a.tol.timeout)?,
        force_exact_leg: a.force_exact,
        ..Default::default()
    };
    let report = solve(&instance, a.method, &opts)?;
    let text = serde_json::to_string_pretty(&report).expect("reports serialize");
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    if let Some(path) = a.out {
        fs::write(path, &text)?;
    }
    println!("{text}");
    Ok(())
}

fn cmd_generate(a: GenerateArgs) -> Result<(), QsgError> {
    let overrides = Overrides::from_pairs(a.set.iter().map(String::as_str))?;
    let instance = generate_instance(a.seed, a.n, &overrides)?;
    let text = instance_to_string(&instance);
    match a.out {
        Some(path) => fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_experiment(a: ExperimentArgs) -> Result<(), QsgError> {
    let mut cfg = match (&a.config, a.kind) {
        (Some(path), kind) => {
            let mut c = ExperimentConfig::from_toml_file(path)?;
            if let Some(k) = kind {
                c.experiment = k;
            }
            c
        }
        (None, Some(k)) => ExperimentConfig::new(k, PathBuf::from(format!("results/{k}"))),
        (None, None) => return Err(QsgError::Config("name an experiment or pass --config".into())),
    };
    if !a.sizes.is_empty() {
        cfg.sizes = a.sizes;
    }
    if !a.budgets.is_empty() {
        cfg.budgets = a.budgets;
    }
    if !a.methods.is_empty() {
        cfg.methods = a.methods;
    }
    if !a.pieces.is_empty() {
        cfg.pieces = a.pieces;
    }
    if !a.set.is_empty() {
        cfg.overrides = Overrides::from_pairs(a.set.iter().map(String::as_str))?;
    }
    cfg.repetitions = a.repetitions.unwrap_or(cfg.repetitions);
    cfg.seed_base = a.seed.unwrap_or(cfg.seed_base);
    cfg.epsilon = a.epsilon.unwrap_or(cfg.epsilon);
    cfg.xi = a.xi.unwrap_or(cfg.xi);
    cfg.solver_command = a.solver_cmd.or(cfg.solver_command).or_else(solver_from_env);
    if let Some(out) = a.out {
        cfg.output_dir = out;
    }
    let cfg = cfg.resolved()?;
    let output = run_experiment(&cfg)?;
    let failures = output.records.iter().filter(|r| r.error.is_some()).count();
    for path in write_outputs(&cfg, &output)? {
        println!("wrote {}", path.display());
    }
    if failures > 0 {
        eprintln!("warning: {failures} of {} solves failed; see the error column", output.records.len());
    }
    Ok(())
}

fn cmd_export(a: ExportArgs) -> Result<(), QsgError> {
    let instance = read_instance(&a.instance)?;
    build_pwla(&instance, a.delta0, a.pieces)?.export_lp(&a.out)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Solve(a) => cmd_solve(a),
        Command::Generate(a) => cmd_generate(a),
        Command::Experiment(a) => cmd_experiment(a),
        Command::ExportLp(a) => cmd_export(a),
        Command::Verify(a) => {
            let results = run_suites(&VerifyOptions::new(a.level));
            print!("{}", scoreboard(&results));
            if results.iter().all(|r| r.passed) {
                return ExitCode::SUCCESS;
            }
            return ExitCode::from(1);
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
