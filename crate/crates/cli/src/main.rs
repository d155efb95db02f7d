use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ripm_core::{PathMode, SketchMode, SolveStatus};
use ripm_cli::run::{self, CliError, GenKind, GenSpec, RunConfig};

#[derive(Parser)]
#[command(name = "ripm", version, about = "Robust interior point solver for block-structured linear programs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one instance file.
    Solve {
        instance: PathBuf,
        /// Where to write the solution JSON (stdout when omitted).
        #[arg(short, long)]
        out: Option<PathBuf>,
        /// Diagnostics snapshot written on numerical breakdown.
        #[arg(long)]
        snapshot: Option<PathBuf>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Solve every instance in a directory and print a CSV summary.
    Bench {
        dir: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Generate instance files.
    Gen {
        #[arg(value_parser = clap::value_parser!(GenKind))]
        kind: GenKind,
        /// Variable count for LPs, feature count for regressions; repeat for several files.
        #[arg(short = 'n', long = "size", required = true, num_args = 1..)]
        sizes: Vec<usize>,
        /// Equality rows (LPs) or data terms (regressions).
        #[arg(long)]
        secondary: Option<usize>,
        #[arg(long, default_value_t = 0.5)]
        theta: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(short, long, default_value = ".")]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Practical,
    Paper,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, default_value_t = 1e-3)]
    delta: f64,
    #[arg(long, value_enum, default_value_t = ModeArg::Practical)]
    mode: ModeArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Sketch rows, `identity` or `auto`.
    #[arg(long, default_value = "auto", value_parser = run::parse_sketch)]
    sketch: SketchMode,
    #[arg(long, default_value_t = 0.31)]
    batch_exp: f64,
    #[arg(long)]
    eps_mp: Option<f64>,
    #[arg(long)]
    max_iters: Option<u64>,
    /// Per-iteration CSV log.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    log_every: u64,
    /// Write 0 for wall_ms in the log.
    #[arg(long)]
    deterministic_log: bool,
    /// Compare against vertex enumeration when the instance is small enough.
    #[arg(long)]
    check_oracle: bool,
}

impl From<RunArgs> for RunConfig {
    fn from(a: RunArgs) -> Self {
        Self {
            delta: a.delta,
            mode: match a.mode {
                ModeArg::Practical => PathMode::Practical,
                ModeArg::Paper => PathMode::Paper,
            },
            seed: a.seed,
            sketch: a.sketch,
            batch_exp: a.batch_exp,
            eps_mp: a.eps_mp,
            max_iters: a.max_iters,
            log: a.log,
            log_every: a.log_every,
            deterministic_log: a.deterministic_log,
            check_oracle: a.check_oracle,
        }
    }
}

/// Prints a line, treating a closed stdout as success.
fn emit(line: &str) {
    let mut out = io::stdout().lock();
    if let Err(e) = writeln!(out, "{line}") {
        if e.kind() != io::ErrorKind::BrokenPipe {
            eprintln!("error: cannot write to stdout: {e}");
        }
    }
}

fn execute(cli: Cli) -> Result<ExitCode, CliError> {
    match cli.command {
        Command::Solve { instance, out, snapshot, run } => {
            let cfg = RunConfig::from(run);
            cfg.validate()?;
            let inst = run::read_instance(&instance)?;
            let snapshot = snapshot.unwrap_or_else(|| instance.with_extension("breakdown.json"));
            let summary = run::solve_instance(&inst, &cfg, Some(&snapshot))?;
            match out {
                Some(path) => run::write_json(&path, &summary.report)?,
                None => emit(&serde_json::to_string_pretty(&summary.report).expect("report serializes")),
            }
            Ok(match summary.report.status {
                SolveStatus::Converged => ExitCode::SUCCESS,
                SolveStatus::Uncertified => {
                    log::warn!("finished without a valid gap certificate");
                    ExitCode::from(1)
                }
            })
        }
        Command::Bench { dir, run } => {
            let cfg = RunConfig::from(run);
            cfg.validate()?;
            run::bench_suite(&dir, &cfg, io::stdout().lock())?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Gen { kind, sizes, secondary, theta, seed, out } => {
            let specs: Vec<GenSpec> = sizes.into_iter().map(|size| GenSpec { kind, size, secondary, theta, seed }).collect();
            for path in run::generate_files(&specs, &out)? {
                emit(&path.display().to_string());
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("RIPM_LOG_LEVEL", "warn")).init();
    match execute(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
