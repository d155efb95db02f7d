//! Solve, bench and gen drivers shared by the binary and the tests.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Serialize;

use ripm_core::generate::{l1_regression, quantile_regression, random_lp};
use ripm_core::oracle::{vertex_lp_solve, OracleError};
use ripm_core::rcp::PhaseTimes;
use ripm_core::{
    solve_with_observer, IterationRecord, MaintenanceConfig, MaintenanceCounters, PathMode, RcpError, SketchMode,
    SolveError, SolveStatus, SolverConfig,
};

use crate::format::{ErmFile, FormatError, Instance, InstanceFile, Metadata, SolutionReport, StandardFile};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: io::Error },
    #[error("cannot write {path}: {source}")]
    Write { path: PathBuf, source: io::Error },
    #[error("{path}: {source}")]
    Format { path: PathBuf, source: FormatError },
    #[error("invalid run configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl CliError {
    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Read { .. } | Self::Format { .. } | Self::Config(_) => 2,
            Self::Solve(SolveError::Validation(_) | SolveError::Problem(_)) => 2,
            Self::Solve(SolveError::Path(RcpError::NumericalBreakdown { .. } | RcpError::Cpm(_) | RcpError::Barrier { .. })) => 3,
            _ => 1,
        }
    }
}

/// Solver flags shared by `solve` and `bench`.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub delta: f64,
    pub mode: PathMode,
    pub seed: u64,
    pub sketch: SketchMode,
    pub batch_exp: f64,
    pub eps_mp: Option<f64>,
    pub max_iters: Option<u64>,
    pub log: Option<PathBuf>,
    /// Write only every k-th iteration to the log (the last one is always written).
    pub log_every: u64,
    /// Write `wall_ms` as 0 so that logs of identical runs compare equal.
    pub deterministic_log: bool,
    pub check_oracle: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            delta: 1e-3,
            mode: PathMode::Practical,
            seed: 0,
            sketch: SketchMode::Auto,
            batch_exp: 0.31,
            eps_mp: None,
            max_iters: None,
            log: None,
            log_every: 1,
            deterministic_log: false,
            check_oracle: false,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(CliError::Config(format!("delta {} not in (0,1)", self.delta)));
        }
        if !(self.batch_exp > 0.0 && self.batch_exp < 1.0) {
            return Err(CliError::Config(format!("batch exponent {} not in (0,1)", self.batch_exp)));
        }
        if matches!(self.sketch, SketchMode::Rows(0)) {
            return Err(CliError::Config("sketch rows must be at least 1".into()));
        }
        if let Some(e) = self.eps_mp {
            if !(e > 0.0 && e < 0.25) {
                return Err(CliError::Config(format!("eps_mp {e} not in (0, 1/4)")));
            }
        }
        if self.log_every == 0 {
            return Err(CliError::Config("log interval must be at least 1".into()));
        }
        Ok(())
    }

    pub fn solver_config(&self) -> SolverConfig {
        SolverConfig {
            mode: self.mode,
            delta: self.delta,
            max_iters: self.max_iters,
            maintenance: MaintenanceConfig {
                eps_mp: self.eps_mp,
                batch_exp: self.batch_exp,
                sketch: self.sketch,
                seed: self.seed,
                ..MaintenanceConfig::default()
            },
            ..SolverConfig::default()
        }
    }
}

/// Parses `--sketch`: a row count or `identity`.
pub fn parse_sketch(s: &str) -> Result<SketchMode, String> {
    match s {
        "identity" => Ok(SketchMode::Identity),
        "auto" => Ok(SketchMode::Auto),
        _ => match s.parse::<usize>() {
            Ok(0) | Err(_) => Err(format!("expected a positive row count, `identity` or `auto`, got `{s}`")),
            Ok(b) => Ok(SketchMode::Rows(b)),
        },
    }
}

pub fn read_instance(path: &Path) -> Result<Instance, CliError> {
    let text = fs::read_to_string(path).map_err(|source| CliError::Read { path: path.to_path_buf(), source })?;
    InstanceFile::parse(&text)
        .and_then(InstanceFile::into_instance)
        .map_err(|source| CliError::Format { path: path.to_path_buf(), source })
}

pub const LOG_COLUMNS: [&str; 9] = ["iter", "t", "log_phi", "max_gamma", "h_norm", "update_branch", "r", "rebuilds", "wall_ms"];

/// Append-only CSV iteration log, flushed after every row.
pub struct IterationLog {
    writer: csv::Writer<BufWriter<File>>,
    every: u64,
    deterministic: bool,
}

impl IterationLog {
    pub fn create(path: &Path, every: u64, deterministic: bool) -> Result<Self, CliError> {
        let file = File::create(path).map_err(|source| CliError::Write { path: path.to_path_buf(), source })?;
        let mut writer = csv::Writer::from_writer(BufWriter::new(file));
        writer.write_record(LOG_COLUMNS)?;
        writer.flush().map_err(|source| CliError::Write { path: path.to_path_buf(), source })?;
        Ok(Self { writer, every, deterministic })
    }

    pub fn record(&mut self, r: &IterationRecord, last: bool) -> io::Result<()> {
        if !last && !r.iter.is_multiple_of(self.every) {
            return Ok(());
        }
        let wall = if self.deterministic { 0.0 } else { r.wall_ms };
        self.writer.write_record([
            r.iter.to_string(),
            format!("{:e}", r.t),
            format!("{:e}", r.log_phi),
            format!("{:e}", r.max_gamma),
            format!("{:e}", r.h_norm),
            r.update_branch.as_str().to_string(),
            r.r.to_string(),
            r.rebuilds.to_string(),
            format!("{wall:.3}"),
        ])?;
        self.writer.flush()
    }
}

/// Written when the path loop breaks down.
#[derive(Debug, Serialize)]
struct BreakdownSnapshot<'a> {
    error: String,
    last_iteration: Option<SnapshotRecord>,
    counters: Option<CountersSnapshot>,
    delta: f64,
    mode: PathMode,
    seed: u64,
    instance: Option<&'a str>,
}

#[derive(Debug, Serialize)]
struct SnapshotRecord {
    iter: u64,
    t: f64,
    log_phi: f64,
    max_gamma: f64,
    h_norm: f64,
    update_branch: &'static str,
    r: usize,
    lazy_blocks: usize,
    rebuilds: u64,
}

#[derive(Debug, Serialize)]
struct CountersSnapshot {
    partial_updates: u64,
    full_updates: u64,
    rebuilds: u64,
    moves: u64,
}

impl From<MaintenanceCounters> for CountersSnapshot {
    fn from(c: MaintenanceCounters) -> Self {
        Self { partial_updates: c.partial_updates, full_updates: c.full_updates, rebuilds: c.rebuilds, moves: c.moves }
    }
}

/// Everything one solve produced.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub report: SolutionReport,
    pub n: usize,
    pub d: usize,
    pub m: usize,
    pub counters: MaintenanceCounters,
    pub phases: PhaseTimes,
    pub wall: Duration,
}

/// Solves one instance, streaming the iteration log and writing a breakdown snapshot to
/// `snapshot` on numerical failure.
pub fn solve_instance(instance: &Instance, cfg: &RunConfig, snapshot: Option<&Path>) -> Result<RunSummary, CliError> {
    cfg.validate()?;
    let solver = cfg.solver_config();
    let mut log = match &cfg.log {
        Some(p) => Some((IterationLog::create(p, cfg.log_every, cfg.deterministic_log)?, p.clone())),
        None => None,
    };
    let total = solver
        .path_params(instance.problem.structure.m() + 1, instance.problem.nu() + 1.0)
        .map(|p| p.iteration_count())
        .unwrap_or(u64::MAX);
    log::info!(
        "run: mode {:?}, delta {}, seed {}, sketch {:?}, batch exponent {}, eps_mp {:?}, {} iterations scheduled",
        cfg.mode,
        cfg.delta,
        cfg.seed,
        cfg.sketch,
        cfg.batch_exp,
        cfg.eps_mp,
        total
    );
    let mut last: Option<IterationRecord> = None;
    let mut counters = None;
    let mut log_error: Option<CliError> = None;
    let mut bank_logged = false;
    let outcome = solve_with_observer(&instance.problem, &solver, &mut |rec, state| {
        if !bank_logged {
            let bank = state.bank();
            log::info!("sketch bank: b = {}, count = {}, seed = {}, identity = {}", bank.b(), bank.count(), bank.seed(), bank.is_identity());
            bank_logged = true;
        }
        if let Some((w, path)) = log.as_mut() {
            if log_error.is_none() {
                if let Err(source) = w.record(rec, rec.iter + 1 == total) {
                    log_error = Some(CliError::Write { path: path.clone(), source });
                }
            }
        }
        last = Some(rec.clone());
        counters = Some(state.counters());
    });
    if let Some(e) = log_error {
        return Err(e);
    }
    let outcome = match outcome {
        Ok(o) => o,
        Err(e) => {
            let err = CliError::Solve(e);
            if err.exit_code() == 3 {
                if let Some(path) = snapshot {
                    write_snapshot(path, &err, last.as_ref(), counters, cfg, instance.name())?;
                }
            }
            return Err(err);
        }
    };
    let mut report = SolutionReport::new(&outcome.solution, instance);
    if outcome.potential_violations > 0 {
        log::warn!("potential bound exceeded on {} iterations", outcome.potential_violations);
    }
    if cfg.check_oracle {
        report.oracle_objective = oracle_check(instance, &report);
    }
    Ok(RunSummary {
        report,
        n: instance.problem.n(),
        d: instance.problem.d(),
        m: instance.problem.structure.m(),
        counters: outcome.counters,
        phases: outcome.phases,
        wall: outcome.wall,
    })
}

fn write_snapshot(
    path: &Path,
    err: &CliError,
    last: Option<&IterationRecord>,
    counters: Option<MaintenanceCounters>,
    cfg: &RunConfig,
    name: Option<&str>,
) -> Result<(), CliError> {
    let snap = BreakdownSnapshot {
        error: err.to_string(),
        last_iteration: last.map(|r| SnapshotRecord {
            iter: r.iter,
            t: r.t,
            log_phi: r.log_phi,
            max_gamma: r.max_gamma,
            h_norm: r.h_norm,
            update_branch: r.update_branch.as_str(),
            r: r.r,
            lazy_blocks: r.lazy_blocks,
            rebuilds: r.rebuilds,
        }),
        counters: counters.map(Into::into),
        delta: cfg.delta,
        mode: cfg.mode,
        seed: cfg.seed,
        instance: name,
    };
    let text = serde_json::to_string_pretty(&snap).expect("snapshot serializes");
    fs::write(path, text).map_err(|source| CliError::Write { path: path.to_path_buf(), source })
}

/// Vertex-enumeration optimum, when the instance is small and every block is an interval.
fn oracle_check(instance: &Instance, report: &SolutionReport) -> Option<f64> {
    let Some(bounds) = instance.oracle_bounds() else {
        log::warn!("oracle check skipped: some block is not an interval");
        return None;
    };
    let p = &instance.problem;
    match vertex_lp_solve(&p.a, &p.b, &p.c, &bounds) {
        Ok(v) => {
            let excess = report.objective - v.objective;
            if excess > report.excess_bound {
                log::warn!("objective exceeds the oracle optimum by {excess:e}, above the bound {:e}", report.excess_bound);
            } else {
                log::info!("oracle optimum {} (excess {excess:e}, {} bases)", v.objective, v.bases_checked);
            }
            Some(v.objective)
        }
        Err(e @ (OracleError::BudgetExceeded { .. } | OracleError::InvalidInput(_))) => {
            log::warn!("oracle check skipped: {e}");
            None
        }
        Err(e) => {
            log::warn!("oracle failed: {e}");
            None
        }
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    fs::write(path, text).map_err(|source| CliError::Write { path: path.to_path_buf(), source })
}

#[derive(Debug, Serialize)]
struct BenchRow {
    instance: String,
    n: Option<usize>,
    d: Option<usize>,
    m: Option<usize>,
    iterations: Option<u64>,
    rebuilds: Option<u64>,
    total_wall_ms: Option<f64>,
    update_ms: Option<f64>,
    multiply_ms: Option<f64>,
    step_ms: Option<f64>,
    final_gap: Option<f64>,
    status: String,
}

/// Instance files (`*.json`) in `dir`, sorted by name.
pub fn suite_files(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let entries = fs::read_dir(dir).map_err(|source| CliError::Read { path: dir.to_path_buf(), source })?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    Ok(files)
}

/// Solves every instance in `dir` in name order and writes one CSV row each.
pub fn bench_suite<W: Write>(dir: &Path, cfg: &RunConfig, out: W) -> Result<usize, CliError> {
    let mut csv = csv::Writer::from_writer(out);
    let files = suite_files(dir)?;
    let ms = |d: Duration| d.as_secs_f64() * 1e3;
    let mut written = 0;
    for path in &files {
        let label = path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned());
        let row = match read_instance(path).and_then(|inst| solve_instance(&inst, &RunConfig { log: None, ..cfg.clone() }, None)) {
            Ok(run) => BenchRow {
                instance: label,
                n: Some(run.n),
                d: Some(run.d),
                m: Some(run.m),
                iterations: Some(run.report.iterations),
                rebuilds: Some(run.counters.rebuilds + run.counters.moves),
                total_wall_ms: Some(ms(run.wall)),
                update_ms: Some(ms(run.phases.update)),
                multiply_ms: Some(ms(run.phases.multiply)),
                step_ms: Some(ms(run.phases.step)),
                final_gap: Some(run.report.gap_bound),
                status: match run.report.status {
                    SolveStatus::Converged => "converged".into(),
                    SolveStatus::Uncertified => "uncertified".into(),
                },
            },
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                BenchRow {
                    instance: label,
                    n: None,
                    d: None,
                    m: None,
                    iterations: None,
                    rebuilds: None,
                    total_wall_ms: None,
                    update_ms: None,
                    multiply_ms: None,
                    step_ms: None,
                    final_gap: None,
                    status: format!("skipped: {e}"),
                }
            }
        };
        csv.serialize(row)?;
        csv.flush().map_err(|source| CliError::Write { path: dir.to_path_buf(), source })?;
        written += 1;
    }
    if written == 0 {
        csv.write_record(BENCH_COLUMNS)?;
    }
    csv.flush().map_err(|source| CliError::Write { path: dir.to_path_buf(), source })?;
    Ok(written)
}

const BENCH_COLUMNS: [&str; 12] = [
    "instance",
    "n",
    "d",
    "m",
    "iterations",
    "rebuilds",
    "total_wall_ms",
    "update_ms",
    "multiply_ms",
    "step_ms",
    "final_gap",
    "status",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GenKind {
    RandomLp,
    L1Regression,
    Quantile,
}

impl std::str::FromStr for GenKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "random_lp" => Ok(Self::RandomLp),
            "l1_regression" => Ok(Self::L1Regression),
            "quantile" => Ok(Self::Quantile),
            _ => Err(format!("unknown instance kind `{s}` (random_lp, l1_regression, quantile)")),
        }
    }
}

/// Generator settings; `size` is `n` for LPs and the feature count for regressions.
#[derive(Debug, Clone, PartialEq)]
pub struct GenSpec {
    pub kind: GenKind,
    pub size: usize,
    /// Equality rows for LPs, data terms for regressions. Defaults to `max(1, 2n/5)` and `2n`.
    pub secondary: Option<usize>,
    pub theta: f64,
    pub seed: u64,
}

impl GenSpec {
    pub fn file_name(&self) -> String {
        match self.kind {
            GenKind::RandomLp => format!("random_lp_n{}_d{}_s{}.json", self.size, self.rows(), self.seed),
            GenKind::L1Regression => format!("l1_regression_f{}_t{}_s{}.json", self.size, self.terms(), self.seed),
            GenKind::Quantile => format!("quantile_f{}_t{}_s{}.json", self.size, self.terms(), self.seed),
        }
    }

    fn rows(&self) -> usize {
        self.secondary.unwrap_or((2 * self.size / 5).max(1))
    }

    fn terms(&self) -> usize {
        self.secondary.unwrap_or(2 * self.size)
    }

    pub fn build(&self) -> Result<InstanceFile, CliError> {
        let name = self.file_name().trim_end_matches(".json").to_string();
        match self.kind {
            GenKind::RandomLp => {
                let g = random_lp(self.size, self.rows(), self.seed).map_err(|e| CliError::Config(e.to_string()))?;
                let metadata = Metadata {
                    name: Some(name),
                    witness: Some(g.witness.clone()),
                    oracle_bounds: Some(g.vertex_bounds.iter().map(|&(l, u)| (l, u.is_finite().then_some(u))).collect()),
                    ..Metadata::default()
                };
                let file = StandardFile::from_problem(&g.problem, metadata).map_err(|source| CliError::Format { path: PathBuf::new(), source })?;
                Ok(InstanceFile::Standard(file))
            }
            GenKind::L1Regression | GenKind::Quantile => {
                if self.size == 0 || self.terms() == 0 {
                    return Err(CliError::Config("regressions need at least one feature and one term".into()));
                }
                if !(self.theta > 0.0 && self.theta < 1.0) {
                    return Err(CliError::Config(format!("quantile level {} not in (0,1)", self.theta)));
                }
                let g = if self.kind == GenKind::Quantile {
                    quantile_regression(self.size, self.terms(), self.theta, self.seed)
                } else {
                    l1_regression(self.size, self.terms(), self.seed)
                };
                let metadata = Metadata { name: Some(name), witness: Some(g.witness()), ..Metadata::default() };
                Ok(InstanceFile::Erm(ErmFile::from_erm(&g.erm, metadata)))
            }
        }
    }
}

/// Writes one generated instance per spec into `dir`, returning the paths.
pub fn generate_files(specs: &[GenSpec], dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    fs::create_dir_all(dir).map_err(|source| CliError::Write { path: dir.to_path_buf(), source })?;
    let mut out = Vec::with_capacity(specs.len());
    for spec in specs {
        let path = dir.join(spec.file_name());
        let text = spec.build()?.to_json();
        fs::write(&path, text).map_err(|source| CliError::Write { path: path.clone(), source })?;
        out.push(path);
    }
    Ok(out)
}
