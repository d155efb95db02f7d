//! Robust central path stepping.

use std::time::{Duration, Instant};

use thiserror::Error;

use crate::barrier::{Barrier, BarrierError};
use crate::blocklin::{small_quadform, spectral_block, BlockDiagMatrix, BlockStructure, DenseMatrix};
use crate::cpm::{CpmError, MaintenanceConfig, MaintenanceCounters, MaintenanceState, UpdateBranch};
use crate::problem::{build_modified, extract_solution, validate, ProblemError, Solution, StandardProblem, ValidationReport};

/// Step threshold multiplier: blocks with centrality below `96 sqrt(alpha)` take no step.
pub const THRESHOLD_FACTOR: f64 = 96.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RcpError {
    #[error("block {block}: {source}")]
    Barrier { block: usize, source: BarrierError },
    #[error(transparent)]
    Cpm(#[from] CpmError),
    #[error("iteration limit {0} reached")]
    IterationLimit(u64),
    #[error("numerical breakdown at iteration {iteration} (t = {t:e}): {reason}")]
    NumericalBreakdown { iteration: u64, t: f64, reason: String },
    #[error("invalid path parameters: {0}")]
    InvalidParams(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PathMode {
    /// Worst-case constants; provably safe but far too slow to finish at any real size.
    Paper,
    /// Calibrated constants for runs that finish.
    Practical,
}

/// Scaling constants for practical mode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PracticalConstants {
    /// `lambda = c_lambda * ln m`.
    pub c_lambda: f64,
    /// `alpha = c_alpha / lambda^2` before clamping.
    pub c_alpha: f64,
    /// `kappa = c_kappa * alpha`.
    pub c_kappa: f64,
    /// Upper bound on the step threshold `96 sqrt(alpha)`.
    pub max_threshold: f64,
}

impl Default for PracticalConstants {
    fn default() -> Self {
        Self { c_lambda: 2.0, c_alpha: 1.0, c_kappa: 0.5, max_threshold: 0.9 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathParams {
    pub lambda: f64,
    pub alpha: f64,
    pub kappa: f64,
    pub nu: f64,
    pub delta: f64,
    pub m: usize,
    pub mode: PathMode,
}

fn log_m(m: usize) -> f64 {
    (m.max(2) as f64).ln()
}

impl PathParams {
    /// `lambda = 2^16 ln m`, `alpha = 2^-20 lambda^-2`, `kappa = 2^-10 alpha`.
    pub fn paper(m: usize, nu: f64, delta: f64) -> Result<Self, RcpError> {
        let lambda = 65536.0 * log_m(m);
        let alpha = 2f64.powi(-20) / (lambda * lambda);
        let kappa = 2f64.powi(-10) * alpha;
        Self::finish(m, nu, delta, lambda, alpha, kappa, PathMode::Paper)
    }

    pub fn practical(m: usize, nu: f64, delta: f64, c: &PracticalConstants) -> Result<Self, RcpError> {
        if !(c.c_lambda > 0.0 && c.c_alpha > 0.0 && c.c_kappa > 0.0 && c.max_threshold > 0.0 && c.max_threshold < 1.0) {
            return Err(RcpError::InvalidParams(format!("{c:?}")));
        }
        let lambda = c.c_lambda * log_m(m);
        let cap = (c.max_threshold / THRESHOLD_FACTOR).powi(2).min(0.01 / lambda);
        let alpha = (c.c_alpha / (lambda * lambda)).min(cap);
        let kappa = c.c_kappa * alpha;
        Self::finish(m, nu, delta, lambda, alpha, kappa, PathMode::Practical)
    }

    fn finish(m: usize, nu: f64, delta: f64, lambda: f64, alpha: f64, kappa: f64, mode: PathMode) -> Result<Self, RcpError> {
        if !(nu >= 1.0) || m == 0 {
            return Err(RcpError::InvalidParams(format!("nu = {nu}, m = {m}")));
        }
        if !(delta > 0.0 && delta < 1.0) {
            return Err(RcpError::InvalidParams(format!("delta = {delta} not in (0,1)")));
        }
        if !(lambda * alpha <= 0.01 + 1e-15 && THRESHOLD_FACTOR * alpha.sqrt() < 1.0) {
            return Err(RcpError::InvalidParams(format!("lambda = {lambda}, alpha = {alpha} violate the step constraints")));
        }
        if !(kappa > 0.0 && kappa < nu.sqrt()) {
            return Err(RcpError::InvalidParams(format!("kappa = {kappa}")));
        }
        Ok(Self { lambda, alpha, kappa, nu, delta: delta.min(1.0 / lambda), m, mode })
    }

    pub fn step_threshold(&self) -> f64 {
        THRESHOLD_FACTOR * self.alpha.sqrt()
    }

    /// Per-iteration factor `1 - kappa / sqrt(nu)`.
    pub fn shrink_factor(&self) -> f64 {
        1.0 - self.kappa / self.nu.sqrt()
    }

    /// Termination threshold `delta^2 / (4 nu)`.
    pub fn t_final(&self) -> f64 {
        self.delta * self.delta / (4.0 * self.nu)
    }

    /// Path parameter after `k` iterations from `t = 1`.
    pub fn t_at(&self, k: u64) -> f64 {
        self.shrink_factor().powf(k as f64)
    }

    /// Closed-form number of iterations until `t <= t_final`.
    pub fn iteration_count(&self) -> u64 {
        let ratio = (4.0 * self.nu / (self.delta * self.delta)).ln();
        (ratio / -self.shrink_factor().ln()).ceil() as u64
    }

    /// `ln(80 m / alpha)`.
    pub fn log_potential_bound(&self) -> f64 {
        (80.0 * self.m as f64 / self.alpha).ln()
    }
}

fn barrier_err(block: usize) -> impl Fn(BarrierError) -> RcpError {
    move |source| RcpError::Barrier { block, source }
}

/// `s_i / t + grad phi_i(x_i)`.
pub fn mu(i: usize, xbar: &[f64], sbar: &[f64], t: f64, barriers: &[Barrier], structure: &BlockStructure) -> Result<Vec<f64>, RcpError> {
    let r = structure.range(i);
    let mut g = barriers[i].gradient(&xbar[r.clone()]).map_err(barrier_err(i))?;
    for (gk, sk) in g.iter_mut().zip(&sbar[r]) {
        *gk += sk / t;
    }
    Ok(g)
}

/// `|mu_i|` in the inverse Hessian norm at `x_i`.
pub fn gamma(i: usize, mu_i: &[f64], xbar: &[f64], barriers: &[Barrier], structure: &BlockStructure) -> Result<f64, RcpError> {
    let r = structure.range(i);
    let d = structure.size(i);
    if mu_i.len() != d {
        return Err(RcpError::DimensionMismatch { expected: d, found: mu_i.len() });
    }
    let h = barriers[i].hessian(&xbar[r]).map_err(barrier_err(i))?;
    let mut inv = vec![0.0; d * d];
    spectral_block(d, h.as_slice(), &mut inv, 0.0, &|v| 1.0 / v)
        .map_err(|_| RcpError::Barrier { block: i, source: BarrierError::SingularHessian })?;
    Ok(small_quadform(d, &inv, mu_i).max(0.0).sqrt())
}

/// Soft-max step coefficients, zero below the step threshold.
pub fn soft_coeff(gammas: &[f64], lambda: f64, alpha: f64) -> Vec<f64> {
    let mut out = vec![0.0; gammas.len()];
    soft_coeff_into(gammas, lambda, alpha, &mut out);
    out
}

fn soft_coeff_into(gammas: &[f64], lambda: f64, alpha: f64, out: &mut [f64]) -> f64 {
    let gmax = gammas.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    let mut sq = 0.0;
    for (e, &g) in out.iter_mut().zip(gammas) {
        *e = (lambda * (g - gmax)).exp();
        sum += *e;
        sq += *e * *e;
    }
    let norm = sq.sqrt();
    let thr = THRESHOLD_FACTOR * alpha.sqrt();
    for (c, &g) in out.iter_mut().zip(gammas) {
        *c = if g >= thr && g > 0.0 { *c / g / norm } else { 0.0 };
    }
    lambda * gmax + sum.ln()
}

/// Value of the potential together with its logarithm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Potential {
    pub value: f64,
    pub log_value: f64,
}

/// Reusable buffers for the per-iteration step computation.
#[derive(Debug, Clone)]
pub struct StepWorkspace {
    structure: BlockStructure,
    pub h: Vec<f64>,
    pub wbar: BlockDiagMatrix,
    pub gammas: Vec<f64>,
    pub mu: Vec<f64>,
    pub coeff: Vec<f64>,
    pub log_phi: f64,
    pub max_gamma: f64,
    /// `sqrt(sum_i |h_i|*^2)` in the local dual norms at `xbar`.
    pub h_norm: f64,
    grad: Vec<f64>,
    hess: Vec<f64>,
}

impl StepWorkspace {
    pub fn new(structure: &BlockStructure) -> Self {
        let n = structure.n();
        let d = structure.max_size();
        Self {
            structure: structure.clone(),
            h: vec![0.0; n],
            wbar: BlockDiagMatrix::zeros(structure),
            gammas: vec![0.0; structure.m()],
            mu: vec![0.0; n],
            coeff: vec![0.0; structure.m()],
            log_phi: 0.0,
            max_gamma: 0.0,
            h_norm: 0.0,
            grad: vec![0.0; d],
            hess: vec![0.0; d * d],
        }
    }

    /// Fills `mu`, `gammas`, `wbar = hess^{-1}`, the potential and the step `h`.
    pub fn compute(&mut self, xbar: &[f64], sbar: &[f64], t: f64, params: &PathParams, barriers: &[Barrier]) -> Result<(), RcpError> {
        self.evaluate(xbar, sbar, t, barriers)?;
        self.log_phi = soft_coeff_into(&self.gammas, params.lambda, params.alpha, &mut self.coeff);
        self.max_gamma = self.gammas.iter().copied().fold(0.0, f64::max);
        let mut h2 = 0.0;
        for i in 0..self.structure.m() {
            let c = self.coeff[i];
            let r = self.structure.range(i);
            if c == 0.0 {
                self.h[r].iter_mut().for_each(|v| *v = 0.0);
            } else {
                for k in r {
                    self.h[k] = -params.alpha * c * self.mu[k];
                }
                h2 += (params.alpha * c * self.gammas[i]).powi(2);
            }
        }
        self.h_norm = h2.sqrt();
        Ok(())
    }

    fn evaluate(&mut self, xbar: &[f64], sbar: &[f64], t: f64, barriers: &[Barrier]) -> Result<(), RcpError> {
        let structure = &self.structure;
        for i in 0..structure.m() {
            let d = structure.size(i);
            let r = structure.range(i);
            let g = &mut self.grad[..d];
            let hs = &mut self.hess[..d * d];
            barriers[i].derivatives(&xbar[r.clone()], g, hs).map_err(barrier_err(i))?;
            for (k, idx) in r.clone().enumerate() {
                self.mu[idx] = sbar[idx] / t + g[k];
            }
            let w = self.wbar.block_mut(i);
            if d == 1 {
                if !(hs[0] > 0.0) {
                    return Err(RcpError::Barrier { block: i, source: BarrierError::SingularHessian });
                }
                w[0] = 1.0 / hs[0];
            } else {
                spectral_block(d, hs, w, 0.0, &|v| 1.0 / v)
                    .map_err(|_| RcpError::Barrier { block: i, source: BarrierError::SingularHessian })?;
            }
            self.gammas[i] = small_quadform(d, w, &self.mu[r]).max(0.0).sqrt();
        }
        Ok(())
    }
}

/// Step direction `h` and target `Wbar = hess(xbar)^{-1}`.
pub fn step_direction(
    xbar: &[f64],
    sbar: &[f64],
    t: f64,
    params: &PathParams,
    barriers: &[Barrier],
    structure: &BlockStructure,
) -> Result<(Vec<f64>, BlockDiagMatrix), RcpError> {
    let mut ws = StepWorkspace::new(structure);
    ws.compute(xbar, sbar, t, params, barriers)?;
    Ok((ws.h, ws.wbar))
}

/// `Phi = sum_i exp(lambda gamma_i)`, evaluated through its logarithm.
pub fn potential(
    xbar: &[f64],
    sbar: &[f64],
    t: f64,
    params: &PathParams,
    barriers: &[Barrier],
    structure: &BlockStructure,
) -> Result<Potential, RcpError> {
    let mut ws = StepWorkspace::new(structure);
    ws.evaluate(xbar, sbar, t, barriers)?;
    let mut coeff = vec![0.0; structure.m()];
    let log_value = soft_coeff_into(&ws.gammas, params.lambda, params.alpha, &mut coeff);
    Ok(Potential { value: log_value.exp(), log_value })
}

/// One line of the iteration log.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iter: u64,
    pub t: f64,
    pub log_phi: f64,
    pub max_gamma: f64,
    pub h_norm: f64,
    pub update_branch: UpdateBranch,
    pub r: usize,
    pub lazy_blocks: usize,
    /// Cumulative rebuilds of the maintenance state (moves and fallbacks).
    pub rebuilds: u64,
    pub psi_potential: Option<f64>,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PhaseTimes {
    pub step: Duration,
    pub update: Duration,
    pub multiply: Duration,
}

/// Problem data for a path-following run started at `t = 1`.
#[derive(Debug, Clone, Copy)]
pub struct PathInput<'a> {
    pub a: &'a DenseMatrix,
    pub structure: &'a BlockStructure,
    pub barriers: &'a [Barrier],
    pub x0: &'a [f64],
    pub s0: &'a [f64],
}

#[derive(Debug, Clone)]
pub struct PathOutcome {
    pub x: Vec<f64>,
    pub s: Vec<f64>,
    pub t: f64,
    pub iterations: u64,
    pub max_log_phi: f64,
    pub potential_violations: u64,
    pub counters: MaintenanceCounters,
    pub phases: PhaseTimes,
    pub wall: Duration,
}

/// Runs the robust path loop from `t = 1` until `t <= delta^2 / (4 nu)`.
pub fn follow_path(
    input: PathInput<'_>,
    params: &PathParams,
    maintenance: &MaintenanceConfig,
    max_iters: Option<u64>,
    observer: &mut dyn FnMut(&IterationRecord, &MaintenanceState),
) -> Result<PathOutcome, RcpError> {
    let structure = input.structure;
    if input.barriers.len() != structure.m() {
        return Err(RcpError::DimensionMismatch { expected: structure.m(), found: input.barriers.len() });
    }
    let start = Instant::now();
    let mut ws = StepWorkspace::new(structure);
    let breakdown = |iteration: u64, t: f64, e: RcpError| RcpError::NumericalBreakdown { iteration, t, reason: e.to_string() };
    ws.compute(input.x0, input.s0, 1.0, params, input.barriers).map_err(|e| breakdown(0, 1.0, e))?;
    let mut cpm = MaintenanceState::initialize(input.a, input.x0, input.s0, &ws.wbar, maintenance)?;

    let shrink = params.shrink_factor();
    let t_final = params.t_final();
    let log_bound = params.log_potential_bound();
    let mut phases = PhaseTimes::default();
    let mut max_log_phi = f64::NEG_INFINITY;
    let mut violations = 0u64;
    let mut k = 0u64;
    let mut t = 1.0f64;
    while t > t_final {
        if max_iters.is_some_and(|cap| k >= cap) {
            return Err(RcpError::IterationLimit(k));
        }
        let t_new = shrink.powf((k + 1) as f64);
        let t0 = Instant::now();
        let (xbar, sbar) = cpm.query();
        ws.compute(xbar, sbar, t, params, input.barriers).map_err(|e| breakdown(k, t, e))?;
        if !ws.log_phi.is_finite() {
            return Err(RcpError::NumericalBreakdown { iteration: k, t, reason: "non-finite potential".into() });
        }
        max_log_phi = max_log_phi.max(ws.log_phi);
        if ws.log_phi > log_bound {
            violations += 1;
            if violations == 1 {
                log::warn!("potential exceeds 80m/alpha at iteration {k} (ln Phi = {:.3})", ws.log_phi);
            }
        }
        let t1 = Instant::now();
        let report = cpm.update(&ws.wbar).map_err(|e| breakdown(k, t, e.into()))?;
        let t2 = Instant::now();
        cpm.multiply_move(&ws.h, t).map_err(|e| breakdown(k, t, e.into()))?;
        let t3 = Instant::now();
        phases.step += t1 - t0;
        phases.update += t2 - t1;
        phases.multiply += t3 - t2;
        let c = cpm.counters();
        let record = IterationRecord {
            iter: k,
            t,
            log_phi: ws.log_phi,
            max_gamma: ws.max_gamma,
            h_norm: ws.h_norm,
            update_branch: report.branch,
            r: report.r,
            lazy_blocks: report.lazy_blocks,
            rebuilds: c.moves + c.rebuilds,
            psi_potential: report.psi_potential,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        observer(&record, &cpm);
        t = t_new;
        k += 1;
    }
    let (x, s) = cpm.exact_iterates();
    Ok(PathOutcome {
        x,
        s,
        t,
        iterations: k,
        max_log_phi,
        potential_violations: violations,
        counters: cpm.counters(),
        phases,
        wall: start.elapsed(),
    })
}

/// Solver-level configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub mode: PathMode,
    pub practical: PracticalConstants,
    /// Requested accuracy; clamped to `1/lambda`.
    pub delta: f64,
    pub maintenance: MaintenanceConfig,
    pub max_iters: Option<u64>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            mode: PathMode::Practical,
            practical: PracticalConstants::default(),
            delta: 1e-3,
            maintenance: MaintenanceConfig::default(),
            max_iters: None,
        }
    }
}

impl SolverConfig {
    /// Path parameters for a homogenized program with `m` blocks and total `nu`.
    pub fn path_params(&self, m: usize, nu: f64) -> Result<PathParams, RcpError> {
        match self.mode {
            PathMode::Paper => PathParams::paper(m, nu, self.delta),
            PathMode::Practical => PathParams::practical(m, nu, self.delta, &self.practical),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolveError {
    #[error("invalid problem: {0}")]
    Validation(ValidationReport),
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Path(#[from] RcpError),
}

/// Result of [`solve_with_observer`]: the solution plus run statistics.
#[derive(Debug, Clone)]
pub struct SolveOutcome {
    pub solution: Solution,
    pub params: PathParams,
    pub max_log_phi: f64,
    pub potential_violations: u64,
    pub counters: MaintenanceCounters,
    pub phases: PhaseTimes,
    pub wall: Duration,
}

pub fn solve(problem: &StandardProblem, config: &SolverConfig) -> Result<Solution, SolveError> {
    Ok(solve_with_observer(problem, config, &mut |_, _| {})?.solution)
}

/// Validates, homogenizes, follows the path and extracts the solution.
pub fn solve_with_observer(
    problem: &StandardProblem,
    config: &SolverConfig,
    observer: &mut dyn FnMut(&IterationRecord, &MaintenanceState),
) -> Result<SolveOutcome, SolveError> {
    let report = validate(problem);
    if !report.is_ok() {
        return Err(SolveError::Validation(report));
    }
    let nu = problem.nu() + 1.0;
    let params = config.path_params(problem.structure.m() + 1, nu)?;
    let modified = build_modified(problem, params.delta)?;
    let input = PathInput {
        a: &modified.a,
        structure: &modified.structure,
        barriers: &modified.barriers,
        x0: &modified.x0,
        s0: &modified.s0,
    };
    let out = follow_path(input, &params, &config.maintenance, config.max_iters, observer)?;
    let solution = extract_solution(&modified, &out.x, &out.s, out.t, problem, out.iterations)?;
    Ok(SolveOutcome {
        solution,
        params,
        max_log_phi: out.max_log_phi,
        potential_violations: out.potential_violations,
        counters: out.counters,
        phases: out.phases,
        wall: out.wall,
    })
}
