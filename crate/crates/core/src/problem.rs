//! Standard-form problems, the homogenized starting program, solution extraction and
//! ERM reductions.

use nalgebra::{DVector, SVD};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::barrier::{Barrier, BarrierError, BarrierKind, DEFAULT_DOMAIN_MARGIN};
use crate::blocklin::{small_quadform, spectral_block, BlockStructure, CholeskyFactor, DenseMatrix, LinalgError};

/// Relative singular value cutoff used by [`validate`].
pub const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProblemError {
    #[error("block {block}: {source}")]
    Barrier { block: usize, source: BarrierError },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid problem data: {0}")]
    InvalidData(String),
    #[error("gap certificate preconditions fail: {0}")]
    CertificateInvalid(String),
    #[error("unsupported loss: {0}")]
    UnsupportedLoss(String),
}

/// `min c^T x` subject to `A x = b`, `x_i` in the domain of `barriers[i]`.
#[derive(Debug, Clone)]
pub struct StandardProblem {
    pub a: DenseMatrix,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub structure: BlockStructure,
    pub barriers: Vec<Barrier>,
    /// Bound on `|x|_2` over the feasible set.
    pub r_diam: f64,
    /// Bound on `|c|_2`; `None` uses `|c|_2` itself.
    pub l_lip: Option<f64>,
}

impl StandardProblem {
    pub fn new(
        a: DenseMatrix,
        b: Vec<f64>,
        c: Vec<f64>,
        structure: BlockStructure,
        barriers: Vec<Barrier>,
        r_diam: f64,
    ) -> Result<Self, ProblemError> {
        let p = Self { a, b, c, structure, barriers, r_diam, l_lip: None };
        p.check_shapes()?;
        Ok(p)
    }

    fn check_shapes(&self) -> Result<(), ProblemError> {
        let n = self.structure.n();
        if self.a.ncols() != n || self.c.len() != n {
            return Err(ProblemError::DimensionMismatch(format!(
                "A is {}x{}, c has {}, blocks cover {n}",
                self.a.nrows(),
                self.a.ncols(),
                self.c.len()
            )));
        }
        if self.a.nrows() != self.b.len() {
            return Err(ProblemError::DimensionMismatch(format!("A has {} rows, b has {}", self.a.nrows(), self.b.len())));
        }
        if self.barriers.len() != self.structure.m() {
            return Err(ProblemError::DimensionMismatch(format!(
                "{} barriers for {} blocks",
                self.barriers.len(),
                self.structure.m()
            )));
        }
        for (i, bar) in self.barriers.iter().enumerate() {
            if bar.dim() != self.structure.size(i) {
                return Err(ProblemError::DimensionMismatch(format!(
                    "block {i} has size {} but its barrier has dimension {}",
                    self.structure.size(i),
                    bar.dim()
                )));
            }
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.structure.n()
    }

    pub fn d(&self) -> usize {
        self.a.nrows()
    }

    pub fn nu(&self) -> f64 {
        self.barriers.iter().map(Barrier::nu).sum()
    }

    pub fn lipschitz(&self) -> f64 {
        self.l_lip.unwrap_or_else(|| norm2(&self.c)).max(f64::MIN_POSITIVE)
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        dot(&self.c, x)
    }

    /// `|A x - b|_1`.
    pub fn infeasibility(&self, x: &[f64]) -> f64 {
        residual(&self.a, x, &self.b).iter().map(|v| v.abs()).sum()
    }

    /// Concatenated analytic centers (or reference points) of all blocks.
    pub fn base_point(&self) -> Result<Vec<f64>, ProblemError> {
        let mut x0 = Vec::with_capacity(self.n());
        for (i, bar) in self.barriers.iter().enumerate() {
            x0.extend(bar.analytic_center().map_err(|source| ProblemError::Barrier { block: i, source })?);
        }
        Ok(x0)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn residual(a: &DenseMatrix, x: &[f64], b: &[f64]) -> Vec<f64> {
    let ax = a * DVector::from_column_slice(x);
    ax.iter().zip(b).map(|(p, q)| p - q).collect()
}

/// Homogenized program `min cbar^T xbar`, `Abar xbar = b`, whose starting point
/// `xbar0 = [x0; 1]`, `y0 = 0`, `s0 = cbar` is feasible and central at `t = 1`.
#[derive(Debug, Clone)]
pub struct ModifiedProblem {
    pub a: DenseMatrix,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub structure: BlockStructure,
    pub barriers: Vec<Barrier>,
    pub x0: Vec<f64>,
    pub y0: Vec<f64>,
    pub s0: Vec<f64>,
    /// Base point `x^(0)` of the original blocks.
    pub base_point: Vec<f64>,
    /// `delta / (L R)`.
    pub cost_scale: f64,
    pub delta: f64,
    pub lipschitz: f64,
    pub r_diam: f64,
}

impl ModifiedProblem {
    pub fn n(&self) -> usize {
        self.structure.n()
    }

    pub fn nu(&self) -> f64 {
        self.barriers.iter().map(Barrier::nu).sum()
    }

    /// `|s0 + grad phi(x0)|` in the inverse Hessian norm at `x0`.
    pub fn centrality(&self) -> Result<f64, ProblemError> {
        let mut total = 0.0;
        for (i, bar) in self.barriers.iter().enumerate() {
            let r = self.structure.range(i);
            let d = r.len();
            let mut g = vec![0.0; d];
            let mut h = vec![0.0; d * d];
            bar.derivatives(&self.x0[r.clone()], &mut g, &mut h).map_err(|source| ProblemError::Barrier { block: i, source })?;
            let mu: Vec<f64> = g.iter().zip(&self.s0[r]).map(|(a, b)| a + b).collect();
            let mut inv = vec![0.0; d * d];
            spectral_block(d, &h, &mut inv, 0.0, &|v| 1.0 / v)
            .map_err(|_| ProblemError::Barrier { block: i, source: BarrierError::SingularHessian })?;
            total += small_quadform(d, &inv, &mu).max(0.0);
        }
        Ok(total.sqrt())
    }
}

/// Appends the `tau` column `b - A x0` and the scaled objective.
pub fn build_modified(problem: &StandardProblem, delta: f64) -> Result<ModifiedProblem, ProblemError> {
    problem.check_shapes()?;
    if !(delta > 0.0 && delta < 1.0) {
        return Err(ProblemError::InvalidData(format!("delta = {delta} not in (0,1)")));
    }
    if !(problem.r_diam > 0.0 && problem.r_diam.is_finite()) {
        return Err(ProblemError::InvalidData(format!("diameter bound {} must be positive", problem.r_diam)));
    }
    let n = problem.n();
    let d = problem.d();
    let base = problem.base_point()?;
    for (i, bar) in problem.barriers.iter().enumerate() {
        if !bar.has_bounded_center() {
            log::warn!("block {i} has no analytic center; starting from its reference point");
        }
    }
    let shift = residual(&problem.a, &base, &problem.b);
    let mut a = DenseMatrix::zeros(d, n + 1);
    a.view_mut((0, 0), (d, n)).copy_from(&problem.a);
    for r in 0..d {
        a[(r, n)] = -shift[r];
    }
    let lipschitz = problem.lipschitz();
    let cost_scale = delta / (lipschitz * problem.r_diam);
    let mut c: Vec<f64> = problem.c.iter().map(|v| v * cost_scale).collect();
    c.push(1.0);
    let mut sizes = problem.structure.sizes().to_vec();
    sizes.push(1);
    let structure = BlockStructure::with_max_dim(sizes, problem.structure.max_size().max(1))?;
    let floor = 1e-3 * delta * delta / (4.0 * (problem.nu() + 1.0));
    let mut barriers: Vec<Barrier> = problem.barriers.iter().map(|b| b.clone().with_margin(b.margin().min(floor))).collect();
    barriers.push(Barrier::log_positive().with_margin(DEFAULT_DOMAIN_MARGIN.min(floor)));
    let mut x0 = base.clone();
    x0.push(1.0);
    Ok(ModifiedProblem {
        a,
        b: problem.b.clone(),
        s0: c.clone(),
        c,
        structure,
        barriers,
        x0,
        y0: vec![0.0; d],
        base_point: base,
        cost_scale,
        delta,
        lipschitz,
        r_diam: problem.r_diam,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    /// Terminated with a verified gap certificate.
    Converged,
    /// Terminated, but the certificate preconditions did not hold at tolerance.
    Uncertified,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Solution {
    pub x: Vec<f64>,
    pub objective: f64,
    /// `4 t nu` on the homogenized program.
    pub gap_bound: f64,
    /// `L R delta`: bound on the excess of `objective` over the optimum.
    pub excess_bound: f64,
    /// `|A x - b|_1`.
    pub primal_infeas: f64,
    /// `3 delta (R sum|A_ij| + |b|_1)`.
    pub infeas_bound: f64,
    /// Homogenizing coordinate at termination.
    pub tau: f64,
    /// Objective of the homogenized program.
    pub modified_objective: f64,
    /// Dual multipliers of the homogenized program.
    pub y: Vec<f64>,
    pub t_final: f64,
    pub iterations: u64,
    pub status: SolveStatus,
    pub certificate_error: Option<String>,
}

/// Least-squares `y` with `A^T y + s ≈ c`.
pub fn recover_dual(a: &DenseMatrix, c: &[f64], s: &[f64]) -> Result<Vec<f64>, ProblemError> {
    let rhs: Vec<f64> = c.iter().zip(s).map(|(p, q)| p - q).collect();
    let normal = a * a.transpose();
    let chol = CholeskyFactor::new(&normal)?;
    let y = chol.solve_vec(&(a * DVector::from_vec(rhs)));
    Ok(y.as_slice().to_vec())
}

/// Certified excess `4 t nu`, after checking `A x = b`, `A^T y + s = c` and
/// `|s_i / t + grad phi_i(x_i)| <= 1` on every block, up to the rounding of `x_i`.
#[allow(clippy::too_many_arguments)]
pub fn gap_certificate(
    a: &DenseMatrix,
    b: &[f64],
    c: &[f64],
    x: &[f64],
    s: &[f64],
    y: &[f64],
    t: f64,
    structure: &BlockStructure,
    barriers: &[Barrier],
) -> Result<f64, ProblemError> {
    const TOL: f64 = 1e-7;
    let scale_p = 1.0 + b.iter().fold(0.0f64, |m, v| m.max(v.abs())) + a.amax() * x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let pr = residual(a, x, b).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if pr > TOL * scale_p {
        return Err(ProblemError::CertificateInvalid(format!("primal residual {pr:e}")));
    }
    let aty = a.tr_mul(&DVector::from_column_slice(y));
    let scale_d = 1.0 + c.iter().fold(0.0f64, |m, v| m.max(v.abs())) + s.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let dr = (0..c.len()).map(|k| (aty[k] + s[k] - c[k]).abs()).fold(0.0, f64::max);
    if dr > TOL * scale_d {
        return Err(ProblemError::CertificateInvalid(format!("dual residual {dr:e}")));
    }
    let mut nu = 0.0;
    for (i, bar) in barriers.iter().enumerate() {
        let r = structure.range(i);
        let d = r.len();
        let mut g = vec![0.0; d];
        let mut h = vec![0.0; d * d];
        bar.derivatives(&x[r.clone()], &mut g, &mut h).map_err(|source| ProblemError::Barrier { block: i, source })?;
        let mu: Vec<f64> = g.iter().zip(&s[r.clone()]).map(|(gk, sk)| sk / t + gk).collect();
        let mut inv = vec![0.0; d * d];
        spectral_block(d, &h, &mut inv, 0.0, &|v| 1.0 / v)
            .map_err(|_| ProblemError::Barrier { block: i, source: BarrierError::SingularHessian })?;
        let norm = small_quadform(d, &inv, &mu).max(0.0).sqrt();
        let trace: f64 = (0..d).map(|k| h[k * d + k]).sum();
        let xi = &x[structure.range(i)];
        let rounding = 4.0 * f64::EPSILON * xi.iter().map(|v| v * v).sum::<f64>().sqrt() * trace.sqrt();
        if norm > 1.0 + 1e-9 + rounding {
            return Err(ProblemError::CertificateInvalid(format!("block {i} centrality {norm:.4} exceeds 1")));
        }
        nu += bar.nu();
    }
    Ok(4.0 * t * nu)
}

/// Original-problem solution from the final homogenized iterates.
pub fn extract_solution(
    modified: &ModifiedProblem,
    x_final: &[f64],
    s_final: &[f64],
    t_final: f64,
    problem: &StandardProblem,
    iterations: u64,
) -> Result<Solution, ProblemError> {
    let n = problem.n();
    if x_final.len() != n + 1 || s_final.len() != n + 1 {
        return Err(ProblemError::DimensionMismatch(format!("expected {} coordinates", n + 1)));
    }
    let x = x_final[..n].to_vec();
    let tau = x_final[n];
    let y = recover_dual(&modified.a, &modified.c, s_final)?;
    let cert = gap_certificate(
        &modified.a,
        &modified.b,
        &modified.c,
        x_final,
        s_final,
        &y,
        t_final,
        &modified.structure,
        &modified.barriers,
    );
    let (status, certificate_error) = match cert {
        Ok(_) => (SolveStatus::Converged, None),
        Err(ProblemError::CertificateInvalid(msg)) => (SolveStatus::Uncertified, Some(msg)),
        Err(e) => return Err(e),
    };
    let delta = modified.delta;
    let a_sum: f64 = problem.a.iter().map(|v| v.abs()).sum();
    let b_sum: f64 = problem.b.iter().map(|v| v.abs()).sum();
    Ok(Solution {
        objective: problem.objective(&x),
        gap_bound: 4.0 * t_final * modified.nu(),
        excess_bound: modified.lipschitz * modified.r_diam * delta,
        primal_infeas: problem.infeasibility(&x),
        infeas_bound: 3.0 * delta * (problem.r_diam * a_sum + b_sum),
        tau,
        modified_objective: dot(&modified.c, x_final),
        y,
        x,
        t_final,
        iterations,
        status,
        certificate_error,
    })
}

/// A single problem found by [`validate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ValidationIssue {
    Shape { message: String },
    NonFinite { field: String },
    RankDeficient { rank: usize, rows: usize, dependent_rows: Vec<usize> },
    DuplicateRow { first: usize, second: usize },
    InvalidBound { message: String },
    NoStartingPoint { block: usize },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub issues: Vec<ValidationIssue>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.issues.is_empty()
    }
}

impl std::fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.issues.is_empty() {
            return write!(f, "valid");
        }
        for (k, issue) in self.issues.iter().enumerate() {
            if k > 0 {
                write!(f, "; ")?;
            }
            match issue {
                ValidationIssue::Shape { message } => write!(f, "{message}")?,
                ValidationIssue::NonFinite { field } => write!(f, "non-finite entries in {field}")?,
                ValidationIssue::RankDeficient { rank, rows, dependent_rows } => {
                    write!(f, "A has rank {rank} < {rows}; dependent rows {dependent_rows:?}")?
                }
                ValidationIssue::DuplicateRow { first, second } => write!(f, "rows {first} and {second} are parallel")?,
                ValidationIssue::InvalidBound { message } => write!(f, "{message}")?,
                ValidationIssue::NoStartingPoint { block } => write!(f, "block {block} has no center or reference point")?,
            }
        }
        Ok(())
    }
}

/// Structural checks: shapes, finiteness, full row rank, starting points.
pub fn validate(problem: &StandardProblem) -> ValidationReport {
    let mut issues = Vec::new();
    if let Err(e) = problem.check_shapes() {
        issues.push(ValidationIssue::Shape { message: e.to_string() });
        return ValidationReport { issues };
    }
    for (name, ok) in [
        ("A", problem.a.iter().all(|v| v.is_finite())),
        ("b", problem.b.iter().all(|v| v.is_finite())),
        ("c", problem.c.iter().all(|v| v.is_finite())),
    ] {
        if !ok {
            issues.push(ValidationIssue::NonFinite { field: name.into() });
        }
    }
    if !issues.is_empty() {
        return ValidationReport { issues };
    }
    if !(problem.r_diam > 0.0 && problem.r_diam.is_finite()) {
        issues.push(ValidationIssue::InvalidBound { message: format!("diameter bound {} must be positive", problem.r_diam) });
    }
    if let Some(l) = problem.l_lip {
        if !(l > 0.0 && l.is_finite()) {
            issues.push(ValidationIssue::InvalidBound { message: format!("Lipschitz bound {l} must be positive") });
        }
    }
    let d = problem.d();
    for i in 0..d {
        for j in i + 1..d {
            if rows_parallel(&problem.a, i, j) {
                issues.push(ValidationIssue::DuplicateRow { first: i, second: j });
            }
        }
    }
    let rank = numerical_rank(&problem.a);
    if rank < d {
        issues.push(ValidationIssue::RankDeficient { rank, rows: d, dependent_rows: dependent_rows(&problem.a) });
    }
    for (i, bar) in problem.barriers.iter().enumerate() {
        if bar.analytic_center().is_err() {
            issues.push(ValidationIssue::NoStartingPoint { block: i });
        }
    }
    ValidationReport { issues }
}

fn rows_parallel(a: &DenseMatrix, i: usize, j: usize) -> bool {
    let ri = a.row(i);
    let rj = a.row(j);
    let ni = ri.norm();
    let nj = rj.norm();
    if ni == 0.0 || nj == 0.0 {
        return ni == 0.0 && nj == 0.0;
    }
    (ri.dot(&rj).abs() / (ni * nj) - 1.0).abs() <= RANK_TOL
}

fn numerical_rank(a: &DenseMatrix) -> usize {
    if a.nrows() == 0 {
        return 0;
    }
    let sv = SVD::new(a.clone(), false, false).singular_values;
    let top = sv.iter().copied().fold(0.0, f64::max);
    if top == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > RANK_TOL * top).count()
}

/// Rows that lie in the span of the rows before them.
fn dependent_rows(a: &DenseMatrix) -> Vec<usize> {
    let mut out = Vec::new();
    let mut kept: Vec<usize> = Vec::new();
    for i in 0..a.nrows() {
        let mut idx = kept.clone();
        idx.push(i);
        let sub = a.select_rows(idx.iter());
        if numerical_rank(&sub) == idx.len() {
            kept.push(i);
        } else {
            out.push(i);
        }
    }
    out
}

/// Per-term loss `f(r)` applied to the residual `r = a^T x + b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Loss {
    /// `|r|`.
    Abs,
    /// `theta max(r, 0) + (1 - theta) max(-r, 0)`.
    Quantile { theta: f64 },
    /// `max(0, 1 - r)`.
    Hinge,
}

impl Loss {
    pub fn eval(&self, r: f64) -> f64 {
        match *self {
            Loss::Abs => r.abs(),
            Loss::Quantile { theta } => theta * r.max(0.0) + (1.0 - theta) * (-r).max(0.0),
            Loss::Hinge => (1.0 - r).max(0.0),
        }
    }

    /// `(sign, shift, weight on |u|, weight on u)` such that with `u = sign * r + shift`
    /// the loss is `w_abs |u| + w_lin u`.
    fn epigraph_form(&self) -> Result<(f64, f64, f64, f64), ProblemError> {
        match *self {
            Loss::Abs => Ok((1.0, 0.0, 1.0, 0.0)),
            Loss::Quantile { theta } if (0.0..=1.0).contains(&theta) => Ok((1.0, 0.0, 0.5, theta - 0.5)),
            Loss::Quantile { theta } => Err(ProblemError::UnsupportedLoss(format!("quantile level {theta} not in [0,1]"))),
            Loss::Hinge => Ok((-1.0, 1.0, 0.5, 0.5)),
        }
    }
}

/// `min_x sum_i f_i(a_i^T x + b_i)` over the box `|x|_inf <= R`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErmInstance {
    pub rows: Vec<Vec<f64>>,
    pub offsets: Vec<f64>,
    pub losses: Vec<Loss>,
    pub radius: f64,
}

impl ErmInstance {
    pub fn dim(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    pub fn terms(&self) -> usize {
        self.rows.len()
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        self.rows
            .iter()
            .zip(&self.offsets)
            .zip(&self.losses)
            .map(|((a, b), f)| f.eval(dot(a, x) + b))
            .sum()
    }

    /// Cap on the epigraph variable: `4 sqrt(N + d) M R` plus the offsets, at least 1.
    pub fn epigraph_cap(&self) -> f64 {
        let m = self.rows.iter().map(|r| norm2(r)).fold(0.0, f64::max);
        let off = self.offsets.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        let n = (self.terms() + self.dim()) as f64;
        (4.0 * n.sqrt() * m * self.radius + off + 1.0).max(1.0)
    }
}

/// Layout of the standard form built by [`erm_to_standard`]: the `d` decision
/// coordinates come first, then one `(u_i, z_i)` pair per term.
pub fn erm_to_standard(erm: &ErmInstance) -> Result<StandardProblem, ProblemError> {
    let d = erm.dim();
    let nt = erm.terms();
    if d == 0 || nt == 0 {
        return Err(ProblemError::InvalidData("ERM needs at least one term and one feature".into()));
    }
    if erm.offsets.len() != nt || erm.losses.len() != nt || erm.rows.iter().any(|r| r.len() != d) {
        return Err(ProblemError::DimensionMismatch("ERM rows, offsets and losses disagree".into()));
    }
    if !(erm.radius > 0.0 && erm.radius.is_finite()) {
        return Err(ProblemError::InvalidData(format!("box radius {} must be positive", erm.radius)));
    }
    let cap = erm.epigraph_cap();
    let n = d + 2 * nt;
    let mut a = DenseMatrix::zeros(nt, n);
    let mut b = vec![0.0; nt];
    let mut c = vec![0.0; n];
    let mut barriers = Vec::with_capacity(d + nt);
    let mut sizes = vec![1; d];
    for _ in 0..d {
        barriers.push(Barrier::log_box(-erm.radius, erm.radius).map_err(|source| ProblemError::Barrier { block: 0, source })?);
    }
    for (i, ((row, off), loss)) in erm.rows.iter().zip(&erm.offsets).zip(&erm.losses).enumerate() {
        let (sign, shift, w_abs, w_lin) = loss.epigraph_form()?;
        // u - sign a^T x = sign b + shift
        let u = d + 2 * i;
        a[(i, u)] = 1.0;
        for (j, v) in row.iter().enumerate() {
            a[(i, j)] = -sign * v;
        }
        b[i] = sign * off + shift;
        c[u] = w_lin;
        c[u + 1] = w_abs;
        sizes.push(2);
        barriers.push(Barrier::epigraph_abs(Some(cap)).map_err(|source| ProblemError::Barrier { block: d + i, source })?);
    }
    let structure = BlockStructure::new(sizes)?;
    let r_diam = (d as f64 * erm.radius.powi(2) + 2.0 * nt as f64 * cap * cap).sqrt();
    StandardProblem::new(a, b, c, structure, barriers, r_diam)
}

/// Decision coordinates of an ERM standard-form solution.
pub fn erm_decision(erm: &ErmInstance, x: &[f64]) -> Vec<f64> {
    x[..erm.dim()].to_vec()
}

/// `[lower, upper]` for one-dimensional interval barriers.
pub fn interval_bounds(bar: &Barrier) -> Option<(f64, f64)> {
    match bar.kind() {
        BarrierKind::LogPositive => Some((0.0, f64::INFINITY)),
        BarrierKind::LogBox { lower, upper } => Some((*lower, *upper)),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn box_lp() -> StandardProblem {
        // x1 + x2 + x3 = 1 on [0, 2]^3
        let a = DenseMatrix::from_row_slice(1, 3, &[1.0, 1.0, 1.0]);
        let s = BlockStructure::new(vec![1, 1, 1]).unwrap();
        let bars = vec![Barrier::log_box(0.0, 2.0).unwrap(); 3];
        StandardProblem::new(a, vec![1.0], vec![1.0, 2.0, 3.0], s, bars, 1.0).unwrap()
    }

    #[test]
    fn modified_start_is_feasible_and_central() {
        let p = box_lp();
        let delta = 0.01;
        let m = build_modified(&p, delta).unwrap();
        let r = residual(&m.a, &m.x0, &m.b);
        assert!(r.iter().all(|v| v.abs() < 1e-12));
        assert_eq!(m.s0, m.c);
        assert!(m.y0.iter().all(|&v| v == 0.0));
        // centrality is |cost_scale c| in the inverse Hessian norm; Hessian at 1 is 2 per coord
        let direct = (p.c.iter().map(|v| (m.cost_scale * v).powi(2) / 2.0).sum::<f64>()).sqrt();
        assert_relative_eq!(m.centrality().unwrap(), direct, epsilon = 1e-15);
        assert!(m.centrality().unwrap() <= delta);
    }

    #[test]
    fn box_center_is_zero_for_symmetric_box() {
        let bar = Barrier::log_box(-3.0, 3.0).unwrap();
        assert_eq!(bar.analytic_center().unwrap(), vec![0.0]);
    }

    #[test]
    fn infeasibility_scales_with_tau() {
        let p = box_lp();
        let m = build_modified(&p, 0.01).unwrap();
        let mut xf = vec![0.3, 0.4, 0.5];
        let tau = 0.002;
        // move along the kernel of Abar from a feasible point
        xf.push(tau);
        let shift = residual(&p.a, &m.base_point, &p.b);
        let axb = residual(&p.a, &xf[..3], &p.b);
        // Abar xf = b exactly requires A x - b = shift * tau
        let fix = shift[0] * tau - axb[0];
        xf[0] += fix;
        let axb = residual(&p.a, &xf[..3], &p.b);
        assert_relative_eq!(axb[0], shift[0] * tau, epsilon = 1e-14);
    }

    #[test]
    fn certificate_at_exact_center() {
        let a = DenseMatrix::from_row_slice(1, 1, &[1.0]);
        let s = BlockStructure::new(vec![1]).unwrap();
        let bars = vec![Barrier::log_positive()];
        let t = 0.01;
        // x = 1, s = t / x, y = c - s
        let x = [1.0];
        let sv = [t];
        let y = [1.0 - t];
        let cert = gap_certificate(&a, &[1.0], &[1.0], &x, &sv, &y, t, &s, &bars).unwrap();
        assert_relative_eq!(cert, 4.0 * t);
        let bad = gap_certificate(&a, &[1.0], &[1.0], &x, &[10.0 * t], &[1.0 - 10.0 * t], t, &s, &bars);
        assert!(matches!(bad, Err(ProblemError::CertificateInvalid(_))));
    }

    #[test]
    fn certificate_substitution() {
        let nu = 7.0;
        let delta: f64 = 0.03;
        let t = delta * delta / (4.0 * nu);
        assert_relative_eq!(4.0 * t * nu, delta * delta);
    }

    #[test]
    fn validation_reports() {
        assert!(validate(&box_lp()).is_ok());
        let a = DenseMatrix::from_row_slice(3, 3, &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0, 0.0, 1.0, 0.0]);
        let s = BlockStructure::new(vec![1, 1, 1]).unwrap();
        let bars = vec![Barrier::log_box(0.0, 1.0).unwrap(); 3];
        let p = StandardProblem::new(a, vec![1.0, 1.0, 0.5], vec![0.0; 3], s, bars, 1.0).unwrap();
        let rep = validate(&p);
        assert!(rep.issues.contains(&ValidationIssue::DuplicateRow { first: 0, second: 1 }));
        assert!(rep
            .issues
            .iter()
            .any(|i| matches!(i, ValidationIssue::RankDeficient { rank: 2, dependent_rows, .. } if dependent_rows == &vec![1])));
    }

    #[test]
    fn rank_deficient_without_duplicates() {
        let a = DenseMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0]);
        let s = BlockStructure::new(vec![1, 1, 1]).unwrap();
        let bars = vec![Barrier::log_box(0.0, 1.0).unwrap(); 3];
        let p = StandardProblem::new(a, vec![0.5, 0.5, 1.0], vec![0.0; 3], s, bars, 1.0).unwrap();
        let rep = validate(&p);
        assert_eq!(
            rep.issues,
            vec![ValidationIssue::RankDeficient { rank: 2, rows: 3, dependent_rows: vec![2] }]
        );
    }

    #[test]
    fn quantile_half_is_half_abs() {
        let q = Loss::Quantile { theta: 0.5 };
        for r in [-2.0, -0.1, 0.0, 0.7, 3.0] {
            assert_relative_eq!(q.eval(r), 0.5 * Loss::Abs.eval(r));
        }
    }

    #[test]
    fn erm_standard_objective_matches_loss() {
        let erm = ErmInstance {
            rows: vec![vec![1.0, -2.0], vec![0.5, 0.25], vec![-1.0, 1.0]],
            offsets: vec![0.1, -0.3, 0.2],
            losses: vec![Loss::Abs, Loss::Quantile { theta: 0.8 }, Loss::Hinge],
            radius: 2.0,
        };
        let sp = erm_to_standard(&erm).unwrap();
        assert!(validate(&sp).is_ok());
        let x = [0.3, -0.4];
        // build the standard point with z = |u| + slack
        let mut full = x.to_vec();
        let slack = 0.05;
        for (i, loss) in erm.losses.iter().enumerate() {
            let (sign, shift, _, _) = loss.epigraph_form().unwrap();
            let u = sign * (dot(&erm.rows[i], &x) + erm.offsets[i]) + shift;
            full.push(u);
            full.push(u.abs() + slack);
        }
        assert!(residual(&sp.a, &full, &sp.b).iter().all(|v| v.abs() < 1e-14));
        let w_abs: f64 = erm.losses.iter().map(|l| l.epigraph_form().unwrap().2).sum();
        assert_relative_eq!(sp.objective(&full), erm.objective(&x) + slack * w_abs, epsilon = 1e-12);
    }
}
