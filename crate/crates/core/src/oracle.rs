//! Reference solvers: a dense path follower that refactorizes every step, brute-force
//! vertex enumeration for small LPs, and Hessian drift measurements.

use nalgebra::{DVector, SVD};
use thiserror::Error;

use crate::barrier::Barrier;
use crate::blocklin::{small_quadform, spectral_block, BlockDiagMatrix, BlockStructure, CholeskyFactor, DenseMatrix, LinalgError};
use crate::rcp::{PathParams, RcpError, StepWorkspace};

/// Largest LP handled by [`vertex_lp_solve`].
pub const MAX_VERTEX_DIM: usize = 24;
/// Maximum number of candidate bases examined by [`vertex_lp_solve`].
pub const VERTEX_BUDGET: u64 = 2_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Path(#[from] RcpError),
    #[error("LP is infeasible")]
    Infeasible,
    #[error("LP is unbounded")]
    Unbounded,
    #[error("vertex enumeration needs up to {needed:e} bases, budget is {budget}")]
    BudgetExceeded { needed: f64, budget: u64 },
    #[error("invalid oracle input: {0}")]
    InvalidInput(String),
}

/// One exact step of the dense reference.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseRow {
    pub t: f64,
    /// Iterates before the step.
    pub x: Vec<f64>,
    pub s: Vec<f64>,
    pub log_phi: f64,
    pub gammas: Vec<f64>,
    pub delta_x: Vec<f64>,
    pub delta_s: Vec<f64>,
    /// `|delta_x,i|` in the Hessian norm at the query point.
    pub alphas: Vec<f64>,
    /// `sum_i |h_i|*^2` at the query point.
    pub h_dual_sq: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DenseTrace {
    pub rows: Vec<DenseRow>,
    /// Iterates after the last recorded step.
    pub x_final: Vec<f64>,
    pub s_final: Vec<f64>,
}

/// `(delta_x, delta_s)` for direction `h` with scaling `Vt`:
/// `delta_x = Vt h - Vt M Vt h`, `delta_s = t M Vt h`, `M = A^T (A Vt A^T)^{-1} A`.
pub fn exact_step(a: &DenseMatrix, vt: &BlockDiagMatrix, h: &[f64], t: f64) -> Result<(Vec<f64>, Vec<f64>), OracleError> {
    let g = vt.mul_vec(h)?;
    let normal = crate::blocklin::normal_matrix(a, vt)?;
    let chol = CholeskyFactor::new(&normal)?;
    let ag = a * DVector::from_column_slice(&g);
    let mg = a.tr_mul(&chol.solve_vec(&ag));
    let vmg = vt.mul_vec(mg.as_slice())?;
    let dx = g.iter().zip(&vmg).map(|(p, q)| p - q).collect();
    let ds = mg.iter().map(|v| t * v).collect();
    Ok((dx, ds))
}

fn local_norms(xbar: &[f64], dx: &[f64], barriers: &[Barrier], structure: &BlockStructure) -> Result<Vec<f64>, OracleError> {
    let mut out = Vec::with_capacity(structure.m());
    for (i, bar) in barriers.iter().enumerate() {
        let r = structure.range(i);
        let d = r.len();
        let h = bar.hessian(&xbar[r.clone()]).map_err(|e| RcpError::Barrier { block: i, source: e })?;
        out.push(small_quadform(d, h.as_slice(), &dx[r]).max(0.0).sqrt());
    }
    Ok(out)
}

/// Step computed from the query point `(xbar, sbar)` with scaling `vt`, applied to the
/// exact iterates `(x, s)`.
#[allow(clippy::too_many_arguments)]
pub fn dense_step_with(
    x: &[f64],
    s: &[f64],
    xbar: &[f64],
    sbar: &[f64],
    vt: &BlockDiagMatrix,
    t: f64,
    params: &PathParams,
    barriers: &[Barrier],
    a: &DenseMatrix,
) -> Result<(Vec<f64>, Vec<f64>, DenseRow), OracleError> {
    let structure = vt.structure();
    let mut ws = StepWorkspace::new(structure);
    ws.compute(xbar, sbar, t, params, barriers)?;
    let (dx, ds) = exact_step(a, vt, &ws.h, t)?;
    let alphas = local_norms(xbar, &dx, barriers, structure)?;
    let mut h_dual_sq = 0.0;
    for i in 0..structure.m() {
        let r = structure.range(i);
        h_dual_sq += small_quadform(r.len(), ws.wbar.block(i), &ws.h[r]);
    }
    let xn = x.iter().zip(&dx).map(|(p, q)| p + q).collect();
    let sn = s.iter().zip(&ds).map(|(p, q)| p + q).collect();
    let row = DenseRow {
        t,
        x: x.to_vec(),
        s: s.to_vec(),
        log_phi: ws.log_phi,
        gammas: ws.gammas.clone(),
        delta_x: dx,
        delta_s: ds,
        alphas,
        h_dual_sq,
    };
    Ok((xn, sn, row))
}

/// Exact step at `(x, s)` with `Vt = hess(x)^{-1}`.
pub fn dense_step(
    x: &[f64],
    s: &[f64],
    t: f64,
    params: &PathParams,
    barriers: &[Barrier],
    structure: &BlockStructure,
    a: &DenseMatrix,
) -> Result<(Vec<f64>, Vec<f64>, DenseRow), OracleError> {
    let mut ws = StepWorkspace::new(structure);
    ws.compute(x, s, t, params, barriers)?;
    dense_step_with(x, s, x, s, &ws.wbar, t, params, barriers, a)
}

/// Runs `iterations` exact steps of the path schedule from `t = 1`, stopping early at
/// `t <= delta^2 / (4 nu)`.
pub fn dense_path(
    a: &DenseMatrix,
    structure: &BlockStructure,
    barriers: &[Barrier],
    x0: &[f64],
    s0: &[f64],
    params: &PathParams,
    iterations: usize,
) -> Result<DenseTrace, OracleError> {
    let mut x = x0.to_vec();
    let mut s = s0.to_vec();
    let mut rows = Vec::with_capacity(iterations);
    let mut t = 1.0;
    for k in 0..iterations {
        if t <= params.t_final() {
            break;
        }
        let (xn, sn, row) = dense_step(&x, &s, t, params, barriers, structure, a)?;
        rows.push(row);
        x = xn;
        s = sn;
        t = params.t_at(k as u64 + 1);
    }
    Ok(DenseTrace { rows, x_final: x, s_final: s })
}

/// Per-step Hessian drift `|w_i^{-1/2} (w_i' - w_i) w_i^{-1/2}|_F` with `w = hess^{-1}`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DriftReport {
    /// `max_k sqrt(sum_i drift_i^2)`.
    pub c1: f64,
    /// `max_k sqrt(sum_i drift_i^4)`.
    pub c2: f64,
    pub max_block: f64,
    /// `sum_i drift_i^2` for every step.
    pub per_step_sq: Vec<f64>,
}

pub fn block_drift(bar: &Barrier, x: &[f64], x_new: &[f64]) -> Result<f64, OracleError> {
    let d = x.len();
    let h = bar.hessian(x).map_err(|e| RcpError::Barrier { block: 0, source: e })?;
    let hn = bar.hessian(x_new).map_err(|e| RcpError::Barrier { block: 0, source: e })?;
    let mut w = vec![0.0; d * d];
    let mut wn = vec![0.0; d * d];
    let mut root = vec![0.0; d * d];
    let sing = |_| OracleError::Linalg(LinalgError::SingularBlock { block: 0 });
    spectral_block(d, h.as_slice(), &mut w, 0.0, &|v| 1.0 / v).map_err(sing)?;
    spectral_block(d, hn.as_slice(), &mut wn, 0.0, &|v| 1.0 / v).map_err(sing)?;
    spectral_block(d, h.as_slice(), &mut root, 0.0, &f64::sqrt).map_err(sing)?;
    let diff = DenseMatrix::from_row_slice(d, d, &wn) - DenseMatrix::from_row_slice(d, d, &w);
    let r = DenseMatrix::from_row_slice(d, d, &root);
    Ok((&r * diff * &r).norm())
}

pub fn drift_diagnostics(trace: &DenseTrace, barriers: &[Barrier], structure: &BlockStructure) -> Result<DriftReport, OracleError> {
    let mut rep = DriftReport::default();
    let n = trace.rows.len();
    for k in 0..n {
        let x = &trace.rows[k].x;
        let xn = if k + 1 < n { &trace.rows[k + 1].x } else { &trace.x_final };
        let mut sq = 0.0;
        let mut quad = 0.0;
        for (i, bar) in barriers.iter().enumerate() {
            let r = structure.range(i);
            let dr = block_drift(bar, &x[r.clone()], &xn[r])?;
            sq += dr * dr;
            quad += dr.powi(4);
            rep.max_block = rep.max_block.max(dr);
        }
        rep.c1 = rep.c1.max(sq.sqrt());
        rep.c2 = rep.c2.max(quad.sqrt());
        rep.per_step_sq.push(sq);
    }
    Ok(rep)
}

/// Optimal basic feasible solution of `min c^T x`, `A x = b`, `lower <= x <= upper`.
#[derive(Debug, Clone, PartialEq)]
pub struct VertexSolution {
    pub x: Vec<f64>,
    pub objective: f64,
    pub bases_checked: u64,
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

fn independent_rows(a: &DenseMatrix) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::new();
    for i in 0..a.nrows() {
        let mut idx = kept.clone();
        idx.push(i);
        let sub = a.select_rows(idx.iter());
        let sv = SVD::new(sub, false, false).singular_values;
        let top = sv.iter().copied().fold(0.0, f64::max);
        if sv.len() == idx.len() && top > 0.0 && sv.iter().all(|&v| v > 1e-10 * top) {
            kept.push(i);
        }
    }
    kept
}

/// Brute-force enumeration of basic solutions. Lower bounds must be finite; infinite
/// upper bounds are allowed and trigger a recession-cone check for unboundedness.
pub fn vertex_lp_solve(a: &DenseMatrix, b: &[f64], c: &[f64], bounds: &[(f64, f64)]) -> Result<VertexSolution, OracleError> {
    let n = a.ncols();
    if c.len() != n || bounds.len() != n || b.len() != a.nrows() {
        return Err(OracleError::InvalidInput("dimensions of A, b, c and bounds disagree".into()));
    }
    if n > MAX_VERTEX_DIM {
        return Err(OracleError::InvalidInput(format!("n = {n} exceeds {MAX_VERTEX_DIM}")));
    }
    if bounds.iter().any(|&(l, u)| !l.is_finite() || u.is_nan() || u < l) {
        return Err(OracleError::InvalidInput("bounds need finite lower <= upper".into()));
    }
    let rows = independent_rows(a);
    if rows.len() < a.nrows() {
        return Err(OracleError::InvalidInput("A must have full row rank".into()));
    }
    let best = enumerate(a, b, c, bounds)?;
    let free: Vec<usize> = (0..n).filter(|&j| bounds[j].1.is_infinite()).collect();
    if !free.is_empty() && has_descent_ray(a, c, &free)? {
        return Err(OracleError::Unbounded);
    }
    Ok(best)
}

/// Drops rows implied by the others. `None` when a dropped row contradicts them.
fn reduce_rows(a: &DenseMatrix, b: &[f64]) -> Option<(DenseMatrix, Vec<f64>)> {
    let keep = independent_rows(a);
    let sys = a.select_rows(keep.iter());
    let rhs: Vec<f64> = keep.iter().map(|&i| b[i]).collect();
    let gram = &sys * sys.transpose();
    let chol = CholeskyFactor::new(&gram).ok()?;
    for i in (0..a.nrows()).filter(|i| !keep.contains(i)) {
        let row = a.row(i).transpose();
        let w = chol.solve_vec(&(&sys * row));
        let implied: f64 = w.iter().zip(&rhs).map(|(p, q)| p * q).sum();
        if (implied - b[i]).abs() > 1e-9 * (1.0 + b[i].abs()) {
            return None;
        }
    }
    Some((sys, rhs))
}

/// Whether `{A_F r = 0, r >= 0, sum r = 1}` has a point with `c_F^T r < 0`.
fn has_descent_ray(a: &DenseMatrix, c: &[f64], free: &[usize]) -> Result<bool, OracleError> {
    let k = free.len();
    let af = a.select_columns(free.iter());
    let mut stacked = DenseMatrix::zeros(af.nrows() + 1, k);
    stacked.view_mut((1, 0), (af.nrows(), k)).copy_from(&af);
    for j in 0..k {
        stacked[(0, j)] = 1.0;
    }
    let mut rhs = vec![0.0; af.nrows() + 1];
    rhs[0] = 1.0;
    let Some((sys, rhs)) = reduce_rows(&stacked, &rhs) else {
        return Ok(false);
    };
    let cf: Vec<f64> = free.iter().map(|&j| c[j]).collect();
    match enumerate(&sys, &rhs, &cf, &vec![(0.0, f64::INFINITY); k]) {
        Ok(sol) => Ok(sol.objective < -1e-12),
        Err(OracleError::Infeasible) => Ok(false),
        Err(e) => Err(e),
    }
}

fn enumerate(a: &DenseMatrix, b: &[f64], c: &[f64], bounds: &[(f64, f64)]) -> Result<VertexSolution, OracleError> {
    let (d, n) = a.shape();
    if d > n {
        return Err(OracleError::InvalidInput("more rows than columns".into()));
    }
    let finite_upper = bounds.iter().filter(|(_, u)| u.is_finite()).count();
    let needed = binomial(n, d) * 2f64.powi(finite_upper.min(n - d) as i32);
    if needed > VERTEX_BUDGET as f64 {
        return Err(OracleError::BudgetExceeded { needed, budget: VERTEX_BUDGET });
    }
    let bv = DVector::from_column_slice(b);
    let scale = 1.0 + a.amax();
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut checked = 0u64;
    let mut basis: Vec<usize> = (0..d).collect();
    let mut x = vec![0.0; n];
    loop {
        let mut in_basis = vec![false; n];
        for &j in &basis {
            in_basis[j] = true;
        }
        let nonbasic: Vec<usize> = (0..n).filter(|&j| !in_basis[j]).collect();
        let ab = a.select_columns(basis.iter());
        let lu = ab.clone().lu();
        let rcond_ok = {
            let u = lu.u();
            let diag_min = (0..d).map(|i| u[(i, i)].abs()).fold(f64::INFINITY, f64::min);
            d == 0 || diag_min > 1e-11 * scale
        };
        if rcond_ok {
            let base = lu.solve(&bv).ok_or(OracleError::Linalg(LinalgError::SingularBlock { block: 0 }))?;
            let cols: Vec<DVector<f64>> = nonbasic
                .iter()
                .map(|&j| lu.solve(&a.column(j).into_owned()).expect("nonsingular basis"))
                .collect();
            let options: Vec<usize> = nonbasic.iter().map(|&j| if bounds[j].1.is_finite() && bounds[j].1 > bounds[j].0 { 2 } else { 1 }).collect();
            let mut choice = vec![0usize; nonbasic.len()];
            loop {
                checked += 1;
                let mut xb = base.clone();
                for (k, &j) in nonbasic.iter().enumerate() {
                    let v = if choice[k] == 0 { bounds[j].0 } else { bounds[j].1 };
                    x[j] = v;
                    if v != 0.0 {
                        xb.axpy(-v, &cols[k], 1.0);
                    }
                }
                let mut feasible = true;
                for (k, &j) in basis.iter().enumerate() {
                    let (l, u) = bounds[j];
                    let v = xb[k];
                    if v < l - 1e-9 * (1.0 + l.abs()) || v > u + 1e-9 * (1.0 + u.abs()) {
                        feasible = false;
                        break;
                    }
                    x[j] = v.clamp(l, u);
                }
                if feasible {
                    let obj: f64 = c.iter().zip(&x).map(|(p, q)| p * q).sum();
                    if best.as_ref().is_none_or(|(bo, _)| obj < *bo) {
                        best = Some((obj, x.clone()));
                    }
                }
                // mixed-radix increment
                let mut k = 0;
                while k < choice.len() {
                    choice[k] += 1;
                    if choice[k] < options[k] {
                        break;
                    }
                    choice[k] = 0;
                    k += 1;
                }
                if k == choice.len() {
                    break;
                }
            }
        }
        if !next_combination(&mut basis, n) {
            break;
        }
    }
    match best {
        Some((objective, x)) => Ok(VertexSolution { x, objective, bases_checked: checked }),
        None => Err(OracleError::Infeasible),
    }
}

fn next_combination(idx: &mut [usize], n: usize) -> bool {
    let k = idx.len();
    let mut i = k;
    while i > 0 {
        i -= 1;
        if idx[i] < n - k + i {
            idx[i] += 1;
            for j in i + 1..k {
                idx[j] = idx[j - 1] + 1;
            }
            return true;
        }
    }
    false
}
