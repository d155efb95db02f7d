//! Self-concordant barriers for the per-block sets.

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::blocklin::{small_congruence_eigs, small_quadform, small_solve, spectral_block, DenseMatrix};

pub const DEFAULT_DOMAIN_MARGIN: f64 = 1e-12;
pub const DEFAULT_SC_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BarrierError {
    #[error("point is outside the barrier domain")]
    OutOfDomain,
    #[error("expected a point of dimension {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("barrier has no analytic center and none was supplied")]
    MissingAnalyticCenter,
    #[error("damped Newton did not converge to the analytic center")]
    CenterNotFound,
    #[error("hessian is not positive definite")]
    SingularHessian,
    #[error("invalid barrier parameter: {0}")]
    InvalidParameter(String),
}

/// User-supplied barrier. `value` may return `f64::INFINITY` outside the domain.
pub trait CustomBarrier: Send + Sync {
    fn dim(&self) -> usize;
    fn nu(&self) -> f64;
    fn is_interior(&self, x: &[f64], margin: f64) -> bool;
    fn value(&self, x: &[f64]) -> f64;
    fn gradient(&self, x: &[f64], out: &mut [f64]);
    /// Row-major `dim x dim` Hessian.
    fn hessian(&self, x: &[f64], out: &mut [f64]);
    /// Closed-form minimizer, if known.
    fn analytic_center(&self) -> Option<Vec<f64>> {
        None
    }
    /// Any strictly interior point; used to start damped Newton for the center.
    fn interior_point(&self) -> Option<Vec<f64>> {
        None
    }
}

#[derive(Clone)]
pub enum BarrierKind {
    /// `-log x` on `x > 0`.
    LogPositive,
    /// `-log(x - lower) - log(upper - x)`.
    LogBox { lower: f64, upper: f64 },
    /// `-log(radius^2 - |x|^2)` in dimension `dim`.
    Ball { dim: usize, radius: f64 },
    /// `-log(z^2 - y^2)` on `|y| < z`, plus `-log(cap - z)` when capped.
    EpigraphAbs { cap: Option<f64> },
    Custom(Arc<dyn CustomBarrier>),
}

impl fmt::Debug for BarrierKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::LogPositive => write!(f, "LogPositive"),
            Self::LogBox { lower, upper } => write!(f, "LogBox[{lower}, {upper}]"),
            Self::Ball { dim, radius } => write!(f, "Ball(dim={dim}, r={radius})"),
            Self::EpigraphAbs { cap } => write!(f, "EpigraphAbs(cap={cap:?})"),
            Self::Custom(c) => write!(f, "Custom(dim={}, nu={})", c.dim(), c.nu()),
        }
    }
}

/// A barrier attached to one block, optionally carrying a user-chosen reference point
/// that replaces the analytic center when the set has none.
#[derive(Debug, Clone)]
pub struct Barrier {
    kind: BarrierKind,
    reference_point: Option<Vec<f64>>,
    margin: f64,
}

impl Barrier {
    pub fn new(kind: BarrierKind) -> Result<Self, BarrierError> {
        match &kind {
            BarrierKind::LogBox { lower, upper } if !(lower < upper) || !lower.is_finite() || !upper.is_finite() => {
                return Err(BarrierError::InvalidParameter(format!("box [{lower}, {upper}] is empty")));
            }
            BarrierKind::Ball { dim, radius } if *dim == 0 || !(*radius > 0.0) => {
                return Err(BarrierError::InvalidParameter("ball needs dim >= 1 and radius > 0".into()));
            }
            BarrierKind::EpigraphAbs { cap: Some(c) } if !(*c > 0.0) => {
                return Err(BarrierError::InvalidParameter("epigraph cap must be positive".into()));
            }
            BarrierKind::Custom(c) if !(c.nu() >= 1.0) => {
                return Err(BarrierError::InvalidParameter("custom barrier must declare nu >= 1".into()));
            }
            _ => {}
        }
        let bar = Self { kind, reference_point: None, margin: DEFAULT_DOMAIN_MARGIN };
        if let BarrierKind::Custom(c) = &bar.kind {
            let probe = c.analytic_center().or_else(|| c.interior_point());
            if let Some(p) = probe {
                if matches!(check_gradient_bound(&bar, &p, 1e-6), Ok(false)) {
                    log::warn!("custom barrier violates its declared nu at a probe point");
                }
            }
        }
        Ok(bar)
    }

    pub fn log_positive() -> Self {
        Self::new(BarrierKind::LogPositive).expect("valid")
    }

    pub fn log_box(lower: f64, upper: f64) -> Result<Self, BarrierError> {
        Self::new(BarrierKind::LogBox { lower, upper })
    }

    pub fn ball(dim: usize, radius: f64) -> Result<Self, BarrierError> {
        Self::new(BarrierKind::Ball { dim, radius })
    }

    pub fn epigraph_abs(cap: Option<f64>) -> Result<Self, BarrierError> {
        Self::new(BarrierKind::EpigraphAbs { cap })
    }

    pub fn custom(c: Arc<dyn CustomBarrier>) -> Result<Self, BarrierError> {
        Self::new(BarrierKind::Custom(c))
    }

    /// Attach a reference point used as the starting point when there is no analytic center.
    pub fn with_reference_point(mut self, point: Vec<f64>) -> Result<Self, BarrierError> {
        if point.len() != self.dim() {
            return Err(BarrierError::DimensionMismatch { expected: self.dim(), found: point.len() });
        }
        if !self.is_interior(&point) {
            return Err(BarrierError::OutOfDomain);
        }
        self.reference_point = Some(point);
        Ok(self)
    }

    pub fn with_margin(mut self, margin: f64) -> Self {
        self.margin = margin;
        self
    }

    pub fn margin(&self) -> f64 {
        self.margin
    }

    pub fn kind(&self) -> &BarrierKind {
        &self.kind
    }

    pub fn reference_point(&self) -> Option<&[f64]> {
        self.reference_point.as_deref()
    }

    pub fn dim(&self) -> usize {
        match &self.kind {
            BarrierKind::LogPositive | BarrierKind::LogBox { .. } => 1,
            BarrierKind::Ball { dim, .. } => *dim,
            BarrierKind::EpigraphAbs { .. } => 2,
            BarrierKind::Custom(c) => c.dim(),
        }
    }

    pub fn nu(&self) -> f64 {
        match &self.kind {
            BarrierKind::LogPositive => 1.0,
            BarrierKind::LogBox { .. } | BarrierKind::Ball { .. } => 2.0,
            BarrierKind::EpigraphAbs { cap } => {
                if cap.is_some() {
                    3.0
                } else {
                    2.0
                }
            }
            BarrierKind::Custom(c) => c.nu(),
        }
    }

    pub fn is_interior(&self, x: &[f64]) -> bool {
        if x.len() != self.dim() || x.iter().any(|v| !v.is_finite()) {
            return false;
        }
        let eps = self.margin;
        match &self.kind {
            BarrierKind::LogPositive => x[0] >= eps,
            BarrierKind::LogBox { lower, upper } => x[0] - lower >= eps && upper - x[0] >= eps,
            BarrierKind::Ball { radius, .. } => radius * radius - sq_norm(x) >= eps,
            BarrierKind::EpigraphAbs { cap } => {
                let (y, z) = (x[0], x[1]);
                z - y.abs() >= eps && cap.is_none_or(|c| c - z >= eps)
            }
            BarrierKind::Custom(c) => c.is_interior(x, eps),
        }
    }

    fn check(&self, x: &[f64]) -> Result<(), BarrierError> {
        if x.len() != self.dim() {
            return Err(BarrierError::DimensionMismatch { expected: self.dim(), found: x.len() });
        }
        if !self.is_interior(x) {
            return Err(BarrierError::OutOfDomain);
        }
        Ok(())
    }

    pub fn value(&self, x: &[f64]) -> Result<f64, BarrierError> {
        self.check(x)?;
        Ok(match &self.kind {
            BarrierKind::LogPositive => -x[0].ln(),
            BarrierKind::LogBox { lower, upper } => -(x[0] - lower).ln() - (upper - x[0]).ln(),
            BarrierKind::Ball { radius, .. } => -(radius * radius - sq_norm(x)).ln(),
            BarrierKind::EpigraphAbs { cap } => {
                let (y, z) = (x[0], x[1]);
                -((z - y) * (z + y)).ln() - cap.map_or(0.0, |c| (c - z).ln())
            }
            BarrierKind::Custom(c) => c.value(x),
        })
    }

    /// Writes the gradient into `g` and the row-major Hessian into `h`.
    pub fn derivatives(&self, x: &[f64], g: &mut [f64], h: &mut [f64]) -> Result<(), BarrierError> {
        self.check(x)?;
        match &self.kind {
            BarrierKind::LogPositive => {
                let inv = 1.0 / x[0];
                g[0] = -inv;
                h[0] = inv * inv;
            }
            BarrierKind::LogBox { lower, upper } => {
                let a = 1.0 / (x[0] - lower);
                let b = 1.0 / (upper - x[0]);
                g[0] = b - a;
                h[0] = a * a + b * b;
            }
            BarrierKind::Ball { dim, radius } => {
                let d = *dim;
                let q = radius * radius - sq_norm(x);
                let iq = 1.0 / q;
                for r in 0..d {
                    g[r] = 2.0 * x[r] * iq;
                    for c in 0..d {
                        h[r * d + c] = 4.0 * x[r] * x[c] * iq * iq + if r == c { 2.0 * iq } else { 0.0 };
                    }
                }
            }
            BarrierKind::EpigraphAbs { cap } => {
                let (y, z) = (x[0], x[1]);
                let iq = 1.0 / ((z - y) * (z + y));
                g[0] = 2.0 * y * iq;
                g[1] = -2.0 * z * iq;
                h[0] = 2.0 * iq + 4.0 * y * y * iq * iq;
                h[1] = -4.0 * y * z * iq * iq;
                h[2] = h[1];
                h[3] = -2.0 * iq + 4.0 * z * z * iq * iq;
                if let Some(c) = cap {
                    let ic = 1.0 / (c - z);
                    g[1] += ic;
                    h[3] += ic * ic;
                }
            }
            BarrierKind::Custom(c) => {
                c.gradient(x, g);
                c.hessian(x, h);
            }
        }
        Ok(())
    }

    pub fn gradient(&self, x: &[f64]) -> Result<Vec<f64>, BarrierError> {
        let d = self.dim();
        let mut g = vec![0.0; d];
        let mut h = vec![0.0; d * d];
        self.derivatives(x, &mut g, &mut h)?;
        Ok(g)
    }

    pub fn hessian(&self, x: &[f64]) -> Result<DenseMatrix, BarrierError> {
        let d = self.dim();
        let mut g = vec![0.0; d];
        let mut h = vec![0.0; d * d];
        self.derivatives(x, &mut g, &mut h)?;
        Ok(DenseMatrix::from_row_slice(d, d, &h))
    }

    /// Minimizer of the barrier. Closed form where known, then a user reference point,
    /// then damped Newton from an interior point.
    pub fn analytic_center(&self) -> Result<Vec<f64>, BarrierError> {
        match &self.kind {
            BarrierKind::LogPositive => {}
            BarrierKind::LogBox { lower, upper } => return Ok(vec![0.5 * (lower + upper)]),
            BarrierKind::Ball { dim, .. } => return Ok(vec![0.0; *dim]),
            BarrierKind::EpigraphAbs { cap: Some(c) } => return Ok(vec![0.0, 2.0 * c / 3.0]),
            BarrierKind::EpigraphAbs { cap: None } => {}
            BarrierKind::Custom(c) => {
                if let Some(p) = c.analytic_center() {
                    return Ok(p);
                }
                if let Some(p) = c.interior_point() {
                    return damped_newton_center(self, p);
                }
            }
        }
        self.reference_point.clone().ok_or(BarrierError::MissingAnalyticCenter)
    }

    /// Whether `analytic_center` returns a true minimizer rather than a reference point.
    pub fn has_bounded_center(&self) -> bool {
        match &self.kind {
            BarrierKind::LogPositive | BarrierKind::EpigraphAbs { cap: None } => false,
            BarrierKind::Custom(c) => c.analytic_center().is_some() || c.interior_point().is_some(),
            _ => true,
        }
    }
}

fn sq_norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

/// Damped Newton on the barrier value, stopping at Newton decrement below 1e-10.
pub fn damped_newton_center(bar: &Barrier, start: Vec<f64>) -> Result<Vec<f64>, BarrierError> {
    let d = bar.dim();
    let mut x = start;
    let mut g = vec![0.0; d];
    let mut h = vec![0.0; d * d];
    let mut step = vec![0.0; d];
    for _ in 0..500 {
        bar.derivatives(&x, &mut g, &mut h)?;
        small_solve(d, &h, &g, &mut step, 0.0).map_err(|_| BarrierError::SingularHessian)?;
        let dec = g.iter().zip(&step).map(|(a, b)| a * b).sum::<f64>().max(0.0).sqrt();
        if dec < 1e-10 {
            return Ok(x);
        }
        let scale = 1.0 / (1.0 + dec);
        for k in 0..d {
            x[k] -= scale * step[k];
        }
        if !bar.is_interior(&x) {
            return Err(BarrierError::CenterNotFound);
        }
    }
    Err(BarrierError::CenterNotFound)
}

pub fn grad(bar: &Barrier, x: &[f64]) -> Result<Vec<f64>, BarrierError> {
    bar.gradient(x)
}

pub fn hess(bar: &Barrier, x: &[f64]) -> Result<DenseMatrix, BarrierError> {
    bar.hessian(x)
}

/// `(1-r)^2 H(x) <= H(y) <= (1-r)^{-2} H(x)` with `r = |y - x|_x < 1`.
/// Returns false when `r >= 1`.
pub fn check_hessian_stability(bar: &Barrier, x: &[f64], y: &[f64], tol: f64) -> Result<bool, BarrierError> {
    let d = bar.dim();
    let hx = bar.hessian(x)?;
    let hx = hx.as_slice().to_vec();
    let hx_rm = transpose_square(d, &hx);
    let diff: Vec<f64> = y.iter().zip(x).map(|(a, b)| a - b).collect();
    let r = small_quadform(d, &hx_rm, &diff).max(0.0).sqrt();
    if r >= 1.0 {
        return Ok(false);
    }
    if !bar.is_interior(y) {
        return Ok(false);
    }
    let hy = transpose_square(d, bar.hessian(y)?.as_slice());
    let mut p = vec![0.0; d * d];
    spectral_block(d, &hx_rm, &mut p, 0.0, &|v| 1.0 / v.sqrt()).map_err(|_| BarrierError::SingularHessian)?;
    let eigs = small_congruence_eigs(d, &p, &hy);
    let lo = (1.0 - r).powi(2);
    let hi = 1.0 / lo;
    Ok(eigs[..d].iter().all(|&e| e >= lo * (1.0 - tol) - tol && e <= hi * (1.0 + tol) + tol))
}

/// `|grad(x)|_{H(x)^{-1}} <= sqrt(nu) + tol`.
pub fn check_gradient_bound(bar: &Barrier, x: &[f64], tol: f64) -> Result<bool, BarrierError> {
    Ok(dual_norm_of_gradient(bar, x)? <= bar.nu().sqrt() + tol)
}

pub fn dual_norm_of_gradient(bar: &Barrier, x: &[f64]) -> Result<f64, BarrierError> {
    let d = bar.dim();
    let mut g = vec![0.0; d];
    let mut h = vec![0.0; d * d];
    bar.derivatives(x, &mut g, &mut h)?;
    let mut sol = vec![0.0; d];
    small_solve(d, &h, &g, &mut sol, 0.0).map_err(|_| BarrierError::SingularHessian)?;
    Ok(g.iter().zip(&sol).map(|(a, b)| a * b).sum::<f64>().max(0.0).sqrt())
}

fn transpose_square(d: usize, col_major: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; d * d];
    for r in 0..d {
        for c in 0..d {
            out[r * d + c] = col_major[c * d + r];
        }
    }
    out
}
