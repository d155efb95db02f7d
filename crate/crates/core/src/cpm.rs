//! Central path maintenance.
//!
//! Keeps `M = A^T (A V A^T)^{-1} A` and the sketched product `Q = R sqrt(V) M` under a
//! slowly drifting block-diagonal target `W`. The exact iterates are stored implicitly as
//! `x = u1 + Vt M u2` and `s = u3 + M u4`, where `Vt` is a lazily updated copy of `V`
//! that differs from it on fewer than `n^a` blocks. The explicit approximations `xbar` and
//! `sbar` are advanced with sketched estimates of each step.

use nalgebra::DVector;
use thiserror::Error;

use crate::blocklin::{
    rank_update, small_eigenvalues, small_matmul, small_matvec, spectral_block, woodbury_core, BlockDiagMatrix,
    BlockStructure, CholeskyFactor, DenseMatrix, LinalgError, Tolerances,
};
use crate::sketch::{create_bank, default_count, default_rows, SketchBank, SketchError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CpmError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Sketch(#[from] SketchError),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("path parameter increased from {previous} to {requested}")]
    PathParameterIncreased { previous: f64, requested: f64 },
    #[error("invalid maintenance configuration: {0}")]
    InvalidConfig(String),
}

/// How sketches are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SketchMode {
    /// `ceil(sqrt(n) ln(n)^2)` rows, falling back to the identity once that reaches `n`.
    Auto,
    /// `R = I`: every estimate is exact.
    Identity,
    /// Fixed number of rows per sub-sketch.
    Rows(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaintenanceConfig {
    /// Closeness tolerance; `None` picks `1/max(4, ceil(ln(n)^2))`, capped at 0.24.
    pub eps_mp: Option<f64>,
    /// Batch exponent `a`: full updates fire once `n^a` blocks drift.
    pub batch_exp: f64,
    /// Exponent used by the diagnostic weights.
    pub omega: f64,
    pub sketch: SketchMode,
    /// Sub-sketches per bank; `None` picks `ceil(sqrt(n)) + 8`.
    pub bank_count: Option<usize>,
    pub seed: u64,
    /// Evaluate the weighted drift potential on every update.
    pub psi_diagnostics: bool,
    pub tolerances: Tolerances,
}

impl Default for MaintenanceConfig {
    fn default() -> Self {
        Self {
            eps_mp: None,
            batch_exp: 0.31,
            omega: 2.38,
            sketch: SketchMode::Auto,
            bank_count: None,
            seed: 0,
            psi_diagnostics: false,
            tolerances: Tolerances::default(),
        }
    }
}

pub fn default_eps_mp(n: usize) -> f64 {
    let l2 = (n.max(2) as f64).ln().powi(2).ceil();
    (1.0 / l2.max(4.0)).min(0.24)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateBranch {
    Partial,
    Full,
    /// Woodbury failed and everything was recomputed from the exact iterates.
    Rebuild,
}

impl UpdateBranch {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Partial => "partial",
            Self::Full => "full",
            Self::Rebuild => "rebuild",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpdateReport {
    pub branch: UpdateBranch,
    /// Number of blocks updated by a full update, or the violating count otherwise.
    pub r: usize,
    /// Blocks whose `Vt` changed.
    pub changed_blocks: usize,
    /// Blocks where `Vt != V` after the update.
    pub lazy_blocks: usize,
    pub psi_potential: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MaintenanceCounters {
    pub partial_updates: u64,
    pub full_updates: u64,
    pub rebuilds: u64,
    pub moves: u64,
}

/// ψ envelope on the Frobenius norm `r` of a block deviation.
pub fn psi(eps: f64, r: f64) -> f64 {
    let r = r.abs();
    if r <= eps {
        r * r / (2.0 * eps)
    } else if r <= 2.0 * eps {
        let q = 4.0 * eps * eps - r * r;
        eps - q * q / (18.0 * eps * eps * eps)
    } else {
        eps
    }
}

/// ψ applied to a row-major square block.
pub fn psi_matrix(eps: f64, x: &[f64]) -> f64 {
    psi(eps, x.iter().map(|v| v * v).sum::<f64>().sqrt())
}

/// Rank-dependent weight `g_i` for 1-based rank `i`.
pub fn g_weight(i: usize, n: usize, a: f64, omega: f64) -> f64 {
    let nf = n as f64;
    let na = nf.powf(a);
    if (i as f64) < na {
        1.0 / na
    } else {
        let e = (omega - 2.0) / (1.0 - a);
        (i as f64).powf(e) * nf.powf(-a * e)
    }
}

/// `sum_i g_i psi(x_(i))` with the deviations sorted by decreasing norm.
pub fn weighted_potential(norms: &[f64], eps: f64, n: usize, a: f64, omega: f64) -> f64 {
    let mut sorted: Vec<f64> = norms.to_vec();
    sorted.sort_by(|x, y| y.total_cmp(x));
    sorted.iter().enumerate().map(|(k, &r)| g_weight(k + 1, n, a, omega) * psi(eps, r)).sum()
}

/// Permutation sorting `values` in decreasing order, ties broken by ascending index.
pub fn sort_desc_permutation(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[j].total_cmp(&values[i]).then(i.cmp(&j)));
    order
}

/// Final `r` after the soft expansion loop over norms sorted by `order`.
pub fn expand_batch(norms: &[f64], order: &[usize], r_start: usize) -> usize {
    let m = order.len();
    let shrink = 1.0 - 1.0 / (m as f64).ln();
    let mut r = r_start.clamp(1, m.max(1));
    while 1.5 * (r as f64) < m as f64 {
        let next = (1.5 * r as f64).ceil() as usize;
        if norms[order[next - 1]] >= shrink * norms[order[r - 1]] {
            r = next.min(m);
        } else {
            break;
        }
    }
    r
}

/// Frobenius norm of `P W P - I` and whether `W` leaves the `(1 +- eps)` sandwich around `P^{-2}`.
fn block_deviation(d: usize, p: &[f64], w: &[f64], eps: f64) -> (f64, bool) {
    if d == 1 {
        let y = p[0] * p[0] * w[0] - 1.0;
        return (y.abs(), y.abs() > eps);
    }
    let mut tmp = [0.0; 16];
    let mut y = [0.0; 16];
    small_matmul(d, p, w, &mut tmp);
    small_matmul(d, &tmp[..d * d], p, &mut y);
    let mut fro = 0.0;
    for r in 0..d {
        for c in 0..d {
            let v = y[r * d + c] - if r == c { 1.0 } else { 0.0 };
            fro += v * v;
        }
    }
    let fro = fro.sqrt();
    if fro <= eps {
        return (fro, false);
    }
    let eigs = small_eigenvalues(d, &y[..d * d]).1;
    let outside = eigs[..d].iter().any(|&e| e < 1.0 - eps || e > 1.0 + eps);
    (fro, outside)
}

/// Block-diagonal matrix together with its square root and inverse square root.
#[derive(Debug, Clone)]
struct RootedBlocks {
    mat: BlockDiagMatrix,
    sqrt: BlockDiagMatrix,
    inv_sqrt: BlockDiagMatrix,
}

impl RootedBlocks {
    fn new(mat: &BlockDiagMatrix, pd_tol: f64) -> Result<Self, LinalgError> {
        Ok(Self { sqrt: mat.spectral_map(pd_tol, f64::sqrt)?, inv_sqrt: mat.spectral_map(pd_tol, |x| 1.0 / x.sqrt())?, mat: mat.clone() })
    }

    fn set_block(&mut self, i: usize, src: &BlockDiagMatrix, pd_tol: f64) -> Result<(), LinalgError> {
        self.mat.copy_block_from(src, i);
        let d = self.mat.structure().size(i);
        spectral_block(d, src.block(i), self.sqrt.block_mut(i), pd_tol, &f64::sqrt).map_err(|_| LinalgError::SingularBlock { block: i })?;
        spectral_block(d, src.block(i), self.inv_sqrt.block_mut(i), pd_tol, &|x| 1.0 / x.sqrt())
            .map_err(|_| LinalgError::SingularBlock { block: i })?;
        Ok(())
    }

    fn copy_block(&mut self, other: &RootedBlocks, i: usize) {
        self.mat.copy_block_from(&other.mat, i);
        self.sqrt.copy_block_from(&other.sqrt, i);
        self.inv_sqrt.copy_block_from(&other.inv_sqrt, i);
    }

    fn block_eq(&self, other: &BlockDiagMatrix, i: usize) -> bool {
        self.mat.block_eq(other, i)
    }
}

#[derive(Debug, Clone)]
pub struct MaintenanceState {
    a: DenseMatrix,
    structure: BlockStructure,
    eps_mp: f64,
    batch_exp: f64,
    omega: f64,
    batch_threshold: f64,
    tol: Tolerances,
    psi_diagnostics: bool,

    wbar: BlockDiagMatrix,
    v: RootedBlocks,
    vt: RootedBlocks,
    m: DenseMatrix,
    q: DenseMatrix,
    u1: Vec<f64>,
    u2: Vec<f64>,
    u3: Vec<f64>,
    u4: Vec<f64>,
    xbar: Vec<f64>,
    sbar: Vec<f64>,
    bank: SketchBank,
    t_pre: Option<f64>,
    t_last: Option<f64>,

    lazy_blocks: Vec<usize>,
    lazy_coords: Vec<usize>,
    lazy_core: DenseMatrix,

    counters: MaintenanceCounters,
    norms: Vec<f64>,
    outside: Vec<bool>,
    g: Vec<f64>,
    z: Vec<f64>,
    p: Vec<f64>,
    back: Vec<f64>,
    block_mark: Vec<bool>,
    active: Vec<usize>,
}

fn compute_projection(a: &DenseMatrix, v: &BlockDiagMatrix) -> Result<DenseMatrix, LinalgError> {
    let normal = crate::blocklin::normal_matrix(a, v)?;
    let chol = CholeskyFactor::new(&normal)?;
    let y = chol.solve(a);
    let mut m = a.transpose() * y;
    crate::blocklin::symmetrize(&mut m);
    Ok(m)
}

fn block_left_mul(mat: &BlockDiagMatrix, x: &DenseMatrix) -> DenseMatrix {
    let s = mat.structure();
    let mut out = DenseMatrix::zeros(x.nrows(), x.ncols());
    for i in 0..s.m() {
        let d = s.size(i);
        let off = s.offset(i);
        let blk = mat.block(i);
        for r in 0..d {
            for k in 0..d {
                let w = blk[r * d + k];
                if w != 0.0 {
                    for c in 0..x.ncols() {
                        out[(off + r, c)] += w * x[(off + k, c)];
                    }
                }
            }
        }
    }
    out
}

impl MaintenanceState {
    /// Builds the structure for `x`, `s` and target `W`.
    pub fn initialize(
        a: &DenseMatrix,
        x: &[f64],
        s: &[f64],
        w: &BlockDiagMatrix,
        config: &MaintenanceConfig,
    ) -> Result<Self, CpmError> {
        let structure = w.structure().clone();
        let n = structure.n();
        if a.ncols() != n {
            return Err(CpmError::DimensionMismatch { expected: n, found: a.ncols() });
        }
        if x.len() != n || s.len() != n {
            return Err(CpmError::DimensionMismatch { expected: n, found: x.len().min(s.len()) });
        }
        if !(config.batch_exp > 0.0 && config.batch_exp < 1.0) {
            return Err(CpmError::InvalidConfig(format!("batch exponent {} not in (0,1)", config.batch_exp)));
        }
        let eps_mp = config.eps_mp.unwrap_or_else(|| default_eps_mp(n));
        if !(eps_mp > 0.0 && eps_mp < 0.25) {
            return Err(CpmError::InvalidConfig(format!("eps_mp {eps_mp} not in (0, 1/4)")));
        }
        let bank = match config.sketch {
            SketchMode::Identity => SketchBank::identity(n),
            SketchMode::Auto => {
                let b = default_rows(n);
                if b >= n {
                    SketchBank::identity(n)
                } else {
                    create_bank(b, n, config.bank_count.unwrap_or_else(|| default_count(n)), config.seed)?
                }
            }
            SketchMode::Rows(b) => create_bank(b, n, config.bank_count.unwrap_or_else(|| default_count(n)), config.seed)?,
        };
        let tol = config.tolerances;
        let v = RootedBlocks::new(w, tol.pd)?;
        let m = compute_projection(a, w)?;
        let mut state = Self {
            a: a.clone(),
            eps_mp,
            batch_exp: config.batch_exp,
            omega: config.omega,
            batch_threshold: (n as f64).powf(config.batch_exp),
            tol,
            psi_diagnostics: config.psi_diagnostics,
            wbar: w.clone(),
            vt: v.clone(),
            v,
            q: DenseMatrix::zeros(0, 0),
            m,
            u1: x.to_vec(),
            u2: vec![0.0; n],
            u3: s.to_vec(),
            u4: vec![0.0; n],
            xbar: x.to_vec(),
            sbar: s.to_vec(),
            bank,
            t_pre: None,
            t_last: None,
            lazy_blocks: Vec::new(),
            lazy_coords: Vec::new(),
            lazy_core: DenseMatrix::zeros(0, 0),
            counters: MaintenanceCounters::default(),
            norms: vec![0.0; structure.m()],
            outside: vec![false; structure.m()],
            g: vec![0.0; n],
            z: vec![0.0; n],
            p: Vec::new(),
            back: vec![0.0; n],
            block_mark: vec![false; structure.m()],
            active: Vec::with_capacity(structure.m()),
            structure,
        };
        state.q = state.compute_q();
        state.p = vec![0.0; state.bank.b()];
        Ok(state)
    }

    fn compute_q(&self) -> DenseMatrix {
        let root_m = block_left_mul(&self.v.sqrt, &self.m);
        if self.bank.is_identity() {
            root_m
        } else {
            self.bank.entries() * root_m
        }
    }

    /// Recomputes everything from exact iterates, with `V = Vt = Wbar`.
    fn reinitialize(&mut self, x: Vec<f64>, s: Vec<f64>, fresh_sketch: bool) -> Result<(), CpmError> {
        self.v = RootedBlocks::new(&self.wbar, self.tol.pd)?;
        self.vt = self.v.clone();
        self.m = compute_projection(&self.a, &self.wbar)?;
        if fresh_sketch {
            self.bank.regenerate();
        }
        self.q = self.compute_q();
        self.u1.copy_from_slice(&x);
        self.u2.iter_mut().for_each(|v| *v = 0.0);
        self.u3.copy_from_slice(&s);
        self.u4.iter_mut().for_each(|v| *v = 0.0);
        self.xbar = x;
        self.sbar = s;
        self.lazy_blocks.clear();
        self.lazy_coords.clear();
        self.lazy_core = DenseMatrix::zeros(0, 0);
        self.t_pre = self.t_last;
        Ok(())
    }

    fn rebuild_from_exact(&mut self) -> Result<(), CpmError> {
        let (x, s) = self.exact_iterates();
        self.counters.rebuilds += 1;
        self.reinitialize(x, s, true)
    }

    /// Exact `(x, s)` from the implicit representation.
    pub fn exact_iterates(&self) -> (Vec<f64>, Vec<f64>) {
        let mu2 = &self.m * DVector::from_column_slice(&self.u2);
        let mu4 = &self.m * DVector::from_column_slice(&self.u4);
        let vmu2 = self.vt.mat.mul_vec(mu2.as_slice()).expect("dimensions fixed");
        let x = self.u1.iter().zip(&vmu2).map(|(a, b)| a + b).collect();
        let s = self.u3.iter().zip(mu4.iter()).map(|(a, b)| a + b).collect();
        (x, s)
    }

    pub fn query(&self) -> (&[f64], &[f64]) {
        (&self.xbar, &self.sbar)
    }

    /// Processes a new target `Wbar`.
    pub fn update(&mut self, wbar_new: &BlockDiagMatrix) -> Result<UpdateReport, CpmError> {
        let r = self.measure(wbar_new)?;
        let mut report = if (r as f64) < self.batch_threshold {
            self.partial_update(wbar_new, r)?
        } else {
            self.full_update(wbar_new, r)?
        };
        if self.psi_diagnostics {
            report.psi_potential = Some(self.psi_potential());
        }
        Ok(report)
    }

    /// Like [`update`](Self::update) but always takes the Woodbury branch, with at least one block.
    pub fn update_full(&mut self, wbar_new: &BlockDiagMatrix) -> Result<UpdateReport, CpmError> {
        let r = self.measure(wbar_new)?.max(1);
        self.full_update(wbar_new, r)
    }

    fn measure(&mut self, wbar_new: &BlockDiagMatrix) -> Result<usize, CpmError> {
        if wbar_new.structure() != &self.structure {
            return Err(CpmError::DimensionMismatch { expected: self.structure.n(), found: wbar_new.structure().n() });
        }
        let mut r = 0;
        for i in 0..self.structure.m() {
            let d = self.structure.size(i);
            let (norm, out) = block_deviation(d, self.v.inv_sqrt.block(i), wbar_new.block(i), self.eps_mp);
            if !norm.is_finite() {
                return Err(CpmError::Linalg(LinalgError::NonFinite));
            }
            self.norms[i] = norm;
            self.outside[i] = out;
            if norm >= self.eps_mp {
                r += 1;
            }
        }
        Ok(r)
    }

    fn psi_potential(&self) -> f64 {
        let norms: Vec<f64> = (0..self.structure.m())
            .map(|i| block_deviation(self.structure.size(i), self.v.inv_sqrt.block(i), self.wbar.block(i), self.eps_mp).0)
            .collect();
        weighted_potential(&norms, self.eps_mp, self.structure.n(), self.batch_exp, self.omega)
    }

    fn partial_update(&mut self, wbar_new: &BlockDiagMatrix, r: usize) -> Result<UpdateReport, CpmError> {
        self.counters.partial_updates += 1;
        self.wbar.clone_from(wbar_new);
        let mut changed = Vec::new();
        for i in 0..self.structure.m() {
            let same = if self.outside[i] { self.vt.block_eq(&self.wbar, i) } else { self.vt.block_eq(&self.v.mat, i) };
            if !same {
                changed.push(i);
            }
        }
        if changed.is_empty() {
            return Ok(UpdateReport { branch: UpdateBranch::Partial, r, changed_blocks: 0, lazy_blocks: self.lazy_blocks.len(), psi_potential: None });
        }
        let coords = self.structure.coords_of(&changed);
        let u2v = DVector::from_column_slice(&self.u2);
        let u4v = DVector::from_column_slice(&self.u4);
        let mu2: Vec<f64> = coords.iter().map(|&c| self.m.column(c).dot(&u2v)).collect();
        let mu4: Vec<f64> = coords.iter().map(|&c| self.m.column(c).dot(&u4v)).collect();
        let mut pos = 0;
        let mut old = [0.0; 4];
        let mut new = [0.0; 4];
        for &i in &changed {
            let d = self.structure.size(i);
            let off = self.structure.offset(i);
            let y = &mu2[pos..pos + d];
            small_matvec(d, self.vt.mat.block(i), y, &mut old);
            if self.outside[i] {
                self.vt.set_block(i, &self.wbar, self.tol.pd)?;
            } else {
                self.vt.copy_block(&self.v, i);
            }
            small_matvec(d, self.vt.mat.block(i), y, &mut new);
            for k in 0..d {
                self.u1[off + k] += old[k] - new[k];
                self.xbar[off + k] = self.u1[off + k] + new[k];
                self.sbar[off + k] = self.u3[off + k] + mu4[pos + k];
            }
            pos += d;
        }
        let lazy: Vec<usize> = (0..self.structure.m()).filter(|&i| self.outside[i]).collect();
        let changed_count = changed.len();
        if !self.set_lazy(lazy)? {
            self.rebuild_from_exact()?;
            return Ok(UpdateReport { branch: UpdateBranch::Rebuild, r, changed_blocks: changed_count, lazy_blocks: 0, psi_potential: None });
        }
        Ok(UpdateReport { branch: UpdateBranch::Partial, r, changed_blocks: changed_count, lazy_blocks: self.lazy_blocks.len(), psi_potential: None })
    }

    /// Installs the lazy block set and its Woodbury core. Returns false on a singular core.
    fn set_lazy(&mut self, blocks: Vec<usize>) -> Result<bool, CpmError> {
        self.lazy_coords = self.structure.coords_of(&blocks);
        self.lazy_blocks = blocks;
        let k = self.lazy_coords.len();
        if k == 0 {
            self.lazy_core = DenseMatrix::zeros(0, 0);
            return Ok(true);
        }
        let mut delta = DenseMatrix::zeros(k, k);
        let mut pos = 0;
        for &i in &self.lazy_blocks {
            let d = self.structure.size(i);
            let vt = self.vt.mat.block(i);
            let v = self.v.mat.block(i);
            for r in 0..d {
                for c in 0..d {
                    delta[(pos + r, pos + c)] = vt[r * d + c] - v[r * d + c];
                }
            }
            pos += d;
        }
        let m_ss = self.m.select_rows(self.lazy_coords.iter()).select_columns(self.lazy_coords.iter());
        match woodbury_core(&delta, &m_ss) {
            Ok(core) => {
                self.lazy_core = core;
                Ok(true)
            }
            Err(LinalgError::UpdateSingular) => Ok(false),
            Err(e) => Err(e.into()),
        }
    }

    fn full_update(&mut self, wbar_new: &BlockDiagMatrix, r0: usize) -> Result<UpdateReport, CpmError> {
        self.counters.full_updates += 1;
        let order = sort_desc_permutation(&self.norms);
        let r = expand_batch(&self.norms, &order, r0);
        let mut batch: Vec<usize> = order[..r].to_vec();
        batch.sort_unstable();
        let coords = self.structure.coords_of(&batch);
        let k = coords.len();

        let mut delta = DenseMatrix::zeros(k, k);
        let mut pos = 0;
        for &i in &batch {
            let d = self.structure.size(i);
            let w = wbar_new.block(i);
            let v = self.v.mat.block(i);
            for rr in 0..d {
                for cc in 0..d {
                    delta[(pos + rr, pos + cc)] = w[rr * d + cc] - v[rr * d + cc];
                }
            }
            pos += d;
        }
        let m_cols = self.m.select_columns(coords.iter());
        let m_ss = m_cols.select_rows(coords.iter());
        let core = match woodbury_core(&delta, &m_ss) {
            Ok(c) => c,
            Err(LinalgError::UpdateSingular) => {
                self.wbar.clone_from(wbar_new);
                self.rebuild_from_exact()?;
                return Ok(UpdateReport { branch: UpdateBranch::Rebuild, r, changed_blocks: self.structure.m(), lazy_blocks: 0, psi_potential: None });
            }
            Err(e) => return Err(e.into()),
        };

        // (M_old - M_new) u for the representation rebase
        let u2v = DVector::from_column_slice(&self.u2);
        let u4v = DVector::from_column_slice(&self.u4);
        let dy2 = &m_cols * (&core * m_cols.tr_mul(&u2v));
        let dy4 = &m_cols * (&core * m_cols.tr_mul(&u4v));

        // Q update: Q + R (Gamma M_new) + R sqrt(V) (M_new - M)
        let root_cols = block_left_mul(&self.v.sqrt, &m_cols);
        let sketched_cols = if self.bank.is_identity() { root_cols } else { self.bank.entries() * root_cols };
        rank_update_pair(&mut self.q, &sketched_cols, &core, &m_cols, -1.0);
        rank_update(&mut self.m, &m_cols, &core, -1.0);

        let mut gamma = DenseMatrix::zeros(k, k);
        let mut new_v = self.v.clone();
        for &i in &batch {
            new_v.set_block(i, wbar_new, self.tol.pd)?;
        }
        pos = 0;
        for &i in &batch {
            let d = self.structure.size(i);
            let a = new_v.sqrt.block(i);
            let b = self.v.sqrt.block(i);
            for rr in 0..d {
                for cc in 0..d {
                    gamma[(pos + rr, pos + cc)] = a[rr * d + cc] - b[rr * d + cc];
                }
            }
            pos += d;
        }
        let gm = gamma * self.m.select_rows(coords.iter());
        if self.bank.is_identity() {
            for (a, &c) in coords.iter().enumerate() {
                let mut row = self.q.row_mut(c);
                row += gm.row(a);
            }
        } else {
            let r_cols = self.bank.entries().select_columns(coords.iter());
            self.q.gemm(1.0, &r_cols, &gm, 1.0);
        }
        self.v = new_v;
        self.wbar.clone_from(wbar_new);

        // lazy copy relative to the new V, and rebase u1, u3
        let mut shifted = vec![0.0; self.structure.n()];
        self.vt.mat.mul_vec_into(dy2.as_slice(), &mut shifted)?;
        for (u, d) in self.u1.iter_mut().zip(&shifted) {
            *u += d;
        }
        for (u, d) in self.u3.iter_mut().zip(dy4.iter()) {
            *u += d;
        }
        let mut in_batch = vec![false; self.structure.m()];
        for &i in &batch {
            in_batch[i] = true;
        }
        let mut changed = Vec::new();
        for i in 0..self.structure.m() {
            let to_wbar = self.outside[i] && !in_batch[i];
            let same = if to_wbar { self.vt.block_eq(&self.wbar, i) } else { self.vt.block_eq(&self.v.mat, i) };
            if !same {
                changed.push(i);
            }
        }
        let ccoords = self.structure.coords_of(&changed);
        let mu2: Vec<f64> = ccoords.iter().map(|&c| self.m.column(c).dot(&u2v)).collect();
        let mu4: Vec<f64> = ccoords.iter().map(|&c| self.m.column(c).dot(&u4v)).collect();
        let mut pos = 0;
        let mut old = [0.0; 4];
        let mut new = [0.0; 4];
        for &i in &changed {
            let d = self.structure.size(i);
            let off = self.structure.offset(i);
            let y = &mu2[pos..pos + d];
            small_matvec(d, self.vt.mat.block(i), y, &mut old);
            if self.outside[i] && !in_batch[i] {
                self.vt.set_block(i, &self.wbar, self.tol.pd)?;
            } else {
                self.vt.copy_block(&self.v, i);
            }
            small_matvec(d, self.vt.mat.block(i), y, &mut new);
            for k in 0..d {
                self.u1[off + k] += old[k] - new[k];
                self.xbar[off + k] = self.u1[off + k] + new[k];
                self.sbar[off + k] = self.u3[off + k] + mu4[pos + k];
            }
            pos += d;
        }
        let lazy: Vec<usize> = (0..self.structure.m()).filter(|&i| self.outside[i] && !in_batch[i]).collect();
        self.t_pre = self.t_last;
        let changed_count = changed.len();
        if !self.set_lazy(lazy)? {
            self.rebuild_from_exact()?;
            return Ok(UpdateReport { branch: UpdateBranch::Rebuild, r, changed_blocks: changed_count, lazy_blocks: 0, psi_potential: None });
        }
        Ok(UpdateReport { branch: UpdateBranch::Full, r, changed_blocks: changed_count, lazy_blocks: self.lazy_blocks.len(), psi_potential: None })
    }

    /// Applies the step for direction `h` at path parameter `t`, then moves the explicit
    /// approximations or rebuilds when the sketch bank is spent or `t` has halved.
    /// Returns whether a rebuild happened.
    pub fn multiply_move(&mut self, h: &[f64], t: f64) -> Result<bool, CpmError> {
        let n = self.structure.n();
        if h.len() != n {
            return Err(CpmError::DimensionMismatch { expected: n, found: h.len() });
        }
        if let Some(prev) = self.t_last {
            if t > prev {
                return Err(CpmError::PathParameterIncreased { previous: prev, requested: t });
            }
        }
        self.t_last = Some(t);
        if self.t_pre.is_none() {
            self.t_pre = Some(t);
        }

        self.active.clear();
        for i in 0..self.structure.m() {
            let r = self.structure.range(i);
            if h[r.clone()].iter().any(|&v| v != 0.0) {
                let d = self.structure.size(i);
                let off = self.structure.offset(i);
                small_matvec(d, self.vt.mat.block(i), &h[r.clone()], &mut self.g[off..off + d]);
                self.active.push(i);
                self.block_mark[i] = true;
            }
        }
        let g_blocks = self.active.len();
        for &i in &self.lazy_blocks {
            if !self.block_mark[i] {
                self.block_mark[i] = true;
                self.active.push(i);
            }
        }
        self.z.copy_from_slice(&self.g);

        let k = self.lazy_coords.len();
        let mut mz_lazy = vec![0.0; k];
        if k > 0 {
            let mut mg = DVector::zeros(k);
            for &i in &self.active[..g_blocks] {
                for c in self.structure.range(i) {
                    let gc = self.g[c];
                    let col = self.m.column(c);
                    for (a, &row) in self.lazy_coords.iter().enumerate() {
                        mg[a] += col[row] * gc;
                    }
                }
            }
            let dm = &self.lazy_core * mg;
            for (a, &row) in self.lazy_coords.iter().enumerate() {
                self.z[row] -= dm[a];
            }
        }

        let rows = self.bank.row_range(self.bank.cursor());
        self.p.iter_mut().for_each(|v| *v = 0.0);
        for &i in &self.active {
            for c in self.structure.range(i) {
                let zc = self.z[c];
                self.u1[c] += self.g[c];
                if zc == 0.0 {
                    continue;
                }
                self.u2[c] -= zc;
                self.u4[c] += t * zc;
                let nr = self.q.nrows();
                let qcol = &self.q.as_slice()[c * nr + rows.start..c * nr + rows.end];
                for (pv, qv) in self.p.iter_mut().zip(qcol) {
                    *pv += qv * zc;
                }
                if k > 0 {
                    let col = self.m.column(c);
                    for (a, &row) in self.lazy_coords.iter().enumerate() {
                        mz_lazy[a] += col[row] * zc;
                    }
                }
            }
        }
        if k > 0 {
            // sketch of (sqrt(Vt) - sqrt(V)) M z on the lazy blocks
            let mut pos = 0;
            let mut corr = vec![0.0; k];
            for &i in &self.lazy_blocks {
                let d = self.structure.size(i);
                let mut gam = [0.0; 16];
                let a = self.vt.sqrt.block(i);
                let b = self.v.sqrt.block(i);
                for e in 0..d * d {
                    gam[e] = a[e] - b[e];
                }
                small_matvec(d, &gam[..d * d], &mz_lazy[pos..pos + d], &mut corr[pos..pos + d]);
                pos += d;
            }
            if self.bank.is_identity() {
                for (a, &row) in self.lazy_coords.iter().enumerate() {
                    self.p[row] += corr[a];
                }
            } else {
                for (a, &col) in self.lazy_coords.iter().enumerate() {
                    let ent = self.bank.entries();
                    let nr = ent.nrows();
                    let rcol = &ent.as_slice()[col * nr + rows.start..col * nr + rows.end];
                    for (pv, rv) in self.p.iter_mut().zip(rcol) {
                        *pv += rv * corr[a];
                    }
                }
            }
        }
        self.bank.apply_transpose_into(self.bank.cursor(), &self.p, &mut self.back)?;
        self.bank.advance();

        let halved = self.t_pre.is_some_and(|tp| t <= 0.5 * tp);
        let moved = self.bank.exhausted() || halved;
        if moved {
            self.clear_active();
            let (x, s) = self.exact_iterates();
            self.counters.moves += 1;
            self.reinitialize(x, s, true)?;
            self.t_pre = Some(t);
        } else {
            let mut tmp = [0.0; 4];
            for i in 0..self.structure.m() {
                let d = self.structure.size(i);
                let off = self.structure.offset(i);
                let bk = &self.back[off..off + d];
                small_matvec(d, self.vt.sqrt.block(i), bk, &mut tmp);
                for k in 0..d {
                    self.xbar[off + k] += self.g[off + k] - tmp[k];
                }
                small_matvec(d, self.vt.inv_sqrt.block(i), bk, &mut tmp);
                for k in 0..d {
                    self.sbar[off + k] += t * tmp[k];
                }
            }
            self.clear_active();
        }
        Ok(moved)
    }

    fn clear_active(&mut self) {
        for &i in &self.active {
            self.block_mark[i] = false;
            for c in self.structure.range(i) {
                self.g[c] = 0.0;
            }
        }
        self.active.clear();
    }

    /// `(|xbar - x|_{Vt^{-1}}, t^{-1} |sbar - s|_{Vt})` against the exact iterates.
    pub fn approximation_error(&self) -> (f64, f64) {
        let (x, s) = self.exact_iterates();
        let t = self.t_last.unwrap_or(1.0);
        let dx: Vec<f64> = self.xbar.iter().zip(&x).map(|(a, b)| a - b).collect();
        let ds: Vec<f64> = self.sbar.iter().zip(&s).map(|(a, b)| a - b).collect();
        let mut ex = 0.0;
        let mut es = 0.0;
        let mut tmp = [0.0; 4];
        for i in 0..self.structure.m() {
            let d = self.structure.size(i);
            let r = self.structure.range(i);
            let mut inv = [0.0; 16];
            let _ = spectral_block(d, self.vt.mat.block(i), &mut inv[..d * d], 0.0, &|v| 1.0 / v);
            small_matvec(d, &inv[..d * d], &dx[r.clone()], &mut tmp);
            ex += dx[r.clone()].iter().zip(&tmp).map(|(a, b)| a * b).sum::<f64>();
            small_matvec(d, self.vt.mat.block(i), &ds[r.clone()], &mut tmp);
            es += ds[r].iter().zip(&tmp).map(|(a, b)| a * b).sum::<f64>();
        }
        (ex.max(0.0).sqrt(), es.max(0.0).sqrt() / t)
    }

    pub fn structure(&self) -> &BlockStructure {
        &self.structure
    }

    pub fn a(&self) -> &DenseMatrix {
        &self.a
    }

    pub fn eps_mp(&self) -> f64 {
        self.eps_mp
    }

    pub fn batch_threshold(&self) -> f64 {
        self.batch_threshold
    }

    pub fn v(&self) -> &BlockDiagMatrix {
        &self.v.mat
    }

    pub fn v_tilde(&self) -> &BlockDiagMatrix {
        &self.vt.mat
    }

    pub fn w_bar(&self) -> &BlockDiagMatrix {
        &self.wbar
    }

    pub fn projection(&self) -> &DenseMatrix {
        &self.m
    }

    pub fn sketched(&self) -> &DenseMatrix {
        &self.q
    }

    pub fn bank(&self) -> &SketchBank {
        &self.bank
    }

    pub fn lazy_blocks(&self) -> &[usize] {
        &self.lazy_blocks
    }

    pub fn counters(&self) -> MaintenanceCounters {
        self.counters
    }

    pub fn t_pre(&self) -> Option<f64> {
        self.t_pre
    }

    pub fn implicit(&self) -> [&[f64]; 4] {
        [&self.u1, &self.u2, &self.u3, &self.u4]
    }

    /// Rebuilds immediately from the exact iterates (used by tests and callers that
    /// want to discard accumulated drift).
    pub fn force_move(&mut self) -> Result<(), CpmError> {
        let (x, s) = self.exact_iterates();
        self.counters.moves += 1;
        self.reinitialize(x, s, true)
    }

    /// `R sqrt(V) M` recomputed from scratch, for consistency checks.
    pub fn recompute_sketched(&self) -> DenseMatrix {
        self.compute_q()
    }

    /// `A^T (A V A^T)^{-1} A` recomputed from scratch, for consistency checks.
    pub fn recompute_projection(&self) -> Result<DenseMatrix, CpmError> {
        Ok(compute_projection(&self.a, &self.v.mat)?)
    }
}

/// `target += scale * X C Y^T`.
fn rank_update_pair(target: &mut DenseMatrix, x: &DenseMatrix, c: &DenseMatrix, y: &DenseMatrix, scale: f64) {
    if x.ncols() == 0 {
        return;
    }
    let xc = x * c;
    target.gemm(scale, &xc, &y.transpose(), 1.0);
}
