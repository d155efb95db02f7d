//! Block-diagonal linear algebra and the dense kernels shared by the solver.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use thiserror::Error;

/// Dense matrix type used throughout the crate.
pub type DenseMatrix = DMatrix<f64>;

pub const DEFAULT_MAX_BLOCK_DIM: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid block structure: {0}")]
    InvalidStructure(String),
    #[error("block {block} is singular or not positive definite")]
    SingularBlock { block: usize },
    #[error("cholesky factorization failed after {retries} jitter retries")]
    FactorizationFailure { retries: usize },
    #[error("low-rank update system is singular")]
    UpdateSingular,
    #[error("non-finite entry encountered")]
    NonFinite,
}

/// Numerical tolerances for the linear algebra layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerances {
    pub sym: f64,
    pub psd: f64,
    /// Smallest eigenvalue allowed in a block, relative to its largest.
    pub pd: f64,
    pub solve: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self { sym: 1e-9, psd: 1e-9, pd: 1e-12, solve: 1e-8 }
    }
}

/// Partition of `n` coordinates into `m` consecutive blocks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockStructure {
    sizes: Vec<usize>,
    offsets: Vec<usize>,
    entry_offsets: Vec<usize>,
}

impl BlockStructure {
    pub fn new(sizes: Vec<usize>) -> Result<Self, LinalgError> {
        Self::with_max_dim(sizes, DEFAULT_MAX_BLOCK_DIM)
    }

    pub fn with_max_dim(sizes: Vec<usize>, max_dim: usize) -> Result<Self, LinalgError> {
        if sizes.is_empty() {
            return Err(LinalgError::InvalidStructure("no blocks".into()));
        }
        let mut offsets = Vec::with_capacity(sizes.len() + 1);
        let mut entry_offsets = Vec::with_capacity(sizes.len() + 1);
        offsets.push(0);
        entry_offsets.push(0);
        for (i, &s) in sizes.iter().enumerate() {
            if s == 0 || s > max_dim {
                return Err(LinalgError::InvalidStructure(format!(
                    "block {i} has size {s}, allowed 1..={max_dim}"
                )));
            }
            offsets.push(offsets[i] + s);
            entry_offsets.push(entry_offsets[i] + s * s);
        }
        Ok(Self { sizes, offsets, entry_offsets })
    }

    /// `m` blocks of equal size.
    pub fn uniform(m: usize, size: usize) -> Result<Self, LinalgError> {
        Self::new(vec![size; m])
    }

    pub fn m(&self) -> usize {
        self.sizes.len()
    }

    pub fn n(&self) -> usize {
        self.offsets[self.sizes.len()]
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn size(&self, i: usize) -> usize {
        self.sizes[i]
    }

    pub fn offset(&self, i: usize) -> usize {
        self.offsets[i]
    }

    pub fn range(&self, i: usize) -> std::ops::Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    pub fn max_size(&self) -> usize {
        self.sizes.iter().copied().max().unwrap_or(0)
    }

    /// Coordinates of a set of blocks, concatenated in ascending block order.
    pub fn coords_of(&self, blocks: &[usize]) -> Vec<usize> {
        let mut sorted = blocks.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        let mut out = Vec::new();
        for b in sorted {
            out.extend(self.range(b));
        }
        out
    }

    fn entry_range(&self, i: usize) -> std::ops::Range<usize> {
        self.entry_offsets[i]..self.entry_offsets[i + 1]
    }

    fn total_entries(&self) -> usize {
        self.entry_offsets[self.sizes.len()]
    }
}

/// Block-diagonal matrix with row-major `n_i x n_i` blocks stored contiguously.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockDiagMatrix {
    structure: BlockStructure,
    data: Vec<f64>,
}

impl BlockDiagMatrix {
    pub fn zeros(structure: &BlockStructure) -> Self {
        Self { data: vec![0.0; structure.total_entries()], structure: structure.clone() }
    }

    pub fn identity(structure: &BlockStructure) -> Self {
        let mut out = Self::zeros(structure);
        for i in 0..structure.m() {
            let d = structure.size(i);
            let blk = out.block_mut(i);
            for k in 0..d {
                blk[k * d + k] = 1.0;
            }
        }
        out
    }

    pub fn from_blocks(structure: &BlockStructure, blocks: &[DenseMatrix]) -> Result<Self, LinalgError> {
        if blocks.len() != structure.m() {
            return Err(LinalgError::DimensionMismatch { expected: structure.m(), found: blocks.len() });
        }
        let mut out = Self::zeros(structure);
        for (i, b) in blocks.iter().enumerate() {
            out.set_block(i, b)?;
        }
        Ok(out)
    }

    /// Diagonal matrix from a vector of length `n`.
    pub fn from_diagonal(structure: &BlockStructure, diag: &[f64]) -> Result<Self, LinalgError> {
        if diag.len() != structure.n() {
            return Err(LinalgError::DimensionMismatch { expected: structure.n(), found: diag.len() });
        }
        let mut out = Self::zeros(structure);
        for i in 0..structure.m() {
            let d = structure.size(i);
            let off = structure.offset(i);
            let blk = out.block_mut(i);
            for k in 0..d {
                blk[k * d + k] = diag[off + k];
            }
        }
        Ok(out)
    }

    pub fn structure(&self) -> &BlockStructure {
        &self.structure
    }

    pub fn block(&self, i: usize) -> &[f64] {
        &self.data[self.structure.entry_range(i)]
    }

    pub fn block_mut(&mut self, i: usize) -> &mut [f64] {
        let r = self.structure.entry_range(i);
        &mut self.data[r]
    }

    pub fn block_matrix(&self, i: usize) -> DenseMatrix {
        let d = self.structure.size(i);
        DenseMatrix::from_row_slice(d, d, self.block(i))
    }

    pub fn set_block(&mut self, i: usize, b: &DenseMatrix) -> Result<(), LinalgError> {
        let d = self.structure.size(i);
        if b.nrows() != d || b.ncols() != d {
            return Err(LinalgError::DimensionMismatch { expected: d, found: b.nrows() });
        }
        let blk = self.block_mut(i);
        for r in 0..d {
            for c in 0..d {
                blk[r * d + c] = b[(r, c)];
            }
        }
        Ok(())
    }

    pub fn copy_block_from(&mut self, other: &BlockDiagMatrix, i: usize) {
        let r = self.structure.entry_range(i);
        self.data[r.clone()].copy_from_slice(&other.data[r]);
    }

    pub fn block_eq(&self, other: &BlockDiagMatrix, i: usize) -> bool {
        let r = self.structure.entry_range(i);
        self.data[r.clone()] == other.data[r]
    }

    /// `out_i = H_i v_i` for a single block, with `v` and `out` in block-local coordinates.
    pub fn mul_block(&self, i: usize, v: &[f64], out: &mut [f64]) {
        small_matvec(self.structure.size(i), self.block(i), v, out);
    }

    pub fn mul_vec(&self, v: &[f64]) -> Result<Vec<f64>, LinalgError> {
        let mut out = vec![0.0; self.structure.n()];
        self.mul_vec_into(v, &mut out)?;
        Ok(out)
    }

    pub fn mul_vec_into(&self, v: &[f64], out: &mut [f64]) -> Result<(), LinalgError> {
        let n = self.structure.n();
        if v.len() != n || out.len() != n {
            return Err(LinalgError::DimensionMismatch { expected: n, found: v.len().min(out.len()) });
        }
        for i in 0..self.structure.m() {
            let r = self.structure.range(i);
            self.mul_block(i, &v[r.clone()], &mut out[r]);
        }
        Ok(())
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let n = self.structure.n();
        let mut out = DenseMatrix::zeros(n, n);
        for i in 0..self.structure.m() {
            let d = self.structure.size(i);
            let off = self.structure.offset(i);
            let blk = self.block(i);
            for r in 0..d {
                for c in 0..d {
                    out[(off + r, off + c)] = blk[r * d + c];
                }
            }
        }
        out
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        (0..self.structure.m()).all(|i| {
            let d = self.structure.size(i);
            let b = self.block(i);
            (0..d).all(|r| (0..r).all(|c| (b[r * d + c] - b[c * d + r]).abs() <= tol))
        })
    }

    /// Smallest eigenvalue over all blocks.
    pub fn min_eigenvalue(&self) -> f64 {
        (0..self.structure.m())
            .map(|i| small_eigenvalues(self.structure.size(i), self.block(i)).1.iter().take(self.structure.size(i)).copied().fold(f64::INFINITY, f64::min))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn is_psd(&self, tol: f64) -> bool {
        self.min_eigenvalue() >= -tol
    }

    /// Apply a spectral function blockwise. Fails when a block is not positive definite
    /// relative to `pd_tol`.
    pub fn spectral_map(&self, pd_tol: f64, f: impl Fn(f64) -> f64) -> Result<Self, LinalgError> {
        let mut out = self.clone();
        for i in 0..self.structure.m() {
            let d = self.structure.size(i);
            spectral_block(d, self.block(i), out.block_mut(i), pd_tol, &f)
                .map_err(|_| LinalgError::SingularBlock { block: i })?;
        }
        Ok(out)
    }

    pub fn inverse(&self) -> Result<Self, LinalgError> {
        self.spectral_map(Tolerances::default().pd, |x| 1.0 / x)
    }

    pub fn sqrt(&self) -> Result<Self, LinalgError> {
        self.spectral_map(Tolerances::default().pd, f64::sqrt)
    }

    pub fn inv_sqrt(&self) -> Result<Self, LinalgError> {
        self.spectral_map(Tolerances::default().pd, |x| 1.0 / x.sqrt())
    }
}

/// `(v_i^T H_i v_i)^{1/2}` for block `i`, with `v` of length `n_i`.
pub fn block_quadform(h: &BlockDiagMatrix, v: &[f64], i: usize) -> Result<f64, LinalgError> {
    let d = h.structure().size(i);
    if v.len() != d {
        return Err(LinalgError::DimensionMismatch { expected: d, found: v.len() });
    }
    Ok(small_quadform(d, h.block(i), v).max(0.0).sqrt())
}

/// Blockwise `H^{-1} v`.
pub fn block_solve(h: &BlockDiagMatrix, v: &[f64]) -> Result<Vec<f64>, LinalgError> {
    let s = h.structure();
    if v.len() != s.n() {
        return Err(LinalgError::DimensionMismatch { expected: s.n(), found: v.len() });
    }
    let pd_tol = Tolerances::default().pd;
    let mut out = vec![0.0; s.n()];
    for i in 0..s.m() {
        let r = s.range(i);
        small_solve(s.size(i), h.block(i), &v[r.clone()], &mut out[r], pd_tol)
            .map_err(|_| LinalgError::SingularBlock { block: i })?;
    }
    Ok(out)
}

/// `A V A^T` for a block-diagonal `V`.
pub fn normal_matrix(a: &DenseMatrix, v: &BlockDiagMatrix) -> Result<DenseMatrix, LinalgError> {
    let s = v.structure();
    if a.ncols() != s.n() {
        return Err(LinalgError::DimensionMismatch { expected: s.n(), found: a.ncols() });
    }
    let av = mul_dense_block(a, v);
    let mut out = &av * a.transpose();
    symmetrize(&mut out);
    Ok(out)
}

/// `A V` where `V` is block diagonal.
pub fn mul_dense_block(a: &DenseMatrix, v: &BlockDiagMatrix) -> DenseMatrix {
    let s = v.structure();
    let mut out = DenseMatrix::zeros(a.nrows(), a.ncols());
    for i in 0..s.m() {
        let d = s.size(i);
        let off = s.offset(i);
        let blk = v.block(i);
        for c in 0..d {
            for k in 0..d {
                let w = blk[k * d + c];
                if w != 0.0 {
                    let src = a.column(off + k).clone_owned();
                    out.column_mut(off + c).axpy(w, &src, 1.0);
                }
            }
        }
    }
    out
}

pub fn symmetrize(m: &mut DenseMatrix) {
    let n = m.nrows();
    for r in 0..n {
        for c in 0..r {
            let avg = 0.5 * (m[(r, c)] + m[(c, r)]);
            m[(r, c)] = avg;
            m[(c, r)] = avg;
        }
    }
}

/// Cholesky factor with diagonal jitter escalation.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    pub jitter: f64,
}

impl CholeskyFactor {
    pub const MAX_RETRIES: usize = 3;

    pub fn new(s: &DenseMatrix) -> Result<Self, LinalgError> {
        if !s.is_square() {
            return Err(LinalgError::DimensionMismatch { expected: s.nrows(), found: s.ncols() });
        }
        if s.iter().any(|x| !x.is_finite()) {
            return Err(LinalgError::NonFinite);
        }
        if let Some(chol) = nalgebra::Cholesky::new(s.clone()) {
            return Ok(Self { chol, jitter: 0.0 });
        }
        let d = s.nrows().max(1) as f64;
        let mut jitter = 1e-12 * s.trace().abs().max(f64::MIN_POSITIVE) / d;
        for _ in 0..Self::MAX_RETRIES {
            let mut shifted = s.clone();
            for k in 0..s.nrows() {
                shifted[(k, k)] += jitter;
            }
            if let Some(chol) = nalgebra::Cholesky::new(shifted) {
                return Ok(Self { chol, jitter });
            }
            jitter *= 10.0;
        }
        Err(LinalgError::FactorizationFailure { retries: Self::MAX_RETRIES })
    }

    pub fn solve(&self, b: &DenseMatrix) -> DenseMatrix {
        self.chol.solve(b)
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }
}

/// `S^{-1} B` for symmetric positive definite `S`.
pub fn cholesky_solve(s: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix, LinalgError> {
    if b.nrows() != s.nrows() {
        return Err(LinalgError::DimensionMismatch { expected: s.nrows(), found: b.nrows() });
    }
    Ok(CholeskyFactor::new(s)?.solve(b))
}

/// The core matrix `(Δ^{-1} + M_SS)^{-1}` of the Woodbury identity, computed as
/// `(I + Δ M_SS)^{-1} Δ` so that `Δ` may be singular.
pub fn woodbury_core(delta_ss: &DenseMatrix, m_ss: &DenseMatrix) -> Result<DenseMatrix, LinalgError> {
    let k = delta_ss.nrows();
    if m_ss.nrows() != k || m_ss.ncols() != k || delta_ss.ncols() != k {
        return Err(LinalgError::DimensionMismatch { expected: k, found: m_ss.nrows() });
    }
    if k == 0 {
        return Ok(DenseMatrix::zeros(0, 0));
    }
    let mut sys = delta_ss * m_ss;
    for i in 0..k {
        sys[(i, i)] += 1.0;
    }
    let scale = sys.amax().max(1.0);
    let lu = sys.lu();
    let u = lu.u();
    let min_pivot = (0..k).map(|i| u[(i, i)].abs()).fold(f64::INFINITY, f64::min);
    if !(min_pivot > 1e-13 * scale) {
        return Err(LinalgError::UpdateSingular);
    }
    let mut core = lu.solve(delta_ss).ok_or(LinalgError::UpdateSingular)?;
    if core.iter().any(|x| !x.is_finite()) {
        return Err(LinalgError::UpdateSingular);
    }
    symmetrize(&mut core);
    Ok(core)
}

/// `M - M_{*,S} (Δ_SS^{-1} + M_SS)^{-1} M_{*,S}^T`.
///
/// `blocks` selects the block set `S`; `m_cols_s` holds the columns of `M` for those
/// blocks in ascending block order, matching the layout of `delta_ss`.
pub fn woodbury_downdate(
    m: &DenseMatrix,
    structure: &BlockStructure,
    blocks: &[usize],
    delta_ss: &DenseMatrix,
    m_cols_s: &DenseMatrix,
) -> Result<DenseMatrix, LinalgError> {
    let coords = structure.coords_of(blocks);
    let k = coords.len();
    if m_cols_s.ncols() != k || m_cols_s.nrows() != m.nrows() || delta_ss.nrows() != k {
        return Err(LinalgError::DimensionMismatch { expected: k, found: m_cols_s.ncols() });
    }
    let m_ss = m_cols_s.select_rows(coords.iter());
    let core = woodbury_core(delta_ss, &m_ss)?;
    let mut out = m.clone();
    rank_update(&mut out, m_cols_s, &core, -1.0);
    symmetrize(&mut out);
    Ok(out)
}

/// `target += scale * B C B^T`.
pub fn rank_update(target: &mut DenseMatrix, b: &DenseMatrix, c: &DenseMatrix, scale: f64) {
    if b.ncols() == 0 {
        return;
    }
    let bc = b * c;
    target.gemm(scale, &bc, &b.transpose(), 1.0);
}

// ---- small dense kernels on row-major blocks of dimension <= 4 ----

#[inline]
pub(crate) fn small_matvec(d: usize, a: &[f64], v: &[f64], out: &mut [f64]) {
    if d == 1 {
        out[0] = a[0] * v[0];
        return;
    }
    for r in 0..d {
        let row = &a[r * d..r * d + d];
        out[r] = row.iter().zip(v).map(|(x, y)| x * y).sum();
    }
}

#[inline]
pub(crate) fn small_quadform(d: usize, a: &[f64], v: &[f64]) -> f64 {
    if d == 1 {
        return a[0] * v[0] * v[0];
    }
    let mut acc = 0.0;
    for r in 0..d {
        let row = &a[r * d..r * d + d];
        acc += v[r] * row.iter().zip(v).map(|(x, y)| x * y).sum::<f64>();
    }
    acc
}

/// Eigen-decomposition of a symmetric row-major block: (eigenvectors row-major, eigenvalues).
pub(crate) fn small_eigenvalues(d: usize, a: &[f64]) -> ([f64; 16], [f64; 4]) {
    let mut vecs = [0.0; 16];
    let mut vals = [0.0; 4];
    macro_rules! eig {
        ($n:literal) => {{
            let m = nalgebra::SMatrix::<f64, $n, $n>::from_row_slice(&a[..$n * $n]);
            let e = SymmetricEigen::new(m);
            for i in 0..$n {
                vals[i] = e.eigenvalues[i];
                for r in 0..$n {
                    vecs[r * $n + i] = e.eigenvectors[(r, i)];
                }
            }
        }};
    }
    match d {
        1 => {
            vecs[0] = 1.0;
            vals[0] = a[0];
        }
        2 => eig!(2),
        3 => eig!(3),
        4 => eig!(4),
        _ => panic!("block dimension {d} exceeds kernel limit"),
    }
    (vecs, vals)
}

/// `out = U f(Λ) U^T` for a symmetric block. Errors unless every eigenvalue is positive,
/// finite and above `pd_tol` times the largest one.
pub(crate) fn spectral_block(d: usize, a: &[f64], out: &mut [f64], pd_tol: f64, f: &impl Fn(f64) -> f64) -> Result<(), ()> {
    if d == 1 {
        if !(a[0] > 0.0 && a[0].is_finite()) {
            return Err(());
        }
        out[0] = f(a[0]);
        return Ok(());
    }
    let (u, l) = small_eigenvalues(d, a);
    let top = l[..d].iter().copied().fold(0.0, f64::max);
    if !top.is_finite() {
        return Err(());
    }
    let mut fl = [0.0; 4];
    for i in 0..d {
        if !(l[i] > pd_tol * top && l[i] > 0.0) {
            return Err(());
        }
        fl[i] = f(l[i]);
    }
    for r in 0..d {
        for c in 0..d {
            out[r * d + c] = (0..d).map(|k| u[r * d + k] * fl[k] * u[c * d + k]).sum();
        }
    }
    Ok(())
}

pub(crate) fn small_solve(d: usize, a: &[f64], v: &[f64], out: &mut [f64], pd_tol: f64) -> Result<(), ()> {
    if d == 1 {
        if !(a[0] > 0.0 && a[0].is_finite()) {
            return Err(());
        }
        out[0] = v[0] / a[0];
        return Ok(());
    }
    let mut inv = [0.0; 16];
    spectral_block(d, a, &mut inv[..d * d], pd_tol, &|x| 1.0 / x)?;
    small_matvec(d, &inv[..d * d], v, out);
    Ok(())
}

/// `out = A B` for row-major `d x d` blocks.
pub(crate) fn small_matmul(d: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    for r in 0..d {
        for c in 0..d {
            out[r * d + c] = (0..d).map(|k| a[r * d + k] * b[k * d + c]).sum();
        }
    }
}

/// Eigenvalues of `P A P` for symmetric row-major `P`, `A` (used for sandwich tests).
pub(crate) fn small_congruence_eigs(d: usize, p: &[f64], a: &[f64]) -> [f64; 4] {
    if d == 1 {
        return [p[0] * a[0] * p[0], 0.0, 0.0, 0.0];
    }
    let mut tmp = [0.0; 16];
    let mut out = [0.0; 16];
    small_matmul(d, p, a, &mut tmp);
    small_matmul(d, &tmp, p, &mut out);
    small_eigenvalues(d, &out).1
}
