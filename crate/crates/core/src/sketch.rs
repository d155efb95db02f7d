//! Seeded banks of random sign sketches.

use nalgebra::DMatrix;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SketchError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("sub-sketch {index} out of range for a bank of {count}")]
    OutOfRange { index: usize, count: usize },
    #[error("sketch needs b >= 1 and count >= 1")]
    InvalidShape,
}

/// Default number of sub-sketches for dimension `n`.
pub fn default_count(n: usize) -> usize {
    (n as f64).sqrt().ceil() as usize + 8
}

/// Default rows per sub-sketch for dimension `n`: `ceil(sqrt(n) * ln(n)^2)`.
pub fn default_rows(n: usize) -> usize {
    let nf = (n.max(2)) as f64;
    (nf.sqrt() * nf.ln().powi(2)).ceil().max(1.0) as usize
}

/// A bank `R = [R_1; ...; R_L]` of `b x n` sub-sketches, or the identity.
#[derive(Debug, Clone)]
pub struct SketchBank {
    b: usize,
    n: usize,
    count: usize,
    seed: u64,
    epoch: u64,
    cursor: usize,
    /// `(count * b) x n`, empty for the identity.
    entries: DMatrix<f64>,
    identity: bool,
}

impl SketchBank {
    pub fn identity(n: usize) -> Self {
        Self { b: n, n, count: 1, seed: 0, epoch: 0, cursor: 0, entries: DMatrix::zeros(0, 0), identity: true }
    }

    pub fn is_identity(&self) -> bool {
        self.identity
    }

    pub fn b(&self) -> usize {
        self.b
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    /// Total rows of the stacked bank.
    pub fn rows(&self) -> usize {
        if self.identity {
            self.n
        } else {
            self.count * self.b
        }
    }

    /// Stacked bank as a dense matrix (`n x n` identity in identity mode).
    pub fn matrix(&self) -> DMatrix<f64> {
        if self.identity {
            DMatrix::identity(self.n, self.n)
        } else {
            self.entries.clone()
        }
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    /// Marks the current sub-sketch as used. Identity banks never run out.
    pub fn advance(&mut self) {
        if !self.identity {
            self.cursor += 1;
        }
    }

    pub fn exhausted(&self) -> bool {
        !self.identity && self.cursor >= self.count
    }

    /// Draws a fresh bank for the next epoch and resets the cursor.
    pub fn regenerate(&mut self) {
        if self.identity {
            return;
        }
        self.epoch += 1;
        self.entries = draw_signs(self.b, self.n, self.count, self.seed, self.epoch);
        self.cursor = 0;
    }

    /// Row range of sub-sketch `l` inside the stacked bank.
    pub fn row_range(&self, l: usize) -> std::ops::Range<usize> {
        if self.identity {
            0..self.n
        } else {
            l * self.b..(l + 1) * self.b
        }
    }

    fn check_index(&self, l: usize) -> Result<(), SketchError> {
        if !self.identity && l >= self.count {
            return Err(SketchError::OutOfRange { index: l, count: self.count });
        }
        Ok(())
    }

    /// `R_l v`.
    pub fn apply(&self, l: usize, v: &[f64]) -> Result<Vec<f64>, SketchError> {
        self.check_index(l)?;
        if v.len() != self.n {
            return Err(SketchError::DimensionMismatch { expected: self.n, found: v.len() });
        }
        if self.identity {
            return Ok(v.to_vec());
        }
        let rows = self.row_range(l);
        let mut out = vec![0.0; self.b];
        for (j, &vj) in v.iter().enumerate() {
            if vj != 0.0 {
                let col = &self.entries.column(j);
                for (k, r) in rows.clone().enumerate() {
                    out[k] += col[r] * vj;
                }
            }
        }
        Ok(out)
    }

    /// `R_l^T w`.
    pub fn apply_transpose(&self, l: usize, w: &[f64]) -> Result<Vec<f64>, SketchError> {
        let mut out = vec![0.0; self.n];
        self.apply_transpose_into(l, w, &mut out)?;
        Ok(out)
    }

    pub fn apply_transpose_into(&self, l: usize, w: &[f64], out: &mut [f64]) -> Result<(), SketchError> {
        self.check_index(l)?;
        if w.len() != self.b || out.len() != self.n {
            return Err(SketchError::DimensionMismatch { expected: self.b, found: w.len() });
        }
        if self.identity {
            out.copy_from_slice(w);
            return Ok(());
        }
        let rows = self.row_range(l);
        let nr = self.entries.nrows();
        let data = self.entries.as_slice();
        for (j, o) in out.iter_mut().enumerate() {
            let col = &data[j * nr + rows.start..j * nr + rows.end];
            *o = col.iter().zip(w).map(|(a, b)| a * b).sum();
        }
        Ok(())
    }
}

/// Bank of i.i.d. Rademacher entries scaled by `1/sqrt(b)`, reproducible from `seed`.
pub fn create_bank(b: usize, n: usize, count: usize, seed: u64) -> Result<SketchBank, SketchError> {
    if b == 0 || count == 0 || n == 0 {
        return Err(SketchError::InvalidShape);
    }
    Ok(SketchBank { b, n, count, seed, epoch: 0, cursor: 0, entries: draw_signs(b, n, count, seed, 0), identity: false })
}

fn draw_signs(b: usize, n: usize, count: usize, seed: u64, epoch: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let scale = 1.0 / (b as f64).sqrt();
    let rows = b * count;
    let total = rows * n;
    let mut data = Vec::with_capacity(total);
    while data.len() < total {
        let bits = rng.next_u64();
        for k in 0..64.min(total - data.len()) {
            data.push(if (bits >> k) & 1 == 1 { scale } else { -scale });
        }
    }
    DMatrix::from_vec(rows, n, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_entry_is_unit_sign() {
        let bank = create_bank(1, 1, 1, 3).unwrap();
        let v = bank.entries()[(0, 0)];
        assert!(v == 1.0 || v == -1.0);
    }

    #[test]
    fn deterministic_per_seed() {
        let a = create_bank(4, 7, 3, 11).unwrap();
        let b = create_bank(4, 7, 3, 11).unwrap();
        assert_eq!(a.entries(), b.entries());
        let c = create_bank(4, 7, 3, 12).unwrap();
        assert_ne!(a.entries(), c.entries());
    }

    #[test]
    fn entry_mean_near_zero() {
        let bank = create_bank(100, 100, 10, 5).unwrap();
        let mean: f64 = bank.entries().iter().map(|x| x.signum()).sum::<f64>() / 1e5;
        assert!(mean.abs() <= 0.02);
        let s = 1.0 / 10.0;
        assert!(bank.entries().iter().all(|&x| x == s || x == -s));
    }

    #[test]
    fn apply_and_adjoint() {
        let bank = create_bank(5, 9, 2, 1).unwrap();
        assert!(bank.apply(1, &[0.0; 9]).unwrap().iter().all(|&x| x == 0.0));
        assert!(bank.apply_transpose(0, &[0.0; 5]).unwrap().iter().all(|&x| x == 0.0));
        let v: Vec<f64> = (0..9).map(|i| (i as f64).sin()).collect();
        let w: Vec<f64> = (0..5).map(|i| (i as f64 + 0.5).cos()).collect();
        for l in 0..2 {
            let rv = bank.apply(l, &v).unwrap();
            let rtw = bank.apply_transpose(l, &w).unwrap();
            let lhs: f64 = rv.iter().zip(&w).map(|(a, b)| a * b).sum();
            let rhs: f64 = v.iter().zip(&rtw).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-12);
        }
        assert!(bank.apply(2, &v).is_err());
        assert!(bank.apply(0, &v[..3]).is_err());
    }

    #[test]
    fn identity_bank() {
        let mut bank = SketchBank::identity(4);
        let v = vec![1.0, 2.0, 3.0, 4.0];
        assert_eq!(bank.apply(0, &v).unwrap(), v);
        bank.advance();
        assert!(!bank.exhausted());
    }

    #[test]
    fn regeneration_changes_entries() {
        let mut bank = create_bank(3, 4, 2, 9).unwrap();
        let before = bank.entries().clone();
        bank.advance();
        bank.advance();
        assert!(bank.exhausted());
        bank.regenerate();
        assert_eq!(bank.cursor(), 0);
        assert_eq!(bank.epoch(), 1);
        assert_ne!(&before, bank.entries());
    }
}
