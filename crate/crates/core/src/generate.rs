//! Seeded synthetic instances built around a known interior point.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::barrier::Barrier;
use crate::blocklin::{BlockStructure, DenseMatrix};
use crate::problem::{erm_to_standard, ErmInstance, Loss, ProblemError, StandardProblem};

/// A standard-form instance with a strictly interior feasible witness.
#[derive(Debug, Clone)]
pub struct GeneratedLp {
    pub problem: StandardProblem,
    pub witness: Vec<f64>,
    /// Bounds that describe the same feasible set for vertex enumeration.
    pub vertex_bounds: Vec<(f64, f64)>,
}

/// Random bounded LP on `n` variables and `d` equality rows.
///
/// The first row is all ones, so `sum x = S` bounds the polytope and each coordinate
/// stays below `S`. The box `[0, S + 1]` is therefore never active, and vertex
/// enumeration may treat the variables as merely nonnegative.
pub fn random_lp(n: usize, d: usize, seed: u64) -> Result<GeneratedLp, ProblemError> {
    if d == 0 || d >= n {
        return Err(ProblemError::InvalidData(format!("need 0 < d < n, got d = {d}, n = {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let witness: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..1.5)).collect();
    let mut a = DenseMatrix::zeros(d, n);
    for j in 0..n {
        a[(0, j)] = 1.0;
    }
    for i in 1..d {
        for j in 0..n {
            a[(i, j)] = StandardNormal.sample(&mut rng);
        }
    }
    let c: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let b: Vec<f64> = (0..d).map(|i| (0..n).map(|j| a[(i, j)] * witness[j]).sum()).collect();
    let total: f64 = witness.iter().sum();
    let upper = total + 1.0;
    let barriers = vec![Barrier::log_box(0.0, upper).map_err(|source| ProblemError::Barrier { block: 0, source })?; n];
    let structure = BlockStructure::uniform(n, 1)?;
    let problem = StandardProblem::new(a, b, c, structure, barriers, total)?;
    Ok(GeneratedLp { problem, witness, vertex_bounds: vec![(0.0, f64::INFINITY); n] })
}

/// Random LP whose box bounds may be active. `R` bounds `|x|_2` by `upper sqrt(n)`.
pub fn random_box_lp(n: usize, d: usize, seed: u64) -> Result<GeneratedLp, ProblemError> {
    if d == 0 || d >= n {
        return Err(ProblemError::InvalidData(format!("need 0 < d < n, got d = {d}, n = {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let upper = 1.0;
    let witness: Vec<f64> = (0..n).map(|_| rng.random_range(0.25..0.75)).collect();
    let a = DenseMatrix::from_fn(d, n, |_, _| StandardNormal.sample(&mut rng));
    let c: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let b: Vec<f64> = (0..d).map(|i| (0..n).map(|j| a[(i, j)] * witness[j]).sum()).collect();
    let barriers = vec![Barrier::log_box(0.0, upper).map_err(|source| ProblemError::Barrier { block: 0, source })?; n];
    let structure = BlockStructure::uniform(n, 1)?;
    let problem = StandardProblem::new(a, b, c, structure, barriers, upper * (n as f64).sqrt())?;
    Ok(GeneratedLp { problem, witness, vertex_bounds: vec![(0.0, upper); n] })
}

/// An ERM instance together with the planted decision vector.
#[derive(Debug, Clone)]
pub struct GeneratedErm {
    pub erm: ErmInstance,
    pub planted: Vec<f64>,
}

impl GeneratedErm {
    pub fn standard(&self) -> Result<StandardProblem, ProblemError> {
        erm_to_standard(&self.erm)
    }

    /// Strictly interior standard-form point built from the planted decision vector.
    pub fn witness(&self) -> Vec<f64> {
        let cap = self.erm.epigraph_cap();
        let mut w = self.planted.clone();
        for ((row, off), loss) in self.erm.rows.iter().zip(&self.erm.offsets).zip(&self.erm.losses) {
            let r: f64 = row.iter().zip(&self.planted).map(|(a, x)| a * x).sum::<f64>() + off;
            let u = match loss {
                Loss::Hinge => 1.0 - r,
                _ => r,
            };
            w.push(u);
            w.push(0.5 * (u.abs() + cap));
        }
        w
    }
}

fn regression(features: usize, terms: usize, seed: u64, loss: Loss) -> GeneratedErm {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let planted: Vec<f64> = (0..features).map(|_| rng.random_range(-0.5..0.5)).collect();
    let mut rows = Vec::with_capacity(terms);
    let mut offsets = Vec::with_capacity(terms);
    for _ in 0..terms {
        let row: Vec<f64> = (0..features).map(|_| StandardNormal.sample(&mut rng)).collect();
        let fit: f64 = row.iter().zip(&planted).map(|(a, x)| a * x).sum();
        let noise: f64 = rng.random_range(-0.2..0.2);
        offsets.push(noise - fit);
        rows.push(row);
    }
    GeneratedErm { erm: ErmInstance { rows, offsets, losses: vec![loss; terms], radius: 1.0 }, planted }
}

/// Least absolute deviations with a planted solution inside `[-0.5, 0.5]^d`.
pub fn l1_regression(features: usize, terms: usize, seed: u64) -> GeneratedErm {
    regression(features, terms, seed, Loss::Abs)
}

pub fn quantile_regression(features: usize, terms: usize, theta: f64, seed: u64) -> GeneratedErm {
    regression(features, terms, seed, Loss::Quantile { theta })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::validate;

    #[test]
    fn witness_is_feasible_and_interior() {
        for seed in 0..5 {
            let g = random_lp(12, 5, seed).unwrap();
            assert!(validate(&g.problem).is_ok());
            let p = &g.problem;
            for i in 0..p.d() {
                let lhs: f64 = (0..p.n()).map(|j| p.a[(i, j)] * g.witness[j]).sum();
                assert!((lhs - p.b[i]).abs() <= 1e-12 * (1.0 + p.b[i].abs()));
            }
            for (i, bar) in p.barriers.iter().enumerate() {
                assert!(bar.is_interior(&g.witness[i..i + 1]));
            }
        }
    }

    #[test]
    fn same_seed_same_instance() {
        let a = random_lp(10, 4, 7).unwrap();
        let b = random_lp(10, 4, 7).unwrap();
        assert_eq!(a.problem.a, b.problem.a);
        assert_eq!(a.problem.c, b.problem.c);
        assert_ne!(random_lp(10, 4, 8).unwrap().problem.c, a.problem.c);
    }

    #[test]
    fn erm_witness_is_interior() {
        let g = l1_regression(3, 7, 2);
        let p = g.standard().unwrap();
        let w = g.witness();
        for i in 0..p.structure.m() {
            assert!(p.barriers[i].is_interior(&w[p.structure.range(i)]));
        }
        assert!(p.infeasibility(&w) < 1e-12);
    }
}
