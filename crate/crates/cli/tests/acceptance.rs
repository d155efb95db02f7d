//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any failure.

use std::cell::OnceCell;
use std::panic::{self, AssertUnwindSafe};
use std::time::Instant;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ripm_cli::format::{Instance, Metadata};
use ripm_cli::run::{solve_instance, RunConfig};
use ripm_core::cpm::psi_matrix;
use ripm_core::generate::{random_lp, GeneratedLp};
use ripm_core::oracle::{dense_step, dense_step_with, vertex_lp_solve};
use ripm_core::problem::interval_bounds;
use ripm_core::rcp::{follow_path, PathInput, StepWorkspace};
use ripm_core::{
    build_modified, create_bank, solve_with_observer, Barrier, BarrierKind, BlockDiagMatrix, BlockStructure, DenseMatrix,
    MaintenanceConfig, MaintenanceState, ModifiedProblem, PathMode, PathParams, RcpError, SketchMode, SolveOutcome,
    SolveStatus, SolverConfig,
};

type Check = Result<String, String>;
type Criterion<'a> = (u32, &'static str, Box<dyn FnOnce() -> Check + 'a>);

fn rel_diff(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
    let scale = b.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
    diff / scale
}

fn practical(delta: f64) -> SolverConfig {
    SolverConfig { delta, ..SolverConfig::default() }
}

fn modified_params(lp: &GeneratedLp, cfg: &SolverConfig) -> (PathParams, ModifiedProblem) {
    let p = &lp.problem;
    let params = cfg.path_params(p.structure.m() + 1, p.nu() + 1.0).unwrap();
    let modified = build_modified(p, params.delta).unwrap();
    (params, modified)
}

/// Dual slack moved along the row space so that the largest block centrality is `target`.
fn perturbed_slack(m: &ModifiedProblem, params: &PathParams, target: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let z = DVector::from_fn(m.a.nrows(), |_, _| rng.random_range(-1.0..1.0));
    let shift = m.a.transpose() * z;
    let mut ws = StepWorkspace::new(&m.structure);
    let trial: Vec<f64> = m.s0.iter().zip(shift.iter()).map(|(s, d)| s - d).collect();
    ws.compute(&m.x0, &trial, 1.0, params, &m.barriers).unwrap();
    let scale = target / ws.max_gamma;
    m.s0.iter().zip(shift.iter()).map(|(s, d)| s - scale * d).collect()
}

fn oracle_equivalence() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let iterations = 120;
    let (mut worst, mut active, mut full, mut moves) = (0.0f64, 0usize, 0u64, 0u64);
    for k in 0..20 {
        let n = 10 + 2 * k;
        let lp = random_lp(n, (2 * n / 5).min(24), 100 + k as u64).map_err(|e| e.to_string())?;
        let (params, m) = modified_params(&lp, &practical(1e-3));
        let s0 = perturbed_slack(&m, &params, 1.5, &mut rng);
        let eps_mp = if k % 2 == 0 { None } else { Some(1e-6) };
        let cfg = MaintenanceConfig { sketch: SketchMode::Identity, eps_mp, ..MaintenanceConfig::default() };
        let mut ws = StepWorkspace::new(&m.structure);
        ws.compute(&m.x0, &s0, 1.0, &params, &m.barriers).map_err(|e| e.to_string())?;
        let mut cpm = MaintenanceState::initialize(&m.a, &m.x0, &s0, &ws.wbar, &cfg).map_err(|e| e.to_string())?;
        let (mut x_ref, mut s_ref) = (m.x0.clone(), s0);
        for it in 0..iterations {
            let t = params.t_at(it);
            if it == iterations / 2 {
                cpm.force_move().map_err(|e| e.to_string())?;
            }
            let (xb, sb) = cpm.query();
            let (xb, sb) = (xb.to_vec(), sb.to_vec());
            ws.compute(&xb, &sb, t, &params, &m.barriers).map_err(|e| e.to_string())?;
            if ws.h_norm > 0.0 {
                active += 1;
            }
            cpm.update(&ws.wbar).map_err(|e| e.to_string())?;
            let (xn, sn, _) = dense_step_with(&x_ref, &s_ref, &x_ref, &s_ref, cpm.v_tilde(), t, &params, &m.barriers, &m.a)
                .map_err(|e| e.to_string())?;
            cpm.multiply_move(&ws.h, t).map_err(|e| e.to_string())?;
            x_ref = xn;
            s_ref = sn;
            let (x, s) = cpm.exact_iterates();
            worst = worst.max(rel_diff(&x, &x_ref)).max(rel_diff(&s, &s_ref));
        }
        let c = cpm.counters();
        full += c.full_updates;
        moves += c.moves + c.rebuilds;
    }
    let detail = format!(
        "max rel error {worst:.2e} over 20 instances x {iterations} iterations ({active} active steps, {full} full updates, {moves} rebuilds)"
    );
    if worst <= 1e-8 && active > 0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_spd(d: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
    let g = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
    &g * g.transpose() + DMatrix::identity(d, d) * 0.3
}

fn direct_projection(a: &DenseMatrix, v: &BlockDiagMatrix) -> DenseMatrix {
    let dense_v = v.to_dense();
    let normal = a * &dense_v * a.transpose();
    let inv = normal.lu().try_inverse().expect("normal matrix is invertible");
    a.transpose() * inv * a
}

fn woodbury_correctness() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst, mut batches, mut singles, mut fulls) = (0.0f64, 0, 0, 0);
    for inst in 0..10 {
        let sizes: Vec<usize> = (0..8 + 2 * inst).map(|_| rng.random_range(1..=3)).collect();
        let structure = BlockStructure::new(sizes).unwrap();
        let n = structure.n();
        let d = (n / 3).max(1);
        let a = DMatrix::from_fn(d, n, |_, _| rng.random_range(-1.0..1.0));
        let blocks: Vec<DenseMatrix> = (0..structure.m()).map(|i| random_spd(structure.size(i), &mut rng)).collect();
        let mut target = BlockDiagMatrix::from_blocks(&structure, &blocks).unwrap();
        let x = vec![1.0; n];
        let cfg = MaintenanceConfig { sketch: SketchMode::Identity, ..MaintenanceConfig::default() };
        let mut cpm = MaintenanceState::initialize(&a, &x, &x, &target, &cfg).map_err(|e| e.to_string())?;
        for b in 0..10 {
            let chosen: Vec<usize> = match b {
                0 => (0..structure.m()).collect(),
                1 | 2 => vec![rng.random_range(0..structure.m())],
                _ => (0..structure.m()).filter(|_| rng.random_bool(0.3)).collect(),
            };
            for &i in &chosen {
                let fresh = if b < 3 {
                    target.block_matrix(i) * rng.random_range(1.6..3.0)
                } else {
                    random_spd(structure.size(i), &mut rng)
                };
                target.set_block(i, &fresh).unwrap();
            }
            let before = cpm.v().clone();
            let report = cpm.update_full(&target).map_err(|e| e.to_string())?;
            for i in 0..structure.m() {
                if !cpm.v().block_eq(&target, i) && !cpm.v().block_eq(&before, i) {
                    return Err(format!("block {i} of V is neither the old nor the new target"));
                }
            }
            if b == 0 && report.r != structure.m() {
                return Err(format!("full-support batch updated {} of {} blocks", report.r, structure.m()));
            }
            if chosen.len() == 1 {
                singles += 1;
            }
            if b == 0 {
                fulls += 1;
            }
            let direct = direct_projection(&a, cpm.v());
            let scale = direct.amax().max(1e-300);
            worst = worst.max((cpm.projection() - &direct).amax() / scale);
            batches += 1;
        }
    }
    let detail = format!("max rel error {worst:.2e} over {batches} batches ({fulls} full-support, {singles} single-block)");
    if worst <= 1e-8 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

struct LpRun {
    lp: GeneratedLp,
    outcome: SolveOutcome,
    optimum: f64,
}

fn lp_suite() -> Result<Vec<LpRun>, String> {
    let cfg = practical(1e-3);
    (0..50u64)
        .map(|k| {
            let n = 8 + (k as usize % 13);
            let lp = random_lp(n, (2 * n / 5).max(1), 1000 + k).map_err(|e| e.to_string())?;
            let p = &lp.problem;
            let outcome = solve_with_observer(p, &cfg, &mut |_, _| {}).map_err(|e| format!("instance {k}: {e}"))?;
            let optimum = vertex_lp_solve(&p.a, &p.b, &p.c, &lp.vertex_bounds).map_err(|e| e.to_string())?.objective;
            Ok(LpRun { lp, outcome, optimum })
        })
        .collect()
}

fn lp_optimality(runs: &[LpRun]) -> Check {
    let (mut worst_obj, mut worst_inf, mut failures) = (f64::NEG_INFINITY, 0.0f64, Vec::new());
    for (k, run) in runs.iter().enumerate() {
        let p = &run.lp.problem;
        let sol = &run.outcome.solution;
        let delta = run.outcome.params.delta;
        let excess_bound = p.lipschitz() * p.r_diam * delta;
        let abs_a: f64 = p.a.iter().map(|v| v.abs()).sum();
        let b1: f64 = p.b.iter().map(|v| v.abs()).sum();
        let infeas_bound = 3.0 * delta * (p.r_diam * abs_a + b1);
        let ax = &p.a * DVector::from_column_slice(&sol.x);
        let infeas: f64 = ax.iter().zip(&p.b).map(|(l, r)| (l - r).abs()).sum();
        let excess = sol.objective - run.optimum;
        worst_obj = worst_obj.max(excess / excess_bound);
        worst_inf = worst_inf.max(infeas / infeas_bound);
        if excess > excess_bound || infeas > infeas_bound || sol.status != SolveStatus::Converged {
            failures.push(k);
        }
    }
    let detail = format!(
        "{} LPs (n 8..20), worst excess/LR delta = {worst_obj:.3}, worst infeasibility/bound = {worst_inf:.3}",
        runs.len()
    );
    if failures.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{detail}; failing instances {failures:?}"))
    }
}

fn gap_certificate(runs: &[LpRun]) -> Check {
    let (mut checked, mut skipped, mut worst, mut failures) = (0, 0, f64::NEG_INFINITY, Vec::new());
    for (k, run) in runs.iter().enumerate() {
        let p = &run.lp.problem;
        let sol = &run.outcome.solution;
        let params = &run.outcome.params;
        if sol.t_final > params.t_final() {
            failures.push(k);
            continue;
        }
        let modified = build_modified(p, params.delta).map_err(|e| e.to_string())?;
        let mut bounds: Vec<(f64, f64)> = vec![(0.0, f64::INFINITY); p.n()];
        bounds.push((0.0, f64::INFINITY));
        let Ok(best) = vertex_lp_solve(&modified.a, &modified.b, &modified.c, &bounds) else {
            skipped += 1;
            continue;
        };
        // The relaxed optimum solves the boxed program only if it respects the box.
        let inside = p.barriers.iter().zip(&best.x).all(|(bar, &v)| interval_bounds(bar).is_some_and(|(_, hi)| v <= hi));
        if !inside {
            skipped += 1;
            continue;
        }
        checked += 1;
        let excess = sol.modified_objective - best.objective;
        let bound = 4.0 * sol.t_final * params.nu;
        worst = worst.max(excess / bound);
        if excess > bound {
            failures.push(k);
        }
    }
    let detail = format!("{checked} oracle-solvable instances ({skipped} skipped), worst excess/4t nu = {worst:.3}");
    if failures.is_empty() && checked > 0 {
        Ok(detail)
    } else {
        Err(format!("{detail}; failing instances {failures:?}"))
    }
}

fn sketch_moments() -> Check {
    let (n, b, per_bank, banks) = (256usize, 64usize, 100usize, 100usize);
    let h: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin() + 0.01 * i as f64).collect();
    let hh: f64 = h.iter().map(|v| v * v).sum();
    let mut bank = create_bank(b, n, per_bank, 5).map_err(|e| e.to_string())?;
    let mut sum = vec![0.0; n];
    let mut sum_sq = vec![0.0; n];
    for epoch in 0..banks {
        if epoch > 0 {
            bank.regenerate();
        }
        for l in 0..per_bank {
            let rh = bank.apply(l, &h).map_err(|e| e.to_string())?;
            let est = bank.apply_transpose(l, &rh).map_err(|e| e.to_string())?;
            for i in 0..n {
                sum[i] += est[i];
                sum_sq[i] += est[i] * est[i];
            }
        }
    }
    let count = (per_bank * banks) as f64;
    let (mut worst_z, mut worst_ratio) = (0.0f64, 0.0f64);
    for i in 0..n {
        let mean = sum[i] / count;
        let second = sum_sq[i] / count;
        let var = (second - mean * mean) * count / (count - 1.0);
        let se = (var / count).sqrt();
        worst_z = worst_z.max((mean - h[i]).abs() / se);
        worst_ratio = worst_ratio.max(second / (h[i] * h[i] + hh / b as f64));
    }
    let detail = format!("{} sketches: max |mean - h|/SE = {worst_z:.2}, max second moment / bound = {worst_ratio:.3}", count);
    if worst_z <= 4.0 && worst_ratio <= 1.1 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn potential_invariant(runs: &[LpRun]) -> Check {
    let lp = random_lp(6, 2, 3).map_err(|e| e.to_string())?;
    let cfg = SolverConfig { mode: PathMode::Paper, delta: 1e-6, ..SolverConfig::default() };
    let (params, m) = modified_params(&lp, &cfg);
    let bound = params.log_potential_bound();
    let (mut seen, mut worst) = (0u64, f64::NEG_INFINITY);
    let input = PathInput { a: &m.a, structure: &m.structure, barriers: &m.barriers, x0: &m.x0, s0: &m.s0 };
    let result = follow_path(input, &params, &MaintenanceConfig::default(), Some(200), &mut |rec, _| {
        seen += 1;
        worst = worst.max(rec.log_phi);
    });
    match result {
        Err(RcpError::IterationLimit(200)) => {}
        Ok(_) => {}
        Err(e) => return Err(format!("strict-constant run failed: {e}")),
    }
    let strict_ok = seen == 200 && worst <= bound && m.structure.m() <= 8;
    let violations: u64 = runs.iter().map(|r| r.outcome.potential_violations).sum();
    let practical_margin = runs
        .iter()
        .map(|r| r.outcome.max_log_phi - r.outcome.params.log_potential_bound())
        .fold(f64::NEG_INFINITY, f64::max);
    let detail = format!(
        "strict constants, m = {}: {seen} iterations, max ln Phi {worst:.3} <= {bound:.3}; practical suite: {violations} violations, max ln Phi - bound = {practical_margin:.3}",
        m.structure.m()
    );
    if strict_ok && violations == 0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn step_identities() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut rows, mut active, mut worst_h, mut worst_a) = (0usize, 0usize, 0.0f64, 0.0f64);
    for k in 0..12u64 {
        let n = 8 + k as usize;
        let lp = random_lp(n, (2 * n / 5).max(1), 2000 + k).map_err(|e| e.to_string())?;
        let (params, m) = modified_params(&lp, &practical(1e-3));
        let target = if k % 3 == 0 { 0.0 } else { 0.6 + 0.3 * k as f64 };
        let mut s = if target > 0.0 { perturbed_slack(&m, &params, target, &mut rng) } else { m.s0.clone() };
        let mut x = m.x0.clone();
        let a2 = params.alpha * params.alpha;
        for it in 0..200 {
            let (xn, sn, row) = dense_step(&x, &s, params.t_at(it), &params, &m.barriers, &m.structure, &m.a).map_err(|e| e.to_string())?;
            rows += 1;
            if row.h_dual_sq > 0.0 {
                active += 1;
            }
            worst_h = worst_h.max(row.h_dual_sq / a2);
            worst_a = worst_a.max(row.alphas.iter().map(|v| v * v).sum::<f64>() / a2);
            x = xn;
            s = sn;
        }
    }
    let detail = format!("{rows} dense iterations ({active} with nonzero step): max sum |h_i|*^2 / alpha^2 = {worst_h:.6}, max sum alpha_i^2 / alpha^2 = {worst_a:.4}");
    if worst_h <= 1.0 + 1e-12 && worst_a <= 4.0 && active > 0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn barrier_kinds() -> Vec<(&'static str, Barrier)> {
    vec![
        ("log_positive", Barrier::log_positive()),
        ("log_box", Barrier::log_box(-1.0, 2.0).unwrap()),
        ("ball_1", Barrier::ball(1, 1.5).unwrap()),
        ("ball_3", Barrier::ball(3, 1.0).unwrap()),
        ("epigraph_abs", Barrier::epigraph_abs(None).unwrap()),
        ("epigraph_abs_capped", Barrier::epigraph_abs(Some(4.0)).unwrap()),
    ]
}

fn sample_interior(bar: &Barrier, rng: &mut ChaCha8Rng) -> Vec<f64> {
    match bar.kind() {
        BarrierKind::LogPositive => vec![rng.random_range(0.05..10.0)],
        BarrierKind::LogBox { lower, upper } => vec![lower + (upper - lower) * rng.random_range(0.02..0.98)],
        BarrierKind::Ball { radius, dim } => {
            let dir: Vec<f64> = (0..*dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let len = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-9);
            let scale = 0.95 * radius * rng.random_range(0.0..1.0) / len;
            dir.iter().map(|v| v * scale).collect()
        }
        BarrierKind::EpigraphAbs { cap } => {
            let z = rng.random_range(0.05..cap.unwrap_or(10.0) - 0.05);
            vec![rng.random_range(-0.95..0.95) * z, z]
        }
        BarrierKind::Custom(_) => unreachable!("no custom barriers sampled"),
    }
}

fn fd_gradient(bar: &Barrier, x: &[f64]) -> Vec<f64> {
    (0..x.len())
        .map(|k| {
            let step = 1e-6 * (1.0 + x[k].abs());
            let (mut p, mut m) = (x.to_vec(), x.to_vec());
            p[k] += step;
            m[k] -= step;
            (bar.value(&p).unwrap() - bar.value(&m).unwrap()) / (2.0 * step)
        })
        .collect()
}

fn fd_hessian(bar: &Barrier, x: &[f64]) -> Vec<f64> {
    let d = x.len();
    let mut out = vec![0.0; d * d];
    for k in 0..d {
        let step = 1e-6 * (1.0 + x[k].abs());
        let (mut p, mut m) = (x.to_vec(), x.to_vec());
        p[k] += step;
        m[k] -= step;
        let (gp, gm) = (bar.gradient(&p).unwrap(), bar.gradient(&m).unwrap());
        for r in 0..d {
            out[r * d + k] = (gp[r] - gm[r]) / (2.0 * step);
        }
    }
    out
}

fn max_rel_entry(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    a.iter().zip(b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max) / scale
}

/// Largest violation of `(1-r)^2 H(x) <= H(y) <= H(x) / (1-r)^2` as a relative eigenvalue excess.
fn sandwich_violation(hx: &DenseMatrix, hy: &DenseMatrix, r: f64) -> f64 {
    let eig = SymmetricEigen::new(hx.clone());
    let inv_root = &eig.eigenvectors * DMatrix::from_diagonal(&eig.eigenvalues.map(|v| 1.0 / v.sqrt())) * eig.eigenvectors.transpose();
    let rel = &inv_root * hy * &inv_root;
    let lo = (1.0 - r) * (1.0 - r);
    let hi = 1.0 / lo;
    SymmetricEigen::new((&rel + rel.transpose()) * 0.5)
        .eigenvalues
        .iter()
        .map(|&e| (lo - e).max(e - hi).max(0.0) / hi)
        .fold(0.0, f64::max)
}

fn calculus() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let step = 1e-5;
    let (mut psi_checked, mut psi_d1, mut psi_d2) = (0, 0.0f64, 0.0f64);
    while psi_checked < 10_000 {
        let eps = rng.random_range(0.02..0.24);
        let dir: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let len = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        let radius = rng.random_range(0.0..3.0 * eps);
        let x: Vec<f64> = dir.iter().map(|v| v * radius / len).collect();
        if (radius - eps).abs() <= 10.0 * step || (radius - 2.0 * eps).abs() <= 10.0 * step {
            continue;
        }
        let hdir: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let nh = hdir.iter().map(|v| v * v).sum::<f64>().sqrt();
        let f = |t: f64| psi_matrix(eps, &x.iter().zip(&hdir).map(|(a, b)| a + t * b).collect::<Vec<_>>());
        let d1 = (f(step) - f(-step)) / (2.0 * step);
        let d2 = (f(step) - 2.0 * f(0.0) + f(-step)) / (step * step);
        psi_d1 = psi_d1.max(d1.abs() / (2.0 * nh));
        psi_d2 = psi_d2.max((d2.abs() - 1e-4) / (10.0 / eps * nh * nh));
        psi_checked += 1;
    }
    let (mut fd_worst, mut sandwich_worst, mut pairs) = (0.0f64, 0.0f64, 0usize);
    for (_, bar) in barrier_kinds() {
        let d = bar.dim();
        for _ in 0..2_000 {
            let x = sample_interior(&bar, &mut rng);
            if !bar.is_interior(&x) {
                continue;
            }
            fd_worst = fd_worst.max(max_rel_entry(&bar.gradient(&x).unwrap(), &fd_gradient(&bar, &x)));
            fd_worst = fd_worst.max(max_rel_entry(bar.hessian(&x).unwrap().as_slice(), &fd_hessian(&bar, &x)));
        }
        let mut done = 0;
        while done < 10_000 {
            let x = sample_interior(&bar, &mut rng);
            if !bar.is_interior(&x) {
                continue;
            }
            let hx = bar.hessian(&x).unwrap();
            let v = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
            let norm = (v.transpose() * &hx * &v)[(0, 0)].sqrt();
            if norm <= 1e-12 {
                continue;
            }
            let r = rng.random_range(0.0..0.95);
            let y: Vec<f64> = x.iter().zip(v.iter()).map(|(a, b)| a + r * b / norm).collect();
            let hy = bar.hessian(&y).map_err(|e| format!("Dikin point left the domain: {e}"))?;
            sandwich_worst = sandwich_worst.max(sandwich_violation(&hx, &hy, r));
            done += 1;
            pairs += 1;
        }
    }
    let detail = format!(
        "psi: max |D psi|/2|H| = {psi_d1:.3}, max |D2 psi|/(10/eps |H|^2) = {psi_d2:.3} on {psi_checked} samples; barrier FD rel error {fd_worst:.2e}; sandwich excess {sandwich_worst:.1e} on {pairs} pairs"
    );
    if psi_d1 <= 1.0 + 1e-6 && psi_d2 <= 1.0 + 1e-4 && fd_worst <= 1e-5 && sandwich_worst <= 1e-9 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn iteration_trend() -> Check {
    let delta = 0.05;
    let cfg = practical(delta);
    let mut points = Vec::new();
    for n in [16usize, 32, 64, 128, 256] {
        let lp = random_lp(n, 2 * n / 5, 1).map_err(|e| e.to_string())?;
        let out = solve_with_observer(&lp.problem, &cfg, &mut |_, _| {}).map_err(|e| format!("n = {n}: {e}"))?;
        if out.solution.status != SolveStatus::Converged {
            return Err(format!("n = {n} did not converge"));
        }
        let model = (n as f64).sqrt() * (n as f64 / delta).ln();
        points.push((n, out.solution.iterations, model));
    }
    let log_c = points.iter().map(|&(_, k, model)| (k as f64 / model).ln()).sum::<f64>() / points.len() as f64;
    let c = log_c.exp();
    let residual = points.iter().map(|&(_, k, model)| (k as f64 / (c * model)).max(c * model / k as f64)).fold(1.0, f64::max);
    let counts: Vec<String> = points.iter().map(|(n, k, _)| format!("{n}:{k}")).collect();
    let detail = format!("counts {}; c = {c:.1}, max multiplicative residual {residual:.3}", counts.join(" "));
    if residual <= 2.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn determinism() -> Check {
    let dir = std::env::temp_dir().join(format!("ripm-acceptance-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
    let lp = random_lp(8, 3, 21).map_err(|e| e.to_string())?;
    let instance = Instance { problem: lp.problem, erm: None, metadata: Metadata::default() };
    let run = |name: &str| -> Result<(Vec<u8>, Vec<f64>), String> {
        let path = dir.join(name);
        let cfg = RunConfig {
            delta: 0.05,
            seed: 42,
            sketch: SketchMode::Rows(4),
            log: Some(path.clone()),
            deterministic_log: true,
            ..RunConfig::default()
        };
        let summary = solve_instance(&instance, &cfg, None).map_err(|e| e.to_string())?;
        Ok((std::fs::read(&path).map_err(|e| e.to_string())?, summary.report.x))
    };
    let (log_a, x_a) = run("a.csv")?;
    let (log_b, x_b) = run("b.csv")?;
    let _ = std::fs::remove_dir_all(&dir);
    let same_x = x_a.iter().zip(&x_b).all(|(p, q)| p.to_bits() == q.to_bits());
    let detail = format!("two seeded runs: {} log bytes, logs identical = {}, iterates identical = {same_x}", log_a.len(), log_a == log_b);
    if log_a == log_b && same_x && !log_a.is_empty() {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn run(id: u32, name: &str, check: impl FnOnce() -> Check) -> bool {
    let start = Instant::now();
    let result = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
        let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
        Err(format!("panicked: {}", msg.unwrap_or_default()))
    });
    let secs = start.elapsed().as_secs_f64();
    let (tag, detail) = match &result {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("[{tag}] {id:>2} {name} ({secs:.1}s): {detail}");
    result.is_ok()
}

/// Criterion numbers given on the command line, or all of them.
fn selected() -> Vec<u32> {
    let picked: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    if picked.is_empty() {
        (1..=10).collect()
    } else {
        picked
    }
}

fn main() {
    let chosen = selected();
    let suite = OnceCell::new();
    let with_suite = |f: fn(&[LpRun]) -> Check| {
        let suite = &suite;
        move || {
            let runs = suite.get_or_init(|| {
                let start = Instant::now();
                let runs = lp_suite();
                println!("       practical LP suite solved in {:.1}s", start.elapsed().as_secs_f64());
                runs
            });
            runs.as_ref().map_err(Clone::clone).and_then(|r| f(r))
        }
    };
    let criteria: Vec<Criterion> = vec![
        (1, "oracle equivalence", Box::new(oracle_equivalence)),
        (2, "woodbury correctness", Box::new(woodbury_correctness)),
        (3, "LP optimality", Box::new(with_suite(lp_optimality))),
        (4, "gap certificate", Box::new(with_suite(gap_certificate))),
        (5, "sketch moments", Box::new(sketch_moments)),
        (6, "potential invariant", Box::new(with_suite(potential_invariant))),
        (7, "step-size identities", Box::new(step_identities)),
        (8, "psi and barrier calculus", Box::new(calculus)),
        (9, "iteration-count trend", Box::new(iteration_trend)),
        (10, "determinism", Box::new(determinism)),
    ];
    let mut ok = true;
    for (id, name, check) in criteria {
        if chosen.contains(&id) {
            ok &= run(id, name, check);
        }
    }
    if !ok {
        std::process::exit(1);
    }
}
