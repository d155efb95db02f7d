//! Fixtures shared by the kernel benchmarks.

use ripm_core::generate::random_lp;
use ripm_core::rcp::StepWorkspace;
use ripm_core::{
    build_modified, BlockDiagMatrix, MaintenanceConfig, MaintenanceState, ModifiedProblem, PathParams, SketchMode, SolverConfig,
};

/// A homogenized random LP with a step workspace evaluated at its starting point.
pub struct PathFixture {
    pub modified: ModifiedProblem,
    pub params: PathParams,
    pub workspace: StepWorkspace,
}

impl PathFixture {
    /// Random LP with `n` variables and `2n/5` equality rows.
    pub fn new(n: usize, seed: u64) -> Self {
        let lp = random_lp(n, (2 * n / 5).max(1), seed).expect("generator accepts n >= 2");
        let p = &lp.problem;
        let params = SolverConfig::default().path_params(p.structure.m() + 1, p.nu() + 1.0).expect("valid parameters");
        let modified = build_modified(p, params.delta).expect("generated LPs homogenize");
        let mut workspace = StepWorkspace::new(&modified.structure);
        workspace.compute(&modified.x0, &modified.s0, 1.0, &params, &modified.barriers).expect("start is interior");
        Self { modified, params, workspace }
    }

    pub fn n(&self) -> usize {
        self.modified.structure.n()
    }

    /// Maintenance state at the start point with the given sketch.
    pub fn maintenance(&self, sketch: SketchMode) -> MaintenanceState {
        let cfg = MaintenanceConfig { sketch, ..MaintenanceConfig::default() };
        let m = &self.modified;
        MaintenanceState::initialize(&m.a, &m.x0, &m.s0, &self.workspace.wbar, &cfg).expect("start is well conditioned")
    }

    /// Target with every block scaled by `factor`.
    pub fn scaled_target(&self, factor: f64) -> BlockDiagMatrix {
        let mut w = self.workspace.wbar.clone();
        for i in 0..w.structure().m() {
            w.block_mut(i).iter_mut().for_each(|v| *v *= factor);
        }
        w
    }

    /// Unit step direction with the same block layout.
    pub fn direction(&self) -> Vec<f64> {
        let n = self.n();
        (0..n).map(|i| ((i * 7 % 11) as f64 - 5.0) / (5.0 * n as f64)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixture_is_consistent() {
        let f = PathFixture::new(12, 3);
        assert_eq!(f.n(), 13);
        let mut cpm = f.maintenance(SketchMode::Identity);
        let report = cpm.update_full(&f.scaled_target(2.0)).unwrap();
        assert_eq!(report.r, f.modified.structure.m());
        assert!(cpm.multiply_move(&f.direction(), 1.0).is_ok());
    }
}
