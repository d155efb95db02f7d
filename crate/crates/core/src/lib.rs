//! Robust interior point method with lazily maintained central path state.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod barrier;
pub mod blocklin;
pub mod cpm;
pub mod generate;
pub mod oracle;
pub mod problem;
pub mod rcp;
pub mod sketch;

pub use barrier::{Barrier, BarrierError, BarrierKind, CustomBarrier};
pub use blocklin::{BlockDiagMatrix, BlockStructure, DenseMatrix, LinalgError, Tolerances};
pub use cpm::{CpmError, MaintenanceConfig, MaintenanceCounters, MaintenanceState, SketchMode, UpdateBranch, UpdateReport};
pub use rcp::{IterationRecord, PathMode, PathParams, PracticalConstants, RcpError};
pub use sketch::{create_bank, SketchBank, SketchError};
pub use problem::{build_modified, erm_to_standard, validate, ErmInstance, Loss, ModifiedProblem, ProblemError, Solution, SolveStatus, StandardProblem};
pub use rcp::{solve, solve_with_observer, SolveError, SolveOutcome, SolverConfig};
