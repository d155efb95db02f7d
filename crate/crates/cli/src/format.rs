//! JSON instance and solution files.
//!
//! A standard instance looks like
//!
//! ```json
//! {
//!   "kind": "standard",
//!   "A": [[1.0, 1.0]],
//!   "b": [1.0],
//!   "c": [1.0, 2.0],
//!   "blocks": [
//!     { "size": 1, "barrier": "log_box", "params": { "lower": 0.0, "upper": 1.0 } },
//!     { "size": 1, "barrier": "log_positive", "params": { "reference": 0.5 } }
//!   ],
//!   "metadata": { "R": 1.5, "name": "tiny" }
//! }
//! ```
//!
//! `A` may also be given as `{ "rows": 1, "cols": 2, "data": [1.0, 1.0] }` in row-major order.
//! ERM instances use `"kind": "erm"` with `rows`, `offsets`, `losses` and `R`.

use serde::{Deserialize, Serialize};

use ripm_core::problem::erm_to_standard;
use ripm_core::{Barrier, BarrierError, BarrierKind, BlockStructure, DenseMatrix, ErmInstance, Loss, ProblemError, Solution, SolveStatus, StandardProblem};

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("cannot parse instance: {0}")]
    Json(#[from] serde_json::Error),
    #[error("block {block}: {message}")]
    Block { block: usize, message: String },
    #[error("block {block}: {source}")]
    Barrier { block: usize, source: BarrierError },
    #[error("matrix data has {found} entries, expected {expected}")]
    MatrixShape { expected: usize, found: usize },
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error("custom barriers cannot be written to instance files (block {0})")]
    CustomBarrier(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixData {
    Rows(Vec<Vec<f64>>),
    Flat { rows: usize, cols: usize, data: Vec<f64> },
}

impl MatrixData {
    pub fn to_matrix(&self) -> Result<DenseMatrix, FormatError> {
        match self {
            Self::Rows(rows) => {
                let cols = rows.first().map_or(0, Vec::len);
                if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
                    return Err(FormatError::MatrixShape { expected: cols, found: bad.len() });
                }
                Ok(DenseMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
            }
            Self::Flat { rows, cols, data } => {
                if data.len() != rows * cols {
                    return Err(FormatError::MatrixShape { expected: rows * cols, found: data.len() });
                }
                Ok(DenseMatrix::from_row_slice(*rows, *cols, data))
            }
        }
    }

    pub fn from_matrix(a: &DenseMatrix) -> Self {
        Self::Rows((0..a.nrows()).map(|i| a.row(i).iter().copied().collect()).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BarrierTag {
    LogPositive,
    LogBox,
    Ball,
    EpigraphAbs,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BarrierParams {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lower: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upper: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cap: Option<f64>,
    /// Starting point for barriers without an analytic center; a scalar or a vector.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<Reference>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Reference {
    Scalar(f64),
    Vector(Vec<f64>),
}

impl Reference {
    fn to_vec(&self) -> Vec<f64> {
        match self {
            Self::Scalar(v) => vec![*v],
            Self::Vector(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub size: usize,
    pub barrier: BarrierTag,
    #[serde(default)]
    pub params: BarrierParams,
}

impl BlockSpec {
    fn to_barrier(&self, block: usize) -> Result<Barrier, FormatError> {
        let need = |v: Option<f64>, name: &str| v.ok_or_else(|| FormatError::Block { block, message: format!("missing parameter {name}") });
        let p = &self.params;
        let bar = match self.barrier {
            BarrierTag::LogPositive => Ok(Barrier::log_positive()),
            BarrierTag::LogBox => Barrier::log_box(need(p.lower, "lower")?, need(p.upper, "upper")?),
            BarrierTag::Ball => Barrier::ball(self.size, need(p.radius, "radius")?),
            BarrierTag::EpigraphAbs => Barrier::epigraph_abs(p.cap),
        }
        .map_err(|source| FormatError::Barrier { block, source })?;
        if bar.dim() != self.size {
            return Err(FormatError::Block { block, message: format!("{:?} has dimension {}, not {}", self.barrier, bar.dim(), self.size) });
        }
        match &p.reference {
            Some(r) => bar.with_reference_point(r.to_vec()).map_err(|source| FormatError::Barrier { block, source }),
            None => Ok(bar),
        }
    }

    fn from_barrier(bar: &Barrier, block: usize) -> Result<Self, FormatError> {
        let mut params = BarrierParams { reference: bar.reference_point().map(|r| Reference::Vector(r.to_vec())), ..BarrierParams::default() };
        let barrier = match bar.kind() {
            BarrierKind::LogPositive => BarrierTag::LogPositive,
            BarrierKind::LogBox { lower, upper } => {
                params.lower = Some(*lower);
                params.upper = Some(*upper);
                BarrierTag::LogBox
            }
            BarrierKind::Ball { radius, .. } => {
                params.radius = Some(*radius);
                BarrierTag::Ball
            }
            BarrierKind::EpigraphAbs { cap } => {
                params.cap = *cap;
                BarrierTag::EpigraphAbs
            }
            BarrierKind::Custom(_) => return Err(FormatError::CustomBarrier(block)),
        };
        Ok(Self { size: bar.dim(), barrier, params })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    /// Euclidean bound on the feasible region.
    #[serde(rename = "R", default, skip_serializing_if = "Option::is_none")]
    pub r_diam: Option<f64>,
    /// Lipschitz constant of the objective; defaults to `|c|_2`.
    #[serde(rename = "L", default, skip_serializing_if = "Option::is_none")]
    pub lipschitz: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    /// Strictly feasible point the instance was generated from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub witness: Option<Vec<f64>>,
    /// Bounds describing the same feasible set, for the vertex-enumeration check.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle_bounds: Option<Vec<(f64, Option<f64>)>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardFile {
    #[serde(rename = "A")]
    pub a: MatrixData,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub blocks: Vec<BlockSpec>,
    #[serde(default)]
    pub metadata: Metadata,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErmFile {
    pub rows: Vec<Vec<f64>>,
    pub offsets: Vec<f64>,
    pub losses: Vec<Loss>,
    #[serde(rename = "R")]
    pub radius: f64,
    #[serde(default)]
    pub metadata: Metadata,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InstanceFile {
    Standard(StandardFile),
    Erm(ErmFile),
}

/// A parsed instance ready to solve.
#[derive(Debug, Clone)]
pub struct Instance {
    pub problem: StandardProblem,
    pub erm: Option<ErmInstance>,
    pub metadata: Metadata,
}

impl Instance {
    pub fn name(&self) -> Option<&str> {
        self.metadata.name.as_deref()
    }

    /// `(lower, upper)` per coordinate for the vertex oracle, if every block is an interval.
    pub fn oracle_bounds(&self) -> Option<Vec<(f64, f64)>> {
        if let Some(b) = &self.metadata.oracle_bounds {
            return Some(b.iter().map(|&(l, u)| (l, u.unwrap_or(f64::INFINITY))).collect());
        }
        self.problem.barriers.iter().map(ripm_core::problem::interval_bounds).collect()
    }
}

impl StandardFile {
    pub fn to_problem(&self) -> Result<StandardProblem, FormatError> {
        let a = self.a.to_matrix()?;
        let barriers = self.blocks.iter().enumerate().map(|(i, b)| b.to_barrier(i)).collect::<Result<Vec<_>, _>>()?;
        let structure = BlockStructure::new(self.blocks.iter().map(|b| b.size).collect()).map_err(ProblemError::from)?;
        let r_diam = self.metadata.r_diam.ok_or_else(|| ProblemError::InvalidData("metadata.R is required".into()))?;
        let mut p = StandardProblem::new(a, self.b.clone(), self.c.clone(), structure, barriers, r_diam)?;
        p.l_lip = self.metadata.lipschitz;
        Ok(p)
    }

    pub fn from_problem(p: &StandardProblem, metadata: Metadata) -> Result<Self, FormatError> {
        let blocks = p.barriers.iter().enumerate().map(|(i, b)| BlockSpec::from_barrier(b, i)).collect::<Result<_, _>>()?;
        let metadata = Metadata { r_diam: Some(p.r_diam), lipschitz: p.l_lip, ..metadata };
        Ok(Self { a: MatrixData::from_matrix(&p.a), b: p.b.clone(), c: p.c.clone(), blocks, metadata })
    }
}

impl ErmFile {
    pub fn to_erm(&self) -> ErmInstance {
        ErmInstance { rows: self.rows.clone(), offsets: self.offsets.clone(), losses: self.losses.clone(), radius: self.radius }
    }

    pub fn from_erm(erm: &ErmInstance, metadata: Metadata) -> Self {
        Self { rows: erm.rows.clone(), offsets: erm.offsets.clone(), losses: erm.losses.clone(), radius: erm.radius, metadata }
    }
}

impl InstanceFile {
    pub fn parse(text: &str) -> Result<Self, FormatError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("instance files always serialize");
        s.push('\n');
        s
    }

    pub fn metadata(&self) -> &Metadata {
        match self {
            Self::Standard(f) => &f.metadata,
            Self::Erm(f) => &f.metadata,
        }
    }

    pub fn into_instance(self) -> Result<Instance, FormatError> {
        match self {
            Self::Standard(f) => Ok(Instance { problem: f.to_problem()?, erm: None, metadata: f.metadata }),
            Self::Erm(f) => {
                let erm = f.to_erm();
                let mut problem = erm_to_standard(&erm)?;
                if let Some(r) = f.metadata.r_diam {
                    problem.r_diam = r;
                }
                problem.l_lip = f.metadata.lipschitz.or(problem.l_lip);
                Ok(Instance { problem, erm: Some(erm), metadata: f.metadata })
            }
        }
    }
}

/// What `solve` writes next to the iteration log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolutionReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub status: SolveStatus,
    pub objective: f64,
    /// ERM loss at the decision vector, for ERM instances.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub erm_objective: Option<f64>,
    pub gap_bound: f64,
    pub excess_bound: f64,
    pub infeasibility: f64,
    pub infeasibility_bound: f64,
    pub tau: f64,
    pub iterations: u64,
    pub t_final: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub certificate_error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle_objective: Option<f64>,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl SolutionReport {
    pub fn new(sol: &Solution, instance: &Instance) -> Self {
        Self {
            name: instance.metadata.name.clone(),
            status: sol.status,
            objective: sol.objective,
            erm_objective: instance.erm.as_ref().map(|e| e.objective(&sol.x[..e.dim()])),
            gap_bound: sol.gap_bound,
            excess_bound: sol.excess_bound,
            infeasibility: sol.primal_infeas,
            infeasibility_bound: sol.infeas_bound,
            tau: sol.tau,
            iterations: sol.iterations,
            t_final: sol.t_final,
            certificate_error: sol.certificate_error.clone(),
            oracle_objective: None,
            x: sol.x.clone(),
            y: sol.y.clone(),
        }
    }
}
