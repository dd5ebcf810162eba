//! Full-order forward solvers for the benchmark problems, plus the
//! bookkeeping that counts every full-order evaluation.

pub mod darcy;
pub mod heat;
pub mod reaction_diffusion;

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grf::{Field, GrfError, Grid2D, KlBasis, ParamVector};
use crate::linalg::SolveError;
use crate::observe::{bilinear_stencil, interpolate, ObserveError, SensorArray};

pub use darcy::{solve_darcy, DarcyProblem};
pub use heat::{solve_heat_field, solve_heat_loc, HeatFieldProblem, HeatLocProblem};
pub use reaction_diffusion::{solve_reaction_diffusion, ReactionDiffusionProblem, ReactionDiffusionSolver};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PdeError {
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error("non-finite input at index {index}")]
    NonFinite { index: usize },
    #[error("field grid does not match the problem grid")]
    GridMismatch,
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
    #[error("parameter vector has length {got}, expected {expected}")]
    ParamLength { got: usize, expected: usize },
    #[error("{0}")]
    Grf(String),
    #[error("{0}")]
    Observe(String),
}

impl From<GrfError> for PdeError {
    fn from(e: GrfError) -> Self {
        PdeError::Grf(e.to_string())
    }
}

impl From<ObserveError> for PdeError {
    fn from(e: ObserveError) -> Self {
        PdeError::Observe(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProblemId {
    Darcy,
    HeatLoc,
    HeatField,
    ReactionDiffusion,
}

impl ProblemId {
    pub const ALL: [ProblemId; 4] = [
        ProblemId::Darcy,
        ProblemId::HeatLoc,
        ProblemId::HeatField,
        ProblemId::ReactionDiffusion,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ProblemId::Darcy => "darcy",
            ProblemId::HeatLoc => "heat-loc",
            ProblemId::HeatField => "heat-field",
            ProblemId::ReactionDiffusion => "reaction-diffusion",
        }
    }
}

impl fmt::Display for ProblemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ProblemId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| format!("unknown problem {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalCategory {
    /// Prior samples for offline surrogate training.
    Offline,
    /// Sigma-point evaluations of a full-order UKI run.
    Inversion,
    /// Full-order misfits along a surrogate trajectory.
    AnchorScan,
    /// Greedily selected refinement samples.
    AdaptiveSample,
    /// Instrumentation only (model error, per-iterate misfits).
    Diagnostic,
    /// Ground-truth data generation.
    Truth,
}

impl EvalCategory {
    pub const ALL: [EvalCategory; 6] = [
        EvalCategory::Offline,
        EvalCategory::Inversion,
        EvalCategory::AnchorScan,
        EvalCategory::AdaptiveSample,
        EvalCategory::Diagnostic,
        EvalCategory::Truth,
    ];

    fn slot(self) -> usize {
        self as usize
    }
}

/// Thread-safe counter of full-order solves, one bucket per category plus
/// an independent grand total.
#[derive(Debug, Default)]
pub struct EvalLedger {
    counts: [AtomicU64; 6],
    total: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerCounts {
    pub offline: u64,
    pub inversion: u64,
    pub anchor_scan: u64,
    pub adaptive_sample: u64,
    pub diagnostic: u64,
    pub truth: u64,
    pub total: u64,
}

impl LedgerCounts {
    pub fn category_sum(&self) -> u64 {
        self.offline + self.inversion + self.anchor_scan + self.adaptive_sample + self.diagnostic + self.truth
    }

    /// Online full-order cost of an inversion, the quantity compared in
    /// speed-up accounting.
    pub fn online(&self) -> u64 {
        self.inversion + self.anchor_scan + self.adaptive_sample
    }

    pub fn get(&self, cat: EvalCategory) -> u64 {
        match cat {
            EvalCategory::Offline => self.offline,
            EvalCategory::Inversion => self.inversion,
            EvalCategory::AnchorScan => self.anchor_scan,
            EvalCategory::AdaptiveSample => self.adaptive_sample,
            EvalCategory::Diagnostic => self.diagnostic,
            EvalCategory::Truth => self.truth,
        }
    }

    pub fn plus(&self, other: &LedgerCounts) -> LedgerCounts {
        LedgerCounts {
            offline: self.offline + other.offline,
            inversion: self.inversion + other.inversion,
            anchor_scan: self.anchor_scan + other.anchor_scan,
            adaptive_sample: self.adaptive_sample + other.adaptive_sample,
            diagnostic: self.diagnostic + other.diagnostic,
            truth: self.truth + other.truth,
            total: self.total + other.total,
        }
    }

    pub fn since(&self, earlier: &LedgerCounts) -> LedgerCounts {
        LedgerCounts {
            offline: self.offline - earlier.offline,
            inversion: self.inversion - earlier.inversion,
            anchor_scan: self.anchor_scan - earlier.anchor_scan,
            adaptive_sample: self.adaptive_sample - earlier.adaptive_sample,
            diagnostic: self.diagnostic - earlier.diagnostic,
            truth: self.truth - earlier.truth,
            total: self.total - earlier.total,
        }
    }
}

impl EvalLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, cat: EvalCategory) {
        self.counts[cat.slot()].fetch_add(1, Ordering::SeqCst);
        self.total.fetch_add(1, Ordering::SeqCst);
    }

    pub fn count(&self, cat: EvalCategory) -> u64 {
        self.counts[cat.slot()].load(Ordering::SeqCst)
    }

    pub fn total(&self) -> u64 {
        self.total.load(Ordering::SeqCst)
    }

    pub fn snapshot(&self) -> LedgerCounts {
        LedgerCounts {
            offline: self.count(EvalCategory::Offline),
            inversion: self.count(EvalCategory::Inversion),
            anchor_scan: self.count(EvalCategory::AnchorScan),
            adaptive_sample: self.count(EvalCategory::AdaptiveSample),
            diagnostic: self.count(EvalCategory::Diagnostic),
            truth: self.count(EvalCategory::Truth),
            total: self.total(),
        }
    }
}

/// A parameter-to-state map `F` together with its observation operator `O`.
/// The state is a flat vector (snapshots concatenated for time-resolved
/// problems); parameters are whatever the inversion iterates on.
pub trait ForwardModel: Send + Sync {
    fn n_params(&self) -> usize;

    fn n_obs(&self) -> usize;

    fn solve(&self, params: &[f64]) -> Result<Vec<f64>, PdeError>;

    fn observe(&self, state: &[f64]) -> Result<Vec<f64>, PdeError>;
}

/// One full-order solve and its observations.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub state: Vec<f64>,
    pub obs: Vec<f64>,
}

/// A forward model wrapped with an evaluation ledger. Every call goes
/// through here, so the ledger total is the number of full-order solves.
pub struct FullOrder {
    model: Arc<dyn ForwardModel>,
    ledger: Arc<EvalLedger>,
}

impl FullOrder {
    pub fn new(model: Arc<dyn ForwardModel>) -> Self {
        Self {
            model,
            ledger: Arc::new(EvalLedger::new()),
        }
    }

    pub fn with_ledger(model: Arc<dyn ForwardModel>, ledger: Arc<EvalLedger>) -> Self {
        Self { model, ledger }
    }

    pub fn model(&self) -> &Arc<dyn ForwardModel> {
        &self.model
    }

    pub fn ledger(&self) -> &Arc<EvalLedger> {
        &self.ledger
    }

    pub fn n_params(&self) -> usize {
        self.model.n_params()
    }

    pub fn evaluate(&self, params: &[f64], cat: EvalCategory) -> Result<Evaluation, PdeError> {
        self.ledger.record(cat);
        let state = self.model.solve(params)?;
        let obs = self.model.observe(&state)?;
        Ok(Evaluation { state, obs })
    }

    /// `G = O ∘ F`.
    pub fn forward(&self, params: &[f64], cat: EvalCategory) -> Result<Vec<f64>, PdeError> {
        Ok(self.evaluate(params, cat)?.obs)
    }
}

/// The four benchmark PDEs.
#[derive(Debug, Clone, PartialEq)]
pub enum Benchmark {
    Darcy(DarcyProblem),
    HeatLoc(HeatLocProblem),
    HeatField(HeatFieldProblem),
    ReactionDiffusion(ReactionDiffusionProblem),
}

impl Benchmark {
    pub fn default_for(id: ProblemId, grid: Grid2D) -> Self {
        match id {
            ProblemId::Darcy => Benchmark::Darcy(DarcyProblem::new(grid)),
            ProblemId::HeatLoc => Benchmark::HeatLoc(HeatLocProblem::new(grid)),
            ProblemId::HeatField => Benchmark::HeatField(HeatFieldProblem::new(grid)),
            ProblemId::ReactionDiffusion => {
                Benchmark::ReactionDiffusion(ReactionDiffusionProblem::new(grid))
            }
        }
    }

    pub fn id(&self) -> ProblemId {
        match self {
            Benchmark::Darcy(_) => ProblemId::Darcy,
            Benchmark::HeatLoc(_) => ProblemId::HeatLoc,
            Benchmark::HeatField(_) => ProblemId::HeatField,
            Benchmark::ReactionDiffusion(_) => ProblemId::ReactionDiffusion,
        }
    }

    pub fn grid(&self) -> Grid2D {
        match self {
            Benchmark::Darcy(p) => p.grid(),
            Benchmark::HeatLoc(p) => p.grid,
            Benchmark::HeatField(p) => p.grid,
            Benchmark::ReactionDiffusion(p) => p.grid,
        }
    }

    /// Snapshot times of the state (empty for a single final/steady field).
    pub fn snapshot_times(&self) -> Vec<f64> {
        match self {
            Benchmark::HeatLoc(p) => p.obs_times.clone(),
            _ => Vec::new(),
        }
    }

    pub fn n_snapshots(&self) -> usize {
        self.snapshot_times().len().max(1)
    }

    /// Solves for a parameter field (all problems except the source
    /// location problem, which takes a point).
    pub fn solve_field(&self, m: &Field) -> Result<Field, PdeError> {
        match self {
            Benchmark::Darcy(p) => solve_darcy(p, m),
            Benchmark::HeatField(p) => solve_heat_field(p, m),
            Benchmark::ReactionDiffusion(p) => solve_reaction_diffusion(p, m),
            Benchmark::HeatLoc(_) => Err(PdeError::InvalidConfig(
                "the source-location problem is parameterized by a point, not a field".into(),
            )),
        }
    }
}

/// `F(ζ)`: KL coefficients → parameter field → state. Counts one evaluation.
pub fn forward_map(
    problem: &Benchmark,
    basis: &KlBasis,
    zeta: &ParamVector,
    ledger: &EvalLedger,
) -> Result<Field, PdeError> {
    ledger.record(EvalCategory::Inversion);
    let m = basis.sample_field(zeta.as_slice())?;
    problem.solve_field(&m)
}

/// How inversion parameters become PDE inputs.
#[derive(Debug, Clone)]
pub enum Parameterization {
    /// Leading `n` KL coefficients of a Gaussian random field.
    Kl { basis: Arc<KlBasis>, n: usize },
    /// A point in the plane (source location).
    Location,
}

/// A benchmark PDE with a parameterization and a sensor array.
pub struct BenchmarkModel {
    problem: Benchmark,
    param: Parameterization,
    sensors: SensorArray,
    rd_solver: Option<ReactionDiffusionSolver>,
}

impl BenchmarkModel {
    pub fn new(problem: Benchmark, param: Parameterization, sensors: SensorArray) -> Result<Self, PdeError> {
        match (&problem, &param) {
            (Benchmark::HeatLoc(_), Parameterization::Kl { .. }) => {
                return Err(PdeError::InvalidConfig("heat-loc needs a location parameterization".into()))
            }
            (Benchmark::HeatLoc(_), Parameterization::Location) => {}
            (_, Parameterization::Location) => {
                return Err(PdeError::InvalidConfig("field problems need a KL parameterization".into()))
            }
            (_, Parameterization::Kl { basis, n }) => {
                if basis.grid() != problem.grid() {
                    return Err(PdeError::GridMismatch);
                }
                if *n > basis.len() {
                    return Err(PdeError::ParamLength {
                        got: *n,
                        expected: basis.len(),
                    });
                }
            }
        }
        let rd_solver = match &problem {
            Benchmark::ReactionDiffusion(p) => Some(ReactionDiffusionSolver::new(p.clone())?),
            _ => None,
        };
        Ok(Self {
            problem,
            param,
            sensors,
            rd_solver,
        })
    }

    pub fn problem(&self) -> &Benchmark {
        &self.problem
    }

    pub fn parameterization(&self) -> &Parameterization {
        &self.param
    }

    pub fn sensors(&self) -> &SensorArray {
        &self.sensors
    }

    /// Parameter field on the grid (KL problems only).
    pub fn parameter_field(&self, params: &[f64]) -> Result<Field, PdeError> {
        match &self.param {
            Parameterization::Kl { basis, .. } => Ok(basis.sample_field(params)?),
            Parameterization::Location => Err(PdeError::InvalidConfig(
                "location parameters have no field representation".into(),
            )),
        }
    }

    /// Coordinates of the state entries: `[x, y]` or `[x, y, t]` per entry.
    pub fn state_points(&self) -> Vec<Vec<f64>> {
        let pts = self.problem.grid().points();
        let times = self.problem.snapshot_times();
        if times.is_empty() {
            pts.into_iter().map(|p| p.to_vec()).collect()
        } else {
            times
                .iter()
                .flat_map(|&t| pts.iter().map(move |p| vec![p[0], p[1], t]))
                .collect()
        }
    }

    /// The observation operator as a matrix on the state entries it reads:
    /// returns those entries (indices into [`Self::state_points`], ascending)
    /// and the `N_y × n` weight matrix, so that `obs = W · state[idx]`.
    pub fn observation_stencil(&self) -> (Vec<usize>, nalgebra::DMatrix<f64>) {
        let grid = self.problem.grid();
        let mut rows: Vec<Vec<(usize, f64)>> = Vec::with_capacity(self.n_obs());
        for snap in 0..self.problem.n_snapshots() {
            for &[x, y] in &self.sensors.locations {
                let st = bilinear_stencil(grid, x, y).expect("sensors are validated on construction");
                rows.push(st.iter().map(|(k, w)| (snap * grid.len() + k, *w)).collect());
            }
        }
        let mut idx: Vec<usize> = rows.iter().flatten().map(|(k, _)| *k).collect();
        idx.sort_unstable();
        idx.dedup();
        let mut w = nalgebra::DMatrix::zeros(rows.len(), idx.len());
        for (r, row) in rows.iter().enumerate() {
            for (k, v) in row {
                let c = idx.binary_search(k).expect("collected above");
                w[(r, c)] += v;
            }
        }
        (idx, w)
    }

    /// Coordinates of the observations, in observation order.
    pub fn observation_points(&self) -> Vec<Vec<f64>> {
        let times = self.problem.snapshot_times();
        if times.is_empty() {
            self.sensors.locations.iter().map(|p| p.to_vec()).collect()
        } else {
            times
                .iter()
                .flat_map(|&t| self.sensors.locations.iter().map(move |p| vec![p[0], p[1], t]))
                .collect()
        }
    }
}

impl ForwardModel for BenchmarkModel {
    fn n_params(&self) -> usize {
        match &self.param {
            Parameterization::Kl { n, .. } => *n,
            Parameterization::Location => 2,
        }
    }

    fn n_obs(&self) -> usize {
        self.sensors.len() * self.problem.n_snapshots()
    }

    fn solve(&self, params: &[f64]) -> Result<Vec<f64>, PdeError> {
        if params.len() != self.n_params() {
            return Err(PdeError::ParamLength {
                got: params.len(),
                expected: self.n_params(),
            });
        }
        if let Some(k) = params.iter().position(|v| !v.is_finite()) {
            return Err(PdeError::NonFinite { index: k });
        }
        match &self.problem {
            Benchmark::HeatLoc(p) => {
                let snaps = solve_heat_loc(p, [params[0], params[1]])?;
                Ok(snaps.into_iter().flat_map(Field::into_values).collect())
            }
            Benchmark::ReactionDiffusion(_) => {
                let m = self.parameter_field(params)?;
                let solver = self.rd_solver.as_ref().expect("built with the model");
                Ok(solver.solve(&m)?.into_values())
            }
            other => {
                let m = self.parameter_field(params)?;
                Ok(other.solve_field(&m)?.into_values())
            }
        }
    }

    fn observe(&self, state: &[f64]) -> Result<Vec<f64>, PdeError> {
        let grid = self.problem.grid();
        let snaps = self.problem.n_snapshots();
        if state.len() != grid.len() * snaps {
            return Err(PdeError::ParamLength {
                got: state.len(),
                expected: grid.len() * snaps,
            });
        }
        let mut out = Vec::with_capacity(self.n_obs());
        for chunk in state.chunks(grid.len()) {
            let f = Field::new(grid, chunk.to_vec())?;
            for &[x, y] in &self.sensors.locations {
                out.push(interpolate(&f, x, y)?);
            }
        }
        Ok(out)
    }
}

/// `G(m) = A m`, with the state equal to the observation.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearForward {
    pub a: nalgebra::DMatrix<f64>,
}

impl ForwardModel for LinearForward {
    fn n_params(&self) -> usize {
        self.a.ncols()
    }

    fn n_obs(&self) -> usize {
        self.a.nrows()
    }

    fn solve(&self, params: &[f64]) -> Result<Vec<f64>, PdeError> {
        if params.len() != self.a.ncols() {
            return Err(PdeError::ParamLength {
                got: params.len(),
                expected: self.a.ncols(),
            });
        }
        Ok((&self.a * nalgebra::DVector::from_column_slice(params)).as_slice().to_vec())
    }

    fn observe(&self, state: &[f64]) -> Result<Vec<f64>, PdeError> {
        Ok(state.to_vec())
    }
}
