//! Branch/trunk operator network `F_θ = R ∘ A ∘ E`.
//!
//! The branch net maps encoded inputs to coefficients `β`, the trunk net maps
//! query coordinates to basis values `t`, and the reconstruction is
//! `baseline(x) + shift + scale · (Σ β_i t_i + b₀)`. Input, query and output
//! normalization (including the optional baseline field) are fixed when the
//! offline fit starts and never trained.

pub mod checkpoint;
pub mod train;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grf::{Field, Grid2D, KlBasis};
use crate::observe::interpolate;

pub use checkpoint::{load_checkpoint, save_checkpoint, write_loss_csv};
pub use train::{fine_tune, train, StepSchedule, TrainConfig, TrainReport};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid architecture: {0}")]
    Arch(String),
    #[error("width mismatch: {what} has width {got}, expected {expected}")]
    Width {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("training set is empty")]
    EmptySet,
    #[error("non-finite loss at iteration {iter}")]
    NonFiniteLoss { iter: usize },
    #[error("weight vector has length {got}, expected {expected}")]
    WeightCount { got: usize, expected: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetArch {
    /// Widths from the encoder output to `p`, inclusive.
    pub branch_layers: Vec<usize>,
    /// Widths from the query dimension to `p`, inclusive.
    pub trunk_layers: Vec<usize>,
}

impl NetArch {
    /// `depth` hidden layers of `width` neurons in both nets.
    pub fn uniform(n_in: usize, query_dim: usize, width: usize, depth: usize, p: usize) -> Self {
        let hidden = std::iter::repeat(width).take(depth);
        Self {
            branch_layers: std::iter::once(n_in).chain(hidden.clone()).chain([p]).collect(),
            trunk_layers: std::iter::once(query_dim).chain(hidden).chain([p]).collect(),
        }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if self.branch_layers.len() < 2 || self.trunk_layers.len() < 2 {
            return Err(NetError::Arch("each net needs an input and an output layer".into()));
        }
        if self.branch_layers.iter().chain(&self.trunk_layers).any(|w| *w == 0) {
            return Err(NetError::Arch("zero-width layer".into()));
        }
        if self.branch_layers.last() != self.trunk_layers.last() {
            return Err(NetError::Arch("branch and trunk outputs differ in width".into()));
        }
        Ok(())
    }

    pub fn p(&self) -> usize {
        *self.branch_layers.last().expect("validated")
    }

    pub fn n_in(&self) -> usize {
        self.branch_layers[0]
    }

    pub fn query_dim(&self) -> usize {
        self.trunk_layers[0]
    }

    pub fn n_weights(&self) -> usize {
        let count = |l: &[usize]| l.windows(2).map(|w| w[0] * w[1] + w[1]).sum::<usize>();
        count(&self.branch_layers) + count(&self.trunk_layers) + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Slot {
    w: usize,
    b: usize,
    fan_in: usize,
    fan_out: usize,
}

fn slots(layers: &[usize], start: usize) -> (Vec<Slot>, usize) {
    let mut off = start;
    let mut out = Vec::with_capacity(layers.len() - 1);
    for w in layers.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        out.push(Slot {
            w: off,
            b: off + fan_in * fan_out,
            fan_in,
            fan_out,
        });
        off += fan_in * fan_out + fan_out;
    }
    (out, off)
}

/// Affine maps applied around the network. Identity by default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub input_shift: Vec<f64>,
    pub input_scale: Vec<f64>,
    pub query_shift: Vec<f64>,
    pub query_scale: Vec<f64>,
    pub output_shift: f64,
    pub output_scale: f64,
    #[serde(default)]
    pub baseline: Option<Baseline>,
}

/// A fixed state field added to the network output, one grid field per
/// snapshot time, read off by bilinear interpolation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub times: Vec<f64>,
    pub fields: Vec<Field>,
}

impl Baseline {
    /// Node-wise mean of the training targets, whose query points must be
    /// the grid nodes (repeated per snapshot).
    pub fn mean_state(set: &TrainingSet, grid: Grid2D, times: Vec<f64>) -> Result<Self, NetError> {
        let snaps = times.len().max(1);
        if set.query_points.len() != grid.len() * snaps {
            return Err(NetError::Width {
                what: "baseline query points",
                got: set.query_points.len(),
                expected: grid.len() * snaps,
            });
        }
        if set.entries.is_empty() {
            return Err(NetError::EmptySet);
        }
        let n = set.entries.len() as f64;
        let mut mean = vec![0.0; set.query_points.len()];
        for e in &set.entries {
            for (m, t) in mean.iter_mut().zip(&e.target) {
                *m += t / n;
            }
        }
        let fields = mean
            .chunks(grid.len())
            .map(|c| Field::new(grid, c.to_vec()).expect("chunk matches grid"))
            .collect();
        Ok(Self { times, fields })
    }

    pub fn at(&self, q: &[f64]) -> f64 {
        let k = if self.times.is_empty() || q.len() < 3 {
            0
        } else {
            (0..self.times.len())
                .min_by(|&a, &b| (self.times[a] - q[2]).abs().total_cmp(&(self.times[b] - q[2]).abs()))
                .unwrap_or(0)
        };
        interpolate(&self.fields[k], q[0].clamp(0.0, 1.0), q[1].clamp(0.0, 1.0)).expect("clamped into the domain")
    }
}

fn safe_scale(s: f64) -> f64 {
    if s > 1e-12 && s.is_finite() {
        s
    } else {
        1.0
    }
}

impl Normalization {
    pub fn identity(n_in: usize, query_dim: usize) -> Self {
        Self {
            input_shift: vec![0.0; n_in],
            input_scale: vec![1.0; n_in],
            query_shift: vec![0.0; query_dim],
            query_scale: vec![1.0; query_dim],
            output_shift: 0.0,
            output_scale: 1.0,
            baseline: None,
        }
    }

    /// As [`Normalization::fit`], with output statistics taken over the
    /// targets minus the baseline.
    pub fn fit_with_baseline(set: &TrainingSet, baseline: Baseline) -> Result<Self, NetError> {
        let base: Vec<f64> = set.query_points.iter().map(|q| baseline.at(q)).collect();
        let mut residual = set.clone();
        for e in &mut residual.entries {
            for (t, b) in e.target.iter_mut().zip(&base) {
                *t -= b;
            }
        }
        let mut norm = Self::fit(&residual)?;
        norm.baseline = Some(baseline);
        Ok(norm)
    }

    /// Standardizes inputs and outputs, and maps each query coordinate's
    /// range onto `[−1, 1]`.
    pub fn fit(set: &TrainingSet) -> Result<Self, NetError> {
        let first = set.entries.first().ok_or(NetError::EmptySet)?;
        let n_in = first.input.len();
        let n = set.entries.len() as f64;
        let mut shift = vec![0.0; n_in];
        for e in &set.entries {
            for (s, v) in shift.iter_mut().zip(&e.input) {
                *s += v / n;
            }
        }
        let mut var = vec![0.0; n_in];
        for e in &set.entries {
            for ((s, m), v) in var.iter_mut().zip(&shift).zip(&e.input) {
                *s += (v - m).powi(2) / n;
            }
        }
        let qd = set.query_points.first().map_or(0, Vec::len);
        let mut lo = vec![f64::INFINITY; qd];
        let mut hi = vec![f64::NEG_INFINITY; qd];
        for q in &set.query_points {
            for k in 0..qd {
                lo[k] = lo[k].min(q[k]);
                hi[k] = hi[k].max(q[k]);
            }
        }
        let count = set.entries.len() * set.query_points.len();
        let mean = set.entries.iter().flat_map(|e| &e.target).sum::<f64>() / count as f64;
        let ovar = set.entries.iter().flat_map(|e| &e.target).map(|t| (t - mean).powi(2)).sum::<f64>() / count as f64;
        Ok(Self {
            input_shift: shift,
            input_scale: var.into_iter().map(|v| safe_scale(v.sqrt())).collect(),
            query_shift: lo.iter().zip(&hi).map(|(a, b)| 0.5 * (a + b)).collect(),
            query_scale: lo.iter().zip(&hi).map(|(a, b)| safe_scale(0.5 * (b - a))).collect(),
            output_shift: mean,
            output_scale: safe_scale(ovar.sqrt()),
            baseline: None,
        })
    }
}

/// How a parameter field becomes the branch input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Encoder {
    /// Pointwise readout at grid nodes.
    Nodes { nx: usize, ny: usize, indices: Vec<usize> },
    /// The parameter vector is fed to the branch as is.
    Direct { dim: usize },
}

impl Encoder {
    /// `s×s` nodes spread evenly over the grid (all nodes if `s` exceeds
    /// the grid size).
    pub fn subsampled(grid: Grid2D, s: usize) -> Self {
        let pick = |n: usize| -> Vec<usize> {
            if s >= n || s < 2 {
                return (0..n).collect();
            }
            (0..s)
                .map(|k| ((k * (n - 1)) as f64 / (s - 1) as f64).round() as usize)
                .collect()
        };
        let (ix, iy) = (pick(grid.nx()), pick(grid.ny()));
        let indices = iy
            .iter()
            .flat_map(|&j| ix.iter().map(move |&i| grid.index(i, j)))
            .collect();
        Encoder::Nodes {
            nx: grid.nx(),
            ny: grid.ny(),
            indices,
        }
    }

    pub fn all_nodes(grid: Grid2D) -> Self {
        Encoder::Nodes {
            nx: grid.nx(),
            ny: grid.ny(),
            indices: (0..grid.len()).collect(),
        }
    }

    pub fn width(&self) -> usize {
        match self {
            Encoder::Nodes { indices, .. } => indices.len(),
            Encoder::Direct { dim } => *dim,
        }
    }
}

/// `E(m)`: field values at the encoder nodes.
pub fn encode(m: &Field, encoder: &Encoder) -> Result<Vec<f64>, NetError> {
    match encoder {
        Encoder::Nodes { nx, ny, indices } => {
            let g = m.grid();
            if g.nx() != *nx || g.ny() != *ny {
                return Err(NetError::Width {
                    what: "encoded field",
                    got: g.len(),
                    expected: nx * ny,
                });
            }
            Ok(indices.iter().map(|&k| m.values()[k]).collect())
        }
        Encoder::Direct { dim } => {
            if m.values().len() != *dim {
                return Err(NetError::Width {
                    what: "direct input",
                    got: m.values().len(),
                    expected: *dim,
                });
            }
            Ok(m.values().to_vec())
        }
    }
}

/// Linear map from KL coefficients straight to encoder readings.
pub fn encoder_matrix(basis: &KlBasis, n_modes: usize, encoder: &Encoder) -> Result<DMatrix<f64>, NetError> {
    let Encoder::Nodes { indices, .. } = encoder else {
        return Err(NetError::Arch("direct encoders have no field representation".into()));
    };
    if basis.grid().len() != encoder_grid_len(encoder) {
        return Err(NetError::Width {
            what: "basis grid",
            got: basis.grid().len(),
            expected: encoder_grid_len(encoder),
        });
    }
    let modes = &basis.modes()[..n_modes.min(basis.len())];
    Ok(DMatrix::from_fn(indices.len(), modes.len(), |r, c| {
        modes[c].eigenvalue.sqrt() * modes[c].values[indices[r]]
    }))
}

fn encoder_grid_len(e: &Encoder) -> usize {
    match e {
        Encoder::Nodes { nx, ny, .. } => nx * ny,
        Encoder::Direct { dim } => *dim,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SampleTag {
    Prior,
    Adaptive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingEntry {
    /// Inversion parameters (KL coefficients or a location).
    pub params: Vec<f64>,
    /// Encoded branch input.
    pub input: Vec<f64>,
    /// Full-order state at the shared query points.
    pub target: Vec<f64>,
    pub tag: SampleTag,
}

/// Samples with targets evaluated at one shared set of query points.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingSet {
    pub query_points: Vec<Vec<f64>>,
    pub entries: Vec<TrainingEntry>,
}

impl TrainingSet {
    pub fn new(query_points: Vec<Vec<f64>>) -> Self {
        Self {
            query_points,
            entries: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn push(&mut self, entry: TrainingEntry) -> Result<(), NetError> {
        if entry.target.len() != self.query_points.len() {
            return Err(NetError::Width {
                what: "training target",
                got: entry.target.len(),
                expected: self.query_points.len(),
            });
        }
        if let Some(first) = self.entries.first() {
            if first.input.len() != entry.input.len() {
                return Err(NetError::Width {
                    what: "training input",
                    got: entry.input.len(),
                    expected: first.input.len(),
                });
            }
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn count(&self, tag: SampleTag) -> usize {
        self.entries.iter().filter(|e| e.tag == tag).count()
    }

    fn inputs(&self, rows: &[usize]) -> DMatrix<f64> {
        let w = self.entries[0].input.len();
        DMatrix::from_fn(rows.len(), w, |r, c| self.entries[rows[r]].input[c])
    }

    fn targets(&self, rows: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(rows.len(), self.query_points.len(), |r, c| self.entries[rows[r]].target[c])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: u64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Surrogate {
    pub arch: NetArch,
    pub weights: Vec<f64>,
    pub norm: Normalization,
    pub encoder: Encoder,
    pub seed: u64,
    /// Optimizer steps taken over the surrogate's lifetime.
    pub iterations: u64,
    pub train_log: Vec<LossRecord>,
    branch: Vec<Slot>,
    trunk: Vec<Slot>,
}

/// Activations of one net, input first, output last.
type Trace = Vec<DMatrix<f64>>;

fn mlp(weights: &[f64], layers: &[Slot], x: DMatrix<f64>) -> Trace {
    let mut acts = Vec::with_capacity(layers.len() + 1);
    acts.push(x);
    for (k, s) in layers.iter().enumerate() {
        let wt = DMatrix::from_column_slice(s.fan_in, s.fan_out, &weights[s.w..s.w + s.fan_in * s.fan_out]);
        let mut z = acts.last().expect("non-empty") * wt;
        for (o, mut col) in z.column_iter_mut().enumerate() {
            col.add_scalar_mut(weights[s.b + o]);
        }
        if k + 1 < layers.len() {
            z.apply(|v| *v = v.tanh());
        }
        acts.push(z);
    }
    acts
}

/// Accumulates parameter gradients given `∂L/∂(output)`.
fn mlp_backward(weights: &[f64], layers: &[Slot], acts: &Trace, mut d: DMatrix<f64>, grad: &mut [f64]) {
    for k in (0..layers.len()).rev() {
        let s = layers[k];
        if k + 1 < layers.len() {
            d.zip_apply(&acts[k + 1], |g, a| *g *= 1.0 - a * a);
        }
        let dwt = acts[k].transpose() * &d;
        for (g, v) in grad[s.w..s.w + s.fan_in * s.fan_out].iter_mut().zip(dwt.as_slice()) {
            *g += v;
        }
        for (o, col) in d.column_iter().enumerate() {
            grad[s.b + o] += col.sum();
        }
        if k > 0 {
            let wt = DMatrix::from_column_slice(s.fan_in, s.fan_out, &weights[s.w..s.w + s.fan_in * s.fan_out]);
            d = &d * wt.transpose();
        }
    }
}

impl Surrogate {
    /// Glorot-normal weights, zero biases.
    pub fn new(arch: NetArch, encoder: Encoder, norm: Normalization, seed: u64) -> Result<Self, NetError> {
        arch.validate()?;
        if encoder.width() != arch.n_in() {
            return Err(NetError::Width {
                what: "encoder",
                got: encoder.width(),
                expected: arch.n_in(),
            });
        }
        if norm.input_shift.len() != arch.n_in() || norm.query_shift.len() != arch.query_dim() {
            return Err(NetError::Width {
                what: "normalization",
                got: norm.input_shift.len(),
                expected: arch.n_in(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = vec![0.0; arch.n_weights()];
        let (branch, end) = slots(&arch.branch_layers, 0);
        let (trunk, _) = slots(&arch.trunk_layers, end);
        for s in branch.iter().chain(&trunk) {
            let std = (2.0 / (s.fan_in + s.fan_out) as f64).sqrt();
            let dist = Normal::new(0.0, std).expect("positive std");
            for w in &mut weights[s.w..s.w + s.fan_in * s.fan_out] {
                *w = dist.sample(&mut rng);
            }
        }
        Ok(Self {
            arch,
            weights,
            norm,
            encoder,
            seed,
            iterations: 0,
            train_log: Vec::new(),
            branch,
            trunk,
        })
    }

    /// Rebuilds a surrogate around stored weights.
    pub fn from_parts(
        arch: NetArch,
        weights: Vec<f64>,
        norm: Normalization,
        encoder: Encoder,
        seed: u64,
        iterations: u64,
    ) -> Result<Self, NetError> {
        let mut s = Self::new(arch, encoder, norm, seed)?;
        if weights.len() != s.weights.len() {
            return Err(NetError::WeightCount {
                got: weights.len(),
                expected: s.weights.len(),
            });
        }
        s.weights = weights;
        s.iterations = iterations;
        Ok(s)
    }

    pub fn n_weights(&self) -> usize {
        self.weights.len()
    }

    fn bias0(&self) -> f64 {
        self.weights[self.weights.len() - 1]
    }

    fn normalized_inputs(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = x.clone();
        for (c, mut col) in x.column_iter_mut().enumerate() {
            let (m, s) = (self.norm.input_shift[c], self.norm.input_scale[c]);
            col.apply(|v| *v = (*v - m) / s);
        }
        x
    }

    fn normalized_queries(&self, pts: &[Vec<f64>]) -> Result<DMatrix<f64>, NetError> {
        let d = self.arch.query_dim();
        if let Some(bad) = pts.iter().find(|p| p.len() != d) {
            return Err(NetError::Width {
                what: "query point",
                got: bad.len(),
                expected: d,
            });
        }
        Ok(DMatrix::from_fn(pts.len(), d, |r, c| {
            (pts[r][c] - self.norm.query_shift[c]) / self.norm.query_scale[c]
        }))
    }

    fn check_inputs(&self, x: &DMatrix<f64>) -> Result<(), NetError> {
        if x.ncols() != self.arch.n_in() {
            return Err(NetError::Width {
                what: "encoded input",
                got: x.ncols(),
                expected: self.arch.n_in(),
            });
        }
        Ok(())
    }

    /// `β` for each row of `x` (raw encoder readings), `n × p`.
    pub fn branch_features(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>, NetError> {
        self.check_inputs(x)?;
        Ok(mlp(&self.weights, &self.branch, self.normalized_inputs(x)).pop().expect("output"))
    }

    /// `t` at each query point, `n_q × p`.
    pub fn trunk_features(&self, pts: &[Vec<f64>]) -> Result<DMatrix<f64>, NetError> {
        let q = self.normalized_queries(pts)?;
        Ok(mlp(&self.weights, &self.trunk, q).pop().expect("output"))
    }

    /// Reconstruction `shift + scale (β tᵀ + b₀)`, `n × n_q`, without the
    /// baseline.
    pub fn combine(&self, beta: &DMatrix<f64>, t: &DMatrix<f64>) -> DMatrix<f64> {
        let (b0, shift, scale) = (self.bias0(), self.norm.output_shift, self.norm.output_scale);
        (beta * t.transpose()).map(|u| shift + scale * (u + b0))
    }

    /// Baseline values at the query points (zeros without a baseline).
    pub fn baseline_at(&self, pts: &[Vec<f64>]) -> Vec<f64> {
        match &self.norm.baseline {
            Some(b) => pts.iter().map(|q| b.at(q)).collect(),
            None => vec![0.0; pts.len()],
        }
    }

    /// [`Surrogate::combine`] plus the baseline values `base` per column.
    pub fn reconstruct(&self, beta: &DMatrix<f64>, t: &DMatrix<f64>, base: &[f64]) -> DMatrix<f64> {
        let mut out = self.combine(beta, t);
        if self.norm.baseline.is_some() {
            for (mut col, b) in out.column_iter_mut().zip(base) {
                col.add_scalar_mut(*b);
            }
        }
        out
    }

    pub fn predict(&self, x: &DMatrix<f64>, pts: &[Vec<f64>]) -> Result<DMatrix<f64>, NetError> {
        Ok(self.reconstruct(&self.branch_features(x)?, &self.trunk_features(pts)?, &self.baseline_at(pts)))
    }

    /// Output at `query_pts` for one encoded input.
    pub fn eval(&self, encoded: &[f64], query_pts: &[Vec<f64>]) -> Result<Vec<f64>, NetError> {
        let x = DMatrix::from_row_slice(1, encoded.len(), encoded);
        Ok(self.predict(&x, query_pts)?.row(0).iter().copied().collect())
    }

    fn check_set(&self, set: &TrainingSet) -> Result<(), NetError> {
        let first = set.entries.first().ok_or(NetError::EmptySet)?;
        if first.input.len() != self.arch.n_in() {
            return Err(NetError::Width {
                what: "training input",
                got: first.input.len(),
                expected: self.arch.n_in(),
            });
        }
        Ok(())
    }

    /// Mean squared error over all samples and query points.
    pub fn empirical_loss(&self, set: &TrainingSet) -> Result<f64, NetError> {
        self.check_set(set)?;
        let rows: Vec<usize> = (0..set.len()).collect();
        let pred = self.predict(&set.inputs(&rows), &set.query_points)?;
        let diff = pred - set.targets(&rows);
        Ok(diff.norm_squared() / diff.len() as f64)
    }

    /// Loss over the given rows (all rows if `None`) and its gradient with
    /// respect to every weight.
    pub fn loss_and_gradient(&self, set: &TrainingSet, rows: Option<&[usize]>) -> Result<(f64, Vec<f64>), NetError> {
        self.check_set(set)?;
        let all: Vec<usize>;
        let rows = match rows {
            Some(r) => r,
            None => {
                all = (0..set.len()).collect();
                &all
            }
        };
        let x = self.normalized_inputs(&set.inputs(rows));
        let q = self.normalized_queries(&set.query_points)?;
        let bt = mlp(&self.weights, &self.branch, x);
        let tt = mlp(&self.weights, &self.trunk, q);
        let (beta, t) = (bt.last().expect("output"), tt.last().expect("output"));
        let pred = self.reconstruct(beta, t, &self.baseline_at(&set.query_points));
        let diff = pred - set.targets(rows);
        let count = diff.len() as f64;
        let loss = diff.norm_squared() / count;
        // ∂L/∂û where û is the un-normalized network output
        let g = diff * (2.0 * self.norm.output_scale / count);
        let mut grad = vec![0.0; self.weights.len()];
        let last = grad.len() - 1;
        grad[last] = g.sum();
        mlp_backward(&self.weights, &self.branch, &bt, &g * t, &mut grad);
        mlp_backward(&self.weights, &self.trunk, &tt, g.transpose() * beta, &mut grad);
        Ok((loss, grad))
    }
}

/// How inversion parameters become branch inputs.
#[derive(Debug, Clone)]
pub enum InputMap {
    /// `E(m(ζ)) = A ζ` for a KL parameterization.
    Kl(DMatrix<f64>),
    Direct,
}

impl InputMap {
    pub fn for_basis(basis: &KlBasis, n_modes: usize, encoder: &Encoder) -> Result<Self, NetError> {
        Ok(InputMap::Kl(encoder_matrix(basis, n_modes, encoder)?))
    }

    pub fn apply(&self, params: &[f64]) -> Vec<f64> {
        match self {
            InputMap::Kl(a) => (a * nalgebra::DVector::from_column_slice(params)).as_slice().to_vec(),
            InputMap::Direct => params.to_vec(),
        }
    }
}

/// `Ĝ = O ∘ F_θ`: the surrogate queried at fixed observation points, with
/// trunk features cached. Costs no full-order evaluations.
#[derive(Debug, Clone)]
pub struct SurrogateMap {
    surrogate: Surrogate,
    inputs: InputMap,
    obs_points: Vec<Vec<f64>>,
    trunk_cache: DMatrix<f64>,
    base_cache: Vec<f64>,
    interp: Option<DMatrix<f64>>,
}

impl SurrogateMap {
    pub fn new(surrogate: Surrogate, inputs: InputMap, obs_points: Vec<Vec<f64>>) -> Result<Self, NetError> {
        let trunk_cache = surrogate.trunk_features(&obs_points)?;
        let base_cache = surrogate.baseline_at(&obs_points);
        Ok(Self {
            surrogate,
            inputs,
            obs_points,
            trunk_cache,
            base_cache,
            interp: None,
        })
    }

    /// Queries the surrogate at `points` and maps them to observations with
    /// `weights` (`N_y × points.len()`), mirroring a linear observation operator.
    pub fn with_interpolation(
        surrogate: Surrogate,
        inputs: InputMap,
        points: Vec<Vec<f64>>,
        weights: DMatrix<f64>,
    ) -> Result<Self, NetError> {
        if weights.ncols() != points.len() {
            return Err(NetError::Arch(format!(
                "interpolation has {} columns for {} points",
                weights.ncols(),
                points.len()
            )));
        }
        let mut map = Self::new(surrogate, inputs, points)?;
        map.interp = Some(weights);
        Ok(map)
    }

    pub fn surrogate(&self) -> &Surrogate {
        &self.surrogate
    }

    pub fn input_map(&self) -> &InputMap {
        &self.inputs
    }

    pub fn obs_points(&self) -> &[Vec<f64>] {
        &self.obs_points
    }

    /// Swaps in new weights and refreshes the trunk cache.
    pub fn replace(&mut self, surrogate: Surrogate) -> Result<(), NetError> {
        self.trunk_cache = surrogate.trunk_features(&self.obs_points)?;
        self.base_cache = surrogate.baseline_at(&self.obs_points);
        self.surrogate = surrogate;
        Ok(())
    }

    pub fn encode_params(&self, params: &[f64]) -> Vec<f64> {
        self.inputs.apply(params)
    }

    pub fn forward(&self, params: &[f64]) -> Result<Vec<f64>, NetError> {
        Ok(self.forward_many(&[params.to_vec()])?.remove(0))
    }

    pub fn forward_many(&self, params: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, NetError> {
        if params.is_empty() {
            return Ok(Vec::new());
        }
        let enc: Vec<Vec<f64>> = params.iter().map(|p| self.inputs.apply(p)).collect();
        let x = DMatrix::from_fn(enc.len(), enc[0].len(), |r, c| enc[r][c]);
        let beta = self.surrogate.branch_features(&x)?;
        let mut out = self.surrogate.reconstruct(&beta, &self.trunk_cache, &self.base_cache);
        if let Some(w) = &self.interp {
            out = out * w.transpose();
        }
        Ok(out.row_iter().map(|r| r.iter().copied().collect()).collect())
    }
}

/// `Ĝ(ζ)` for a KL-parameterized problem.
pub fn surrogate_forward_map(
    s: &Surrogate,
    basis: &KlBasis,
    zeta: &[f64],
    sensors_out: &[[f64; 2]],
) -> Result<Vec<f64>, NetError> {
    let m = basis.sample_field(zeta).map_err(|e| NetError::Arch(e.to_string()))?;
    let enc = encode(&m, &s.encoder)?;
    let pts: Vec<Vec<f64>> = sensors_out.iter().map(|p| p.to_vec()).collect();
    s.eval(&enc, &pts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(p: usize) -> Surrogate {
        let arch = NetArch::uniform(2, 2, 3, 1, p);
        Surrogate::new(arch, Encoder::Direct { dim: 2 }, Normalization::identity(2, 2), 7).unwrap()
    }

    /// Sets the last layer of each net so that β ≡ b and t ≡ c.
    fn constant_heads(s: &mut Surrogate, b: f64, c: f64) {
        let (bl, tl) = (*s.branch.last().unwrap(), *s.trunk.last().unwrap());
        for slot in [bl, tl] {
            s.weights[slot.w..slot.b].iter_mut().for_each(|w| *w = 0.0);
        }
        s.weights[bl.b..bl.b + bl.fan_out].iter_mut().for_each(|w| *w = b);
        s.weights[tl.b..tl.b + tl.fan_out].iter_mut().for_each(|w| *w = c);
    }

    fn pts() -> Vec<Vec<f64>> {
        vec![vec![0.1, 0.2], vec![0.5, 0.9], vec![1.0, 0.0]]
    }

    #[test]
    fn hand_set_weights() {
        let mut s = tiny(1);
        constant_heads(&mut s, 2.0, 3.0);
        assert_eq!(s.eval(&[0.3, -1.0], &pts()).unwrap(), vec![6.0; 3]);
        constant_heads(&mut s, 0.0, 3.0);
        assert_eq!(s.eval(&[0.3, -1.0], &pts()).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn multi_point_equals_single_points() {
        let s = tiny(4);
        let all = s.eval(&[0.3, -1.0], &pts()).unwrap();
        for (k, p) in pts().into_iter().enumerate() {
            assert_eq!(s.eval(&[0.3, -1.0], &[p]).unwrap()[0], all[k]);
        }
    }

    #[test]
    fn output_is_linear_in_branch_features() {
        let s = tiny(4);
        let t = s.trunk_features(&pts()).unwrap();
        let b1 = DMatrix::from_row_slice(1, 4, &[0.1, -0.3, 2.0, 0.5]);
        let b2 = DMatrix::from_row_slice(1, 4, &[1.0, 0.0, -1.0, 0.25]);
        let b0 = s.bias0();
        let lhs = s.combine(&(&b1 * 2.0 - &b2), &t).map(|v| v - b0);
        let rhs = s.combine(&b1, &t).map(|v| v - b0) * 2.0 - s.combine(&b2, &t).map(|v| v - b0);
        assert!((lhs - rhs).amax() < 1e-12);
    }

    #[test]
    fn zero_network_against_unit_targets() {
        let mut s = tiny(2);
        s.weights.iter_mut().for_each(|w| *w = 0.0);
        for n in [1, 3] {
            let mut set = TrainingSet::new(pts());
            for k in 0..n {
                set.push(TrainingEntry {
                    params: vec![],
                    input: vec![k as f64, 1.0],
                    target: vec![1.0; 3],
                    tag: SampleTag::Prior,
                })
                .unwrap();
            }
            assert_eq!(s.empirical_loss(&set).unwrap(), 1.0);
        }
        assert!(matches!(s.empirical_loss(&TrainingSet::new(pts())), Err(NetError::EmptySet)));
    }

    #[test]
    fn encoding() {
        let g = Grid2D::square(5).unwrap();
        let c = Field::constant(g, 1.5);
        let e = Encoder::subsampled(g, 3);
        assert_eq!(e.width(), 9);
        assert_eq!(encode(&c, &e).unwrap(), vec![1.5; 9]);
        let f = g.evaluate(|x, y| x + 10.0 * y);
        assert_eq!(encode(&f, &Encoder::all_nodes(g)).unwrap(), f.values().to_vec());
        let Encoder::Nodes { indices, .. } = Encoder::subsampled(g, 3) else { unreachable!() };
        assert_eq!(indices, vec![0, 2, 4, 10, 12, 14, 20, 22, 24]);
    }

    #[test]
    fn encoder_matrix_matches_field_readout() {
        let g = Grid2D::square(9).unwrap();
        let basis = crate::grf::build_kl_basis(g, 6, 3.0, 2.0, 1.0).unwrap();
        let e = Encoder::subsampled(g, 4);
        let a = encoder_matrix(&basis, 6, &e).unwrap();
        let z = [0.3, -1.2, 0.4, 2.0, 0.0, -0.5];
        let direct = encode(&basis.sample_field(&z).unwrap(), &e).unwrap();
        let via = InputMap::Kl(a).apply(&z);
        for (p, q) in direct.iter().zip(&via) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn baseline_is_added_at_interpolated_points() {
        let g = Grid2D::square(3).unwrap();
        let q: Vec<Vec<f64>> = g.points().iter().map(|p| p.to_vec()).collect();
        let mut set = TrainingSet::new(q.clone());
        for k in 0..2 {
            let f = g.evaluate(|x, y| x + 2.0 * y + k as f64);
            set.push(TrainingEntry {
                params: vec![],
                input: vec![k as f64, 0.0],
                target: f.into_values(),
                tag: SampleTag::Prior,
            })
            .unwrap();
        }
        let b = Baseline::mean_state(&set, g, vec![]).unwrap();
        // bilinear interpolation reproduces an affine field exactly
        assert!((b.at(&[0.3, 0.7]) - (0.3 + 1.4 + 0.5)).abs() < 1e-12);
        let norm = Normalization::fit_with_baseline(&set, b.clone()).unwrap();
        assert!(norm.output_shift.abs() < 1e-12);
        assert!((norm.output_scale - 0.5).abs() < 1e-12);
        let mut s = Surrogate::new(NetArch::uniform(2, 2, 3, 1, 2), Encoder::Direct { dim: 2 }, norm, 1).unwrap();
        s.weights.iter_mut().for_each(|w| *w = 0.0);
        let out = s.eval(&[0.0, 0.0], &[vec![0.3, 0.7]]).unwrap();
        assert!((out[0] - b.at(&[0.3, 0.7])).abs() < 1e-12);
        assert!(Baseline::mean_state(&TrainingSet::new(q[..4].to_vec()), g, vec![]).is_err());
    }

    #[test]
    fn weight_count() {
        let a = NetArch::uniform(3, 2, 4, 2, 5);
        assert_eq!(a.branch_layers, vec![3, 4, 4, 5]);
        assert_eq!(a.n_weights(), (12 + 4 + 16 + 4 + 20 + 5) + (8 + 4 + 16 + 4 + 20 + 5) + 1);
        assert!(NetArch {
            branch_layers: vec![3, 4],
            trunk_layers: vec![2, 5]
        }
        .validate()
        .is_err());
    }
}
