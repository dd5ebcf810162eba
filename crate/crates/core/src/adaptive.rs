//! The outer refinement loop: UKI sweeps on the surrogate, anchor selection
//! with the full-order model, greedy adaptive sampling and warm-started
//! fine-tuning. Also the run metrics and records shared by every mode.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::deeponet::{fine_tune, SampleTag, SurrogateMap, TrainConfig, TrainingEntry, TrainingSet};
use crate::grf::{standard_normal_vec, Field};
use crate::observe::{misfit, ObservationData};
use crate::pde::{EvalCategory, ForwardModel, FullOrder, LedgerCounts};
use crate::uki::{run_uki, GaussianState, UkiConfig};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdaptiveError {
    #[error("trajectory is empty")]
    EmptyTrajectory,
    #[error("every full-order misfit along the trajectory is non-finite")]
    NoFiniteMisfit,
    #[error("candidate pool is empty")]
    EmptyPool,
    #[error("cannot select {q} points from a pool of {k}")]
    PoolTooSmall { q: usize, k: usize },
    #[error("reference field is zero")]
    ZeroReference,
    #[error("invalid policy: {0}")]
    Policy(String),
    #[error("{0}")]
    Stage(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    FemUki,
    DeeponetDirect,
    DeeponetAdaptive,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::FemUki => "fem-uki",
            Mode::DeeponetDirect => "deeponet-direct",
            Mode::DeeponetAdaptive => "deeponet-adaptive",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [Mode::FemUki, Mode::DeeponetDirect, Mode::DeeponetAdaptive]
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown mode {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinePolicy {
    pub epsilon: f64,
    pub i_max: usize,
    /// UKI steps per cycle.
    pub t: usize,
    pub q: usize,
    pub k: usize,
    pub lambda: f64,
    /// Samples for the local model error diagnostic; 0 disables it.
    pub m_diag: usize,
}

impl Default for RefinePolicy {
    fn default() -> Self {
        Self {
            epsilon: 0.01,
            i_max: 10,
            t: 10,
            q: 50,
            k: 2000,
            lambda: 1.0,
            m_diag: 0,
        }
    }
}

impl RefinePolicy {
    pub fn validate(&self) -> Result<(), AdaptiveError> {
        if !(self.epsilon > 0.0) || !(self.lambda >= 0.0) {
            return Err(AdaptiveError::Policy("epsilon must be positive and lambda non-negative".into()));
        }
        if self.i_max == 0 || self.t == 0 || self.q == 0 || self.k == 0 {
            return Err(AdaptiveError::Policy("I_max, T, Q and K must be positive".into()));
        }
        if self.q > self.k {
            return Err(AdaptiveError::PoolTooSmall { q: self.q, k: self.k });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorRecord {
    pub r: Vec<f64>,
    pub c: DMatrix<f64>,
    pub e: f64,
    /// 1-based position along the trajectory.
    pub step: usize,
    /// Full-order misfit at every trajectory mean.
    pub misfits: Vec<f64>,
}

/// Index of the smallest finite value, ties to the smallest index.
pub fn argmin_first(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (k, v) in values.iter().enumerate() {
        if v.is_finite() && best.is_none_or(|b| *v < values[b]) {
            best = Some(k);
        }
    }
    best
}

/// Full-order misfit at every mean of the trajectory, counted as anchor
/// scans; returns the minimizer.
pub fn select_anchor(
    traj: &[GaussianState],
    full: &FullOrder,
    data: &ObservationData,
) -> Result<AnchorRecord, AdaptiveError> {
    select_anchor_as(traj, full, data, EvalCategory::AnchorScan)
}

fn select_anchor_as(
    traj: &[GaussianState],
    full: &FullOrder,
    data: &ObservationData,
    cat: EvalCategory,
) -> Result<AnchorRecord, AdaptiveError> {
    if traj.is_empty() {
        return Err(AdaptiveError::EmptyTrajectory);
    }
    let misfits = full_misfits(traj.iter().map(|s| s.r.as_slice().to_vec()).collect(), full, data, cat);
    let j = argmin_first(&misfits).ok_or(AdaptiveError::NoFiniteMisfit)?;
    Ok(AnchorRecord {
        r: traj[j].r.as_slice().to_vec(),
        c: traj[j].c.clone(),
        e: misfits[j],
        step: j + 1,
        misfits,
    })
}

/// Non-finite where the solve fails.
fn full_misfits(points: Vec<Vec<f64>>, full: &FullOrder, data: &ObservationData, cat: EvalCategory) -> Vec<f64> {
    points
        .par_iter()
        .map(|p| {
            full.forward(p, cat)
                .ok()
                .and_then(|g| misfit(&g, data).ok())
                .unwrap_or(f64::NAN)
        })
        .collect()
}

/// `|(e_prev − e_next) / e_next| > ε`; a perfect fit never refines.
pub fn should_refine(e_prev: f64, e_next: f64, epsilon: f64) -> bool {
    if e_next == 0.0 {
        return false;
    }
    ((e_prev - e_next) / e_next).abs() > epsilon
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Greedy selection on precomputed surrogate outputs. Returns pool indices
/// in selection order.
pub fn greedy_select_cached(
    pool: &[Vec<f64>],
    outputs: &[Vec<f64>],
    anchor: &[f64],
    q: usize,
    lambda: f64,
) -> Result<Vec<usize>, AdaptiveError> {
    if pool.is_empty() {
        return Err(AdaptiveError::EmptyPool);
    }
    if q > pool.len() {
        return Err(AdaptiveError::PoolTooSmall { q, k: pool.len() });
    }
    let prox: Vec<f64> = pool.iter().map(|m| lambda * dist(m, anchor)).collect();
    // d(Ĝ(m), selected) as a running maximum; zero for the empty set
    let mut d = vec![0.0; pool.len()];
    let mut taken = vec![false; pool.len()];
    let mut picked = Vec::with_capacity(q);
    for _ in 0..q {
        let mut best: Option<(usize, f64)> = None;
        for i in 0..pool.len() {
            if taken[i] {
                continue;
            }
            let score = d[i] - prox[i];
            if best.is_none_or(|(_, s)| score > s) {
                best = Some((i, score));
            }
        }
        let (j, _) = best.expect("pool has unselected points");
        taken[j] = true;
        picked.push(j);
        for i in 0..pool.len() {
            if !taken[i] {
                d[i] = d[i].max(dist(&outputs[i], &outputs[j]));
            }
        }
    }
    Ok(picked)
}

pub fn greedy_select<F>(pool: &[Vec<f64>], surrogate: F, anchor: &[f64], q: usize, lambda: f64) -> Result<Vec<usize>, AdaptiveError>
where
    F: Fn(&[Vec<f64>]) -> Result<Vec<Vec<f64>>, String>,
{
    let outputs = surrogate(pool).map_err(AdaptiveError::Stage)?;
    greedy_select_cached(pool, &outputs, anchor, q, lambda)
}

/// `(1/M) Σ ‖Ĝ(m_i) − G(m_i)‖₂`.
pub fn local_model_error(surrogate: &[Vec<f64>], full: &[Vec<f64>]) -> f64 {
    let m = surrogate.len().max(1) as f64;
    surrogate.iter().zip(full).map(|(a, b)| dist(a, b)).sum::<f64>() / m
}

pub fn relative_error(estimate: &[f64], reference: &[f64]) -> Result<f64, AdaptiveError> {
    let r = reference.iter().map(|v| v * v).sum::<f64>().sqrt();
    if r == 0.0 {
        return Err(AdaptiveError::ZeroReference);
    }
    Ok(dist(estimate, reference) / r)
}

/// `‖m̂ − m_ref‖₂ / ‖m_ref‖₂` over grid nodes.
pub fn relative_inversion_error(m_hat: &Field, m_ref: &Field) -> Result<f64, AdaptiveError> {
    relative_error(m_hat.values(), m_ref.values())
}

/// Full-order evaluations of a UKI run with the full model.
pub fn fem_evaluations(n_m: usize, t_fem: usize) -> u64 {
    ((2 * n_m + 1) * t_fem) as u64
}

/// `(2N_m + 1) T_FEM / ((Q + T) I_max)`.
pub fn speedup(n_m: usize, t_fem: usize, q: usize, t: usize, i_max: usize) -> f64 {
    fem_evaluations(n_m, t_fem) as f64 / ((q + t) * i_max) as f64
}

/// Draws `n` samples from `N(r, C)`.
pub fn sample_gaussian(r: &[f64], c: &DMatrix<f64>, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>, AdaptiveError> {
    let l = c
        .clone()
        .cholesky()
        .ok_or_else(|| AdaptiveError::Stage("covariance is not positive definite".into()))?
        .l();
    let mean = DVector::from_column_slice(r);
    Ok((0..n)
        .map(|_| {
            let z = DVector::from_vec(standard_normal_vec(r.len(), rng));
            (&mean + &l * z).as_slice().to_vec()
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub dataset_size: usize,
    pub iterations: usize,
}

/// A cheap approximation of `G` that can absorb new full-order samples.
pub trait AdaptiveSurrogate: Send + Sync {
    fn forward_many(&self, params: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, String>;

    fn forward(&self, params: &[f64]) -> Result<Vec<f64>, String> {
        Ok(self.forward_many(&[params.to_vec()])?.remove(0))
    }

    /// Adds `(parameters, full-order state)` pairs and updates the model.
    fn refine(&mut self, samples: &[(Vec<f64>, Vec<f64>)], cycle: usize) -> Result<Option<TrainSummary>, String>;
}

/// Uses the full-order model itself, without touching any ledger.
pub struct ExactSurrogate {
    model: Arc<dyn ForwardModel>,
}

impl ExactSurrogate {
    pub fn new(model: Arc<dyn ForwardModel>) -> Self {
        Self { model }
    }
}

impl AdaptiveSurrogate for ExactSurrogate {
    fn forward_many(&self, params: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, String> {
        params
            .iter()
            .map(|p| {
                let s = self.model.solve(p).map_err(|e| e.to_string())?;
                self.model.observe(&s).map_err(|e| e.to_string())
            })
            .collect()
    }

    fn refine(&mut self, _: &[(Vec<f64>, Vec<f64>)], _: usize) -> Result<Option<TrainSummary>, String> {
        Ok(None)
    }
}

/// DeepOnet surrogate fine-tuned on the union of all data seen so far.
pub struct DeepOnetSurrogate {
    pub map: SurrogateMap,
    pub dataset: TrainingSet,
    pub online: TrainConfig,
}

impl AdaptiveSurrogate for DeepOnetSurrogate {
    fn forward_many(&self, params: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, String> {
        self.map.forward_many(params).map_err(|e| e.to_string())
    }

    fn refine(&mut self, samples: &[(Vec<f64>, Vec<f64>)], cycle: usize) -> Result<Option<TrainSummary>, String> {
        for (params, state) in samples {
            self.dataset
                .push(TrainingEntry {
                    params: params.clone(),
                    input: self.map.encode_params(params),
                    target: state.clone(),
                    tag: SampleTag::Adaptive,
                })
                .map_err(|e| e.to_string())?;
        }
        let mut cfg = self.online.clone();
        cfg.seed = cfg.seed.wrapping_add(cycle as u64);
        let (s, report) = fine_tune(self.map.surrogate().clone(), &self.dataset, &cfg).map_err(|e| e.to_string())?;
        self.map.replace(s).map_err(|e| e.to_string())?;
        Ok(Some(TrainSummary {
            initial_loss: report.initial_loss,
            final_loss: report.final_loss,
            dataset_size: self.dataset.len(),
            iterations: report.iterations,
        }))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleRecord {
    pub cycle: usize,
    pub uki_steps: usize,
    pub anchor_step: usize,
    pub e_d: f64,
    pub e_prev: Option<f64>,
    pub relative_change: Option<f64>,
    pub refined: bool,
    /// Local model error around the anchor with the surrogate used in this cycle.
    pub e_m_before: Option<f64>,
    /// Same samples, after fine-tuning.
    pub e_m_after: Option<f64>,
    pub e_i: Option<f64>,
    pub training: Option<TrainSummary>,
    /// Cumulative counts since the run started.
    pub ledger: LedgerCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub cycle: usize,
    /// Global UKI iteration, 1-based.
    pub iteration: usize,
    pub e_d: f64,
    pub e_i: Option<f64>,
    pub e_m: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    /// Relative change of the anchor misfit fell below ε.
    Converged,
    MaxCycles,
    PerfectFit,
    /// Fixed-length run (full-order or direct surrogate UKI).
    Completed,
    Failed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub mode: Mode,
    pub n_params: usize,
    pub cycles: Vec<CycleRecord>,
    pub series: Vec<SeriesPoint>,
    /// Full-order evaluations made by the inversion itself.
    pub ledger: LedgerCounts,
    /// Online evaluations excluding diagnostics.
    pub online_evaluations: u64,
    pub final_r: Vec<f64>,
    pub final_c_diag: Vec<f64>,
    pub final_e_d: f64,
    pub final_e_i: Option<f64>,
    pub stop: StopReason,
    pub timings: BTreeMap<String, f64>,
    #[serde(default)]
    pub seeds: BTreeMap<String, u64>,
    #[serde(default)]
    pub policy: Option<RefinePolicy>,
    #[serde(default)]
    pub config: Option<serde_json::Value>,
    /// Extra run-level counts (offline training, truth generation).
    #[serde(default)]
    pub setup_ledger: Option<LedgerCounts>,
    #[serde(skip)]
    pub states: Vec<GaussianState>,
}

impl RunRecord {
    pub fn write_json(&self, path: &Path) -> std::io::Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self).map_err(std::io::Error::other)?)
    }

    pub fn read_json(path: &Path) -> std::io::Result<Self> {
        serde_json::from_slice(&fs::read(path)?).map_err(std::io::Error::other)
    }

    pub fn series_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
        let mut out = String::from("cycle,iteration,e_d,e_m,e_i\n");
        for p in &self.series {
            out.push_str(&format!("{},{},{:e},{},{}\n", p.cycle, p.iteration, p.e_d, opt(p.e_m), opt(p.e_i)));
        }
        out
    }

    /// Cycles in which the surrogate was fine-tuned.
    pub fn refinements(&self) -> usize {
        self.cycles.iter().filter(|c| c.refined).count()
    }
}

pub type Metric<'a> = &'a (dyn Fn(&[f64]) -> f64 + Sync);

pub struct AdaptiveSeeds {
    pub pool: u64,
    pub diag: u64,
}

struct Timer(BTreeMap<String, f64>);

impl Timer {
    fn time<T>(&mut self, phase: &str, f: impl FnOnce() -> T) -> T {
        let t0 = Instant::now();
        let out = f();
        *self.0.entry(phase.to_string()).or_default() += t0.elapsed().as_secs_f64();
        out
    }
}

fn surrogate_forward<'a, S: AdaptiveSurrogate>(s: &'a S) -> impl Fn(&[f64]) -> Result<Vec<f64>, String> + Sync + 'a {
    move |m: &[f64]| s.forward(m)
}

/// Local model error on `samples`, with the full-order outputs supplied.
fn model_error_on<S: AdaptiveSurrogate>(s: &S, samples: &[Vec<f64>], full: &[Vec<f64>]) -> Result<f64, String> {
    Ok(local_model_error(&s.forward_many(samples)?, full))
}

fn diagnostic_outputs(full: &FullOrder, samples: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, String> {
    samples
        .par_iter()
        .map(|m| full.forward(m, EvalCategory::Diagnostic).map_err(|e| e.to_string()))
        .collect()
}

/// Adaptive surrogate UKI. The refinement decision after the final cycle is
/// never taken, because its result would not be used.
#[allow(clippy::too_many_arguments)]
pub fn run_adaptive<S: AdaptiveSurrogate>(
    full: &FullOrder,
    surrogate: &mut S,
    data: &ObservationData,
    state0: &GaussianState,
    uki: &UkiConfig,
    policy: &RefinePolicy,
    seeds: &AdaptiveSeeds,
    metric: Option<Metric<'_>>,
) -> Result<RunRecord, AdaptiveError> {
    policy.validate()?;
    let start = full.ledger().snapshot();
    let mut timer = Timer(BTreeMap::new());
    let mut pool_rng = ChaCha8Rng::seed_from_u64(seeds.pool);
    let mut diag_rng = ChaCha8Rng::seed_from_u64(seeds.diag);
    let y = data.y();
    let mut cfg = uki.clone();
    cfg.iterations = policy.t;

    let mut state = state0.clone();
    let mut e_prev: Option<f64> = None;
    let mut cycles = Vec::new();
    let mut series = Vec::new();
    let mut states = Vec::new();
    let mut last_anchor: Option<AnchorRecord> = None;
    let mut stop = StopReason::MaxCycles;

    for t in 0..policy.i_max {
        let sur = &*surrogate;
        let run = timer.time("uki", || run_uki(&state, &surrogate_forward(sur), &y, &cfg));
        let run = match run {
            Ok(r) => r,
            Err(e) => {
                stop = StopReason::Failed(e.to_string());
                break;
            }
        };
        if run.states.is_empty() {
            stop = StopReason::Failed(format!(
                "surrogate UKI failed on its first step: {}",
                run.failure.map(|e| e.to_string()).unwrap_or_default()
            ));
            break;
        }
        let anchor = match timer.time("anchor_scan", || select_anchor(&run.states, full, data)) {
            Ok(a) => a,
            Err(e) => {
                stop = StopReason::Failed(e.to_string());
                break;
            }
        };
        let base = series.len();
        for (n, (s, e)) in run.states.iter().zip(&anchor.misfits).enumerate() {
            series.push(SeriesPoint {
                cycle: t,
                iteration: base + n + 1,
                e_d: *e,
                e_i: metric.map(|f| f(s.r.as_slice())),
                e_m: None,
            });
        }
        states.extend(run.states.iter().cloned());

        // e_M around the anchor with the current surrogate
        let diag = if policy.m_diag > 0 {
            timer.time("diagnostics", || -> Result<_, String> {
                let samples = sample_gaussian(&anchor.r, &anchor.c, policy.m_diag, &mut diag_rng).map_err(|e| e.to_string())?;
                let outs = diagnostic_outputs(full, &samples)?;
                let e_m = model_error_on(&*surrogate, &samples, &outs)?;
                Ok((samples, outs, e_m))
            })
        } else {
            Err(String::new())
        };
        let e_m_before = diag.as_ref().ok().map(|d| d.2);
        if let Some(p) = series.last_mut() {
            p.e_m = e_m_before;
        }

        let mut record = CycleRecord {
            cycle: t,
            uki_steps: run.states.len(),
            anchor_step: anchor.step,
            e_d: anchor.e,
            e_prev,
            relative_change: None,
            refined: false,
            e_m_before,
            e_m_after: None,
            e_i: metric.map(|f| f(&anchor.r)),
            training: None,
            ledger: LedgerCounts::default(),
        };
        last_anchor = Some(anchor.clone());
        let failure = run.failure.clone();

        let last_cycle = t + 1 == policy.i_max;
        let mut proceed = !last_cycle;
        if proceed {
            let prev = match e_prev {
                Some(e) => e,
                None => timer.time("anchor_scan", || {
                    full_misfits(vec![state0.r.as_slice().to_vec()], full, data, EvalCategory::AnchorScan)[0]
                }),
            };
            record.e_prev = Some(prev);
            if anchor.e == 0.0 {
                stop = StopReason::PerfectFit;
                proceed = false;
            } else {
                record.relative_change = Some(((prev - anchor.e) / anchor.e).abs());
                if !should_refine(prev, anchor.e, policy.epsilon) {
                    stop = StopReason::Converged;
                    proceed = false;
                }
            }
        }

        if proceed {
            let refined = (|| -> Result<Option<TrainSummary>, String> {
                let pool = sample_gaussian(&anchor.r, &anchor.c, policy.k, &mut pool_rng).map_err(|e| e.to_string())?;
                let picked = timer.time("greedy", || {
                    greedy_select(&pool, |p| surrogate.forward_many(p), &anchor.r, policy.q, policy.lambda)
                        .map_err(|e| e.to_string())
                })?;
                let samples: Vec<(Vec<f64>, Vec<f64>)> = timer.time("adaptive_sample", || {
                    picked
                        .par_iter()
                        .map(|&i| {
                            full.evaluate(&pool[i], EvalCategory::AdaptiveSample)
                                .map(|ev| (pool[i].clone(), ev.state))
                                .map_err(|e| e.to_string())
                        })
                        .collect::<Result<Vec<_>, String>>()
                })?;
                timer.time("fine_tune", || surrogate.refine(&samples, t))
            })();
            match refined {
                Ok(summary) => {
                    record.refined = true;
                    record.training = summary;
                    if let Ok((samples, outs, _)) = &diag {
                        record.e_m_after = timer.time("diagnostics", || model_error_on(&*surrogate, samples, outs).ok());
                    }
                }
                Err(e) => {
                    stop = StopReason::Failed(e);
                    proceed = false;
                }
            }
        }
        record.ledger = full.ledger().snapshot().since(&start);
        cycles.push(record);
        if let Some(e) = failure {
            log::info!("cycle {t}: surrogate trajectory truncated after {} steps ({e})", run.states.len());
        }
        if !proceed {
            break;
        }
        e_prev = Some(anchor.e);
        state = GaussianState::new(DVector::from_vec(anchor.r.clone()), anchor.c.clone()).expect("square covariance");
    }

    let ledger = full.ledger().snapshot().since(&start);
    let (final_r, final_c_diag, final_e_d) = match &last_anchor {
        Some(a) => (a.r.clone(), a.c.diagonal().iter().copied().collect(), a.e),
        None => (state.r.as_slice().to_vec(), state.diag(), f64::NAN),
    };
    Ok(RunRecord {
        mode: Mode::DeeponetAdaptive,
        n_params: state0.dim(),
        final_e_i: metric.map(|f| f(&final_r)),
        cycles,
        series,
        online_evaluations: ledger.online(),
        ledger,
        final_r,
        final_c_diag,
        final_e_d,
        stop,
        timings: timer.0,
        seeds: BTreeMap::from([("pool".to_string(), seeds.pool), ("diag".to_string(), seeds.diag)]),
        policy: Some(policy.clone()),
        config: None,
        setup_ledger: None,
        states,
    })
}

/// UKI with the full-order model (every sigma point counted as inversion
/// cost); per-iterate misfits are diagnostics.
pub fn run_fem_uki(
    full: &FullOrder,
    data: &ObservationData,
    state0: &GaussianState,
    uki: &UkiConfig,
    metric: Option<Metric<'_>>,
    diagnostics: bool,
) -> Result<RunRecord, AdaptiveError> {
    let start = full.ledger().snapshot();
    let mut timer = Timer(BTreeMap::new());
    let fwd = |m: &[f64]| full.forward(m, EvalCategory::Inversion);
    let run = timer
        .time("uki", || run_uki(state0, &fwd, &data.y(), uki))
        .map_err(|e| AdaptiveError::Stage(e.to_string()))?;
    finish_fixed_run(Mode::FemUki, full, data, state0, run, metric, diagnostics, start, timer, None)
}

/// UKI with a frozen surrogate.
pub fn run_direct<S: AdaptiveSurrogate>(
    full: &FullOrder,
    surrogate: &S,
    data: &ObservationData,
    state0: &GaussianState,
    uki: &UkiConfig,
    metric: Option<Metric<'_>>,
    m_diag: usize,
    diag_seed: u64,
) -> Result<RunRecord, AdaptiveError> {
    let start = full.ledger().snapshot();
    let mut timer = Timer(BTreeMap::new());
    let run = timer
        .time("uki", || run_uki(state0, &surrogate_forward(surrogate), &data.y(), uki))
        .map_err(|e| AdaptiveError::Stage(e.to_string()))?;
    let e_m = if m_diag > 0 {
        run.states.last().and_then(|s| {
            timer.time("diagnostics", || {
                let mut rng = ChaCha8Rng::seed_from_u64(diag_seed);
                let samples = sample_gaussian(s.r.as_slice(), &s.c, m_diag, &mut rng).ok()?;
                let outs = diagnostic_outputs(full, &samples).ok()?;
                model_error_on(surrogate, &samples, &outs).ok()
            })
        })
    } else {
        None
    };
    finish_fixed_run(Mode::DeeponetDirect, full, data, state0, run, metric, true, start, timer, e_m)
}

#[allow(clippy::too_many_arguments)]
fn finish_fixed_run(
    mode: Mode,
    full: &FullOrder,
    data: &ObservationData,
    state0: &GaussianState,
    run: crate::uki::UkiRun,
    metric: Option<Metric<'_>>,
    diagnostics: bool,
    start: LedgerCounts,
    mut timer: Timer,
    e_m: Option<f64>,
) -> Result<RunRecord, AdaptiveError> {
    let means: Vec<Vec<f64>> = run.states.iter().map(|s| s.r.as_slice().to_vec()).collect();
    let misfits = if diagnostics {
        timer.time("diagnostics", || full_misfits(means.clone(), full, data, EvalCategory::Diagnostic))
    } else {
        vec![f64::NAN; means.len()]
    };
    let mut series: Vec<SeriesPoint> = means
        .iter()
        .zip(&misfits)
        .enumerate()
        .map(|(n, (r, e))| SeriesPoint {
            cycle: 0,
            iteration: n + 1,
            e_d: *e,
            e_i: metric.map(|f| f(r)),
            e_m: None,
        })
        .collect();
    if let Some(p) = series.last_mut() {
        p.e_m = e_m;
    }
    let last = run.states.last().cloned().unwrap_or_else(|| state0.clone());
    let ledger = full.ledger().snapshot().since(&start);
    let stop = match &run.failure {
        Some(e) => StopReason::Failed(e.to_string()),
        None => StopReason::Completed,
    };
    let final_r = last.r.as_slice().to_vec();
    Ok(RunRecord {
        mode,
        n_params: state0.dim(),
        cycles: vec![CycleRecord {
            cycle: 0,
            uki_steps: run.states.len(),
            anchor_step: run.states.len(),
            e_d: misfits.last().copied().unwrap_or(f64::NAN),
            e_prev: None,
            relative_change: None,
            refined: false,
            e_m_before: e_m,
            e_m_after: None,
            e_i: metric.map(|f| f(&final_r)),
            training: None,
            ledger,
        }],
        series,
        online_evaluations: ledger.online(),
        ledger,
        final_e_d: misfits.last().copied().unwrap_or(f64::NAN),
        final_e_i: metric.map(|f| f(&final_r)),
        final_c_diag: last.diag(),
        final_r,
        stop,
        timings: timer.0,
        seeds: BTreeMap::new(),
        policy: None,
        config: None,
        setup_ledger: None,
        states: run.states,
    })
}
