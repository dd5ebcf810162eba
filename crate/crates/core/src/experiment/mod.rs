//! End-to-end runs: truth and data synthesis, offline training, the three
//! inversion modes, and persistence of their outputs.

mod config;
pub mod report;

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::distr::{Distribution, Uniform};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{NetSection, PolicySection, RunConfig, Scale, TruthConfig, TruthKind, UkiSection};

use crate::adaptive::{
    relative_error, run_adaptive, run_direct, run_fem_uki, AdaptiveError, AdaptiveSeeds, DeepOnetSurrogate, Mode,
    RunRecord,
};
use crate::deeponet::{
    load_checkpoint, save_checkpoint, train, write_loss_csv, Baseline, Encoder, InputMap, NetArch, NetError, Normalization,
    SampleTag, Surrogate, SurrogateMap, TrainConfig, TrainReport, TrainingEntry, TrainingSet, StepSchedule,
};
use crate::grf::io::save_field;
use crate::grf::{draw_uniform, standard_normal_vec, Field, GrfError, Grid2D, KlBasis};
use crate::observe::{synthesize_data, ObservationData, ObserveError, SensorArray};
use crate::pde::{
    Benchmark, BenchmarkModel, EvalCategory, EvalLedger, ForwardModel, FullOrder, LedgerCounts, Parameterization,
    PdeError, ProblemId,
};
use crate::uki::{GaussianState, UkiConfig};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config: {0}")]
    Config(String),
    #[error("no offline checkpoint at {0}")]
    MissingCheckpoint(PathBuf),
    #[error(transparent)]
    Pde(#[from] PdeError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Adaptive(#[from] AdaptiveError),
    #[error(transparent)]
    Observe(#[from] ObserveError),
    #[error(transparent)]
    Grf(#[from] GrfError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Named random streams split off the master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Prior = 1,
    Noise,
    Init,
    Pool,
    Train,
    Diag,
    Truth,
}

impl Stream {
    pub const ALL: [Stream; 7] = [
        Stream::Prior,
        Stream::Noise,
        Stream::Init,
        Stream::Pool,
        Stream::Train,
        Stream::Diag,
        Stream::Truth,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Stream::Prior => "prior",
            Stream::Noise => "noise",
            Stream::Init => "init",
            Stream::Pool => "pool",
            Stream::Train => "train",
            Stream::Diag => "diag",
            Stream::Truth => "truth",
        }
    }
}

pub fn stream_rng(master: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(stream as u64);
    rng
}

pub fn stream_seed(master: u64, stream: Stream) -> u64 {
    stream_rng(master, stream).next_u64()
}

pub fn seed_table(master: u64) -> BTreeMap<String, u64> {
    let mut t: BTreeMap<String, u64> = Stream::ALL.iter().map(|s| (s.name().to_string(), stream_seed(master, *s))).collect();
    t.insert("master".into(), master);
    t
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    /// True parameters when they live in the inverted parameterization
    /// (the source location); KL truths keep their generating coefficients.
    pub params: Vec<f64>,
    /// True parameter field on the grid (KL problems).
    #[serde(skip)]
    pub field: Option<Field>,
    pub y_ref: Vec<f64>,
    pub data: ObservationData,
}

#[derive(Debug, Clone)]
pub struct Offline {
    pub surrogate: Surrogate,
    pub dataset: TrainingSet,
    pub report: TrainReport,
    pub evaluations: u64,
}

pub struct Experiment {
    pub cfg: RunConfig,
    pub model: Arc<BenchmarkModel>,
    pub full: FullOrder,
    basis: Option<Arc<KlBasis>>,
}

fn default_sensors(problem: ProblemId) -> SensorArray {
    match problem {
        ProblemId::HeatLoc => SensorArray::interior_lattice(3),
        _ => SensorArray::interior_lattice(6),
    }
}

impl Experiment {
    pub fn new(cfg: RunConfig) -> Result<Self, ExperimentError> {
        cfg.validate()?;
        let grid = Grid2D::square(cfg.grid)?;
        let problem = Benchmark::default_for(cfg.problem, grid);
        let (param, basis) = if cfg.problem == ProblemId::HeatLoc {
            (Parameterization::Location, None)
        } else {
            let n = cfg.n_modes.max(cfg.truth.n_modes);
            let basis = Arc::new(KlBasis::new(grid, n, cfg.prior)?);
            (
                Parameterization::Kl {
                    basis: basis.clone(),
                    n: cfg.n_modes,
                },
                Some(basis),
            )
        };
        let model = Arc::new(BenchmarkModel::new(problem, param, default_sensors(cfg.problem))?);
        let full = FullOrder::with_ledger(model.clone(), Arc::new(EvalLedger::new()));
        Ok(Self { cfg, model, full, basis })
    }

    pub fn ledger(&self) -> &Arc<EvalLedger> {
        self.full.ledger()
    }

    pub fn basis(&self) -> Option<&Arc<KlBasis>> {
        self.basis.as_ref()
    }

    pub fn grid(&self) -> Grid2D {
        self.model.problem().grid()
    }

    pub fn seed(&self, s: Stream) -> u64 {
        stream_seed(self.cfg.seed, s)
    }

    /// Synthesizes the reference truth and noisy data; every solve is
    /// counted in the truth category.
    pub fn truth(&self) -> Result<Truth, ExperimentError> {
        let cfg = &self.cfg;
        let mut rng = stream_rng(cfg.seed, Stream::Truth);
        let (params, field, y_ref) = match &self.basis {
            None => {
                let chi = cfg.truth.location.to_vec();
                let y = self.full.forward(&chi, EvalCategory::Truth)?;
                (chi, None, y)
            }
            Some(basis) => {
                let (zeta, m) = match cfg.truth.kind {
                    TruthKind::Idd => {
                        let z = standard_normal_vec(cfg.truth.n_modes, &mut rng);
                        let m = basis.sample_field(&z)?;
                        (z, m)
                    }
                    TruthKind::Ood => {
                        let z = draw_uniform(cfg.truth.n_modes, cfg.truth.ood_half_width, &mut rng).0;
                        let m = basis.sample_field(&z)?;
                        (z, m)
                    }
                    TruthKind::Fixed => (Vec::new(), self.grid().evaluate(|x, y| (PI * x).sin() * (PI * y).cos())),
                };
                self.ledger().record(EvalCategory::Truth);
                let state = self.model.problem().solve_field(&m)?;
                let y = self.model.observe(state.values())?;
                (zeta, Some(m), y)
            }
        };
        let mut data = synthesize_data(&y_ref, cfg.delta, self.seed(Stream::Noise))?;
        data.locations = self.model.sensors().locations.clone();
        data.times = self.model.problem().snapshot_times();
        Ok(Truth {
            params,
            field,
            y_ref,
            data,
        })
    }

    /// Relative inversion error of a parameter vector against the truth.
    pub fn inversion_error(&self, truth: &Truth, params: &[f64]) -> f64 {
        match (&self.basis, &truth.field) {
            (Some(basis), Some(m_true)) => basis
                .sample_field(params)
                .ok()
                .and_then(|m| relative_error(m.values(), m_true.values()).ok())
                .unwrap_or(f64::NAN),
            _ => relative_error(params, &truth.params).unwrap_or(f64::NAN),
        }
    }

    pub fn encoder(&self) -> Encoder {
        match self.cfg.problem {
            ProblemId::HeatLoc => Encoder::Direct { dim: 2 },
            _ => Encoder::subsampled(self.grid(), self.cfg.net.encoder),
        }
    }

    pub fn input_map(&self, encoder: &Encoder) -> Result<InputMap, ExperimentError> {
        Ok(match &self.basis {
            Some(b) => InputMap::for_basis(b, self.cfg.n_modes, encoder)?,
            None => InputMap::Direct,
        })
    }

    /// Offline parameter draws: prior coefficients, or uniform locations
    /// in the training box.
    pub fn offline_params(&self) -> Vec<Vec<f64>> {
        let mut rng = stream_rng(self.cfg.seed, Stream::Prior);
        let n = self.cfg.net.n_prior;
        match self.cfg.problem {
            ProblemId::HeatLoc => {
                let [lo, hi] = self.cfg.net.loc_box;
                let u = Uniform::new_inclusive(lo, hi).expect("finite box");
                (0..n).map(|_| vec![u.sample(&mut rng), u.sample(&mut rng)]).collect()
            }
            _ => (0..n).map(|_| standard_normal_vec(self.cfg.n_modes, &mut rng)).collect(),
        }
    }

    pub fn offline_dataset(&self, encoder: &Encoder) -> Result<TrainingSet, ExperimentError> {
        let inputs = self.input_map(encoder)?;
        let params = self.offline_params();
        let states: Vec<Vec<f64>> = params
            .par_iter()
            .map(|p| self.full.evaluate(p, EvalCategory::Offline).map(|e| e.state))
            .collect::<Result<_, _>>()?;
        let mut set = TrainingSet::new(self.model.state_points());
        for (p, s) in params.into_iter().zip(states) {
            set.push(TrainingEntry {
                input: inputs.apply(&p),
                params: p,
                target: s,
                tag: SampleTag::Prior,
            })?;
        }
        Ok(set)
    }

    pub fn arch(&self, encoder: &Encoder) -> NetArch {
        let n = &self.cfg.net;
        let qd = if self.model.problem().snapshot_times().is_empty() { 2 } else { 3 };
        NetArch::uniform(encoder.width(), qd, n.width, n.depth, n.p)
    }

    pub fn offline_train_config(&self) -> TrainConfig {
        let mut c = TrainConfig::offline(self.cfg.net.offline_iters, self.seed(Stream::Train));
        c.schedule.lr = self.cfg.net.lr_offline;
        c.batch_size = self.cfg.net.batch_size;
        c
    }

    pub fn online_train_config(&self) -> TrainConfig {
        let mut c = TrainConfig::online(self.cfg.net.online_iters, self.seed(Stream::Train).wrapping_add(1));
        c.schedule = StepSchedule::constant(self.cfg.net.lr_online);
        c.batch_size = self.cfg.net.batch_size;
        c
    }

    pub fn train_offline(&self) -> Result<Offline, ExperimentError> {
        let before = self.ledger().count(EvalCategory::Offline);
        let encoder = self.encoder();
        let dataset = self.offline_dataset(&encoder)?;
        let evaluations = self.ledger().count(EvalCategory::Offline) - before;
        let baseline = Baseline::mean_state(&dataset, self.grid(), self.model.problem().snapshot_times())?;
        let norm = Normalization::fit_with_baseline(&dataset, baseline)?;
        let s = Surrogate::new(self.arch(&encoder), encoder, norm, self.seed(Stream::Train))?;
        let (surrogate, report) = train(s, &dataset, &self.offline_train_config())?;
        log::info!(
            "offline training: loss {:.3e} -> {:.3e} over {} iterations",
            report.initial_loss,
            report.final_loss,
            report.iterations
        );
        Ok(Offline {
            surrogate,
            dataset,
            report,
            evaluations,
        })
    }

    pub fn c0(&self) -> DMatrix<f64> {
        let n = self.cfg.n_params();
        DMatrix::identity(n, n) * self.cfg.uki.c0_std.powi(2)
    }

    /// `N(r₀, C₀)`: the configured start, or the prior mean.
    pub fn initial_state(&self) -> Result<GaussianState, ExperimentError> {
        let n = self.cfg.n_params();
        let r = match &self.cfg.uki.init {
            Some(v) => v.clone(),
            None if self.cfg.uki.init_std > 0.0 => {
                let mut rng = stream_rng(self.cfg.seed, Stream::Init);
                standard_normal_vec(n, &mut rng).into_iter().map(|z| z * self.cfg.uki.init_std).collect()
            }
            None => vec![0.0; n],
        };
        GaussianState::new(DVector::from_vec(r), self.c0()).map_err(|e| ExperimentError::Config(e.to_string()))
    }

    pub fn uki_config(&self, data: &ObservationData, state0: &GaussianState, iterations: usize) -> UkiConfig {
        UkiConfig::with_defaults(self.cfg.alpha(), &self.c0(), data.noise_cov(), state0.r.clone(), iterations)
    }

    /// Runs the configured mode. Deeponet modes need the offline surrogate
    /// and its dataset.
    pub fn invert(&self, truth: &Truth, offline: Option<(Surrogate, TrainingSet)>) -> Result<RunRecord, ExperimentError> {
        let cfg = &self.cfg;
        let state0 = self.initial_state()?;
        let metric = |r: &[f64]| self.inversion_error(truth, r);
        let t0 = Instant::now();
        let mut record = match cfg.mode {
            Mode::FemUki => {
                let uki = self.uki_config(&truth.data, &state0, cfg.uki.t_fem);
                run_fem_uki(&self.full, &truth.data, &state0, &uki, Some(&metric), true)?
            }
            Mode::DeeponetDirect | Mode::DeeponetAdaptive => {
                let (surrogate, dataset) = offline
                    .ok_or_else(|| ExperimentError::Config(format!("mode {} needs an offline surrogate", cfg.mode)))?;
                let encoder = surrogate.encoder.clone();
                let (idx, weights) = self.model.observation_stencil();
                let all = self.model.state_points();
                let points = idx.iter().map(|&k| all[k].clone()).collect();
                let map = SurrogateMap::with_interpolation(surrogate, self.input_map(&encoder)?, points, weights)?;
                let mut sur = DeepOnetSurrogate {
                    map,
                    dataset,
                    online: self.online_train_config(),
                };
                if cfg.mode == Mode::DeeponetDirect {
                    let uki = self.uki_config(&truth.data, &state0, cfg.uki.t_fem);
                    run_direct(
                        &self.full,
                        &sur,
                        &truth.data,
                        &state0,
                        &uki,
                        Some(&metric),
                        cfg.policy.m_diag,
                        self.seed(Stream::Diag),
                    )?
                } else {
                    let uki = self.uki_config(&truth.data, &state0, cfg.policy.t);
                    let seeds = AdaptiveSeeds {
                        pool: self.seed(Stream::Pool),
                        diag: self.seed(Stream::Diag),
                    };
                    run_adaptive(&self.full, &mut sur, &truth.data, &state0, &uki, &cfg.refine_policy(), &seeds, Some(&metric))?
                }
            }
        };
        record.timings.insert("total".into(), t0.elapsed().as_secs_f64());
        record.seeds = seed_table(cfg.seed);
        record.policy = Some(cfg.refine_policy());
        record.config = Some(serde_json::to_value(cfg)?);
        Ok(record)
    }
}

pub fn offline_stem(dir: &Path) -> PathBuf {
    dir.join("checkpoint.offline")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OfflineSummary {
    pub checkpoint: PathBuf,
    pub evaluations: u64,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub iterations: usize,
    pub dataset_size: usize,
    pub seconds: f64,
}

/// Offline stage to disk: checkpoint, loss curve and dataset.
pub fn cmd_train_offline(cfg: &RunConfig) -> Result<OfflineSummary, ExperimentError> {
    let t0 = Instant::now();
    let exp = Experiment::new(cfg.clone())?;
    let off = exp.train_offline()?;
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir)?;
    let checkpoint = save_checkpoint(&off.surrogate, &offline_stem(dir))?;
    write_loss_csv(&off.report.history, &dir.join("loss.csv"))?;
    fs::write(dir.join("dataset.json"), serde_json::to_vec(&off.dataset)?)?;
    let summary = OfflineSummary {
        checkpoint,
        evaluations: off.evaluations,
        initial_loss: off.report.initial_loss,
        final_loss: off.report.final_loss,
        iterations: off.report.iterations,
        dataset_size: off.dataset.len(),
        seconds: t0.elapsed().as_secs_f64(),
    };
    fs::write(dir.join("offline.json"), serde_json::to_vec_pretty(&summary)?)?;
    Ok(summary)
}

/// Loads a checkpoint and the dataset stored next to it (regenerated from
/// the config when absent).
pub fn load_offline(exp: &Experiment, checkpoint: &Path) -> Result<(Surrogate, TrainingSet), ExperimentError> {
    let json = if checkpoint.extension().is_some_and(|e| e == "json" || e == "bin") {
        checkpoint.with_extension("json")
    } else {
        let mut s = checkpoint.as_os_str().to_owned();
        s.push(".json");
        PathBuf::from(s)
    };
    if !json.exists() {
        return Err(ExperimentError::MissingCheckpoint(checkpoint.to_path_buf()));
    }
    let surrogate = load_checkpoint(checkpoint)?;
    let data_path = json.parent().unwrap_or(Path::new(".")).join("dataset.json");
    let dataset = if data_path.exists() {
        serde_json::from_slice(&fs::read(&data_path)?)?
    } else {
        exp.offline_dataset(&surrogate.encoder)?
    };
    Ok((surrogate, dataset))
}

/// Full inversion run to disk. Returns the record path.
pub fn cmd_invert(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<(PathBuf, RunRecord), ExperimentError> {
    let exp = Experiment::new(cfg.clone())?;
    let offline = match cfg.mode {
        Mode::FemUki => None,
        _ => {
            let path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| offline_stem(&cfg.output_dir));
            Some(load_offline(&exp, &path)?)
        }
    };
    let setup_start = exp.ledger().snapshot();
    let truth = exp.truth()?;
    let setup = exp.ledger().snapshot().since(&setup_start);
    let mut record = exp.invert(&truth, offline)?;
    record.setup_ledger = Some(setup);

    let dir = &cfg.output_dir;
    fs::create_dir_all(dir.join("fields"))?;
    fs::write(dir.join("config.json"), serde_json::to_vec_pretty(cfg)?)?;
    fs::write(dir.join("data.json"), serde_json::to_vec_pretty(&truth.data)?)?;
    let path = dir.join("record.json");
    record.write_json(&path)?;
    fs::write(dir.join("series.csv"), record.series_csv())?;
    if let (Some(basis), Some(m)) = (exp.basis(), &truth.field) {
        save_field(m, &dir.join("fields/truth.bin"))?;
        save_field(&basis.sample_field(&record.final_r)?, &dir.join("fields/estimate.bin"))?;
    }
    Ok((path, record))
}

/// Ledger counts of one run, inversion plus setup.
pub fn total_counts(record: &RunRecord) -> LedgerCounts {
    match &record.setup_ledger {
        Some(s) => record.ledger.plus(s),
        None => record.ledger,
    }
}
