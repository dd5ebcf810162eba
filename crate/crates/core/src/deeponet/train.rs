use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{LossRecord, NetError, Surrogate, TrainingSet};

/// `lr · decay^(k / decay_steps)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub lr: f64,
    pub decay: f64,
    pub decay_steps: usize,
}

impl StepSchedule {
    pub fn constant(lr: f64) -> Self {
        Self {
            lr,
            decay: 1.0,
            decay_steps: 1,
        }
    }

    pub fn at(&self, k: usize) -> f64 {
        self.lr * self.decay.powf(k as f64 / self.decay_steps.max(1) as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iters: usize,
    pub schedule: StepSchedule,
    /// Entries per step; `None` uses the full set.
    pub batch_size: Option<usize>,
    pub seed: u64,
    /// Loss is logged every this many steps (and at both ends).
    pub log_every: usize,
}

impl TrainConfig {
    pub fn offline(iters: usize, seed: u64) -> Self {
        Self {
            iters,
            schedule: StepSchedule {
                lr: 1e-3,
                decay: 0.5,
                decay_steps: iters.max(1) / 3 + 1,
            },
            batch_size: None,
            seed,
            log_every: 100,
        }
    }

    pub fn online(iters: usize, seed: u64) -> Self {
        Self {
            iters,
            schedule: StepSchedule::constant(5e-4),
            batch_size: None,
            seed,
            log_every: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub iterations: usize,
    pub history: Vec<LossRecord>,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, w: &mut [f64], g: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for k in 0..w.len() {
            self.m[k] = Self::B1 * self.m[k] + (1.0 - Self::B1) * g[k];
            self.v[k] = Self::B2 * self.v[k] + (1.0 - Self::B2) * g[k] * g[k];
            w[k] -= lr * (self.m[k] / c1) / ((self.v[k] / c2).sqrt() + Self::EPS);
        }
    }
}

/// Adam on the empirical loss, from the surrogate's current weights. The
/// returned surrogate carries the lowest-loss weights seen, so its loss on
/// `set` never exceeds the starting loss.
pub fn train(mut s: Surrogate, set: &TrainingSet, cfg: &TrainConfig) -> Result<(Surrogate, TrainReport), NetError> {
    let initial = s.empirical_loss(set)?;
    if !initial.is_finite() {
        return Err(NetError::NonFiniteLoss { iter: 0 });
    }
    let start = s.iterations;
    let mut history = vec![LossRecord {
        iteration: start,
        loss: initial,
    }];
    let mut best = (initial, s.weights.clone());
    let mut adam = Adam::new(s.weights.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..set.len()).collect();
    let batch = cfg.batch_size.filter(|b| *b > 0 && *b < set.len());
    let mut cursor = order.len();
    let log_every = cfg.log_every.max(1);

    for k in 0..cfg.iters {
        let rows = match batch {
            None => None,
            Some(b) => {
                if cursor + b > order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                cursor += b;
                Some(&order[cursor - b..cursor])
            }
        };
        let (loss, grad) = s.loss_and_gradient(set, rows)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            log::error!("training diverged at step {k} (loss {loss})");
            return Err(NetError::NonFiniteLoss { iter: k });
        }
        // with full batches `loss` is the exact loss of the current weights
        if batch.is_none() && loss < best.0 {
            best = (loss, s.weights.clone());
        }
        if k > 0 && k % log_every == 0 {
            let full = if batch.is_none() { loss } else { s.empirical_loss(set)? };
            if batch.is_some() && full < best.0 {
                best = (full, s.weights.clone());
            }
            history.push(LossRecord {
                iteration: start + k as u64,
                loss: full,
            });
        }
        adam.step(&mut s.weights, &grad, cfg.schedule.at(k));
        s.iterations += 1;
    }

    let last = s.empirical_loss(set)?;
    if !last.is_finite() {
        return Err(NetError::NonFiniteLoss { iter: cfg.iters });
    }
    if last < best.0 {
        best = (last, s.weights.clone());
    }
    history.push(LossRecord {
        iteration: s.iterations,
        loss: last,
    });
    s.weights = best.1;
    s.train_log.extend(history.iter().copied());
    Ok((
        s,
        TrainReport {
            initial_loss: initial,
            final_loss: best.0,
            iterations: cfg.iters,
            history,
        },
    ))
}

/// Warm-started training on the (union) dataset supplied by the caller.
pub fn fine_tune(s: Surrogate, set: &TrainingSet, cfg: &TrainConfig) -> Result<(Surrogate, TrainReport), NetError> {
    train(s, set, cfg)
}

#[cfg(test)]
mod tests {
    use super::super::*;
    use super::*;

    fn toy() -> (Surrogate, TrainingSet) {
        let arch = NetArch::uniform(2, 1, 8, 1, 2);
        let s = Surrogate::new(arch, Encoder::Direct { dim: 2 }, Normalization::identity(2, 1), 3).unwrap();
        let pts: Vec<Vec<f64>> = (0..5).map(|k| vec![k as f64 / 4.0]).collect();
        let mut set = TrainingSet::new(pts.clone());
        set.push(TrainingEntry {
            params: vec![0.5, -0.2],
            input: vec![0.5, -0.2],
            target: pts.iter().map(|x| 0.5 * x[0] - 0.2).collect(),
            tag: SampleTag::Prior,
        })
        .unwrap();
        (s, set)
    }

    #[test]
    fn zero_iterations_is_identity() {
        let (s, set) = toy();
        let (t, r) = train(s.clone(), &set, &TrainConfig::offline(0, 1)).unwrap();
        assert_eq!(t.weights, s.weights);
        assert_eq!(r.initial_loss, r.final_loss);
        let (f, _) = fine_tune(s.clone(), &set, &TrainConfig::online(0, 1)).unwrap();
        assert_eq!(f.weights, s.weights);
    }

    #[test]
    fn linear_toy_converges() {
        let (s, set) = toy();
        let mut cfg = TrainConfig::offline(2000, 5);
        cfg.schedule = StepSchedule::constant(1e-2);
        let (t, r) = train(s, &set, &cfg).unwrap();
        assert!(r.final_loss < 1e-4, "{}", r.final_loss);
        assert!((t.empirical_loss(&set).unwrap() - r.final_loss).abs() < 1e-15);
        assert_eq!(t.iterations, 2000);
    }

    #[test]
    fn small_steps_do_not_increase_loss() {
        let (s, set) = toy();
        let mut cfg = TrainConfig::online(200, 0);
        cfg.schedule = StepSchedule::constant(1e-5);
        cfg.log_every = 1;
        let (_, r) = fine_tune(s, &set, &cfg).unwrap();
        for w in r.history.windows(2) {
            assert!(w[1].loss <= w[0].loss + 1e-15);
        }
    }

    #[test]
    fn schedule_decays() {
        let s = StepSchedule {
            lr: 1.0,
            decay: 0.5,
            decay_steps: 10,
        };
        assert_eq!(s.at(0), 1.0);
        assert!((s.at(20) - 0.25).abs() < 1e-15);
    }
}
