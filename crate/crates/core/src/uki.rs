//! Unscented Kalman inversion with the modified unscented transform.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum UkiError {
    #[error("covariance is not symmetric positive definite")]
    NotSpd,
    #[error("predicted observation covariance is singular")]
    SingularInnovation,
    #[error("forward model returned a non-finite value at sigma point {point}")]
    NonFiniteForward { point: usize },
    #[error("forward model failed at sigma point {point}: {message}")]
    Forward { point: usize, message: String },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianState {
    pub r: DVector<f64>,
    pub c: DMatrix<f64>,
}

impl GaussianState {
    pub fn new(r: DVector<f64>, c: DMatrix<f64>) -> Result<Self, UkiError> {
        if c.nrows() != r.len() || c.ncols() != r.len() {
            return Err(UkiError::Dimension(format!(
                "mean has length {} but covariance is {}x{}",
                r.len(),
                c.nrows(),
                c.ncols()
            )));
        }
        Ok(Self { r, c })
    }

    pub fn dim(&self) -> usize {
        self.r.len()
    }

    pub fn cholesky(&self) -> Result<DMatrix<f64>, UkiError> {
        Ok(self.c.clone().cholesky().ok_or(UkiError::NotSpd)?.l())
    }

    pub fn diag(&self) -> Vec<f64> {
        self.c.diagonal().iter().copied().collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UkiConfig {
    pub alpha: f64,
    pub sigma_omega: DMatrix<f64>,
    pub sigma_eta: DMatrix<f64>,
    pub r0: DVector<f64>,
    pub iterations: usize,
}

impl UkiConfig {
    /// `Σ_ω = (2 − α²) C₀`.
    pub fn with_defaults(alpha: f64, c0: &DMatrix<f64>, sigma_eta: DMatrix<f64>, r0: DVector<f64>, iterations: usize) -> Self {
        Self {
            alpha,
            sigma_omega: c0 * (2.0 - alpha * alpha),
            sigma_eta,
            r0,
            iterations,
        }
    }

    pub fn validate(&self, n_m: usize, n_y: usize) -> Result<(), UkiError> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(UkiError::Config(format!("alpha = {} is outside (0, 1]", self.alpha)));
        }
        if self.sigma_omega.shape() != (n_m, n_m) || self.r0.len() != n_m {
            return Err(UkiError::Dimension("evolution covariance or anchor does not match the parameter dimension".into()));
        }
        if self.sigma_eta.shape() != (n_y, n_y) {
            return Err(UkiError::Dimension("noise covariance does not match the data length".into()));
        }
        Ok(())
    }
}

/// Modified-unscented-transform weights for dimension `n`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnscentedWeights {
    pub a: f64,
    pub lambda: f64,
    pub c: f64,
    pub w_c: f64,
}

impl UnscentedWeights {
    pub fn new(n: usize) -> Self {
        let nf = n as f64;
        let a = (4.0 / nf).sqrt().min(1.0);
        let lambda = a * a * nf - nf;
        Self {
            a,
            lambda,
            c: (nf + lambda).sqrt(),
            w_c: 1.0 / (2.0 * (nf + lambda)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SigmaEnsemble {
    pub points: Vec<DVector<f64>>,
    pub weights: UnscentedWeights,
}

pub fn sigma_points(state: &GaussianState) -> Result<SigmaEnsemble, UkiError> {
    let n = state.dim();
    let l = state.cholesky()?;
    let w = UnscentedWeights::new(n);
    let mut points = Vec::with_capacity(2 * n + 1);
    points.push(state.r.clone());
    for j in 0..n {
        points.push(&state.r + l.column(j) * w.c);
    }
    for j in 0..n {
        points.push(&state.r - l.column(j) * w.c);
    }
    Ok(SigmaEnsemble { points, weights: w })
}

/// Evaluates a forward map at every point, in parallel, keeping index order.
pub fn evaluate_points<F, E>(points: &[DVector<f64>], forward: &F) -> Result<Vec<DVector<f64>>, UkiError>
where
    F: Fn(&[f64]) -> Result<Vec<f64>, E> + Sync,
    E: std::fmt::Display,
{
    let outs: Vec<Result<Vec<f64>, UkiError>> = points
        .par_iter()
        .enumerate()
        .map(|(k, p)| {
            forward(p.as_slice()).map_err(|e| UkiError::Forward {
                point: k,
                message: e.to_string(),
            })
        })
        .collect();
    let mut ys = Vec::with_capacity(points.len());
    for (k, o) in outs.into_iter().enumerate() {
        let y = o?;
        if y.iter().any(|v| !v.is_finite()) {
            return Err(UkiError::NonFiniteForward { point: k });
        }
        ys.push(DVector::from_vec(y));
    }
    Ok(ys)
}

/// Prediction step: `r̂ = α r + (1 − α) r₀`, `Ĉ = α² C + Σ_ω`.
pub fn predict(state: &GaussianState, cfg: &UkiConfig) -> GaussianState {
    let a = cfg.alpha;
    GaussianState {
        r: &state.r * a + &cfg.r0 * (1.0 - a),
        c: &state.c * (a * a) + &cfg.sigma_omega,
    }
}

/// Analysis and update given forward outputs at the sigma points of the
/// predicted state.
pub fn analyse(
    predicted: &GaussianState,
    ensemble: &SigmaEnsemble,
    ys: &[DVector<f64>],
    y_obs: &DVector<f64>,
    sigma_eta: &DMatrix<f64>,
) -> Result<GaussianState, UkiError> {
    let n = predicted.dim();
    let ny = y_obs.len();
    if ys.len() != 2 * n + 1 || ys.iter().any(|y| y.len() != ny) {
        return Err(UkiError::Dimension("forward outputs do not match the ensemble or data".into()));
    }
    let w = ensemble.weights.w_c;
    let y_hat = &ys[0];
    let mut c_my = DMatrix::zeros(n, ny);
    let mut c_yy = sigma_eta.clone();
    for j in 1..=2 * n {
        let dm = &ensemble.points[j] - &predicted.r;
        let dy = &ys[j] - y_hat;
        c_my += &dm * dy.transpose() * w;
        c_yy += &dy * dy.transpose() * w;
    }
    let chol = c_yy.cholesky().ok_or(UkiError::SingularInnovation)?;
    // K = Ĉ^{my} (Ĉ^{yy})⁻¹ computed as a solve on Kᵀ
    let gain = chol.solve(&c_my.transpose()).transpose();
    let r = &predicted.r + &gain * (y_obs - y_hat);
    let c = &predicted.c - &gain * c_my.transpose();
    let c = (&c + c.transpose()) * 0.5;
    Ok(GaussianState { r, c })
}

/// One UKI iteration. Calls `forward` exactly `2N_m + 1` times.
pub fn uki_step<F, E>(
    state: &GaussianState,
    forward: &F,
    y_obs: &DVector<f64>,
    cfg: &UkiConfig,
) -> Result<GaussianState, UkiError>
where
    F: Fn(&[f64]) -> Result<Vec<f64>, E> + Sync,
    E: std::fmt::Display,
{
    let predicted = predict(state, cfg);
    let ensemble = sigma_points(&predicted)?;
    let ys = evaluate_points(&ensemble.points, forward)?;
    analyse(&predicted, &ensemble, &ys, y_obs, &cfg.sigma_eta)
}

/// Trajectory of a UKI run, truncated at the first failed step.
#[derive(Debug, Clone)]
pub struct UkiRun {
    pub states: Vec<GaussianState>,
    pub failure: Option<UkiError>,
}

pub fn run_uki<F, E>(state0: &GaussianState, forward: &F, y_obs: &DVector<f64>, cfg: &UkiConfig) -> Result<UkiRun, UkiError>
where
    F: Fn(&[f64]) -> Result<Vec<f64>, E> + Sync,
    E: std::fmt::Display,
{
    if cfg.iterations == 0 {
        return Err(UkiError::Config("at least one iteration is required".into()));
    }
    cfg.validate(state0.dim(), y_obs.len())?;
    let mut states = Vec::with_capacity(cfg.iterations);
    let mut current = state0.clone();
    for n in 0..cfg.iterations {
        match uki_step(&current, forward, y_obs, cfg) {
            Ok(next) => {
                states.push(next.clone());
                current = next;
            }
            Err(e) => {
                log::warn!("UKI step {n} failed: {e}; trajectory truncated");
                return Ok(UkiRun {
                    states,
                    failure: Some(e),
                });
            }
        }
    }
    Ok(UkiRun { states, failure: None })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::convert::Infallible;

    fn scalar_cfg() -> UkiConfig {
        UkiConfig {
            alpha: 1.0,
            sigma_omega: DMatrix::from_element(1, 1, 1.0),
            sigma_eta: DMatrix::from_element(1, 1, 1.0),
            r0: DVector::zeros(1),
            iterations: 1,
        }
    }

    #[test]
    fn weights_match_closed_form() {
        let w1 = UnscentedWeights::new(1);
        assert_eq!((w1.a, w1.lambda, w1.c, w1.w_c), (1.0, 0.0, 1.0, 0.5));
        let w4 = UnscentedWeights::new(4);
        assert_eq!((w4.a, w4.lambda, w4.c, w4.w_c), (1.0, 0.0, 2.0, 0.125));
        let w128 = UnscentedWeights::new(128);
        assert!((w128.a - (1.0f64 / 32.0).sqrt()).abs() < 1e-15);
        assert!((w128.lambda + 124.0).abs() < 1e-12);
        assert!((w128.c - 2.0).abs() < 1e-12);
        assert!((w128.w_c - 0.125).abs() < 1e-12);
    }

    #[test]
    fn scalar_hand_computation() {
        let s0 = GaussianState::new(DVector::zeros(1), DMatrix::from_element(1, 1, 1.0)).unwrap();
        let y = DVector::from_element(1, 1.0);
        let s1 = uki_step(&s0, &|m: &[f64]| Ok::<_, Infallible>(m.to_vec()), &y, &scalar_cfg()).unwrap();
        assert!((s1.r[0] - 2.0 / 3.0).abs() < 1e-14);
        assert!((s1.c[(0, 0)] - 2.0 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn ensemble_reproduces_mean_and_covariance() {
        let c = DMatrix::from_row_slice(3, 3, &[2.0, 0.3, -0.1, 0.3, 1.0, 0.2, -0.1, 0.2, 0.5]);
        let s = GaussianState::new(DVector::from_vec(vec![1.0, -2.0, 0.5]), c.clone()).unwrap();
        let e = sigma_points(&s).unwrap();
        let w = e.weights.w_c;
        let mut mean = DVector::zeros(3);
        let mut cov = DMatrix::zeros(3, 3);
        for p in &e.points[1..] {
            mean += p * w;
            let d = p - &s.r;
            cov += &d * d.transpose() * w;
        }
        assert!((mean - &s.r).amax() < 1e-12);
        assert!((cov - c).amax() < 1e-12);
        assert_eq!(e.points[0], s.r);
    }

    #[test]
    fn zero_innovation_keeps_mean() {
        let s0 = GaussianState::new(DVector::from_vec(vec![0.4, -0.2]), DMatrix::identity(2, 2)).unwrap();
        let g = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 2.0]);
        let y = &g * &s0.r;
        let cfg = UkiConfig {
            alpha: 1.0,
            sigma_omega: DMatrix::identity(2, 2),
            sigma_eta: DMatrix::identity(2, 2),
            r0: DVector::zeros(2),
            iterations: 1,
        };
        let fwd = |m: &[f64]| Ok::<_, Infallible>((&g * DVector::from_column_slice(m)).as_slice().to_vec());
        let s1 = uki_step(&s0, &fwd, &y, &cfg).unwrap();
        assert!((s1.r - s0.r).amax() < 1e-14);
    }

    #[test]
    fn failed_step_truncates() {
        let s0 = GaussianState::new(DVector::zeros(1), DMatrix::from_element(1, 1, 1.0)).unwrap();
        let mut cfg = scalar_cfg();
        cfg.iterations = 3;
        let fwd = |m: &[f64]| {
            if m[0] > 1.2 {
                Ok::<_, Infallible>(vec![f64::NAN])
            } else {
                Ok(m.to_vec())
            }
        };
        // the first step's sigma points are within ±√2 ≈ 1.41, so even it fails
        let run = run_uki(&s0, &fwd, &DVector::from_element(1, 1.0), &cfg).unwrap();
        assert!(run.states.is_empty());
        assert!(matches!(run.failure, Some(UkiError::NonFiniteForward { point: 1 })));
    }

    #[test]
    fn non_spd_covariance_is_rejected() {
        let s = GaussianState::new(DVector::zeros(2), DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0])).unwrap();
        assert_eq!(sigma_points(&s).unwrap_err(), UkiError::NotSpd);
    }
}
