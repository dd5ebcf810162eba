//! Fixed points of the UKI map for linear forward models, and a numerical
//! check that surrogate errors propagate to the fixed point at first order.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grf::standard_normal_vec;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinearTheoryError {
    #[error("fixed-point iteration did not converge in {iters} iterations (last change {change:e})")]
    NoConvergence { iters: usize, change: f64 },
    #[error("matrix is not symmetric positive definite: {0}")]
    NotSpd(&'static str),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid input: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub g: DMatrix<f64>,
    pub sigma_eta: DMatrix<f64>,
    pub sigma_omega: DMatrix<f64>,
    pub alpha: f64,
    pub r0: DVector<f64>,
    pub y: DVector<f64>,
}

impl LinearModel {
    pub fn n_params(&self) -> usize {
        self.g.ncols()
    }

    pub fn n_obs(&self) -> usize {
        self.g.nrows()
    }

    pub fn validate(&self) -> Result<(), LinearTheoryError> {
        let (ny, nm) = self.g.shape();
        if self.sigma_eta.shape() != (ny, ny) || self.y.len() != ny {
            return Err(LinearTheoryError::Dimension("noise covariance or data".into()));
        }
        if self.sigma_omega.shape() != (nm, nm) || self.r0.len() != nm {
            return Err(LinearTheoryError::Dimension("evolution covariance or anchor".into()));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(LinearTheoryError::Invalid(format!("alpha = {}", self.alpha)));
        }
        Ok(())
    }

    /// Same model with a different forward matrix.
    pub fn with_forward(&self, g: DMatrix<f64>) -> Self {
        Self { g, ..self.clone() }
    }

    /// A random well-posed model: Gaussian `G`, identity-scaled noise and
    /// evolution covariances.
    pub fn random(n_obs: usize, n_params: usize, alpha: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = DMatrix::from_vec(n_obs, n_params, standard_normal_vec(n_obs * n_params, &mut rng))
            + DMatrix::identity(n_obs, n_params);
        let y = DVector::from_vec(standard_normal_vec(n_obs, &mut rng));
        Self {
            g,
            sigma_eta: DMatrix::identity(n_obs, n_obs) * 0.1,
            sigma_omega: DMatrix::identity(n_params, n_params) * (2.0 - alpha * alpha),
            alpha,
            r0: DVector::zeros(n_params),
            y,
        }
    }
}

/// One exact UKI step for a linear model, written in closed form.
pub fn linear_uki_map(
    model: &LinearModel,
    r: &DVector<f64>,
    c: &DMatrix<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>), LinearTheoryError> {
    let a = model.alpha;
    let r_hat = r * a + &model.r0 * (1.0 - a);
    let c_hat = c * (a * a) + &model.sigma_omega;
    let c_my = &c_hat * model.g.transpose();
    let c_yy = &model.g * &c_my + &model.sigma_eta;
    let chol = c_yy.cholesky().ok_or(LinearTheoryError::NotSpd("innovation covariance"))?;
    let gain = chol.solve(&c_my.transpose()).transpose();
    let r_next = &r_hat + &gain * (&model.y - &model.g * &r_hat);
    let c_next = &c_hat - &gain * c_my.transpose();
    Ok((r_next, (&c_next + c_next.transpose()) * 0.5))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedPoint {
    pub r_inf: DVector<f64>,
    pub c_inf: DMatrix<f64>,
    pub iterations: usize,
    /// Residual of `C⁻¹ = GᵀΣ_η⁻¹G + (α²C + Σ_ω)⁻¹`.
    pub residual_cov: f64,
    /// Residual of `C⁻¹r = GᵀΣ_η⁻¹y + (α²C + Σ_ω)⁻¹(αr + (1 − α)r₀)`.
    pub residual_mean: f64,
}

impl FixedPoint {
    pub fn c_inv(&self) -> Result<DMatrix<f64>, LinearTheoryError> {
        spd_inverse(&self.c_inf, "fixed-point covariance")
    }
}

fn spd_inverse(m: &DMatrix<f64>, what: &'static str) -> Result<DMatrix<f64>, LinearTheoryError> {
    Ok(m.clone().cholesky().ok_or(LinearTheoryError::NotSpd(what))?.inverse())
}

/// Relative residuals of the fixed-point equations at `(r, C)`.
pub fn fixed_point_residuals(
    model: &LinearModel,
    r: &DVector<f64>,
    c: &DMatrix<f64>,
) -> Result<(f64, f64), LinearTheoryError> {
    let a = model.alpha;
    let eta_inv = spd_inverse(&model.sigma_eta, "noise covariance")?;
    let c_inv = spd_inverse(c, "covariance")?;
    let pred_inv = spd_inverse(&(c * (a * a) + &model.sigma_omega), "predicted covariance")?;
    let info = model.g.transpose() * &eta_inv * &model.g;
    let lhs_c = &c_inv;
    let rhs_c = &info + &pred_inv;
    let res_c = (lhs_c - &rhs_c).norm() / rhs_c.norm();
    let lhs_r = &c_inv * r;
    let rhs_r = model.g.transpose() * &eta_inv * &model.y + &pred_inv * (r * a + &model.r0 * (1.0 - a));
    let res_r = (&lhs_r - &rhs_r).norm() / rhs_r.norm().max(f64::MIN_POSITIVE);
    Ok((res_c, res_r))
}

/// Iterates the exact linear UKI map from `(r₀, Σ_ω)` until successive
/// iterates change by less than `tol`.
pub fn solve_fixed_point(model: &LinearModel, tol: f64, max_iter: usize) -> Result<FixedPoint, LinearTheoryError> {
    model.validate()?;
    let mut r = model.r0.clone();
    let mut c = model.sigma_omega.clone();
    let mut change = f64::INFINITY;
    for it in 1..=max_iter {
        let (rn, cn) = linear_uki_map(model, &r, &c)?;
        change = (&rn - &r).amax().max((&cn - &c).amax());
        r = rn;
        c = cn;
        if change < tol {
            let (residual_cov, residual_mean) = fixed_point_residuals(model, &r, &c)?;
            return Ok(FixedPoint {
                r_inf: r,
                c_inf: c,
                iterations: it,
                residual_cov,
                residual_mean,
            });
        }
    }
    Err(LinearTheoryError::NoConvergence { iters: max_iter, change })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorAtEps {
    pub eps: f64,
    pub mean_error: f64,
    pub precision_error: f64,
    /// `‖ĜᵀΣ_η⁻¹Ĝ‖₂` of the perturbed model.
    pub perturbed_information_norm: f64,
    pub lemma_holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBoundReport {
    pub seed: u64,
    pub n_obs: usize,
    pub n_params: usize,
    pub alpha: f64,
    /// `‖GᵀΣ_η⁻¹G‖₂` of the reference model.
    pub information_norm: f64,
    pub rows: Vec<ErrorAtEps>,
    pub mean_slope: f64,
    pub precision_slope: f64,
    pub slope_window: [f64; 2],
    pub mean_slope_ok: bool,
    pub precision_slope_ok: bool,
    pub lemma_ok: bool,
    pub passed: bool,
}

pub const SLOPE_WINDOW: [f64; 2] = [0.8, 1.2];
const FP_TOL: f64 = 1e-14;
const FP_MAX_ITER: usize = 100_000;

/// A perturbation direction with unit spectral norm.
pub fn unit_direction(n_obs: usize, n_params: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let e = DMatrix::from_vec(n_obs, n_params, standard_normal_vec(n_obs * n_params, &mut rng));
    let s = spectral_norm(&e);
    e / s
}

pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    m.clone().svd(false, false).singular_values.max()
}

/// Errors between the fixed points of `G` and `G + ε E`.
pub fn fixed_point_errors(
    model: &LinearModel,
    reference: &FixedPoint,
    direction: &DMatrix<f64>,
    eps: f64,
) -> Result<ErrorAtEps, LinearTheoryError> {
    let perturbed = model.with_forward(&model.g + direction * eps);
    let fp = solve_fixed_point(&perturbed, FP_TOL, FP_MAX_ITER)?;
    let eta_inv = spd_inverse(&model.sigma_eta, "noise covariance")?;
    let info_hat = perturbed.g.transpose() * eta_inv * &perturbed.g;
    let info_norm = spectral_norm(&info_hat);
    Ok(ErrorAtEps {
        eps,
        mean_error: (&reference.r_inf - &fp.r_inf).norm(),
        precision_error: spectral_norm(&(reference.c_inv()? - fp.c_inv()?)),
        perturbed_information_norm: info_norm,
        lemma_holds: info_norm > 0.0,
    })
}

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

pub fn verify_error_bound(model: &LinearModel, eps_list: &[f64], seed: u64) -> Result<ErrorBoundReport, LinearTheoryError> {
    model.validate()?;
    if eps_list.len() < 2 {
        return Err(LinearTheoryError::Invalid("need at least two perturbation scales".into()));
    }
    if eps_list.iter().any(|e| !(*e > 0.0)) || eps_list.windows(2).any(|w| w[1] >= w[0]) {
        return Err(LinearTheoryError::Invalid("perturbation scales must be positive and decreasing".into()));
    }
    let reference = solve_fixed_point(model, FP_TOL, FP_MAX_ITER)?;
    let direction = unit_direction(model.n_obs(), model.n_params(), seed);
    let rows = eps_list
        .par_iter()
        .map(|&eps| fixed_point_errors(model, &reference, &direction, eps))
        .collect::<Result<Vec<_>, _>>()?;
    let eps: Vec<f64> = rows.iter().map(|r| r.eps).collect();
    let mean_slope = loglog_slope(&eps, &rows.iter().map(|r| r.mean_error).collect::<Vec<_>>());
    let precision_slope = loglog_slope(&eps, &rows.iter().map(|r| r.precision_error).collect::<Vec<_>>());
    let in_window = |s: f64| s >= SLOPE_WINDOW[0] && s <= SLOPE_WINDOW[1];
    let eta_inv = spd_inverse(&model.sigma_eta, "noise covariance")?;
    let information_norm = spectral_norm(&(model.g.transpose() * eta_inv * &model.g));
    let lemma_ok = rows.iter().all(|r| r.lemma_holds);
    let (mean_slope_ok, precision_slope_ok) = (in_window(mean_slope), in_window(precision_slope));
    Ok(ErrorBoundReport {
        seed,
        n_obs: model.n_obs(),
        n_params: model.n_params(),
        alpha: model.alpha,
        information_norm,
        rows,
        mean_slope,
        precision_slope,
        slope_window: SLOPE_WINDOW,
        mean_slope_ok,
        precision_slope_ok,
        lemma_ok,
        passed: mean_slope_ok && precision_slope_ok && lemma_ok,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(alpha: f64, g: f64, omega: f64, y: f64) -> LinearModel {
        LinearModel {
            g: DMatrix::from_element(1, 1, g),
            sigma_eta: DMatrix::from_element(1, 1, 1.0),
            sigma_omega: DMatrix::from_element(1, 1, omega),
            alpha,
            r0: DVector::zeros(1),
            y: DVector::from_element(1, y),
        }
    }

    #[test]
    fn scalar_golden_ratio() {
        let fp = solve_fixed_point(&scalar(1.0, 1.0, 1.0, 0.7), 1e-14, 1000).unwrap();
        let golden = (5.0f64.sqrt() - 1.0) / 2.0;
        assert!((fp.c_inf[(0, 0)] - golden).abs() < 1e-12);
        assert!((fp.r_inf[0] - 0.7).abs() < 1e-12);
        assert!(fp.residual_cov < 1e-12 && fp.residual_mean < 1e-12);
    }

    #[test]
    fn no_data_limit() {
        let alpha = 0.6;
        let fp = solve_fixed_point(&scalar(alpha, 0.0, 0.5, 1.0), 1e-14, 10_000).unwrap();
        assert!((fp.c_inf[(0, 0)] - 0.5 / (1.0 - alpha * alpha)).abs() < 1e-10);
    }

    #[test]
    fn anchor_term_enters_mean_equation() {
        let mut m = LinearModel::random(3, 2, 0.5, 4);
        m.r0 = DVector::from_vec(vec![1.0, -2.0]);
        let fp = solve_fixed_point(&m, 1e-14, 10_000).unwrap();
        assert!(fp.residual_mean < 1e-10, "{}", fp.residual_mean);
    }

    #[test]
    fn zero_perturbation_gives_zero_error() {
        let m = LinearModel::random(4, 4, 1.0, 1);
        let fp = solve_fixed_point(&m, FP_TOL, FP_MAX_ITER).unwrap();
        let e = fixed_point_errors(&m, &fp, &unit_direction(4, 4, 2), 0.0).unwrap();
        assert!(e.mean_error < 1e-12 && e.precision_error < 1e-10);
    }

    #[test]
    fn unit_direction_has_unit_norm() {
        assert!((spectral_norm(&unit_direction(4, 3, 9)) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn slope_of_power_law() {
        let x = [1.0, 0.1, 0.01];
        let y: Vec<f64> = x.iter().map(|v: &f64| 3.0 * v.powf(1.5)).collect();
        assert!((loglog_slope(&x, &y) - 1.5).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_eps_lists() {
        let m = LinearModel::random(2, 2, 1.0, 0);
        assert!(verify_error_bound(&m, &[0.1], 0).is_err());
        assert!(verify_error_bound(&m, &[0.01, 0.1], 0).is_err());
        assert!(verify_error_bound(&m, &[0.1, 0.0], 0).is_err());
    }
}
