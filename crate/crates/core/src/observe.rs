//! Point observations, synthetic noisy data and the least-squares misfit.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grf::{standard_normal_vec, Field, Grid2D};

#[derive(Debug, Error, PartialEq)]
pub enum ObserveError {
    #[error("sensor ({x}, {y}) lies outside the unit square")]
    OutsideDomain { x: f64, y: f64 },
    #[error("negative noise level {0}")]
    NegativeDelta(f64),
    #[error("reference data is identically zero, so relative noise gives a singular covariance")]
    SingularNoise,
    #[error("dimension mismatch: {what} has length {got}, expected {expected}")]
    Dimension {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("noise covariance is not positive definite")]
    NotPositiveDefinite,
}

/// Default covariance floor used when the noise level is zero.
pub const NOISE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorArray {
    pub locations: Vec<[f64; 2]>,
}

impl SensorArray {
    pub fn new(locations: Vec<[f64; 2]>) -> Result<Self, ObserveError> {
        for &[x, y] in &locations {
            if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
                return Err(ObserveError::OutsideDomain { x, y });
            }
        }
        Ok(Self { locations })
    }

    /// `n×n` equidistant interior lattice `{(i/(n+1), j/(n+1))}`, `i, j = 1..n`,
    /// listed with `x` varying fastest.
    pub fn interior_lattice(n: usize) -> Self {
        let d = (n + 1) as f64;
        let locations = (1..=n)
            .flat_map(|j| (1..=n).map(move |i| [i as f64 / d, j as f64 / d]))
            .collect();
        Self { locations }
    }

    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }
}

/// Flat node indices and weights of the bilinear stencil at `(x, y)`.
pub fn bilinear_stencil(g: Grid2D, x: f64, y: f64) -> Result<[(usize, f64); 4], ObserveError> {
    if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
        return Err(ObserveError::OutsideDomain { x, y });
    }
    let fx = x / g.hx();
    let fy = y / g.hy();
    let i = (fx.floor() as usize).min(g.nx() - 2);
    let j = (fy.floor() as usize).min(g.ny() - 2);
    let tx = fx - i as f64;
    let ty = fy - j as f64;
    Ok([
        (g.index(i, j), (1.0 - tx) * (1.0 - ty)),
        (g.index(i + 1, j), tx * (1.0 - ty)),
        (g.index(i, j + 1), (1.0 - tx) * ty),
        (g.index(i + 1, j + 1), tx * ty),
    ])
}

/// Bilinear interpolation of node values at `(x, y)`.
pub fn interpolate(u: &Field, x: f64, y: f64) -> Result<f64, ObserveError> {
    let v = u.values();
    Ok(bilinear_stencil(u.grid(), x, y)?.iter().map(|(k, w)| w * v[*k]).sum())
}

pub fn observe(u: &Field, sensors: &SensorArray) -> Result<Vec<f64>, ObserveError> {
    sensors
        .locations
        .iter()
        .map(|&[x, y]| interpolate(u, x, y))
        .collect()
}

/// Noisy observations with covariance `noise_variance · I`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationData {
    pub locations: Vec<[f64; 2]>,
    /// Observation times for time-resolved data; empty for stationary data.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub times: Vec<f64>,
    pub delta: f64,
    pub seed: u64,
    pub y_obs: Vec<f64>,
    pub noise_variance: f64,
}

impl ObservationData {
    pub fn len(&self) -> usize {
        self.y_obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y_obs.is_empty()
    }

    pub fn noise_cov(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal_element(self.len(), self.len(), self.noise_variance)
    }

    pub fn y(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.y_obs)
    }
}

/// `y_obs = y_ref + max|y_ref| · δ · ξ` with i.i.d. standard-normal `ξ` per entry.
pub fn synthesize_data(y_ref: &[f64], delta: f64, seed: u64) -> Result<ObservationData, ObserveError> {
    synthesize_data_with_floor(y_ref, delta, seed, NOISE_FLOOR)
}

pub fn synthesize_data_with_floor(
    y_ref: &[f64],
    delta: f64,
    seed: u64,
    floor: f64,
) -> Result<ObservationData, ObserveError> {
    if !(delta >= 0.0) {
        return Err(ObserveError::NegativeDelta(delta));
    }
    let scale = y_ref.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let std = scale * delta;
    if delta > 0.0 && std == 0.0 {
        return Err(ObserveError::SingularNoise);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xi = standard_normal_vec(y_ref.len(), &mut rng);
    let y_obs = y_ref.iter().zip(&xi).map(|(y, e)| y + std * e).collect();
    let noise_variance = if delta == 0.0 { floor } else { std * std };
    Ok(ObservationData {
        locations: Vec::new(),
        times: Vec::new(),
        delta,
        seed,
        y_obs,
        noise_variance,
    })
}

/// `Φ = ½ (y − g)ᵀ Σ_η⁻¹ (y − g)` for the diagonal noise model.
pub fn misfit(g: &[f64], data: &ObservationData) -> Result<f64, ObserveError> {
    if g.len() != data.len() {
        return Err(ObserveError::Dimension {
            what: "model output",
            got: g.len(),
            expected: data.len(),
        });
    }
    let ss: f64 = g.iter().zip(&data.y_obs).map(|(g, y)| (y - g).powi(2)).sum();
    Ok(0.5 * ss / data.noise_variance)
}

/// Misfit with a general SPD covariance, via its Cholesky factor.
pub fn misfit_with_cov(g: &[f64], y: &[f64], cov: &DMatrix<f64>) -> Result<f64, ObserveError> {
    if g.len() != y.len() || cov.nrows() != y.len() || cov.ncols() != y.len() {
        return Err(ObserveError::Dimension {
            what: "covariance",
            got: cov.nrows(),
            expected: y.len(),
        });
    }
    let chol = cov.clone().cholesky().ok_or(ObserveError::NotPositiveDefinite)?;
    let r = DVector::from_iterator(y.len(), y.iter().zip(g).map(|(y, g)| y - g));
    let w = chol.l().solve_lower_triangular(&r).ok_or(ObserveError::NotPositiveDefinite)?;
    Ok(0.5 * w.norm_squared())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grf::Grid2D;
    use nalgebra::SymmetricEigen;

    fn data(y: Vec<f64>, var: f64) -> ObservationData {
        ObservationData {
            locations: Vec::new(),
            times: Vec::new(),
            delta: 0.0,
            seed: 0,
            y_obs: y,
            noise_variance: var,
        }
    }

    #[test]
    fn node_sensor_reads_node_value() {
        let g = Grid2D::new(5, 4).unwrap();
        let u = g.evaluate(|x, y| (3.0 * x).sin() + y * y);
        let s = SensorArray::new(vec![[0.25, 2.0 / 3.0], [1.0, 1.0], [0.0, 0.0]]).unwrap();
        let r = observe(&u, &s).unwrap();
        assert!((r[0] - u.at(1, 2)).abs() < 1e-14);
        assert!((r[1] - u.at(4, 3)).abs() < 1e-14);
        assert!((r[2] - u.at(0, 0)).abs() < 1e-14);
    }

    #[test]
    fn constant_field_reads_constant() {
        let u = Field::constant(Grid2D::square(7).unwrap(), 2.5);
        let r = observe(&u, &SensorArray::interior_lattice(6)).unwrap();
        assert_eq!(r.len(), 36);
        assert!(r.iter().all(|v| (v - 2.5).abs() < 1e-14));
    }

    #[test]
    fn cell_centre_averages_corners() {
        let g = Grid2D::square(3).unwrap();
        let u = g.evaluate(|x, y| x * y);
        // cell [0.5,1]x[0,0.5]; corners 0, 0, 0.25, 0.5 -> mean 0.1875
        let v = interpolate(&u, 0.75, 0.25).unwrap();
        assert!((v - 0.1875).abs() < 1e-15);
        assert!(matches!(interpolate(&u, 1.1, 0.2), Err(ObserveError::OutsideDomain { .. })));
        assert!(SensorArray::new(vec![[-0.1, 0.0]]).is_err());
    }

    #[test]
    fn lattice_is_interior_and_equidistant() {
        let s = SensorArray::interior_lattice(6);
        assert_eq!(s.locations[0], [1.0 / 7.0, 1.0 / 7.0]);
        assert_eq!(s.locations[1], [2.0 / 7.0, 1.0 / 7.0]);
        assert_eq!(s.locations[35], [6.0 / 7.0, 6.0 / 7.0]);
    }

    #[test]
    fn noise_covariance_from_relative_level() {
        let d = synthesize_data(&[1.0, -2.0], 0.01, 4).unwrap();
        assert!((d.noise_variance - 0.02f64.powi(2)).abs() < 1e-18);
        let d0 = synthesize_data(&[1.0, -2.0], 0.0, 4).unwrap();
        assert_eq!(d0.y_obs, vec![1.0, -2.0]);
        assert_eq!(d0.noise_variance, NOISE_FLOOR);
        assert_eq!(synthesize_data(&[0.0, 0.0], 0.1, 1), Err(ObserveError::SingularNoise));
        assert!(synthesize_data(&[1.0], -0.1, 1).is_err());
        assert_eq!(synthesize_data(&[1.0, 3.0], 0.1, 9), synthesize_data(&[1.0, 3.0], 0.1, 9));
    }

    #[test]
    fn empirical_noise_std() {
        let y_ref = [0.5, -4.0, 1.0];
        let n = 10_000;
        let mut ss = 0.0;
        for seed in 0..n {
            let d = synthesize_data(&y_ref, 0.05, seed).unwrap();
            ss += (d.y_obs[0] - y_ref[0]).powi(2);
        }
        let std = (ss / n as f64).sqrt();
        assert!((std - 0.2).abs() / 0.2 < 0.03, "{std}");
    }

    #[test]
    fn misfit_values() {
        assert_eq!(misfit(&[1.0, 2.0], &data(vec![1.0, 2.0], 1.0)).unwrap(), 0.0);
        assert!((misfit(&[0.0, 0.0], &data(vec![3.0, 4.0], 1.0)).unwrap() - 12.5).abs() < 1e-14);
        let a = misfit(&[0.3, 0.1], &data(vec![1.0, -1.0], 1.0)).unwrap();
        let b = misfit(&[0.3, 0.1], &data(vec![1.0, -1.0], 4.0)).unwrap();
        assert!((b - a / 4.0).abs() < 1e-15);
        assert!(matches!(
            misfit(&[1.0], &data(vec![1.0, 2.0], 1.0)),
            Err(ObserveError::Dimension { .. })
        ));
    }

    /// ‖Σ^{-1/2} r‖² via an explicit symmetric square root.
    #[test]
    fn weighted_norm_matches_explicit_square_root() {
        let cases = [
            (DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]), [1.0, -2.0]),
            (DMatrix::from_row_slice(2, 2, &[0.3, -0.1, -0.1, 0.7]), [0.4, 0.9]),
        ];
        for (cov, r) in cases {
            let eig = SymmetricEigen::new(cov.clone());
            let inv_sqrt = &eig.eigenvectors
                * DMatrix::from_diagonal(&eig.eigenvalues.map(|l: f64| 1.0 / l.sqrt()))
                * eig.eigenvectors.transpose();
            let w = inv_sqrt * DVector::from_column_slice(&r);
            let expected = 0.5 * w.norm_squared();
            let got = misfit_with_cov(&[0.0, 0.0], &r, &cov).unwrap();
            assert!((got - expected).abs() < 1e-12);
        }
        let diag = DMatrix::from_diagonal_element(2, 2, 0.25);
        let d = data(vec![1.0, 2.0], 0.25);
        assert!(
            (misfit_with_cov(&[0.0, 0.5], &d.y_obs, &diag).unwrap() - misfit(&[0.0, 0.5], &d).unwrap())
                .abs()
                < 1e-12
        );
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn misfit_nonnegative_and_zero_only_at_data(
                y in proptest::collection::vec(-5.0..5.0f64, 4),
                g in proptest::collection::vec(-5.0..5.0f64, 4),
            ) {
                let d = data(y.clone(), 0.3);
                let m = misfit(&g, &d).unwrap();
                prop_assert!(m >= 0.0);
                prop_assert_eq!(m == 0.0, g == y);
            }

            #[test]
            fn observe_is_linear(a in -3.0..3.0f64, b in -3.0..3.0f64, seed in 0u64..1000) {
                let grid = Grid2D::new(6, 5).unwrap();
                let u = grid.evaluate(|x, y| (x * 7.0 + seed as f64).sin() * y);
                let v = grid.evaluate(|x, y| (y * 3.0).cos() + x);
                let w = Field::new(grid, u.values().iter().zip(v.values()).map(|(p, q)| a * p + b * q).collect()).unwrap();
                let s = SensorArray::new(vec![[0.13, 0.77], [0.5, 0.5], [0.99, 0.01]]).unwrap();
                let (ou, ov, ow) = (observe(&u, &s).unwrap(), observe(&v, &s).unwrap(), observe(&w, &s).unwrap());
                for k in 0..3 {
                    prop_assert!((ow[k] - (a * ou[k] + b * ov[k])).abs() < 1e-12);
                }
            }
        }
    }
}
