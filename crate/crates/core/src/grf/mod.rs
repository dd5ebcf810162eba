//! Gaussian random-field prior on the unit square.
//!
//! The covariance operator is `σ²(−Δ + τ²)^{−d}` with homogeneous Neumann
//! boundary conditions. Its eigenpairs are known in closed form:
//! `ψ_{k1,k2}(x, y) ∝ cos(k1 π x) cos(k2 π y)` with eigenvalue
//! `σ² (π²(k1² + k2²) + τ²)^{−d}`, so the truncated Karhunen–Loève
//! expansion is built directly from them.

pub mod io;

use std::f64::consts::PI;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GrfError {
    #[error("grid needs at least 2 nodes per axis, got {nx}x{ny}")]
    GridTooSmall { nx: usize, ny: usize },
    #[error("invalid prior parameter {name} = {value}; must be positive")]
    NonPositive { name: &'static str, value: f64 },
    #[error("n_modes must be at least 1")]
    NoModes,
    #[error("mode search bound {bound} yields only {found} modes, {requested} requested")]
    SearchBound {
        bound: usize,
        found: usize,
        requested: usize,
    },
    #[error("coefficient vector has {got} entries but the basis holds {available} modes")]
    TooManyCoefficients { got: usize, available: usize },
    #[error("field length {got} does not match grid with {expected} nodes")]
    FieldLength { got: usize, expected: usize },
}

/// Uniform node grid on `[0,1]²`. Node `(i, j)` sits at `(i/(nx−1), j/(ny−1))`
/// and is stored at flat index `j·nx + i` (row-major, rows along `y`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid2D {
    nx: usize,
    ny: usize,
}

impl Grid2D {
    pub fn new(nx: usize, ny: usize) -> Result<Self, GrfError> {
        if nx < 2 || ny < 2 {
            return Err(GrfError::GridTooSmall { nx, ny });
        }
        Ok(Self { nx, ny })
    }

    pub fn square(n: usize) -> Result<Self, GrfError> {
        Self::new(n, n)
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn hx(&self) -> f64 {
        1.0 / (self.nx - 1) as f64
    }

    pub fn hy(&self) -> f64 {
        1.0 / (self.ny - 1) as f64
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    #[inline]
    pub fn x(&self, i: usize) -> f64 {
        i as f64 * self.hx()
    }

    #[inline]
    pub fn y(&self, j: usize) -> f64 {
        j as f64 * self.hy()
    }

    /// Coordinates of every node in storage order.
    pub fn points(&self) -> Vec<[f64; 2]> {
        let mut pts = Vec::with_capacity(self.len());
        for j in 0..self.ny {
            for i in 0..self.nx {
                pts.push([self.x(i), self.y(j)]);
            }
        }
        pts
    }

    pub fn is_boundary(&self, i: usize, j: usize) -> bool {
        i == 0 || j == 0 || i + 1 == self.nx || j + 1 == self.ny
    }

    /// Trapezoidal quadrature weights; they are also the areas of the
    /// node-centred control volumes used by the conservative solvers.
    pub fn trapezoid_weights(&self) -> Vec<f64> {
        let (hx, hy) = (self.hx(), self.hy());
        let mut w = Vec::with_capacity(self.len());
        for j in 0..self.ny {
            let wy = if j == 0 || j + 1 == self.ny { 0.5 * hy } else { hy };
            for i in 0..self.nx {
                let wx = if i == 0 || i + 1 == self.nx { 0.5 * hx } else { hx };
                w.push(wx * wy);
            }
        }
        w
    }

    /// Field of node values of `f(x, y)`.
    pub fn evaluate(&self, f: impl Fn(f64, f64) -> f64) -> Field {
        let values = self.points().into_iter().map(|[x, y]| f(x, y)).collect();
        Field { grid: *self, values }
    }
}

/// Node values of a scalar field on a [`Grid2D`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Field {
    grid: Grid2D,
    values: Vec<f64>,
}

impl Field {
    pub fn new(grid: Grid2D, values: Vec<f64>) -> Result<Self, GrfError> {
        if values.len() != grid.len() {
            return Err(GrfError::FieldLength {
                got: values.len(),
                expected: grid.len(),
            });
        }
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: Grid2D) -> Self {
        Self::constant(grid, 0.0)
    }

    pub fn constant(grid: Grid2D, c: f64) -> Self {
        Self {
            grid,
            values: vec![c; grid.len()],
        }
    }

    pub fn grid(&self) -> Grid2D {
        self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[self.grid.index(i, j)]
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Euclidean norm of the node values.
    pub fn l2_nodes(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Trapezoidal integral over the unit square.
    pub fn integral(&self) -> f64 {
        self.grid
            .trapezoid_weights()
            .iter()
            .zip(&self.values)
            .map(|(w, v)| w * v)
            .sum()
    }
}

/// KL coefficients `ζ`, prior-standard-normal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorParams {
    /// Inverse length scale.
    pub tau: f64,
    /// Regularity exponent.
    pub d: f64,
    /// Amplitude.
    pub sigma: f64,
}

impl Default for PriorParams {
    fn default() -> Self {
        Self {
            tau: 3.0,
            d: 2.0,
            sigma: 1.0,
        }
    }
}

impl PriorParams {
    pub fn eigenvalue(&self, k1: usize, k2: usize) -> f64 {
        let k2sum = (k1 * k1 + k2 * k2) as f64;
        self.sigma * self.sigma * (PI * PI * k2sum + self.tau * self.tau).powf(-self.d)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KlMode {
    pub k1: usize,
    pub k2: usize,
    pub eigenvalue: f64,
    /// `ψ_k` at grid nodes, L²(Ω)-normalized.
    pub values: Vec<f64>,
}

/// Leading eigenpairs of the Neumann prior covariance, sampled on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct KlBasis {
    grid: Grid2D,
    params: PriorParams,
    modes: Vec<KlMode>,
}

/// Continuum L²-normalized Neumann eigenfunction `cos(k1πx)cos(k2πy)`.
pub fn cosine_mode(k1: usize, k2: usize, x: f64, y: f64) -> f64 {
    let scale = match (k1 == 0, k2 == 0) {
        (true, true) => 1.0,
        (false, false) => 2.0,
        _ => std::f64::consts::SQRT_2,
    };
    scale * (k1 as f64 * PI * x).cos() * (k2 as f64 * PI * y).cos()
}

/// Wave pairs of the `n_modes` largest eigenvalues, ties broken by `(k1, k2)`.
fn leading_wave_pairs(
    n_modes: usize,
    params: &PriorParams,
) -> Result<Vec<(usize, usize, f64)>, GrfError> {
    let bound = 4 * (n_modes as f64).sqrt().ceil() as usize;
    let mut pairs: Vec<(usize, usize, f64)> = (0..=bound)
        .flat_map(|k1| (0..=bound).map(move |k2| (k1, k2)))
        .map(|(k1, k2)| (k1, k2, params.eigenvalue(k1, k2)))
        .collect();
    if pairs.len() < n_modes {
        return Err(GrfError::SearchBound {
            bound,
            found: pairs.len(),
            requested: n_modes,
        });
    }
    // Eigenvalues depend on k1² + k2² only, so compare that integer exactly
    // instead of the floating-point eigenvalue.
    pairs.sort_by(|a, b| {
        let ra = a.0 * a.0 + a.1 * a.1;
        let rb = b.0 * b.0 + b.1 * b.1;
        ra.cmp(&rb).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1))
    });
    pairs.truncate(n_modes);
    Ok(pairs)
}

pub fn build_kl_basis(
    grid: Grid2D,
    n_modes: usize,
    tau: f64,
    d: f64,
    sigma: f64,
) -> Result<KlBasis, GrfError> {
    for (name, value) in [("tau", tau), ("d", d), ("sigma", sigma)] {
        if !(value > 0.0) || !value.is_finite() {
            return Err(GrfError::NonPositive { name, value });
        }
    }
    if n_modes == 0 {
        return Err(GrfError::NoModes);
    }
    let params = PriorParams { tau, d, sigma };
    let points = grid.points();
    let modes = leading_wave_pairs(n_modes, &params)?
        .into_iter()
        .map(|(k1, k2, eigenvalue)| KlMode {
            k1,
            k2,
            eigenvalue,
            values: points
                .iter()
                .map(|&[x, y]| cosine_mode(k1, k2, x, y))
                .collect(),
        })
        .collect();
    Ok(KlBasis {
        grid,
        params,
        modes,
    })
}

impl KlBasis {
    pub fn new(grid: Grid2D, n_modes: usize, params: PriorParams) -> Result<Self, GrfError> {
        build_kl_basis(grid, n_modes, params.tau, params.d, params.sigma)
    }

    pub fn grid(&self) -> Grid2D {
        self.grid
    }

    pub fn params(&self) -> PriorParams {
        self.params
    }

    pub fn modes(&self) -> &[KlMode] {
        &self.modes
    }

    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        self.modes.iter().map(|m| m.eigenvalue).collect()
    }

    /// `m(x) = Σ ζ_k √λ_k ψ_k(x)` over the first `zeta.len()` modes.
    pub fn sample_field(&self, zeta: &[f64]) -> Result<Field, GrfError> {
        if zeta.len() > self.modes.len() {
            return Err(GrfError::TooManyCoefficients {
                got: zeta.len(),
                available: self.modes.len(),
            });
        }
        let mut values = vec![0.0; self.grid.len()];
        for (z, mode) in zeta.iter().zip(&self.modes) {
            let a = z * mode.eigenvalue.sqrt();
            if a == 0.0 {
                continue;
            }
            for (v, psi) in values.iter_mut().zip(&mode.values) {
                *v += a * psi;
            }
        }
        Ok(Field {
            grid: self.grid,
            values,
        })
    }

    /// Field value at an arbitrary point, using the analytic eigenfunctions.
    pub fn evaluate_at(&self, zeta: &[f64], x: f64, y: f64) -> f64 {
        zeta.iter()
            .zip(&self.modes)
            .map(|(z, m)| z * m.eigenvalue.sqrt() * cosine_mode(m.k1, m.k2, x, y))
            .sum()
    }

    /// Pointwise variance `Σ λ_k ψ_k(x)²` of the truncated field.
    pub fn pointwise_variance(&self, n_modes: usize, x: f64, y: f64) -> f64 {
        self.modes
            .iter()
            .take(n_modes)
            .map(|m| m.eigenvalue * cosine_mode(m.k1, m.k2, x, y).powi(2))
            .sum()
    }
}

pub fn sample_field(basis: &KlBasis, zeta: &ParamVector) -> Result<Field, GrfError> {
    basis.sample_field(zeta.as_slice())
}

/// I.i.d. standard-normal coefficients.
pub fn draw_prior<R: Rng + ?Sized>(
    basis: &KlBasis,
    n_modes: usize,
    rng: &mut R,
) -> Result<ParamVector, GrfError> {
    if n_modes > basis.len() {
        return Err(GrfError::TooManyCoefficients {
            got: n_modes,
            available: basis.len(),
        });
    }
    Ok(ParamVector(standard_normal_vec(n_modes, rng)))
}

pub fn draw_prior_seeded(
    basis: &KlBasis,
    n_modes: usize,
    seed: u64,
) -> Result<ParamVector, GrfError> {
    draw_prior(basis, n_modes, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Out-of-distribution coefficients, i.i.d. uniform on `[−half_width, half_width]`.
pub fn draw_uniform<R: Rng + ?Sized>(n_modes: usize, half_width: f64, rng: &mut R) -> ParamVector {
    let dist = Uniform::new_inclusive(-half_width, half_width).expect("finite bounds");
    ParamVector((0..n_modes).map(|_| dist.sample(rng)).collect())
}

pub fn standard_normal_vec<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}
