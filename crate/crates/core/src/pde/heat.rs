//! Implicit-Euler heat solvers.
//!
//! The Neumann solver uses node-centred control volumes (trapezoid areas),
//! so with no source the weighted total heat is an exact discrete invariant.
//! The Dirichlet solver is the classic 5-point scheme on interior nodes.

use std::f64::consts::PI;

use crate::grf::{Field, Grid2D};
use crate::linalg::{BandedLu, BandedMatrix};

use super::PdeError;

/// Symmetric stiffness matrix `K` of the node-centred finite-volume Neumann
/// Laplacian: `W du/dt = −K u` with `W` the control-volume areas.
pub(crate) fn neumann_stiffness(grid: Grid2D) -> BandedMatrix {
    let (nx, ny) = (grid.nx(), grid.ny());
    let (hx, hy) = (grid.hx(), grid.hy());
    let mut k = BandedMatrix::zeros(grid.len(), nx);
    let mut couple = |p: usize, q: usize, c: f64| {
        k.add(p, p, c);
        k.add(q, q, c);
        k.add(p, q, -c);
        k.add(q, p, -c);
    };
    for j in 0..ny {
        let face = if j == 0 || j + 1 == ny { 0.5 * hy } else { hy };
        for i in 0..nx - 1 {
            couple(grid.index(i, j), grid.index(i + 1, j), face / hx);
        }
    }
    for j in 0..ny - 1 {
        for i in 0..nx {
            let face = if i == 0 || i + 1 == nx { 0.5 * hx } else { hx };
            couple(grid.index(i, j), grid.index(i, j + 1), face / hy);
        }
    }
    k
}

/// Implicit Euler for `u_t − Δu = f` with zero-flux walls.
pub struct NeumannHeatStepper {
    grid: Grid2D,
    dt: f64,
    weights: Vec<f64>,
    lu: BandedLu,
}

impl NeumannHeatStepper {
    pub fn new(grid: Grid2D, dt: f64) -> Result<Self, PdeError> {
        let weights = grid.trapezoid_weights();
        let mut a = neumann_stiffness(grid).scaled_plus_identity(dt, 0.0);
        for (p, w) in weights.iter().enumerate() {
            a.add(p, p, *w);
        }
        Ok(Self {
            grid,
            dt,
            weights,
            lu: a.factor()?,
        })
    }

    pub fn grid(&self) -> Grid2D {
        self.grid
    }

    /// Advances `u` by one step; `source` is `f` at the new time level.
    pub fn step(&self, u: &mut [f64], source: Option<&[f64]>) -> Result<(), PdeError> {
        let rhs: Vec<f64> = match source {
            Some(f) => (0..u.len())
                .map(|p| self.weights[p] * (u[p] + self.dt * f[p]))
                .collect(),
            None => u.iter().zip(&self.weights).map(|(u, w)| u * w).collect(),
        };
        let next = self.lu.solve(&rhs)?;
        u.copy_from_slice(&next);
        Ok(())
    }
}

/// Implicit Euler for `u_t − Δu = f` with `u = 0` on the boundary.
pub struct DirichletHeatStepper {
    grid: Grid2D,
    dt: f64,
    lu: BandedLu,
}

impl DirichletHeatStepper {
    pub fn new(grid: Grid2D, dt: f64) -> Result<Self, PdeError> {
        let (nx, ny) = (grid.nx(), grid.ny());
        if nx < 3 || ny < 3 {
            return Err(PdeError::InvalidConfig("Dirichlet grid needs interior nodes".into()));
        }
        let (mx, my) = (nx - 2, ny - 2);
        let (ax, ay) = (dt / (grid.hx() * grid.hx()), dt / (grid.hy() * grid.hy()));
        let mut a = BandedMatrix::zeros(mx * my, mx);
        for j in 0..my {
            for i in 0..mx {
                let p = j * mx + i;
                a.add(p, p, 1.0 + 2.0 * ax + 2.0 * ay);
                if i > 0 {
                    a.add(p, p - 1, -ax);
                }
                if i + 1 < mx {
                    a.add(p, p + 1, -ax);
                }
                if j > 0 {
                    a.add(p, p - mx, -ay);
                }
                if j + 1 < my {
                    a.add(p, p + mx, -ay);
                }
            }
        }
        Ok(Self {
            grid,
            dt,
            lu: a.factor()?,
        })
    }

    /// Advances the full-grid field `u`; boundary values are forced to zero.
    pub fn step(&self, u: &mut [f64], source: Option<&[f64]>) -> Result<(), PdeError> {
        let (nx, ny) = (self.grid.nx(), self.grid.ny());
        let mx = nx - 2;
        let mut rhs = vec![0.0; mx * (ny - 2)];
        for j in 1..ny - 1 {
            for i in 1..nx - 1 {
                let g = self.grid.index(i, j);
                let f = source.map_or(0.0, |s| s[g]);
                rhs[(j - 1) * mx + (i - 1)] = u[g] + self.dt * f;
            }
        }
        let sol = self.lu.solve(&rhs)?;
        u.fill(0.0);
        for j in 1..ny - 1 {
            for i in 1..nx - 1 {
                u[self.grid.index(i, j)] = sol[(j - 1) * mx + (i - 1)];
            }
        }
        Ok(())
    }
}

/// Point heat source of a given strength switched off at `t_cut`, observed
/// at fixed snapshot times. Zero initial state, zero-flux walls.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatLocProblem {
    pub grid: Grid2D,
    /// Source strength `s`.
    pub strength: f64,
    /// Source width.
    pub width: f64,
    pub t_cut: f64,
    pub obs_times: Vec<f64>,
    /// Implicit-Euler steps over `[0, max(obs_times)]`.
    pub steps: usize,
}

impl HeatLocProblem {
    pub fn new(grid: Grid2D) -> Self {
        Self {
            grid,
            strength: 5.0,
            width: 0.1,
            t_cut: 0.05,
            obs_times: vec![0.05, 0.15],
            steps: 120,
        }
    }

    pub fn dt(&self) -> f64 {
        self.horizon() / self.steps as f64
    }

    fn horizon(&self) -> f64 {
        self.obs_times.iter().copied().fold(0.0, f64::max)
    }

    /// Step indices at which each observation time is reached.
    pub fn snapshot_steps(&self) -> Result<Vec<usize>, PdeError> {
        let dt = self.dt();
        self.obs_times
            .iter()
            .map(|&t| {
                let k = (t / dt).round();
                if (k * dt - t).abs() > 1e-9 * t.max(1.0) || k < 1.0 {
                    Err(PdeError::InvalidConfig(format!(
                        "observation time {t} is not a multiple of dt = {dt}"
                    )))
                } else {
                    Ok(k as usize)
                }
            })
            .collect()
    }

    pub fn source_field(&self, chi: [f64; 2]) -> Vec<f64> {
        let s2 = self.width * self.width;
        let amp = self.strength / (2.0 * PI * s2);
        self.grid
            .points()
            .into_iter()
            .map(|[x, y]| {
                let r2 = (x - chi[0]).powi(2) + (y - chi[1]).powi(2);
                amp * (-r2 / (2.0 * s2)).exp()
            })
            .collect()
    }
}

/// Snapshots of the temperature at `problem.obs_times` for source location `chi`.
pub fn solve_heat_loc(problem: &HeatLocProblem, chi: [f64; 2]) -> Result<Vec<Field>, PdeError> {
    if !chi.iter().all(|c| c.is_finite()) {
        return Err(PdeError::NonFinite { index: 0 });
    }
    let snaps = problem.snapshot_steps()?;
    let dt = problem.dt();
    let stepper = NeumannHeatStepper::new(problem.grid, dt)?;
    let source = problem.source_field(chi);
    let mut u = vec![0.0; problem.grid.len()];
    let last = snaps.iter().copied().max().unwrap_or(0);
    let mut out: Vec<Option<Field>> = vec![None; snaps.len()];
    for n in 1..=last {
        let t = n as f64 * dt;
        // H(t − T) switches the source off strictly after the cut time
        let active = t <= problem.t_cut * (1.0 + 1e-12);
        stepper.step(&mut u, active.then_some(source.as_slice()))?;
        for (slot, &k) in out.iter_mut().zip(&snaps) {
            if k == n {
                *slot = Some(Field::new(problem.grid, u.clone()).expect("grid-sized"));
            }
        }
    }
    Ok(out.into_iter().map(|f| f.expect("every snapshot step is visited")).collect())
}

/// Source `e^{−t} m(x)` over `t ∈ [0, horizon]`, zero Dirichlet walls.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatFieldProblem {
    pub grid: Grid2D,
    pub horizon: f64,
    pub steps: usize,
    pub initial: Field,
}

impl HeatFieldProblem {
    /// Initial state `100 sin(x) sin(y)`; its values on the boundary are
    /// discarded by the first step.
    pub fn new(grid: Grid2D) -> Self {
        Self {
            grid,
            horizon: 1.0,
            steps: 50,
            initial: grid.evaluate(|x, y| 100.0 * x.sin() * y.sin()),
        }
    }
}

pub fn solve_heat_field(problem: &HeatFieldProblem, m: &Field) -> Result<Field, PdeError> {
    if m.grid() != problem.grid || problem.initial.grid() != problem.grid {
        return Err(PdeError::GridMismatch);
    }
    if let Some(k) = m.values().iter().position(|v| !v.is_finite()) {
        return Err(PdeError::NonFinite { index: k });
    }
    if problem.steps == 0 {
        return Err(PdeError::InvalidConfig("heat solver needs at least one step".into()));
    }
    let dt = problem.horizon / problem.steps as f64;
    let stepper = DirichletHeatStepper::new(problem.grid, dt)?;
    let mut u = problem.initial.values().to_vec();
    let mut f = vec![0.0; u.len()];
    for n in 1..=problem.steps {
        let decay = (-(n as f64) * dt).exp();
        for (fi, mi) in f.iter_mut().zip(m.values()) {
            *fi = decay * mi;
        }
        stepper.step(&mut u, Some(&f))?;
    }
    Ok(Field::new(problem.grid, u).expect("grid-sized"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_strength_gives_zero_snapshots() {
        let mut p = HeatLocProblem::new(Grid2D::square(10).unwrap());
        p.strength = 0.0;
        let snaps = solve_heat_loc(&p, [0.3, 0.7]).unwrap();
        assert_eq!(snaps.len(), 2);
        assert!(snaps.iter().all(|f| f.values().iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn heat_is_conserved_after_cutoff() {
        let p = HeatLocProblem::new(Grid2D::square(16).unwrap());
        let snaps = solve_heat_loc(&p, [0.4, 0.35]).unwrap();
        let (a, b) = (snaps[0].integral(), snaps[1].integral());
        assert!(a > 0.0);
        assert!((a - b).abs() / a < 1e-8, "{a} vs {b}");
    }

    #[test]
    fn per_step_conservation_without_source() {
        let g = Grid2D::square(9).unwrap();
        let st = NeumannHeatStepper::new(g, 0.01).unwrap();
        let mut u: Vec<f64> = g.points().iter().map(|[x, y]| (5.0 * x).exp() * y).collect();
        let w = g.trapezoid_weights();
        let total = |u: &[f64]| u.iter().zip(&w).map(|(u, w)| u * w).sum::<f64>();
        let before = total(&u);
        for _ in 0..10 {
            let prev = total(&u);
            st.step(&mut u, None).unwrap();
            assert!((total(&u) - prev).abs() / prev.abs() < 1e-8);
        }
        assert!((total(&u) - before).abs() / before < 1e-8);
    }

    #[test]
    fn peak_follows_the_source() {
        let p = HeatLocProblem::new(Grid2D::square(21).unwrap());
        let snaps = solve_heat_loc(&p, [0.2, 0.2]).unwrap();
        let f = &snaps[0];
        let (k, _) = f
            .values()
            .iter()
            .enumerate()
            .fold((0, f64::MIN), |(bk, bv), (k, &v)| if v > bv { (k, v) } else { (bk, bv) });
        let [x, y] = p.grid.points()[k];
        let h = p.grid.hx();
        assert!((x - 0.2).abs() <= h && (y - 0.2).abs() <= h, "peak at ({x}, {y})");
    }

    #[test]
    fn observation_times_must_be_step_boundaries() {
        let mut p = HeatLocProblem::new(Grid2D::square(5).unwrap());
        p.steps = 100;
        assert!(matches!(p.snapshot_steps(), Err(PdeError::InvalidConfig(_))));
        p.steps = 120;
        assert_eq!(p.snapshot_steps().unwrap(), vec![40, 120]);
    }

    #[test]
    fn zero_source_and_initial_stay_zero() {
        let g = Grid2D::square(8).unwrap();
        let mut p = HeatFieldProblem::new(g);
        p.initial = Field::zeros(g);
        let u = solve_heat_field(&p, &Field::zeros(g)).unwrap();
        assert!(u.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn boundary_is_clamped() {
        let g = Grid2D::square(8).unwrap();
        let p = HeatFieldProblem::new(g);
        let u = solve_heat_field(&p, &Field::zeros(g)).unwrap();
        for j in 0..8 {
            for i in 0..8 {
                if g.is_boundary(i, j) {
                    assert_eq!(u.at(i, j), 0.0);
                }
            }
        }
        assert!(u.max_abs() > 0.0);
    }

    #[test]
    fn superposition_in_source() {
        let g = Grid2D::square(10).unwrap();
        let p = HeatFieldProblem::new(g);
        let m1 = g.evaluate(|x, y| x * y);
        let m2 = g.evaluate(|x, y| (3.0 * x).cos() - y);
        let sum = Field::new(g, m1.values().iter().zip(m2.values()).map(|(a, b)| a + b).collect()).unwrap();
        let u0 = solve_heat_field(&p, &Field::zeros(g)).unwrap();
        let u1 = solve_heat_field(&p, &m1).unwrap();
        let u2 = solve_heat_field(&p, &m2).unwrap();
        let u12 = solve_heat_field(&p, &sum).unwrap();
        for k in 0..g.len() {
            let lhs = u12.values()[k] - u0.values()[k];
            let rhs = (u1.values()[k] - u0.values()[k]) + (u2.values()[k] - u0.values()[k]);
            assert!((lhs - rhs).abs() < 1e-8 * (1.0 + u0.max_abs()));
        }
    }
}
