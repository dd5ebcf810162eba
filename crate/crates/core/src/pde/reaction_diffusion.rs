//! `u_t − κΔu + v·∇u = 0` with zero-flux walls, Crank–Nicolson in time.
//!
//! Space is discretized with node-centred control volumes. Advective face
//! fluxes are exact line integrals of `v·n`, taken as differences of the
//! stream function `ψ = sin(πx) sin(πy)/π`, so every control volume has zero
//! discrete divergence and the walls carry no normal flux. Central face
//! values make the advection operator skew, and the scheme conserves the
//! weighted total mass exactly.

use std::f64::consts::PI;

use crate::grf::{Field, Grid2D};
use crate::linalg::{BandedLu, BandedMatrix};

use super::heat::neumann_stiffness;
use super::PdeError;

#[derive(Debug, Clone, PartialEq)]
pub struct ReactionDiffusionProblem {
    pub grid: Grid2D,
    pub kappa: f64,
    pub horizon: f64,
    pub dt: f64,
}

impl ReactionDiffusionProblem {
    pub fn new(grid: Grid2D) -> Self {
        Self {
            grid,
            kappa: 1.0 / 30.0,
            horizon: 1.0,
            dt: 0.02,
        }
    }

    pub fn steps(&self) -> Result<usize, PdeError> {
        let n = (self.horizon / self.dt).round();
        if n < 1.0 || (n * self.dt - self.horizon).abs() > 1e-9 {
            return Err(PdeError::InvalidConfig(format!(
                "dt = {} does not divide the horizon {}",
                self.dt, self.horizon
            )));
        }
        Ok(n as usize)
    }

    /// Advective flux through every interior face, as `(upstream node,
    /// downstream node, flux)` with positive flux pointing from the first
    /// node to the second.
    pub fn face_fluxes(&self) -> Vec<(usize, usize, f64)> {
        let g = self.grid;
        let (nx, ny) = (g.nx(), g.ny());
        // corners live on the half grid; evaluating ψ there from one helper
        // makes shared corners bitwise identical
        let psi = |a: usize, b: usize| {
            let x = a as f64 / (2 * (nx - 1)) as f64;
            let y = b as f64 / (2 * (ny - 1)) as f64;
            stream_function(x, y)
        };
        let lo = |k: usize| (2 * k).saturating_sub(1);
        let hi = |k: usize, n: usize| (2 * k + 1).min(2 * (n - 1));
        let mut out = Vec::with_capacity(2 * g.len());
        for j in 0..ny {
            for i in 0..nx - 1 {
                let a = 2 * i + 1;
                let flux = psi(a, hi(j, ny)) - psi(a, lo(j));
                out.push((g.index(i, j), g.index(i + 1, j), flux));
            }
        }
        for j in 0..ny - 1 {
            for i in 0..nx {
                let b = 2 * j + 1;
                let flux = psi(lo(i), b) - psi(hi(i, nx), b);
                out.push((g.index(i, j), g.index(i, j + 1), flux));
            }
        }
        out
    }

    /// Net outflow per unit area of every control volume.
    pub fn discrete_divergence(&self) -> Vec<f64> {
        let mut div = vec![0.0; self.grid.len()];
        for (p, q, f) in self.face_fluxes() {
            div[p] += f;
            div[q] -= f;
        }
        for (d, w) in div.iter_mut().zip(self.grid.trapezoid_weights()) {
            *d /= w;
        }
        div
    }

    /// Largest `|v·n|` over boundary nodes.
    pub fn boundary_normal_velocity(&self) -> f64 {
        let g = self.grid;
        let mut worst = 0.0_f64;
        for j in 0..g.ny() {
            for i in 0..g.nx() {
                let (x, y) = (g.x(i), g.y(j));
                let [vx, vy] = velocity(x, y);
                if i == 0 || i + 1 == g.nx() {
                    worst = worst.max(vx.abs());
                }
                if j == 0 || j + 1 == g.ny() {
                    worst = worst.max(vy.abs());
                }
            }
        }
        worst
    }

    /// `L` in `W du/dt = −L u`.
    fn operator(&self) -> BandedMatrix {
        let mut l = neumann_stiffness(self.grid).scaled_plus_identity(self.kappa, 0.0);
        for (p, q, f) in self.face_fluxes() {
            let half = 0.5 * f;
            l.add(p, p, half);
            l.add(p, q, half);
            l.add(q, p, -half);
            l.add(q, q, -half);
        }
        l
    }
}

pub fn stream_function(x: f64, y: f64) -> f64 {
    (PI * x).sin() * (PI * y).sin() / PI
}

pub fn velocity(x: f64, y: f64) -> [f64; 2] {
    [
        (PI * x).sin() * (PI * y).cos(),
        -(PI * x).cos() * (PI * y).sin(),
    ]
}

/// Crank–Nicolson stepper, factored once per problem.
pub struct ReactionDiffusionSolver {
    problem: ReactionDiffusionProblem,
    explicit: BandedMatrix,
    lu: BandedLu,
    steps: usize,
}

impl ReactionDiffusionSolver {
    pub fn new(problem: ReactionDiffusionProblem) -> Result<Self, PdeError> {
        let steps = problem.steps()?;
        let l = problem.operator();
        let w = problem.grid.trapezoid_weights();
        let half = 0.5 * problem.dt;
        let mut implicit = l.scaled_plus_identity(half, 0.0);
        let mut explicit = l.scaled_plus_identity(-half, 0.0);
        for (p, wp) in w.iter().enumerate() {
            implicit.add(p, p, *wp);
            explicit.add(p, p, *wp);
        }
        Ok(Self {
            problem,
            explicit,
            lu: implicit.factor()?,
            steps,
        })
    }

    pub fn solve(&self, m0: &Field) -> Result<Field, PdeError> {
        if m0.grid() != self.problem.grid {
            return Err(PdeError::GridMismatch);
        }
        if let Some(k) = m0.values().iter().position(|v| !v.is_finite()) {
            return Err(PdeError::NonFinite { index: k });
        }
        let mut u = m0.values().to_vec();
        for _ in 0..self.steps {
            let rhs = self.explicit.matvec(&u);
            u = self.lu.solve(&rhs)?;
        }
        Ok(Field::new(self.problem.grid, u).expect("grid-sized"))
    }
}

pub fn solve_reaction_diffusion(problem: &ReactionDiffusionProblem, m0: &Field) -> Result<Field, PdeError> {
    ReactionDiffusionSolver::new(problem.clone())?.solve(m0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn problem(n: usize) -> ReactionDiffusionProblem {
        ReactionDiffusionProblem::new(Grid2D::square(n).unwrap())
    }

    #[test]
    fn velocity_is_divergence_free_and_tangential() {
        let p = problem(24);
        let div = p.discrete_divergence();
        assert!(div.iter().all(|d| d.abs() < 1e-12), "{:e}", div.iter().fold(0.0_f64, |m, d| m.max(d.abs())));
        assert!(p.boundary_normal_velocity() < 1e-12);
    }

    #[test]
    fn constant_state_is_steady() {
        let p = problem(16);
        let u = solve_reaction_diffusion(&p, &Field::constant(p.grid, 3.5)).unwrap();
        assert!(u.values().iter().all(|v| (v - 3.5).abs() < 1e-12));
    }

    #[test]
    fn mass_is_conserved_over_horizon() {
        let p = problem(24);
        let m0 = p.grid.evaluate(|x, y| (-20.0 * ((x - 0.3).powi(2) + (y - 0.6).powi(2))).exp() + 0.1);
        let u = solve_reaction_diffusion(&p, &m0).unwrap();
        let drift = (u.integral() - m0.integral()).abs() / m0.integral();
        assert!(drift < 1e-8, "{drift:e}");
        // the blob is actually transported
        let moved: f64 = u.values().iter().zip(m0.values()).map(|(a, b)| (a - b).abs()).sum();
        assert!(moved > 1e-2);
    }

    #[test]
    fn solution_operator_is_linear() {
        let p = problem(12);
        let s = ReactionDiffusionSolver::new(p.clone()).unwrap();
        let a = p.grid.evaluate(|x, y| (4.0 * x).sin() * y);
        let b = p.grid.evaluate(|x, y| x * x - (2.0 * y).cos());
        let ab = Field::new(p.grid, a.values().iter().zip(b.values()).map(|(x, y)| 2.0 * x - y).collect()).unwrap();
        let (ua, ub, uab) = (s.solve(&a).unwrap(), s.solve(&b).unwrap(), s.solve(&ab).unwrap());
        for k in 0..p.grid.len() {
            assert!((uab.values()[k] - (2.0 * ua.values()[k] - ub.values()[k])).abs() < 1e-10);
        }
    }

    #[test]
    fn step_must_divide_horizon() {
        let mut p = problem(5);
        p.dt = 0.03;
        assert!(matches!(p.steps(), Err(PdeError::InvalidConfig(_))));
    }
}
