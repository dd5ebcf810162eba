use crate::grf::{Field, Grid2D};
use crate::linalg::BandedMatrix;

use super::PdeError;

/// `−∇·(exp(m)∇u) = f` on the unit square with `u = 0` on the boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct DarcyProblem {
    grid: Grid2D,
    source: Field,
}

/// Piecewise-constant source banded in `x₂`.
pub fn paper_source(_x: f64, y: f64) -> f64 {
    if y <= 4.0 / 6.0 {
        1000.0
    } else if y <= 5.0 / 6.0 {
        2000.0
    } else {
        3000.0
    }
}

impl DarcyProblem {
    pub fn new(grid: Grid2D) -> Self {
        Self {
            grid,
            source: grid.evaluate(paper_source),
        }
    }

    pub fn with_source(source: Field) -> Self {
        Self {
            grid: source.grid(),
            source,
        }
    }

    pub fn grid(&self) -> Grid2D {
        self.grid
    }

    pub fn source(&self) -> &Field {
        &self.source
    }
}

fn harmonic(a: f64, b: f64) -> f64 {
    2.0 * a * b / (a + b)
}

/// Five-point finite differences with harmonic face averages of `exp(m)`.
pub fn solve_darcy(problem: &DarcyProblem, m: &Field) -> Result<Field, PdeError> {
    let grid = problem.grid;
    if m.grid() != grid {
        return Err(PdeError::GridMismatch);
    }
    if let Some(k) = m.values().iter().position(|v| !v.is_finite()) {
        return Err(PdeError::NonFinite { index: k });
    }
    let (nx, ny) = (grid.nx(), grid.ny());
    let mut u = Field::zeros(grid);
    if nx < 3 || ny < 3 {
        return Ok(u);
    }
    let (mx, my) = (nx - 2, ny - 2);
    let unknown = |i: usize, j: usize| (j - 1) * mx + (i - 1);
    let kappa: Vec<f64> = m.values().iter().map(|v| v.exp()).collect();
    let k = |i: usize, j: usize| kappa[grid.index(i, j)];
    let (ax, ay) = (1.0 / (grid.hx() * grid.hx()), 1.0 / (grid.hy() * grid.hy()));

    let mut a = BandedMatrix::zeros(mx * my, mx);
    let mut rhs = vec![0.0; mx * my];
    for j in 1..ny - 1 {
        for i in 1..nx - 1 {
            let p = unknown(i, j);
            rhs[p] = problem.source.at(i, j);
            let centre = k(i, j);
            let nbrs = [
                (i - 1, j, ax),
                (i + 1, j, ax),
                (i, j - 1, ay),
                (i, j + 1, ay),
            ];
            for (ni, nj, scale) in nbrs {
                let c = scale * harmonic(centre, k(ni, nj));
                a.add(p, p, c);
                if !grid.is_boundary(ni, nj) {
                    a.add(p, unknown(ni, nj), -c);
                }
            }
        }
    }
    let sol = a.factor()?.solve(&rhs)?;
    for j in 1..ny - 1 {
        for i in 1..nx - 1 {
            u.values_mut()[grid.index(i, j)] = sol[unknown(i, j)];
        }
    }
    Ok(u)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn zero_source_gives_zero_solution() {
        let g = Grid2D::square(12).unwrap();
        let p = DarcyProblem::with_source(Field::zeros(g));
        let m = g.evaluate(|x, y| (x - y).sin());
        let u = solve_darcy(&p, &m).unwrap();
        assert!(u.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn manufactured_solution_converges() {
        let mut errs = Vec::new();
        for n in [9, 17, 33] {
            let g = Grid2D::square(n).unwrap();
            let f = g.evaluate(|x, y| 2.0 * PI * PI * (PI * x).sin() * (PI * y).sin());
            let u = solve_darcy(&DarcyProblem::with_source(f), &Field::zeros(g)).unwrap();
            let exact = g.evaluate(|x, y| (PI * x).sin() * (PI * y).sin());
            let err = u
                .values()
                .iter()
                .zip(exact.values())
                .fold(0.0_f64, |e, (a, b)| e.max((a - b).abs()));
            errs.push(err);
        }
        for w in errs.windows(2) {
            let order = (w[0] / w[1]).log2();
            assert!((1.8..=2.2).contains(&order), "order {order}");
        }
    }

    #[test]
    fn positive_source_gives_nonnegative_solution() {
        let g = Grid2D::square(15).unwrap();
        let m = g.evaluate(|x, y| 1.5 * (4.0 * x).sin() * (3.0 * y).cos());
        let u = solve_darcy(&DarcyProblem::new(g), &m).unwrap();
        assert!(u.values().iter().all(|v| *v >= -1e-10));
    }

    #[test]
    fn source_bands() {
        assert_eq!(paper_source(0.3, 0.0), 1000.0);
        assert_eq!(paper_source(0.3, 4.0 / 6.0), 1000.0);
        assert_eq!(paper_source(0.3, 0.7), 2000.0);
        assert_eq!(paper_source(0.3, 5.0 / 6.0), 2000.0);
        assert_eq!(paper_source(0.3, 0.9), 3000.0);
    }

    #[test]
    fn rejects_non_finite_coefficient() {
        let g = Grid2D::square(5).unwrap();
        let mut m = Field::zeros(g);
        m.values_mut()[7] = f64::NAN;
        assert!(matches!(solve_darcy(&DarcyProblem::new(g), &m), Err(PdeError::NonFinite { index: 7 })));
    }
}
