//! Banded direct solver for the 5-point grid operators.
//!
//! Lexicographic node ordering gives a half-bandwidth of `nx`, so a banded
//! LU without pivoting costs `O(n·nx²)`. Every operator assembled here is
//! either symmetric positive definite or diagonally dominant, which is what
//! makes skipping the pivot search safe.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolveError {
    #[error("zero pivot at row {row}")]
    ZeroPivot { row: usize },
    #[error("linear solve did not converge: relative residual {residual:e} > {tol:e}")]
    Residual { residual: f64, tol: f64 },
    #[error("right-hand side has length {got}, system size is {expected}")]
    Dimension { got: usize, expected: usize },
}

/// Relative residual target of every grid solve.
pub const SOLVE_TOL: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct BandedMatrix {
    n: usize,
    bw: usize,
    // row-major band storage; entry (i, j) lives at i*(2bw+1) + (j + bw - i)
    data: Vec<f64>,
}

impl BandedMatrix {
    pub fn zeros(n: usize, bw: usize) -> Self {
        Self {
            n,
            bw,
            data: vec![0.0; n * (2 * bw + 1)],
        }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    #[inline]
    fn slot(&self, i: usize, j: usize) -> usize {
        debug_assert!(i.abs_diff(j) <= self.bw, "({i},{j}) outside band {}", self.bw);
        i * (2 * self.bw + 1) + (j + self.bw - i)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        if i.abs_diff(j) > self.bw {
            0.0
        } else {
            self.data[self.slot(i, j)]
        }
    }

    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let s = self.slot(i, j);
        self.data[s] += v;
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        for (i, yi) in y.iter_mut().enumerate() {
            let lo = i.saturating_sub(self.bw);
            let hi = (i + self.bw).min(self.n - 1);
            let mut acc = 0.0;
            for j in lo..=hi {
                acc += self.data[self.slot(i, j)] * x[j];
            }
            *yi = acc;
        }
        y
    }

    /// `a·self + b·I`-style combinations used by time steppers.
    pub fn scaled_plus_identity(&self, scale: f64, diag: f64) -> Self {
        let mut out = self.clone();
        for v in &mut out.data {
            *v *= scale;
        }
        for i in 0..self.n {
            out.add(i, i, diag);
        }
        out
    }

    pub fn factor(&self) -> Result<BandedLu, SolveError> {
        let mut lu = self.clone();
        let (n, bw) = (self.n, self.bw);
        for k in 0..n {
            let pivot = lu.data[lu.slot(k, k)];
            if pivot == 0.0 || !pivot.is_finite() {
                return Err(SolveError::ZeroPivot { row: k });
            }
            let hi = (k + bw).min(n - 1);
            for i in k + 1..=hi {
                let sik = lu.slot(i, k);
                let l = lu.data[sik] / pivot;
                if l == 0.0 {
                    continue;
                }
                lu.data[sik] = l;
                for j in k + 1..=hi {
                    let skj = lu.slot(k, j);
                    let sij = lu.slot(i, j);
                    lu.data[sij] -= l * lu.data[skj];
                }
            }
        }
        Ok(BandedLu {
            original: self.clone(),
            lu,
        })
    }
}

#[derive(Debug, Clone)]
pub struct BandedLu {
    original: BandedMatrix,
    lu: BandedMatrix,
}

impl BandedLu {
    fn substitute(&self, b: &[f64]) -> Vec<f64> {
        let (n, bw) = (self.lu.n, self.lu.bw);
        let mut x = b.to_vec();
        for i in 0..n {
            let lo = i.saturating_sub(bw);
            let mut acc = x[i];
            for j in lo..i {
                acc -= self.lu.data[self.lu.slot(i, j)] * x[j];
            }
            x[i] = acc;
        }
        for i in (0..n).rev() {
            let hi = (i + bw).min(n - 1);
            let mut acc = x[i];
            for j in i + 1..=hi {
                acc -= self.lu.data[self.lu.slot(i, j)] * x[j];
            }
            x[i] = acc / self.lu.data[self.lu.slot(i, i)];
        }
        x
    }

    /// Direct solve followed by up to two refinement sweeps; fails if the
    /// relative residual stays above [`SOLVE_TOL`].
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>, SolveError> {
        if b.len() != self.lu.n {
            return Err(SolveError::Dimension {
                got: b.len(),
                expected: self.lu.n,
            });
        }
        let bnorm = norm(b);
        let mut x = self.substitute(b);
        let mut residual = 0.0;
        for _ in 0..3 {
            let ax = self.original.matvec(&x);
            let r: Vec<f64> = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
            residual = if bnorm > 0.0 { norm(&r) / bnorm } else { norm(&r) };
            if residual < SOLVE_TOL {
                return Ok(x);
            }
            let dx = self.substitute(&r);
            for (x, d) in x.iter_mut().zip(dx) {
                *x += d;
            }
        }
        if residual.is_finite() && residual < SOLVE_TOL {
            Ok(x)
        } else {
            Err(SolveError::Residual {
                residual,
                tol: SOLVE_TOL,
            })
        }
    }
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}
