//! Five-point finite-difference solver for `-Δu = f` on the unit square
//! with homogeneous Dirichlet boundary. This is the ground-truth oracle for
//! the synthetic task and shares no code with the model.

use crate::error::{GitoError, Result};

/// Banded Cholesky factor of the scaled five-point Laplacian.
#[derive(Clone, Debug)]
pub struct PoissonSolver {
    intervals: usize,
    /// Interior nodes per side.
    m: usize,
    /// Row `i` holds `L[i][i-m..=i]`.
    band: Vec<f64>,
}

impl PoissonSolver {
    /// Factorizes for a grid with `intervals` cells per side (spacing 1/intervals).
    pub fn new(intervals: usize) -> Result<Self> {
        if intervals < 3 {
            return Err(GitoError::InvalidArgument(format!(
                "grid needs at least 3 intervals, got {intervals}"
            )));
        }
        let m = intervals - 1;
        let n = m * m;
        let bw = m;
        let w = bw + 1;
        // Matrix entry A[i][j] (j <= i) of h^2 * (-Δ_h).
        let a = |i: usize, j: usize| -> f64 {
            if i == j {
                4.0
            } else if i - j == 1 && i % m != 0 {
                -1.0
            } else if i - j == m {
                -1.0
            } else {
                0.0
            }
        };
        let mut band = vec![0.0; n * w];
        for i in 0..n {
            let lo = i.saturating_sub(bw);
            for j in lo..=i {
                let klo = lo.max(j.saturating_sub(bw));
                let mut s = a(i, j);
                let (ri, rj) = (i * w + bw - i, j * w + bw - j);
                for k in klo..j {
                    s -= band[ri + k] * band[rj + k];
                }
                if i == j {
                    band[ri + i] = s.sqrt();
                } else {
                    band[ri + j] = s / band[rj + j];
                }
            }
        }
        Ok(PoissonSolver {
            intervals,
            m,
            band,
        })
    }

    pub fn spacing(&self) -> f64 {
        1.0 / self.intervals as f64
    }

    /// Interior nodes per side.
    pub fn interior(&self) -> usize {
        self.m
    }

    /// Coordinates of interior node `(i, j)`, `i` along x.
    pub fn node(&self, i: usize, j: usize) -> (f64, f64) {
        let h = self.spacing();
        ((i + 1) as f64 * h, (j + 1) as f64 * h)
    }

    /// Solution at interior nodes, index `i + m * j`.
    pub fn solve(&self, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        let (m, bw) = (self.m, self.m);
        let n = m * m;
        let w = bw + 1;
        let h2 = self.spacing().powi(2);
        let mut y: Vec<f64> = (0..n)
            .map(|idx| {
                let (x, yy) = self.node(idx % m, idx / m);
                h2 * f(x, yy)
            })
            .collect();
        // L y = b
        for i in 0..n {
            let ri = i * w + bw - i;
            let mut s = y[i];
            for k in i.saturating_sub(bw)..i {
                s -= self.band[ri + k] * y[k];
            }
            y[i] = s / self.band[ri + i];
        }
        // L^T u = y
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..(i + bw + 1).min(n) {
                s -= self.band[k * w + bw - k + i] * y[k];
            }
            y[i] = s / self.band[i * w + bw - i + i];
        }
        y
    }
}
