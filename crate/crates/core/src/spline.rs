//! Piecewise polynomial smoothing splines and their quadratic cost terms.
//!
//! Each piece is a degree-`m` polynomial in the local variable `u = x − x_i`.
//! Coefficients of all pieces are stacked into one vector so costs and
//! constraints become dense matrices for the QP.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

pub const DEFAULT_DEGREE: usize = 5;

// 5-point Gauss-Legendre on [-1, 1]
const GL_NODES: [f64; 5] = [
    -0.906_179_845_938_664,
    -0.538_469_310_105_683,
    0.0,
    0.538_469_310_105_683,
    0.906_179_845_938_664,
];
const GL_WEIGHTS: [f64; 5] = [
    0.236_926_885_056_189,
    0.478_628_670_499_366,
    0.568_888_888_888_889,
    0.478_628_670_499_366,
    0.236_926_885_056_189,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineProfile {
    pub knots: Vec<f64>,
    pub coeffs: Vec<Vec<f64>>,
}

/// `d^k/du^k u^a` coefficient and power.
fn falling(a: usize, k: usize) -> f64 {
    if a < k {
        0.0
    } else {
        ((a - k + 1)..=a).map(|v| v as f64).product()
    }
}

/// Row of basis derivatives `d^k/du^k [1, u, …, u^m]` at `u`.
pub fn basis_row(degree: usize, u: f64, k: usize) -> Vec<f64> {
    (0..=degree)
        .map(|a| if a < k { 0.0 } else { falling(a, k) * u.powi((a - k) as i32) })
        .collect()
}

/// Exact `∫_0^h (d^k p/du^k)² du = pᵀ G p`.
pub fn gram(degree: usize, h: f64, k: usize) -> DMatrix<f64> {
    DMatrix::from_fn(degree + 1, degree + 1, |a, b| {
        if a < k || b < k {
            0.0
        } else {
            let e = (a + b - 2 * k + 1) as i32;
            falling(a, k) * falling(b, k) * h.powi(e) / e as f64
        }
    })
}

impl SplineProfile {
    pub fn degree(&self) -> usize {
        self.coeffs.first().map_or(0, |c| c.len() - 1)
    }

    fn locate(&self, x: f64) -> usize {
        let n = self.coeffs.len();
        (0..n).rfind(|&i| x >= self.knots[i]).unwrap_or(0)
    }

    /// Value and derivatives up to second order; outside the knot range the
    /// end pieces are extrapolated.
    pub fn eval(&self, x: f64) -> [f64; 3] {
        let i = self.locate(x);
        let u = x - self.knots[i];
        let d = self.degree();
        let c = &self.coeffs[i];
        let mut out = [0.0; 3];
        for (k, o) in out.iter_mut().enumerate() {
            *o = basis_row(d, u, k).iter().zip(c).map(|(b, c)| b * c).sum();
        }
        out
    }

    pub fn eval_derivative(&self, x: f64, k: usize) -> f64 {
        let i = self.locate(x);
        let u = x - self.knots[i];
        basis_row(self.degree(), u, k).iter().zip(&self.coeffs[i]).map(|(b, c)| b * c).sum()
    }

    /// Largest value/derivative jump (orders 0..=2) over interior knots.
    pub fn continuity_residual(&self) -> f64 {
        let d = self.degree();
        let mut worst = 0.0f64;
        for i in 0..self.coeffs.len().saturating_sub(1) {
            let h = self.knots[i + 1] - self.knots[i];
            for k in 0..=2 {
                let left: f64 = basis_row(d, h, k).iter().zip(&self.coeffs[i]).map(|(b, c)| b * c).sum();
                let right = self.coeffs[i + 1].get(k).copied().unwrap_or(0.0) * falling(k, k);
                worst = worst.max((left - right).abs());
            }
        }
        worst
    }

    pub fn from_stacked(knots: Vec<f64>, degree: usize, x: &DVector<f64>) -> Self {
        let w = degree + 1;
        let coeffs = (0..knots.len() - 1).map(|i| x.rows(i * w, w).iter().copied().collect()).collect();
        Self { knots, coeffs }
    }
}

/// Assembles quadratic costs and continuity rows over a knot vector.
#[derive(Debug, Clone)]
pub struct SplineSpace {
    pub knots: Vec<f64>,
    pub degree: usize,
}

impl SplineSpace {
    pub fn new(knots: Vec<f64>, degree: usize) -> Self {
        assert!(knots.len() >= 2, "need at least one piece");
        Self { knots, degree }
    }

    /// Knots spaced by `step` from `start` to `end`; the last piece absorbs
    /// the remainder.
    pub fn uniform(start: f64, end: f64, step: f64, degree: usize) -> Self {
        let n = (((end - start) / step).round() as usize).max(1);
        let knots = (0..=n).map(|i| start + (end - start) * i as f64 / n as f64).collect();
        Self::new(knots, degree)
    }

    pub fn pieces(&self) -> usize {
        self.knots.len() - 1
    }

    pub fn width(&self) -> usize {
        self.degree + 1
    }

    pub fn dim(&self) -> usize {
        self.pieces() * self.width()
    }

    fn piece_of(&self, x: f64) -> usize {
        (0..self.pieces()).rfind(|&i| x >= self.knots[i]).unwrap_or(0)
    }

    /// Stacked coefficient row evaluating the `k`-th derivative at `x`.
    pub fn row(&self, x: f64, k: usize) -> DVector<f64> {
        let i = self.piece_of(x);
        let mut r = DVector::zeros(self.dim());
        for (a, v) in basis_row(self.degree, x - self.knots[i], k).into_iter().enumerate() {
            r[i * self.width() + a] = v;
        }
        r
    }

    /// Block-diagonal Gram matrix of the `k`-th derivative.
    pub fn gram(&self, k: usize) -> DMatrix<f64> {
        let w = self.width();
        let mut g = DMatrix::zeros(self.dim(), self.dim());
        for i in 0..self.pieces() {
            let h = self.knots[i + 1] - self.knots[i];
            g.view_mut((i * w, i * w), (w, w)).copy_from(&gram(self.degree, h, k));
        }
        g
    }

    /// `∫(y − target)²` by 5-point Gauss-Legendre per piece, returned as
    /// `(H, f)` such that the cost is `pᵀHp + 2fᵀp + const`.
    pub fn tracking(&self, target: &dyn Fn(f64) -> f64) -> (DMatrix<f64>, DVector<f64>) {
        let w = self.width();
        let mut h = DMatrix::zeros(self.dim(), self.dim());
        let mut f = DVector::zeros(self.dim());
        for i in 0..self.pieces() {
            let len = self.knots[i + 1] - self.knots[i];
            for (node, weight) in GL_NODES.iter().zip(GL_WEIGHTS) {
                let u = 0.5 * len * (node + 1.0);
                let wq = 0.5 * len * weight;
                let phi = DVector::from_vec(basis_row(self.degree, u, 0));
                let y = target(self.knots[i] + u);
                let mut blk = h.view_mut((i * w, i * w), (w, w));
                blk += &phi * phi.transpose() * wq;
                let mut fb = f.rows_mut(i * w, w);
                fb -= &phi * (wq * y);
            }
        }
        (h, f)
    }

    /// Value/first/second-derivative matching rows at interior knots.
    pub fn continuity(&self) -> (DMatrix<f64>, DVector<f64>) {
        let w = self.width();
        let rows = 3 * (self.pieces() - 1);
        let mut a = DMatrix::zeros(rows, self.dim());
        for i in 0..self.pieces() - 1 {
            let h = self.knots[i + 1] - self.knots[i];
            for k in 0..3 {
                let r = 3 * i + k;
                for (j, v) in basis_row(self.degree, h, k).into_iter().enumerate() {
                    a[(r, i * w + j)] = v;
                }
                for (j, v) in basis_row(self.degree, 0.0, k).into_iter().enumerate() {
                    a[(r, (i + 1) * w + j)] -= v;
                }
            }
        }
        (a, DVector::zeros(rows))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gram_matches_quadrature() {
        // brute-force midpoint rule on a fine grid as an independent oracle
        let c = [0.3, -0.2, 0.5, 0.1, -0.05, 0.01];
        let h = 2.5;
        for k in 0..4 {
            let g = gram(5, h, k);
            let p = DVector::from_row_slice(&c);
            let exact = p.dot(&(&g * &p));
            let n = 200_000;
            let du = h / n as f64;
            let approx: f64 = (0..n)
                .map(|i| {
                    let u = (i as f64 + 0.5) * du;
                    let v: f64 = basis_row(5, u, k).iter().zip(&c).map(|(b, c)| b * c).sum();
                    v * v * du
                })
                .sum();
            assert!((exact - approx).abs() < 1e-7 * approx.abs().max(1.0), "k={k}");
        }
    }

    #[test]
    fn tracking_is_exact_for_low_degree() {
        // for a degree-5 spline and quadratic target the integrand has degree 10;
        // 5-point Gauss is exact up to degree 9, so use a quadratic fit against zero
        let space = SplineSpace::new(vec![0.0, 1.0, 3.0], 5);
        let (h, f) = space.tracking(&|x| 0.0 * x);
        let mut p = DVector::zeros(space.dim());
        p[0] = 1.0;
        p[1] = 0.5;
        p[6] = 1.5;
        p[7] = 0.5;
        let cost = p.dot(&(&h * &p)) + 2.0 * f.dot(&p);
        let exact = {
            // ∫_0^1 (1 + u/2)² + ∫_0^2 (1.5 + u/2)²
            let a = 1.0 + 0.5 + 1.0 / 12.0;
            let b = 2.0 * 2.25 + 1.5 * 2.0 + 8.0 / 12.0;
            a + b
        };
        assert!((cost - exact).abs() < 1e-12);
    }

    #[test]
    fn continuity_rows_vanish_on_smooth_spline() {
        let space = SplineSpace::uniform(0.0, 10.0, 5.0, 5);
        // single global cubic split across two pieces
        let g = |x: f64| [1.0 + 2.0 * x - 0.3 * x * x + 0.01 * x.powi(3), 0.0];
        let mut p = DVector::zeros(space.dim());
        for i in 0..2 {
            let x0 = space.knots[i];
            p[i * 6] = g(x0)[0];
            p[i * 6 + 1] = 2.0 - 0.6 * x0 + 0.03 * x0 * x0;
            p[i * 6 + 2] = (-0.6 + 0.06 * x0) / 2.0;
            p[i * 6 + 3] = 0.01;
        }
        let (a, _) = space.continuity();
        assert!((&a * &p).amax() < 1e-12);
        let s = SplineProfile::from_stacked(space.knots.clone(), 5, &p);
        assert!(s.continuity_residual() < 1e-12);
        assert!((s.eval(7.3)[0] - g(7.3)[0]).abs() < 1e-12);
    }
}
