//! Dense convex QP
//!
//! ```text
//! minimize   ½ xᵀHx + fᵀx
//! subject to A_eq x = b_eq,  A_in x ≤ b_in
//! ```
//!
//! solved with a dual active-set method (Goldfarb-Idnani style). The
//! unconstrained/equality-only optimum is computed first; violated
//! inequalities are then added one at a time, lowest index first, dropping
//! active constraints whose multipliers would turn negative.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum QpError {
    #[error("dimension mismatch: {0}")]
    Shape(String),
    #[error("H is not symmetric (max asymmetry {0:e})")]
    Asymmetric(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub h: DMatrix<f64>,
    pub f: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    pub a_in: DMatrix<f64>,
    pub b_in: DVector<f64>,
}

impl QpProblem {
    pub fn unconstrained(h: DMatrix<f64>, f: DVector<f64>) -> Self {
        let n = f.len();
        Self {
            h,
            f,
            a_eq: DMatrix::zeros(0, n),
            b_eq: DVector::zeros(0),
            a_in: DMatrix::zeros(0, n),
            b_in: DVector::zeros(0),
        }
    }

    pub fn dim(&self) -> usize {
        self.f.len()
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.h * x)) + self.f.dot(x)
    }

    pub fn check(&self) -> Result<(), QpError> {
        let n = self.dim();
        if self.h.shape() != (n, n) {
            return Err(QpError::Shape(format!("H is {:?}, f has {n}", self.h.shape())));
        }
        if self.a_eq.ncols() != n || self.a_eq.nrows() != self.b_eq.len() {
            return Err(QpError::Shape("equality block".into()));
        }
        if self.a_in.ncols() != n || self.a_in.nrows() != self.b_in.len() {
            return Err(QpError::Shape("inequality block".into()));
        }
        let asym = (&self.h - self.h.transpose()).abs().max();
        let scale = self.h.abs().max().max(1.0);
        if asym > 1e-12 * scale {
            return Err(QpError::Asymmetric(asym));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QpTolerances {
    pub feasibility: f64,
    pub max_iter: usize,
}

impl Default for QpTolerances {
    fn default() -> Self {
        Self {
            feasibility: 1e-9,
            max_iter: 2000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum QpStatus {
    Optimal,
    Infeasible,
    MaxIter,
}

/// Infinity norms of the four KKT conditions:
///
/// - stationarity `‖Hx + f + A_eqᵀ λ_eq + A_inᵀ λ_in‖∞`
/// - primal feasibility `max(‖A_eq x − b_eq‖∞, maxᵢ (A_in x − b_in)ᵢ⁺)`
/// - dual feasibility `maxᵢ (−λ_in,i)⁺`
/// - complementarity `maxᵢ |λ_in,i · (A_in x − b_in)ᵢ|`
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub primal: f64,
    pub dual: f64,
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity.max(self.primal).max(self.dual).max(self.complementarity)
    }
}

pub fn kkt_residuals(
    p: &QpProblem,
    x: &DVector<f64>,
    lambda_eq: &DVector<f64>,
    lambda_in: &DVector<f64>,
) -> KktResiduals {
    let grad = &p.h * x + &p.f + p.a_eq.transpose() * lambda_eq + p.a_in.transpose() * lambda_in;
    let eq = &p.a_eq * x - &p.b_eq;
    let slack = &p.a_in * x - &p.b_in;
    let inf = |v: &DVector<f64>| v.iter().fold(0.0f64, |m, e| m.max(e.abs()));
    KktResiduals {
        stationarity: inf(&grad),
        primal: inf(&eq).max(slack.iter().fold(0.0f64, |m, e| m.max(*e))),
        dual: lambda_in.iter().fold(0.0f64, |m, l| m.max(-l)),
        complementarity: lambda_in
            .iter()
            .zip(slack.iter())
            .fold(0.0f64, |m, (l, s)| m.max((l * s).abs())),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpResult {
    pub status: QpStatus,
    /// Absent when infeasible.
    pub x: Option<DVector<f64>>,
    pub lambda_eq: DVector<f64>,
    pub lambda_in: DVector<f64>,
    pub residuals: Option<KktResiduals>,
    /// H was not positive definite and got a small ridge added.
    pub regularized: bool,
    pub iterations: usize,
}

fn kkt_solve(h: &DMatrix<f64>, rows: &[DVector<f64>], rhs_top: &DVector<f64>, rhs_bottom: &[f64]) -> Option<(DVector<f64>, DVector<f64>)> {
    let n = h.nrows();
    let m = rows.len();
    let mut k = DMatrix::zeros(n + m, n + m);
    k.view_mut((0, 0), (n, n)).copy_from(h);
    for (j, r) in rows.iter().enumerate() {
        for i in 0..n {
            k[(n + j, i)] = r[i];
            k[(i, n + j)] = r[i];
        }
    }
    let mut rhs = DVector::zeros(n + m);
    rhs.rows_mut(0, n).copy_from(rhs_top);
    for (j, b) in rhs_bottom.iter().enumerate() {
        rhs[n + j] = *b;
    }
    let sol = k.lu().solve(&rhs)?;
    if sol.iter().any(|v| !v.is_finite()) {
        return None;
    }
    Some((sol.rows(0, n).into_owned(), sol.rows(n, m).into_owned()))
}

#[derive(Clone, Copy, PartialEq)]
enum Row {
    Eq(usize),
    In(usize),
}

pub fn solve(problem: &QpProblem, tol: &QpTolerances) -> Result<QpResult, QpError> {
    problem.check()?;
    let n = problem.dim();
    let (m_eq, m_in) = (problem.b_eq.len(), problem.b_in.len());
    let mut h = problem.h.clone();
    let mut regularized = false;
    if n > 0 && h.clone().cholesky().is_none() {
        let ridge = 1e-9 * h.diagonal().iter().fold(1.0f64, |m, d| m.max(d.abs()));
        for i in 0..n {
            h[(i, i)] += ridge;
        }
        regularized = true;
    }
    let row = |r: Row| -> DVector<f64> {
        match r {
            Row::Eq(i) => problem.a_eq.row(i).transpose(),
            Row::In(i) => problem.a_in.row(i).transpose(),
        }
    };
    let infeasible = |iterations| QpResult {
        status: QpStatus::Infeasible,
        x: None,
        lambda_eq: DVector::zeros(m_eq),
        lambda_in: DVector::zeros(m_in),
        residuals: None,
        regularized,
        iterations,
    };

    let mut active: Vec<Row> = (0..m_eq).map(Row::Eq).collect();
    let eq_rows: Vec<DVector<f64>> = active.iter().map(|r| row(*r)).collect();
    let Some((mut x, lam0)) = kkt_solve(&h, &eq_rows, &(-&problem.f), problem.b_eq.as_slice()) else {
        return Ok(infeasible(0));
    };
    // stationarity convention: Hx + f + Nᵀλ = 0
    let mut lambda: Vec<f64> = lam0.iter().copied().collect();
    let mut iterations = 0;
    let scale_tol = |i: usize| tol.feasibility * (1.0 + problem.b_in[i].abs());

    'outer: loop {
        let Some(p) = (0..m_in).find(|&i| {
            !active.contains(&Row::In(i)) && problem.a_in.row(i).dot(&x.transpose()) - problem.b_in[i] > scale_tol(i)
        }) else {
            break;
        };
        let np = row(Row::In(p));
        let mut lambda_p = 0.0;
        loop {
            iterations += 1;
            if iterations > tol.max_iter {
                break 'outer;
            }
            let violation = np.dot(&x) - problem.b_in[p];
            if violation <= scale_tol(p) {
                active.push(Row::In(p));
                lambda.push(lambda_p);
                continue 'outer;
            }
            let rows: Vec<DVector<f64>> = active.iter().map(|r| row(*r)).collect();
            let zeros = vec![0.0; rows.len()];
            let Some((z, r)) = kkt_solve(&h, &rows, &(-&np), &zeros) else {
                return Ok(infeasible(iterations));
            };
            let curvature = -np.dot(&z);
            let full = if curvature > 1e-14 * np.norm_squared().max(1e-300) {
                Some(violation / curvature)
            } else {
                None
            };
            let mut partial: Option<(f64, usize)> = None;
            for (k, a) in active.iter().enumerate() {
                if let Row::In(_) = a {
                    if r[k] < -1e-14 {
                        let t = -lambda[k] / r[k];
                        if partial.is_none_or(|(bt, _)| t < bt) {
                            partial = Some((t, k));
                        }
                    }
                }
            }
            match (full, partial) {
                (None, None) => return Ok(infeasible(iterations)),
                (Some(t1), part) if part.is_none_or(|(t2, _)| t1 <= t2) => {
                    x += &z * t1;
                    for (k, l) in lambda.iter_mut().enumerate() {
                        *l += t1 * r[k];
                    }
                    active.push(Row::In(p));
                    lambda.push(lambda_p + t1);
                    continue 'outer;
                }
                (full, Some((t2, k))) => {
                    if full.is_some() {
                        x += &z * t2;
                    }
                    for (j, l) in lambda.iter_mut().enumerate() {
                        *l += t2 * r[j];
                    }
                    lambda_p += t2;
                    active.remove(k);
                    lambda.remove(k);
                }
                (Some(_), None) => unreachable!(),
            }
        }
    }

    let mut lambda_eq = DVector::zeros(m_eq);
    let mut lambda_in = DVector::zeros(m_in);
    for (a, l) in active.iter().zip(&lambda) {
        match a {
            Row::Eq(i) => lambda_eq[*i] = *l,
            Row::In(i) => lambda_in[*i] = l.max(0.0),
        }
    }
    let residuals = kkt_residuals(problem, &x, &lambda_eq, &lambda_in);
    let status = if iterations > tol.max_iter {
        QpStatus::MaxIter
    } else {
        QpStatus::Optimal
    };
    Ok(QpResult {
        status,
        x: Some(x),
        lambda_eq,
        lambda_in,
        residuals: Some(residuals),
        regularized,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn eye2() -> QpProblem {
        QpProblem::unconstrained(DMatrix::identity(2, 2), DVector::from_vec(vec![-1.0, -1.0]))
    }

    #[test]
    fn unconstrained_minimum() {
        let r = solve(&eye2(), &QpTolerances::default()).unwrap();
        assert_eq!(r.status, QpStatus::Optimal);
        let x = r.x.unwrap();
        assert!((x[0] - 1.0).abs() < 1e-12 && (x[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_bound_active() {
        let mut p = eye2();
        p.a_in = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        p.b_in = DVector::from_vec(vec![0.5]);
        let r = solve(&p, &QpTolerances::default()).unwrap();
        let x = r.x.clone().unwrap();
        assert!((x[0] - 0.5).abs() < 1e-12 && (x[1] - 1.0).abs() < 1e-12);
        assert!((r.lambda_in[0] - 0.5).abs() < 1e-12);
        assert!(r.residuals.unwrap().max() < 1e-6);
    }

    #[test]
    fn equality_only() {
        let mut p = QpProblem::unconstrained(DMatrix::identity(2, 2), DVector::zeros(2));
        p.a_eq = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        p.b_eq = DVector::from_vec(vec![0.0]);
        let r = solve(&p, &QpTolerances::default()).unwrap();
        assert!(r.x.unwrap().norm() < 1e-12);
    }

    #[test]
    fn contradictory_bounds_are_infeasible() {
        let mut p = eye2();
        p.a_in = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, -1.0, 0.0]);
        p.b_in = DVector::from_vec(vec![-1.0, -1.0]);
        let r = solve(&p, &QpTolerances::default()).unwrap();
        assert_eq!(r.status, QpStatus::Infeasible);
        assert!(r.x.is_none());
    }

    #[test]
    fn residual_properties() {
        let mut p = eye2();
        p.a_in = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        p.b_in = DVector::from_vec(vec![0.5]);
        let r = solve(&p, &QpTolerances::default()).unwrap();
        let x = r.x.unwrap();
        let bumped = &x + DVector::from_vec(vec![0.0, 1e-3]);
        assert!(kkt_residuals(&p, &bumped, &r.lambda_eq, &r.lambda_in).stationarity > 0.0);
        // interior point, zero multipliers on the inactive constraint
        let inside = DVector::from_vec(vec![0.1, 0.2]);
        let res = kkt_residuals(&p, &inside, &DVector::zeros(0), &DVector::zeros(1));
        assert_eq!(res.complementarity, 0.0);
        assert_eq!(res.primal, 0.0);
    }

    #[test]
    fn asymmetric_rejected() {
        let p = QpProblem::unconstrained(DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]), DVector::zeros(2));
        assert!(matches!(solve(&p, &QpTolerances::default()), Err(QpError::Asymmetric(_))));
    }

    #[test]
    fn semidefinite_gets_regularized() {
        let h = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let mut p = QpProblem::unconstrained(h, DVector::from_vec(vec![-1.0, 0.0]));
        p.a_in = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, -1.0]);
        p.b_in = DVector::from_vec(vec![1.0, 1.0]);
        let r = solve(&p, &QpTolerances::default()).unwrap();
        assert!(r.regularized);
        assert!((r.x.unwrap()[0] - 1.0).abs() < 1e-6);
    }

    fn random_box_problem(rng: &mut ChaCha8Rng, n: usize) -> (QpProblem, Vec<f64>, Vec<f64>) {
        let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let h = &m * m.transpose() + DMatrix::identity(n, n) * 0.1;
        let h = (&h + h.transpose()) * 0.5;
        let f = DVector::from_fn(n, |_, _| rng.random_range(-3.0..3.0));
        let k = n.min(10);
        let lo: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..0.0)).collect();
        let hi: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..1.0)).collect();
        let mut p = QpProblem::unconstrained(h, f);
        p.a_in = DMatrix::zeros(2 * k, n);
        p.b_in = DVector::zeros(2 * k);
        for i in 0..k {
            p.a_in[(2 * i, i)] = 1.0;
            p.b_in[2 * i] = hi[i];
            p.a_in[(2 * i + 1, i)] = -1.0;
            p.b_in[2 * i + 1] = -lo[i];
        }
        (p, lo, hi)
    }

    /// Accelerated projected gradient on box-constrained coordinates.
    fn projected_gradient(p: &QpProblem, lo: &[f64], hi: &[f64]) -> f64 {
        let n = p.dim();
        let lmax = p.h.clone().symmetric_eigenvalues().max();
        let proj = |mut v: DVector<f64>| {
            for i in 0..lo.len() {
                v[i] = v[i].clamp(lo[i], hi[i]);
            }
            v
        };
        let mut x = DVector::zeros(n);
        let mut y = x.clone();
        let mut t = 1.0f64;
        for _ in 0..200_000 {
            let g = &p.h * &y + &p.f;
            let xn = proj(&y - g / lmax);
            let tn = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
            y = &xn + (&xn - &x) * ((t - 1.0) / tn);
            x = xn;
            t = tn;
        }
        p.objective(&x)
    }

    #[test]
    fn matches_projected_gradient_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for n in [3, 8, 15, 30] {
            let (p, lo, hi) = random_box_problem(&mut rng, n);
            let r = solve(&p, &QpTolerances::default()).unwrap();
            assert_eq!(r.status, QpStatus::Optimal);
            assert!(r.residuals.unwrap().max() < 1e-6, "{:?}", r.residuals);
            let ours = p.objective(r.x.as_ref().unwrap());
            let oracle = projected_gradient(&p, &lo, &hi);
            assert!((ours - oracle).abs() <= 1e-5 * oracle.abs().max(1.0), "n={n}: {ours} vs {oracle}");
        }
    }

    #[test]
    fn scaling_leaves_argmin() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (p, _, _) = random_box_problem(&mut rng, 12);
        let mut q = p.clone();
        q.h *= 7.5;
        q.f *= 7.5;
        let a = solve(&p, &QpTolerances::default()).unwrap().x.unwrap();
        let b = solve(&q, &QpTolerances::default()).unwrap().x.unwrap();
        assert!((a - b).amax() < 1e-8);
    }
}
