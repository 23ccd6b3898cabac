//! Dense convex QP solver
//!
//! ```txt
//!     min  ½ xᵀHx + cᵀx
//!     s.to Ax ≤ b
//! ```
//!
//! Primal-dual interior point with Mehrotra predictor-corrector from a
//! least-squares start (restarted from more central points if it stalls),
//! followed by
//! a polishing step that re-solves the equality-constrained KKT system on the
//! identified active set. When polishing succeeds, complementarity is exact
//! and the multipliers are those of the active-set KKT system, which is what
//! the sensitivity analysis differentiates.
//!
//! `H` must be positive definite for polishing and for active-set hints.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    MaxIter,
    InfeasibleNumerics,
}

impl SolveStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            SolveStatus::Optimal => "optimal",
            SolveStatus::MaxIter => "max_iter",
            SolveStatus::InfeasibleNumerics => "infeasible_numerics",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpOptions {
    pub max_iter: usize,
    /// Target for the total complementarity `wᵀz`.
    pub gap_tol: f64,
    /// Relative primal/dual residual tolerance.
    pub feas_tol: f64,
    pub polish: bool,
}

impl Default for QpOptions {
    fn default() -> Self {
        QpOptions {
            max_iter: 100,
            gap_tol: 1e-9,
            feas_tol: 1e-10,
            polish: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DenseQp {
    pub h: DMatrix<f64>,
    pub c: DVector<f64>,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// Multipliers of `Ax ≤ b`, nonnegative.
    pub z: DVector<f64>,
    /// `b - Ax`.
    pub slack: DVector<f64>,
    pub status: SolveStatus,
    pub iterations: usize,
    pub polished: bool,
}

impl DenseQp {
    pub fn n(&self) -> usize {
        self.h.nrows()
    }

    pub fn m(&self) -> usize {
        self.a.nrows()
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.h * x)) + self.c.dot(x)
    }

    fn check(&self) -> Result<()> {
        let (n, m) = (self.n(), self.m());
        if self.h.ncols() != n || self.c.len() != n || self.a.ncols() != n || self.b.len() != m {
            return Err(Error::Shape(format!(
                "QP blocks inconsistent: H {}x{}, c {}, A {}x{}, b {}",
                self.h.nrows(),
                self.h.ncols(),
                self.c.len(),
                self.a.nrows(),
                self.a.ncols(),
                self.b.len()
            )));
        }
        Ok(())
    }

    /// Stationarity residual `‖Hx + c + Aᵀz‖∞`.
    pub fn stationarity(&self, x: &DVector<f64>, z: &DVector<f64>) -> f64 {
        (&self.h * x + &self.c + self.a.tr_mul(z)).amax()
    }

    pub fn solve(&self, opts: &QpOptions) -> Result<QpSolution> {
        self.check()?;
        let sol = self.interior_point(opts);
        if opts.polish && sol.status != SolveStatus::InfeasibleNumerics {
            let active: Vec<usize> = (0..self.m()).filter(|&i| sol.slack[i] < sol.z[i]).collect();
            if let Some(p) = self.solve_on_active_set(&active, 1e-11) {
                return Ok(QpSolution {
                    iterations: sol.iterations,
                    status: SolveStatus::Optimal,
                    ..p
                });
            }
        }
        Ok(sol)
    }

    /// Tries the given active set first; falls back to the interior point if
    /// the resulting KKT point is not optimal.
    pub fn solve_with_hint(&self, active: &[usize], opts: &QpOptions) -> Result<QpSolution> {
        self.check()?;
        if let Some(p) = self.solve_on_active_set(active, 1e-11) {
            return Ok(p);
        }
        self.solve(opts)
    }

    /// Solves the KKT system with `active` rows as equalities and accepts the
    /// point only if it is primal feasible and dual nonnegative up to `tol`.
    fn solve_on_active_set(&self, active: &[usize], tol: f64) -> Option<QpSolution> {
        let n = self.n();
        if active.len() > n {
            return None;
        }
        let chol = Cholesky::new(self.h.clone())?;
        let a_act = rows(&self.a, active);
        let b_act = DVector::from_iterator(active.len(), active.iter().map(|&i| self.b[i]));
        let (x, lam) = kkt_solve(&chol, &a_act, &(-&self.c), &b_act).ok()?;
        let scale_b = 1.0 + self.b.amax();
        let scale_z = 1.0 + lam.amax();
        if lam.iter().any(|&l| l < -tol * scale_z || !l.is_finite()) {
            return None;
        }
        let slack = &self.b - &self.a * &x;
        if slack.iter().any(|&s| s < -tol * scale_b || !s.is_finite()) {
            return None;
        }
        let mut z = DVector::zeros(self.m());
        let mut slack = slack.map(|s| s.max(0.0));
        for (k, &i) in active.iter().enumerate() {
            z[i] = lam[k].max(0.0);
            slack[i] = 0.0;
        }
        Some(QpSolution {
            x,
            z,
            slack,
            status: SolveStatus::Optimal,
            iterations: 0,
            polished: true,
        })
    }

    /// Least-squares start: `x` minimizes the objective plus `½‖Ax − b‖²`,
    /// then the residual is split into slacks and multipliers and both are
    /// shifted to be positive.
    fn starting_point(
        &self,
        at: &DMatrix<f64>,
        floor: f64,
    ) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
        let (n, m) = (self.n(), self.m());
        let mat = &self.h + at * &self.a;
        let rhs = at * &self.b - &self.c;
        let x = Cholesky::new(mat.clone())
            .or_else(|| Cholesky::new(mat + DMatrix::identity(n, n) * 1e-8))
            .map(|c| c.solve(&rhs))
            .unwrap_or_else(|| DVector::zeros(n));
        let r = &self.b - &self.a * &x;
        let shift = |v: DVector<f64>| {
            let lo = v.min();
            if m == 0 || lo >= floor {
                v
            } else {
                v.add_scalar(floor - lo)
            }
        };
        (x, shift(r.clone()), shift(-r))
    }

    /// Runs the interior point from progressively more central starts until
    /// one converges. Reported iterations cover every attempt.
    fn interior_point(&self, opts: &QpOptions) -> QpSolution {
        let mut spent = 0;
        let mut last = None;
        for &floor in &START_FLOORS {
            let mut sol = self.interior_point_from(opts, floor);
            spent += sol.iterations;
            sol.iterations = spent;
            if sol.status == SolveStatus::Optimal {
                return sol;
            }
            last = Some(sol);
        }
        last.expect("at least one start")
    }

    fn interior_point_from(&self, opts: &QpOptions, floor: f64) -> QpSolution {
        let (n, m) = (self.n(), self.m());
        let scale_c = 1.0 + self.c.amax();
        let scale_b = 1.0 + self.b.amax();
        let at = self.a.transpose();
        let (mut x, mut w, mut z) = self.starting_point(&at, floor);

        let mut status = SolveStatus::MaxIter;
        let mut iterations = 0;
        for it in 0..=opts.max_iter {
            iterations = it;
            let rd = &self.h * &x + &self.c + &at * &z;
            let rp = &self.a * &x + &w - &self.b;
            let gap = w.dot(&z);
            if !(gap.is_finite()
                && rd.iter().all(|v| v.is_finite())
                && rp.iter().all(|v| v.is_finite()))
            {
                status = SolveStatus::InfeasibleNumerics;
                break;
            }
            if rd.amax() <= opts.feas_tol * scale_c
                && rp.amax() <= opts.feas_tol * scale_b
                && gap <= opts.gap_tol
            {
                status = SolveStatus::Optimal;
                break;
            }
            if it == opts.max_iter {
                break;
            }
            let mu = gap / m.max(1) as f64;

            let d = z.component_div(&w);
            let mut mat = self.h.clone();
            for i in 0..m {
                let di = d[i];
                for p in 0..n {
                    let ap = self.a[(i, p)] * di;
                    if ap == 0.0 {
                        continue;
                    }
                    for q in p..n {
                        mat[(p, q)] += ap * self.a[(i, q)];
                    }
                }
            }
            for p in 0..n {
                for q in 0..p {
                    mat[(p, q)] = mat[(q, p)];
                }
            }
            let chol = match Cholesky::new(mat.clone()).or_else(|| {
                let mut reg = mat;
                let eps = 1e-12 * (1.0 + reg.diagonal().amax());
                for p in 0..n {
                    reg[(p, p)] += eps;
                }
                Cholesky::new(reg)
            }) {
                Some(c) => c,
                None => {
                    status = SolveStatus::InfeasibleNumerics;
                    break;
                }
            };

            // Solves H dx + Aᵀdz = r1, A dx + dw = r2, Z dw + W dz = r3.
            let newton = |r1: &DVector<f64>, r2: &DVector<f64>, r3: &DVector<f64>| {
                let t = (r3 - z.component_mul(r2)).component_div(&w);
                let dx = chol.solve(&(r1 - &at * &t));
                let dw = r2 - &self.a * &dx;
                let dz = (r3 - z.component_mul(&dw)).component_div(&w);
                (dx, dw, dz)
            };
            // The normal equations lose accuracy once z/w spreads widely;
            // refinement against the full system recovers it.
            let direction = |rc: &DVector<f64>| {
                let (r1, r2) = (-&rd, -&rp);
                let (mut dx, mut dw, mut dz) = newton(&r1, &r2, rc);
                for _ in 0..REFINE {
                    let e1 = &r1 - &self.h * &dx - &at * &dz;
                    let e2 = &r2 - &self.a * &dx - &dw;
                    let e3 = rc - z.component_mul(&dw) - w.component_mul(&dz);
                    let (cx, cw, cz) = newton(&e1, &e2, &e3);
                    dx += cx;
                    dw += cw;
                    dz += cz;
                }
                (dx, dw, dz)
            };

            // Predictor.
            let rc_aff = -w.component_mul(&z);
            let (_, dw_a, dz_a) = direction(&rc_aff);
            let alpha_aff = max_step(&w, &dw_a).min(max_step(&z, &dz_a));
            let mu_aff = (&w + alpha_aff * &dw_a).dot(&(&z + alpha_aff * &dz_a)) / m.max(1) as f64;
            let sigma = (mu_aff / mu).powi(3).clamp(0.0, 1.0);

            // Steps keep every product w_i z_i above a fixed fraction of the
            // new average, or the current smallest ratio if that is lower.
            // With `decrease` set, the step is also shortened until the gap
            // shrinks by a tenth of its length.
            let gamma = NEIGHBORHOOD.min(w.component_mul(&z).min() / mu);
            let step = |rc: &DVector<f64>, decrease: bool| {
                let (dx, dw, dz) = direction(rc);
                let mut alpha = (0.995 * max_step(&w, &dw).min(max_step(&z, &dz))).min(1.0);
                loop {
                    let (wn, zn) = (&w + alpha * &dw, &z + alpha * &dz);
                    let prod = wn.component_mul(&zn);
                    let new_gap = prod.sum();
                    let centred = prod.min() >= gamma * new_gap / m as f64;
                    let shrinks = !decrease || new_gap <= gap * (1.0 - 0.1 * alpha);
                    if (centred && shrinks) || alpha < 1e-10 {
                        return (dx, dw, dz, alpha, new_gap);
                    }
                    alpha *= 0.8;
                }
            };
            // Corrector; when its second-order term stalls the gap, the plain
            // centered direction is tried as well, with a monotone gap once
            // the iterate is nearly feasible.
            let centering = DVector::from_element(m, sigma * mu);
            let mut best = step(&(&rc_aff - dw_a.component_mul(&dz_a) + &centering), false);
            if best.4 > gap * (1.0 - 0.1 * best.3) {
                let feasible = rd.amax() <= 1e3 * opts.feas_tol * scale_c
                    && rp.amax() <= 1e3 * opts.feas_tol * scale_b;
                let plain = step(
                    &(&rc_aff + DVector::from_element(m, sigma.clamp(0.1, 0.5) * mu)),
                    feasible,
                );
                if if feasible {
                    plain.3 >= 1e-10
                } else {
                    plain.4 < best.4
                } {
                    best = plain;
                }
            }
            let (dx, dw, dz, alpha, _) = best;
            x += alpha * dx;
            w += alpha * dw;
            z += alpha * dz;
        }
        let slack = &self.b - &self.a * &x;
        QpSolution {
            x,
            z,
            slack,
            status,
            iterations,
            polished: false,
        }
    }
}

const NEIGHBORHOOD: f64 = 1e-3;
const REFINE: usize = 2;
const START_FLOORS: [f64; 3] = [0.1, 1.0, 10.0];

/// Largest `α ∈ (0, ∞)` keeping `v + α dv ≥ 0`, capped at 1e20.
fn max_step(v: &DVector<f64>, dv: &DVector<f64>) -> f64 {
    let mut a = 1e20_f64;
    for (vi, di) in v.iter().zip(dv.iter()) {
        if *di < 0.0 {
            a = a.min(-vi / di);
        }
    }
    a
}

pub(crate) fn rows(a: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), a.ncols(), |r, c| a[(idx[r], c)])
}

/// Rows of `a` (in the given order) that are linear combinations of earlier
/// rows, by Gram-Schmidt with relative tolerance `tol`.
pub fn redundant_rows(a: &DMatrix<f64>, tol: f64) -> Vec<usize> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut redundant = Vec::new();
    for i in 0..a.nrows() {
        let row = a.row(i).transpose();
        let norm = row.norm();
        let mut r = row.clone();
        for _ in 0..2 {
            for q in &basis {
                let proj = q.dot(&r);
                r -= proj * q;
            }
        }
        let rn = r.norm();
        if norm == 0.0 || rn <= tol * norm {
            redundant.push(i);
        } else {
            basis.push(r / rn);
        }
    }
    redundant
}

/// Solves `[H Aᵀ; A 0] [X; Λ] = [Rx; Rλ]` for positive definite `H` given by
/// its Cholesky factor. Fails with a rank error when `A` lacks full row rank.
pub fn kkt_solve_mat(
    h: &Cholesky<f64, Dyn>,
    a: &DMatrix<f64>,
    rx: &DMatrix<f64>,
    rl: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let hx = h.solve(rx);
    if a.nrows() == 0 {
        return Ok((hx, rl.clone()));
    }
    let redundant = redundant_rows(a, 1e-9);
    if !redundant.is_empty() {
        return Err(Error::Rank {
            message: format!(
                "{} of {} active rows are linearly dependent",
                redundant.len(),
                a.nrows()
            ),
            redundant,
        });
    }
    let hinv_at = h.solve(&a.transpose());
    let schur = a * &hinv_at;
    let schur_chol = Cholesky::new(schur).ok_or_else(|| Error::Rank {
        message: "active-set Schur complement is not positive definite".into(),
        redundant: Vec::new(),
    })?;
    let lam = schur_chol.solve(&(a * &hx - rl));
    let x = hx - &hinv_at * &lam;
    Ok((x, lam))
}

/// Single right-hand side version of [`kkt_solve_mat`].
pub fn kkt_solve(
    h: &Cholesky<f64, Dyn>,
    a: &DMatrix<f64>,
    rx: &DVector<f64>,
    rl: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let (x, l) = kkt_solve_mat(
        h,
        a,
        &DMatrix::from_column_slice(rx.len(), 1, rx.as_slice()),
        &DMatrix::from_column_slice(rl.len(), 1, rl.as_slice()),
    )?;
    Ok((x.column(0).into_owned(), l.column(0).into_owned()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn box_qp() -> DenseQp {
        // min ½‖x - (2, -3)‖² s.to -1 ≤ x ≤ 1
        DenseQp {
            h: DMatrix::identity(2, 2),
            c: DVector::from_vec(vec![-2.0, 3.0]),
            a: DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 0.0, 1.0, -1.0, 0.0, 0.0, -1.0]),
            b: DVector::from_element(4, 1.0),
        }
    }

    #[test]
    fn projects_onto_box() {
        let qp = box_qp();
        let sol = qp.solve(&QpOptions::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert!(sol.polished);
        assert_abs_diff_eq!(sol.x[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(sol.x[1], -1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(sol.z[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(sol.z[3], 2.0, epsilon = 1e-12);
        assert!(qp.stationarity(&sol.x, &sol.z) < 1e-12);
    }

    #[test]
    fn unpolished_interior_point_converges() {
        let qp = box_qp();
        let opts = QpOptions {
            polish: false,
            ..Default::default()
        };
        let sol = qp.solve(&opts).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert!((sol.x[0] - 1.0).abs() < 1e-8);
        assert!(sol.slack.dot(&sol.z) <= 1e-9);
    }

    #[test]
    fn hint_matches_cold_solve() {
        let qp = box_qp();
        let cold = qp.solve(&QpOptions::default()).unwrap();
        let warm = qp.solve_with_hint(&[0, 3], &QpOptions::default()).unwrap();
        assert_eq!(cold.x, warm.x);
        // A wrong hint falls back to the interior point.
        let wrong = qp.solve_with_hint(&[1, 2], &QpOptions::default()).unwrap();
        assert_eq!(cold.x, wrong.x);
    }

    #[test]
    fn redundant_rows_detected() {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 2.0, 0.0, 0.0, 1.0]);
        assert_eq!(redundant_rows(&a, 1e-9), vec![1]);
        let h = Cholesky::new(DMatrix::identity(2, 2)).unwrap();
        let err = kkt_solve(&h, &a, &DVector::zeros(2), &DVector::zeros(3));
        assert!(matches!(err, Err(Error::Rank { redundant, .. }) if redundant == vec![1]));
    }

    #[test]
    fn shape_errors() {
        let mut qp = box_qp();
        qp.b = DVector::zeros(3);
        assert!(matches!(
            qp.solve(&QpOptions::default()),
            Err(Error::Shape(_))
        ));
    }
}
