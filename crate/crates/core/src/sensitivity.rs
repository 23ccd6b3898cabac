//! Jacobian of the OPF minimizer with respect to the OPF data.
//!
//! At an optimal point the strongly active rows are held as equalities and
//! the KKT system is differentiated:
//!
//! ```txt
//!     [H  Aₛᵀ] [dx]   [-∂c/∂θ ]
//!     [Aₛ  0 ] [dλ] = [ ∂bₛ/∂θ] dθ
//! ```
//!
//! `H` and `A` do not depend on `θ`, so no second-order cross terms appear
//! beyond `∂c/∂θ`. Weakly active rows (tight with a zero multiplier) are
//! treated as inactive and the result is flagged degenerate.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::opf::{OpfSolution, OpfSpec};
use crate::qp::{kkt_solve_mat, redundant_rows, rows, SolveStatus};

pub const DEFAULT_TOL_PRIMAL: f64 = 1e-7;
pub const DEFAULT_TOL_DUAL: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActiveSet {
    /// Rows with slack at most `tol_primal`.
    pub active: Vec<usize>,
    /// Active rows whose multiplier is at least `tol_dual`.
    pub strongly: Vec<usize>,
    /// Active rows with a multiplier below `tol_dual`.
    pub weakly: Vec<usize>,
}

impl ActiveSet {
    pub fn degenerate(&self) -> bool {
        !self.weakly.is_empty()
    }

    /// Active voltage and rating rows, leaving out the `s ≥ 0` bound.
    pub fn binding_limits(&self, spec: &OpfSpec) -> Vec<usize> {
        let last = spec.m() - 1;
        self.active.iter().copied().filter(|&r| r != last).collect()
    }
}

pub fn active_set(sol: &OpfSolution, tol_primal: f64, tol_dual: f64) -> ActiveSet {
    let mut set = ActiveSet {
        active: Vec::new(),
        strongly: Vec::new(),
        weakly: Vec::new(),
    };
    for i in 0..sol.slack.len() {
        if sol.slack[i] <= tol_primal {
            set.active.push(i);
            if sol.duals[i] >= tol_dual {
                set.strongly.push(i);
            } else {
                set.weakly.push(i);
            }
        }
    }
    set
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Redundancy {
    /// Linearly dependent strongly active rows are a rank error.
    #[default]
    Error,
    /// Drop dependent rows (later rows first) and flag the result degenerate.
    Drop,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensitivityOptions {
    pub tol_primal: f64,
    pub tol_dual: f64,
    pub redundancy: Redundancy,
}

impl Default for SensitivityOptions {
    fn default() -> Self {
        SensitivityOptions {
            tol_primal: DEFAULT_TOL_PRIMAL,
            tol_dual: DEFAULT_TOL_DUAL,
            redundancy: Redundancy::Error,
        }
    }
}

/// Sensitivity of one scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivitySet {
    /// `(G+1) × P`; rows `q^g` then `s`, columns the features.
    pub jacobian: DMatrix<f64>,
    pub active: ActiveSet,
    /// Strongly active rows dropped as linearly dependent.
    pub dropped: Vec<usize>,
    pub degenerate: bool,
}

pub fn minimizer_jacobian(
    spec: &OpfSpec,
    sol: &OpfSolution,
    opts: &SensitivityOptions,
) -> Result<SensitivitySet> {
    if sol.status != SolveStatus::Optimal {
        return Err(Error::State(format!(
            "sensitivity needs an optimal solution, status is {}",
            sol.status.as_str()
        )));
    }
    if sol.slack.len() != spec.m() {
        return Err(Error::Shape(format!(
            "solution has {} rows, spec has {}",
            sol.slack.len(),
            spec.m()
        )));
    }
    let active = active_set(sol, opts.tol_primal, opts.tol_dual);
    let mut rows_used = active.strongly.clone();
    let mut dropped = Vec::new();
    let redundant = redundant_rows(&rows(spec.constraints(), &rows_used), 1e-9);
    if !redundant.is_empty() {
        match opts.redundancy {
            Redundancy::Error => {
                let labels: Vec<String> = redundant
                    .iter()
                    .map(|&k| spec.row_label(rows_used[k]))
                    .collect();
                return Err(Error::Rank {
                    message: format!(
                        "strongly active rows are linearly dependent: {}",
                        labels.join(", ")
                    ),
                    redundant: redundant.iter().map(|&k| rows_used[k]).collect(),
                });
            }
            Redundancy::Drop => {
                dropped = redundant.iter().map(|&k| rows_used[k]).collect();
                rows_used.retain(|r| !dropped.contains(r));
            }
        }
    }
    let a_s = rows(spec.constraints(), &rows_used);
    let rhs_x = -spec.dc_dtheta();
    let rhs_l = rows(spec.db_dtheta(), &rows_used);
    let (jacobian, _) = kkt_solve_mat(spec.hessian_chol(), &a_s, &rhs_x, &rhs_l)?;
    if jacobian.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric {
            iter: 0,
            what: "non-finite minimizer Jacobian".into(),
        });
    }
    let degenerate = active.degenerate() || !dropped.is_empty();
    Ok(SensitivitySet {
        jacobian,
        active,
        dropped,
        degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{FeederModel, GridMatrices, LineSpec};
    use crate::opf::{solve_opf, FeatureLayout, OpfTheta, DEFAULT_NU, DEFAULT_RHO};
    use approx::assert_abs_diff_eq;
    use nalgebra::DVector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn single_line(r: f64, qmax: f64) -> OpfSpec {
        let grid = GridMatrices {
            r: DMatrix::from_element(1, 1, r),
            x: DMatrix::from_element(1, 1, r),
        };
        OpfSpec::new(
            grid,
            vec![1],
            DVector::from_element(1, qmax),
            0.03,
            1000.0,
            100.0,
            FeatureLayout::full(1),
        )
        .unwrap()
    }

    #[test]
    fn interior_solution_has_no_binding_limits() {
        let spec = single_line(0.01, 0.5);
        let sol = solve_opf(&spec, &OpfTheta(DVector::from_vec(vec![-1.0, 0.3]))).unwrap();
        let set = active_set(&sol, DEFAULT_TOL_PRIMAL, DEFAULT_TOL_DUAL);
        assert!(set.binding_limits(&spec).is_empty());
        assert_eq!(set.strongly, vec![spec.m() - 1]);
        assert!(!set.degenerate());
    }

    #[test]
    fn binding_rating_is_strongly_active_with_zero_row() {
        let spec = single_line(0.01, 0.2);
        // Reactive load beyond the rating pins q^g at q̄.
        let sol = solve_opf(&spec, &OpfTheta(DVector::from_vec(vec![-0.5, 0.5]))).unwrap();
        assert_abs_diff_eq!(sol.qg[0], 0.2, epsilon = 1e-10);
        let set = active_set(&sol, DEFAULT_TOL_PRIMAL, DEFAULT_TOL_DUAL);
        assert!(set.strongly.contains(&2));
        let sens = minimizer_jacobian(&spec, &sol, &SensitivityOptions::default()).unwrap();
        assert!(sens.jacobian.row(0).amax() < 1e-14);
        assert!(!sens.degenerate);
    }

    #[test]
    fn weakly_active_boundary_is_flagged() {
        // Interior minimum q^g = q^ℓ = 0 leaves deviation R p, which hits -v̄
        // at p = -3. Bisect on p to land on the boundary.
        let spec = single_line(0.01, 0.5);
        let lower = 1; // row: v >= -vmax - s
        let (mut lo, mut hi) = (-4.0_f64, -2.0_f64);
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            let sol = solve_opf(&spec, &OpfTheta(DVector::from_vec(vec![mid, 0.0]))).unwrap();
            if sol.duals[lower] > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let sol = solve_opf(&spec, &OpfTheta(DVector::from_vec(vec![hi, 0.0]))).unwrap();
        let set = active_set(&sol, DEFAULT_TOL_PRIMAL, DEFAULT_TOL_DUAL);
        assert!(
            set.weakly.contains(&lower),
            "{set:?} slack {}",
            sol.slack[lower]
        );
        let sens = minimizer_jacobian(&spec, &sol, &SensitivityOptions::default()).unwrap();
        assert!(sens.degenerate);
    }

    #[test]
    fn der_everywhere_interior_jacobian_is_selector() {
        let model = FeederModel::from_lines(
            &[
                LineSpec {
                    from: 0,
                    to: 1,
                    r: 0.01,
                    x: 0.01,
                },
                LineSpec {
                    from: 1,
                    to: 2,
                    r: 0.01,
                    x: 0.02,
                },
            ],
            &[(1, 1.0), (2, 1.0)],
        )
        .unwrap();
        let spec =
            OpfSpec::from_feeder(&model, FeatureLayout::full(2), DEFAULT_NU, DEFAULT_RHO).unwrap();
        let theta = OpfTheta(DVector::from_vec(vec![-0.2, -0.1, 0.1, 0.05]));
        let sol = solve_opf(&spec, &theta).unwrap();
        let sens = minimizer_jacobian(&spec, &sol, &SensitivityOptions::default()).unwrap();
        let mut expected = DMatrix::zeros(3, 4);
        expected[(0, 2)] = 1.0;
        expected[(1, 3)] = 1.0;
        assert!((sens.jacobian - expected).amax() < 1e-12);
    }

    fn three_bus(nu: f64) -> OpfSpec {
        let model = FeederModel::from_lines(
            &[
                LineSpec {
                    from: 0,
                    to: 1,
                    r: 0.02,
                    x: 0.03,
                },
                LineSpec {
                    from: 1,
                    to: 2,
                    r: 0.03,
                    x: 0.02,
                },
                LineSpec {
                    from: 1,
                    to: 3,
                    r: 0.025,
                    x: 0.025,
                },
            ],
            &[(2, 0.15), (3, 0.2)],
        )
        .unwrap();
        OpfSpec::from_feeder(&model, FeatureLayout::full(3), nu, DEFAULT_RHO).unwrap()
    }

    fn finite_difference(spec: &OpfSpec, theta: &DVector<f64>, h: f64) -> DMatrix<f64> {
        let mut fd = DMatrix::zeros(spec.g() + 1, spec.p());
        for j in 0..spec.p() {
            let mut tp = theta.clone();
            tp[j] += h;
            let mut tm = theta.clone();
            tm[j] -= h;
            let xp = solve_opf(spec, &OpfTheta(tp)).unwrap().x();
            let xm = solve_opf(spec, &OpfTheta(tm)).unwrap().x();
            fd.set_column(j, &((xp - xm) / (2.0 * h)));
        }
        fd
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let spec = three_bus(DEFAULT_NU);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut checked = 0;
        while checked < 20 {
            let theta = DVector::from_fn(6, |i, _| {
                if i < 3 {
                    rng.gen_range(-1.2..0.3)
                } else {
                    rng.gen_range(-0.1..0.4)
                }
            });
            let sol = solve_opf(&spec, &OpfTheta(theta.clone())).unwrap();
            // Stay clear of active-set boundaries.
            let near = (0..spec.m()).any(|i| sol.slack[i] < 1e-4 && sol.duals[i] < 1e-4);
            if near {
                continue;
            }
            let sens = minimizer_jacobian(&spec, &sol, &SensitivityOptions::default()).unwrap();
            let fd = finite_difference(&spec, &theta, 1e-5);
            let err = (&sens.jacobian - &fd).amax();
            assert!(err <= 1e-4, "max deviation {err}");
            checked += 1;
        }
    }

    #[test]
    fn piecewise_affine_within_active_set() {
        let spec = three_bus(DEFAULT_NU);
        let theta = DVector::from_vec(vec![-0.9, -0.4, -0.6, 0.2, 0.1, 0.15]);
        let sol = solve_opf(&spec, &OpfTheta(theta.clone())).unwrap();
        let sens = minimizer_jacobian(&spec, &sol, &SensitivityOptions::default()).unwrap();
        let dir = DVector::from_vec(vec![0.3, -0.2, 0.1, 0.05, -0.1, 0.2]);
        let alpha = 1e-6;
        let moved = solve_opf(&spec, &OpfTheta(&theta + alpha * &dir)).unwrap();
        assert_eq!(
            active_set(&moved, DEFAULT_TOL_PRIMAL, DEFAULT_TOL_DUAL).strongly,
            sens.active.strongly
        );
        let predicted = sol.x() + alpha * &sens.jacobian * &dir;
        assert!((moved.x() - predicted).amax() <= 1e-8);
    }

    #[test]
    fn non_optimal_solution_rejected() {
        let spec = single_line(0.01, 0.5);
        let mut sol = solve_opf(&spec, &OpfTheta(DVector::from_vec(vec![-1.0, 0.3]))).unwrap();
        sol.status = SolveStatus::MaxIter;
        assert!(matches!(
            minimizer_jacobian(&spec, &sol, &SensitivityOptions::default()),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn dependent_active_rows() {
        // Hand-made point where both rating rows of the same DER and the
        // lower voltage row are marked strongly active: rows 1, 2, 3 of a
        // two-variable problem cannot all be independent.
        let spec = single_line(0.01, 0.5);
        let mut sol = solve_opf(&spec, &OpfTheta(DVector::from_vec(vec![-1.0, 0.3]))).unwrap();
        for r in [1, 2, 3] {
            sol.slack[r] = 0.0;
            sol.duals[r] = 1.0;
        }
        let err = minimizer_jacobian(&spec, &sol, &SensitivityOptions::default());
        assert!(matches!(err, Err(Error::Rank { .. })), "{err:?}");
        let opts = SensitivityOptions {
            redundancy: Redundancy::Drop,
            ..Default::default()
        };
        let sens = minimizer_jacobian(&spec, &sol, &opts).unwrap();
        assert!(sens.degenerate);
        assert!(!sens.dropped.is_empty());
    }
}
