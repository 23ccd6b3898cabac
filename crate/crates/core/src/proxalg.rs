//! Accelerated proximal gradient for `f(W) + λ Σ_g ‖W_g‖_F` where the groups
//! partition the columns of `W`.
//!
//! [`apg_convex`] is the classic two-point accelerated scheme with a fixed
//! step. [`apg_nonconvex`] is the monitored variant that keeps a running
//! reference cost `c_i` and falls back to a plain proximal step from the
//! current iterate when the extrapolated step does not decrease enough; it
//! converges to a critical point without convexity.

use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupMode {
    /// Every column is its own group.
    Column,
    /// Columns measured at the same bus share a group.
    Bus,
    Custom,
}

impl GroupMode {
    pub fn as_str(self) -> &'static str {
        match self {
            GroupMode::Column => "column",
            GroupMode::Bus => "bus",
            GroupMode::Custom => "custom",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupStructure {
    p: usize,
    groups: Vec<Vec<usize>>,
    mode: GroupMode,
}

impl GroupStructure {
    pub fn per_column(p: usize) -> Self {
        GroupStructure {
            p,
            groups: (0..p).map(|i| vec![i]).collect(),
            mode: GroupMode::Column,
        }
    }

    /// Column `n` grouped with column `n + N` for `P = 2N`.
    pub fn paired(n: usize) -> Self {
        GroupStructure {
            p: 2 * n,
            groups: (0..n).map(|i| vec![i, i + n]).collect(),
            mode: GroupMode::Bus,
        }
    }

    /// Groups columns by the bus they were measured at, in order of first
    /// appearance.
    pub fn by_bus(bus_of_column: &[usize]) -> Self {
        let mut order: Vec<usize> = Vec::new();
        let mut groups: Vec<Vec<usize>> = Vec::new();
        for (col, &bus) in bus_of_column.iter().enumerate() {
            match order.iter().position(|&b| b == bus) {
                Some(k) => groups[k].push(col),
                None => {
                    order.push(bus);
                    groups.push(vec![col]);
                }
            }
        }
        GroupStructure {
            p: bus_of_column.len(),
            groups,
            mode: GroupMode::Bus,
        }
    }

    pub fn custom(p: usize, groups: Vec<Vec<usize>>) -> Result<Self> {
        let mut seen = vec![false; p];
        for g in &groups {
            if g.is_empty() {
                return Err(Error::Argument("empty group".into()));
            }
            for &c in g {
                if c >= p {
                    return Err(Error::Argument(format!("column {c} outside 0..{p}")));
                }
                if std::mem::replace(&mut seen[c], true) {
                    return Err(Error::Argument(format!("column {c} belongs to two groups")));
                }
            }
        }
        if let Some(c) = seen.iter().position(|s| !s) {
            return Err(Error::Argument(format!("column {c} is not in any group")));
        }
        Ok(GroupStructure {
            p,
            groups,
            mode: GroupMode::Custom,
        })
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn mode(&self) -> GroupMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    /// Frobenius norm of each group of columns of `w`.
    pub fn norms(&self, w: &DMatrix<f64>) -> Vec<f64> {
        self.groups
            .iter()
            .map(|g| {
                g.iter()
                    .map(|&c| w.column(c).norm_squared())
                    .sum::<f64>()
                    .sqrt()
            })
            .collect()
    }

    /// `Σ_g ‖W_g‖`.
    pub fn penalty(&self, w: &DMatrix<f64>) -> f64 {
        self.norms(w).iter().sum()
    }

    pub fn count_nonzero(&self, w: &DMatrix<f64>) -> usize {
        self.norms(w).iter().filter(|&&v| v > 0.0).count()
    }

    fn check(&self, w: &DMatrix<f64>) -> Result<()> {
        if w.ncols() != self.p {
            return Err(Error::Shape(format!(
                "matrix has {} columns, group structure covers {}",
                w.ncols(),
                self.p
            )));
        }
        Ok(())
    }
}

/// Group soft-thresholding: each group block `y_g` becomes
/// `(1 - β/‖y_g‖) y_g` when `‖y_g‖ ≥ β` and zero otherwise.
pub fn group_prox(y: &DMatrix<f64>, beta: f64, groups: &GroupStructure) -> Result<DMatrix<f64>> {
    if !(beta >= 0.0) {
        return Err(Error::Argument(format!(
            "prox threshold must be nonnegative, got {beta}"
        )));
    }
    groups.check(y)?;
    let mut out = y.clone();
    for (g, norm) in groups.groups.iter().zip(groups.norms(y)) {
        if norm >= beta && norm > 0.0 {
            let scale = 1.0 - beta / norm;
            for &c in g {
                out.column_mut(c).scale_mut(scale);
            }
        } else {
            for &c in g {
                out.column_mut(c).fill(0.0);
            }
        }
    }
    Ok(out)
}

/// Smooth part of the composite objective.
pub trait SmoothObjective {
    fn value(&mut self, w: &DMatrix<f64>) -> Result<f64>;
    fn gradient(&mut self, w: &DMatrix<f64>) -> Result<DMatrix<f64>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    StandardNormal,
    Zero,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApgConfig {
    /// Fixed step for the convex method; initial step for the backtracked
    /// fallback step of the nonconvex method.
    pub step: f64,
    /// Initial step of the extrapolated step of the nonconvex method.
    pub step_bar: f64,
    pub lambda: f64,
    pub max_iter: usize,
    /// Relative change of the total cost that stops the iteration.
    pub tol: f64,
    pub eta: f64,
    pub delta: f64,
    pub seed: u64,
    pub init: Init,
    pub max_backtracks: usize,
}

impl Default for ApgConfig {
    fn default() -> Self {
        ApgConfig {
            step: 1.0,
            step_bar: 1.0,
            lambda: 0.0,
            max_iter: 500,
            tol: 1e-6,
            eta: 0.8,
            delta: 1e-4,
            seed: 0,
            init: Init::StandardNormal,
            max_backtracks: 40,
        }
    }
}

impl ApgConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0 && self.step_bar > 0.0) {
            return Err(Error::Argument("step sizes must be positive".into()));
        }
        if !(self.delta > 0.0) {
            return Err(Error::Argument("delta must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.eta) {
            return Err(Error::Argument("eta must lie in [0, 1)".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Argument("lambda must be nonnegative".into()));
        }
        Ok(())
    }

    /// Starting matrix `W⁰` for a `P × P` problem.
    pub fn initial(&self, p: usize) -> DMatrix<f64> {
        match self.init {
            Init::Zero => DMatrix::zeros(p, p),
            Init::Identity => DMatrix::identity(p, p),
            Init::StandardNormal => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                DMatrix::from_fn(p, p, |_, _| StandardNormal.sample(&mut rng))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    /// Initial point.
    Start,
    /// Accelerated proximal step (convex method).
    Prox,
    /// Extrapolated step accepted by the sufficient-decrease test.
    Extrapolated,
    /// Extrapolated step kept after comparison with the fallback.
    Compared,
    /// Fallback proximal step from the current iterate.
    Fallback,
}

impl StepKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StepKind::Start => "start",
            StepKind::Prox => "prox",
            StepKind::Extrapolated => "extrapolated",
            StepKind::Compared => "compared",
            StepKind::Fallback => "fallback",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: usize,
    pub cost: f64,
    pub smooth_cost: f64,
    pub penalty: f64,
    pub nnz_groups: usize,
    pub step_kind: StepKind,
    /// Reference cost `c_i` of the nonconvex method (NaN for the convex one).
    #[serde(skip)]
    pub reference: f64,
}

#[derive(Debug, Clone)]
pub struct ApgResult {
    pub w: DMatrix<f64>,
    pub trace: Vec<TraceRow>,
    pub iterations: usize,
    pub converged: bool,
}

impl ApgResult {
    pub fn final_cost(&self) -> f64 {
        self.trace.last().map(|r| r.cost).unwrap_or(f64::NAN)
    }
}

pub fn write_trace_csv(path: &Path, trace: &[TraceRow]) -> Result<()> {
    let mut text = String::from("iter,cost,smooth_cost,penalty,nnz_groups,step_kind\n");
    for r in trace {
        text.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.iter,
            r.cost,
            r.smooth_cost,
            r.penalty,
            r.nnz_groups,
            r.step_kind.as_str()
        ));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

fn finite(m: &DMatrix<f64>) -> bool {
    m.iter().all(|v| v.is_finite())
}

fn relative_change(prev: f64, next: f64) -> f64 {
    let diff = (next - prev).abs();
    if diff == 0.0 {
        0.0
    } else {
        diff / prev.abs().max(next.abs())
    }
}

struct Evaluated {
    smooth: f64,
    penalty: f64,
    nnz: usize,
}

impl Evaluated {
    fn total(&self, lambda: f64) -> f64 {
        self.smooth + lambda * self.penalty
    }
}

fn evaluate(
    obj: &mut dyn SmoothObjective,
    w: &DMatrix<f64>,
    groups: &GroupStructure,
    iter: usize,
) -> Result<Evaluated> {
    let smooth = obj.value(w).map_err(|e| e.at_iteration(iter))?;
    if !smooth.is_finite() {
        return Err(Error::Numeric {
            iter,
            what: "non-finite cost".into(),
        });
    }
    let norms = groups.norms(w);
    Ok(Evaluated {
        smooth,
        penalty: norms.iter().sum(),
        nnz: norms.iter().filter(|&&v| v > 0.0).count(),
    })
}

fn gradient(obj: &mut dyn SmoothObjective, w: &DMatrix<f64>, iter: usize) -> Result<DMatrix<f64>> {
    let g = obj.gradient(w).map_err(|e| e.at_iteration(iter))?;
    if !finite(&g) {
        return Err(Error::Numeric {
            iter,
            what: "non-finite gradient".into(),
        });
    }
    Ok(g)
}

fn row(iter: usize, e: &Evaluated, lambda: f64, kind: StepKind, reference: f64) -> TraceRow {
    TraceRow {
        iter,
        cost: e.total(lambda),
        smooth_cost: e.smooth,
        penalty: e.penalty,
        nnz_groups: e.nnz,
        step_kind: kind,
        reference,
    }
}

/// Accelerated proximal gradient with constant step `cfg.step` (at most
/// `1/L` for an `L`-smooth objective).
pub fn apg_convex(
    obj: &mut dyn SmoothObjective,
    groups: &GroupStructure,
    cfg: &ApgConfig,
    w0: DMatrix<f64>,
) -> Result<ApgResult> {
    cfg.validate()?;
    groups.check(&w0)?;
    let lambda = cfg.lambda;
    let mu = cfg.step;
    let mut w_prev = w0.clone();
    let mut w = w0;
    let (mut alpha_prev, mut alpha) = (0.0_f64, 1.0_f64);
    let e = evaluate(obj, &w, groups, 0)?;
    let mut cost = e.total(lambda);
    let mut trace = vec![row(0, &e, lambda, StepKind::Start, f64::NAN)];
    let mut converged = false;
    let mut iterations = 0;
    for i in 1..=cfg.max_iter {
        iterations = i;
        let w_bar = &w + (&w - &w_prev) * ((alpha_prev - 1.0) / alpha);
        let grad = gradient(obj, &w_bar, i)?;
        let y = &w_bar - grad * mu;
        let w_next = group_prox(&y, lambda * mu, groups)?;
        let e = evaluate(obj, &w_next, groups, i)?;
        let next_cost = e.total(lambda);
        trace.push(row(i, &e, lambda, StepKind::Prox, f64::NAN));
        alpha_prev = alpha;
        alpha = (1.0 + (4.0 * alpha * alpha + 1.0).sqrt()) / 2.0;
        w_prev = std::mem::replace(&mut w, w_next);
        let change = relative_change(cost, next_cost);
        cost = next_cost;
        if change <= cfg.tol {
            converged = true;
            break;
        }
    }
    Ok(ApgResult {
        w,
        trace,
        iterations,
        converged,
    })
}

/// Proximal step from `base` with backtracking: halves the step until the
/// total cost does not exceed the cost at `base`. Returns the new point, its
/// evaluation and the accepted step; `None` when no step was accepted.
#[allow(clippy::too_many_arguments)]
fn backtracked_step(
    obj: &mut dyn SmoothObjective,
    groups: &GroupStructure,
    base: &DMatrix<f64>,
    base_cost: f64,
    grad: &DMatrix<f64>,
    step0: f64,
    lambda: f64,
    max_backtracks: usize,
    iter: usize,
) -> Result<Option<(DMatrix<f64>, Evaluated, f64)>> {
    let mut step = step0;
    for _ in 0..=max_backtracks {
        let cand = group_prox(&(base - grad * step), lambda * step, groups)?;
        let e = evaluate(obj, &cand, groups, iter)?;
        if e.total(lambda) <= base_cost {
            return Ok(Some((cand, e, step)));
        }
        step *= 0.5;
    }
    Ok(None)
}

/// Monitored accelerated proximal gradient for nonconvex smooth parts.
///
/// The extrapolated step starts at `cfg.step_bar` and the fallback step at
/// `cfg.step`; each is halved until its proximal step does not increase the
/// total cost relative to its base point, and the next iteration retries
/// from twice the accepted value (capped at the configured one).
pub fn apg_nonconvex(
    obj: &mut dyn SmoothObjective,
    groups: &GroupStructure,
    cfg: &ApgConfig,
    w0: DMatrix<f64>,
) -> Result<ApgResult> {
    cfg.validate()?;
    groups.check(&w0)?;
    let lambda = cfg.lambda;

    let mut w_prev = w0.clone();
    let mut w = w0.clone();
    let mut z = w0;
    let e = evaluate(obj, &w, groups, 0)?;
    let mut cost_w = e.total(lambda);
    let mut c = cost_w;
    let mut q = 1.0_f64;
    let (mut alpha_prev, mut alpha) = (0.0_f64, 1.0_f64);
    let mut trace = vec![row(0, &e, lambda, StepKind::Start, c)];
    let (mut step_bar, mut step) = (cfg.step_bar, cfg.step);
    let mut converged = false;
    let mut iterations = 0;

    for i in 1..=cfg.max_iter {
        iterations = i;
        let w_bar = &w * ((alpha - 1.0) / alpha) + &z * (alpha_prev / alpha)
            - &w_prev * ((alpha_prev - 1.0) / alpha);
        let e_bar = evaluate(obj, &w_bar, groups, i)?;
        let grad_bar = gradient(obj, &w_bar, i)?;
        let extrapolated = backtracked_step(
            obj,
            groups,
            &w_bar,
            e_bar.total(lambda),
            &grad_bar,
            step_bar,
            lambda,
            cfg.max_backtracks,
            i,
        )?;
        let (z_next, e_z) = match extrapolated {
            Some((cand, e, s)) => {
                step_bar = (2.0 * s).min(cfg.step_bar);
                (cand, e)
            }
            None => (w_bar.clone(), e_bar),
        };
        let cost_z = e_z.total(lambda);
        let decrease = cfg.delta * (&z_next - &w_bar).norm_squared();

        let (w_next, e_next, kind) = if cost_z <= c - decrease {
            (z_next.clone(), e_z, StepKind::Extrapolated)
        } else {
            let grad_w = gradient(obj, &w, i)?;
            let fallback = backtracked_step(
                obj,
                groups,
                &w,
                cost_w,
                &grad_w,
                step,
                lambda,
                cfg.max_backtracks,
                i,
            )?;
            let (zb, e_zb) = match fallback {
                Some((cand, e, s)) => {
                    step = (2.0 * s).min(cfg.step);
                    (cand, e)
                }
                None => (w.clone(), evaluate(obj, &w, groups, i)?),
            };
            if cost_z <= e_zb.total(lambda) {
                (z_next.clone(), e_z, StepKind::Compared)
            } else {
                (zb, e_zb, StepKind::Fallback)
            }
        };

        let next_cost = e_next.total(lambda);
        alpha_prev = alpha;
        alpha = (1.0 + (4.0 * alpha * alpha + 1.0).sqrt()) / 2.0;
        let q_next = cfg.eta * q + 1.0;
        c = (cfg.eta * q * c + next_cost) / q_next;
        q = q_next;
        trace.push(row(i, &e_next, lambda, kind, c));

        z = z_next;
        w_prev = std::mem::replace(&mut w, w_next);
        let change = relative_change(cost_w, next_cost);
        cost_w = next_cost;
        if change <= cfg.tol {
            converged = true;
            break;
        }
    }
    Ok(ApgResult {
        w,
        trace,
        iterations,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    /// `½‖(W - I) A‖_F²` with gradient `(W - I) A Aᵀ`.
    struct LeastSquares {
        a: DMatrix<f64>,
        gram: DMatrix<f64>,
    }

    impl LeastSquares {
        fn random(p: usize, t: usize, seed: u64) -> Self {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a =
                DMatrix::from_fn(p, t, |_, _| StandardNormal.sample(&mut rng)) / (t as f64).sqrt();
            let gram = &a * a.transpose();
            LeastSquares { a, gram }
        }

        fn lipschitz(&self) -> f64 {
            self.gram.symmetric_eigenvalues().max()
        }
    }

    impl SmoothObjective for LeastSquares {
        fn value(&mut self, w: &DMatrix<f64>) -> Result<f64> {
            let p = w.nrows();
            Ok(0.5 * ((w - DMatrix::identity(p, p)) * &self.a).norm_squared())
        }

        fn gradient(&mut self, w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
            let p = w.nrows();
            Ok((w - DMatrix::identity(p, p)) * &self.gram)
        }
    }

    #[test]
    fn prox_examples() {
        let y = DMatrix::from_column_slice(2, 1, &[3.0, 4.0]);
        let g = GroupStructure::per_column(1);
        let out = group_prox(&y, 2.5, &g).unwrap();
        assert_abs_diff_eq!(out[(0, 0)], 1.5, epsilon = 1e-15);
        assert_abs_diff_eq!(out[(1, 0)], 2.0, epsilon = 1e-15);
        assert_eq!(group_prox(&y, 6.0, &g).unwrap(), DMatrix::zeros(2, 1));
        assert_eq!(group_prox(&y, 0.0, &g).unwrap(), y);
        assert!(matches!(group_prox(&y, -1.0, &g), Err(Error::Argument(_))));
    }

    #[test]
    fn paired_groups_shrink_together() {
        let g = GroupStructure::paired(1);
        // Columns (3,0) and (0,4) form one block of norm 5.
        let y = DMatrix::from_row_slice(2, 2, &[3.0, 0.0, 0.0, 4.0]);
        let out = group_prox(&y, 2.5, &g).unwrap();
        assert_abs_diff_eq!(out[(0, 0)], 1.5, epsilon = 1e-15);
        assert_abs_diff_eq!(out[(1, 1)], 2.0, epsilon = 1e-15);
    }

    #[test]
    fn group_structure_constructors() {
        let g = GroupStructure::by_bus(&[3, 5, 3, 5, 7]);
        assert_eq!(g.groups(), &[vec![0, 2], vec![1, 3], vec![4]]);
        assert!(GroupStructure::custom(3, vec![vec![0, 1], vec![1, 2]]).is_err());
        assert!(GroupStructure::custom(3, vec![vec![0, 1]]).is_err());
        assert!(GroupStructure::custom(3, vec![vec![0, 2], vec![1]]).is_ok());
    }

    fn arb_matrix(p: usize) -> impl Strategy<Value = DMatrix<f64>> {
        proptest::collection::vec(-5.0..5.0f64, p * p).prop_map(move |v| DMatrix::from_vec(p, p, v))
    }

    proptest! {
        #[test]
        fn prox_is_nonexpansive(y1 in arb_matrix(4), y2 in arb_matrix(4), beta in 0.0..6.0f64) {
            let g = GroupStructure::custom(4, vec![vec![0, 3], vec![1], vec![2]]).unwrap();
            let p1 = group_prox(&y1, beta, &g).unwrap();
            let p2 = group_prox(&y2, beta, &g).unwrap();
            prop_assert!((p1 - p2).norm() <= (y1 - y2).norm() + 1e-12);
        }

        #[test]
        fn prox_minimizes_its_subproblem(y in arb_matrix(3), beta in 0.0..5.0f64, seed in 0u64..1000) {
            let g = GroupStructure::per_column(3);
            let w = group_prox(&y, beta, &g).unwrap();
            // β g(W) + ½‖W - Y‖² is the prox objective with μ = 1, λ = β.
            let f = |m: &DMatrix<f64>| beta * g.penalty(m) + 0.5 * (m - &y).norm_squared();
            let best = f(&w);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for k in 0..1000 {
                let scale = 10f64.powi(-(k % 6));
                let d = DMatrix::from_fn(3, 3, |_, _| StandardNormal.sample(&mut rng)) * scale;
                prop_assert!(f(&(&w + d)) >= best - 1e-12);
            }
        }
    }

    #[test]
    fn unregularized_convex_reaches_identity() {
        let mut obj = LeastSquares::random(5, 40, 3);
        let cfg = ApgConfig {
            step: 1.0 / obj.lipschitz(),
            tol: 1e-14,
            max_iter: 5000,
            ..Default::default()
        };
        let res = apg_convex(
            &mut obj,
            &GroupStructure::per_column(5),
            &cfg,
            cfg.initial(5),
        )
        .unwrap();
        assert!(obj.value(&res.w).unwrap() <= 1e-8);
    }

    #[test]
    fn convex_large_lambda_gives_zero() {
        let mut obj = LeastSquares::random(5, 40, 4);
        // Zero is optimal once λ exceeds the largest column norm of the Gram.
        let lmax = (0..5)
            .map(|c| obj.gram.column(c).norm())
            .fold(0.0, f64::max);
        let cfg = ApgConfig {
            step: 1.0 / obj.lipschitz(),
            lambda: 1.05 * lmax,
            tol: 1e-12,
            max_iter: 5000,
            ..Default::default()
        };
        let res = apg_convex(
            &mut obj,
            &GroupStructure::per_column(5),
            &cfg,
            cfg.initial(5),
        )
        .unwrap();
        assert!(GroupStructure::per_column(5)
            .norms(&res.w)
            .iter()
            .all(|&v| v <= 1e-6));
    }

    #[test]
    fn convex_cost_decays_quadratically() {
        let mut obj = LeastSquares::random(6, 30, 5);
        let groups = GroupStructure::per_column(6);
        let mut cfg = ApgConfig {
            step: 1.0 / obj.lipschitz(),
            lambda: 0.05,
            tol: 0.0,
            max_iter: 4000,
            ..Default::default()
        };
        let reference = apg_convex(&mut obj, &groups, &cfg, cfg.initial(6))
            .unwrap()
            .final_cost();
        cfg.max_iter = 200;
        let res = apg_convex(&mut obj, &groups, &cfg, cfg.initial(6)).unwrap();
        // gap_i ≤ C / i² with C fitted from the first iterate.
        let gap = |i: usize| res.trace[i].cost - reference;
        let constant = gap(1) * 4.0;
        for i in 1..res.trace.len() {
            assert!(
                gap(i) <= constant / (i * i) as f64 + 1e-10,
                "iter {i}: {} > {}",
                gap(i),
                constant / (i * i) as f64
            );
        }
    }

    #[test]
    fn nonconvex_matches_convex_on_convex_problem() {
        let mut obj = LeastSquares::random(5, 40, 6);
        let groups = GroupStructure::per_column(5);
        let lmax = (0..5)
            .map(|c| obj.gram.column(c).norm())
            .fold(0.0, f64::max);
        let step = 1.0 / obj.lipschitz();
        let cfg = ApgConfig {
            step,
            step_bar: step,
            lambda: 0.3 * lmax,
            tol: 1e-13,
            max_iter: 5000,
            ..Default::default()
        };
        let a = apg_convex(&mut obj, &groups, &cfg, cfg.initial(5)).unwrap();
        let b = apg_nonconvex(&mut obj, &groups, &cfg, cfg.initial(5)).unwrap();
        assert!((a.final_cost() - b.final_cost()).abs() <= 1e-6);
    }

    #[test]
    fn nonconvex_reference_recursion_and_descent() {
        let mut obj = LeastSquares::random(4, 20, 7);
        let groups = GroupStructure::per_column(4);
        let cfg = ApgConfig {
            step: 4.0,
            step_bar: 4.0,
            lambda: 0.02,
            tol: 1e-10,
            max_iter: 300,
            ..Default::default()
        };
        let res = apg_nonconvex(&mut obj, &groups, &cfg, cfg.initial(4)).unwrap();
        let t = &res.trace;
        // c₁ = F(W¹), q₂ = η + 1, c₂ = (η c₁ + F(W²)) / q₂.
        assert_eq!(t[0].reference, t[0].cost);
        let q2 = cfg.eta + 1.0;
        assert_abs_diff_eq!(
            t[1].reference,
            (cfg.eta * t[0].cost + t[1].cost) / q2,
            epsilon = 1e-15
        );
        // c_i stays a convex combination of past costs.
        let mut q = 1.0;
        let mut c = t[0].cost;
        for i in 1..t.len() {
            let qn = cfg.eta * q + 1.0;
            c = (cfg.eta * q * c + t[i].cost) / qn;
            q = qn;
            assert_abs_diff_eq!(c, t[i].reference, epsilon = 1e-12 * c.abs().max(1.0));
            let max_past = t[..=i].iter().map(|r| r.cost).fold(f64::MIN, f64::max);
            let min_past = t[..=i].iter().map(|r| r.cost).fold(f64::MAX, f64::min);
            assert!(c <= max_past + 1e-12 && c >= min_past - 1e-12);
        }
        for r in t {
            assert!(r.cost <= t[0].cost);
        }
    }

    #[test]
    fn identity_start_is_a_fixed_point() {
        let mut obj = LeastSquares::random(4, 20, 8);
        let cfg = ApgConfig {
            init: Init::Identity,
            ..Default::default()
        };
        let res = apg_nonconvex(
            &mut obj,
            &GroupStructure::per_column(4),
            &cfg,
            cfg.initial(4),
        )
        .unwrap();
        assert_eq!(res.iterations, 1);
        assert!(res.converged);
        assert_eq!(res.w, DMatrix::identity(4, 4));
    }

    #[test]
    fn deterministic_initialization() {
        let cfg = ApgConfig {
            seed: 42,
            ..Default::default()
        };
        assert_eq!(cfg.initial(6), cfg.initial(6));
        let other = ApgConfig {
            seed: 43,
            ..cfg.clone()
        };
        assert_ne!(cfg.initial(6), other.initial(6));
    }

    struct Exploding;
    impl SmoothObjective for Exploding {
        fn value(&mut self, _: &DMatrix<f64>) -> Result<f64> {
            Ok(1.0)
        }
        fn gradient(&mut self, w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
            Ok(DMatrix::from_element(w.nrows(), w.ncols(), f64::NAN))
        }
    }

    #[test]
    fn non_finite_gradient_reports_iteration() {
        let cfg = ApgConfig::default();
        let err = apg_convex(
            &mut Exploding,
            &GroupStructure::per_column(2),
            &cfg,
            DMatrix::zeros(2, 2),
        );
        assert!(matches!(err, Err(Error::Numeric { iter: 1, .. })));
    }

    #[test]
    fn trace_csv_header() {
        let mut obj = LeastSquares::random(3, 10, 9);
        let cfg = ApgConfig {
            step: 1.0 / obj.lipschitz(),
            max_iter: 3,
            ..Default::default()
        };
        let res = apg_convex(
            &mut obj,
            &GroupStructure::per_column(3),
            &cfg,
            cfg.initial(3),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        write_trace_csv(&path, &res.trace).unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        assert!(text.starts_with("iter,cost,smooth_cost,penalty,nnz_groups,step_kind\n0,"));
        assert_eq!(text.lines().count(), res.trace.len() + 1);
    }
}
