//! Decision-fidelity distillation: fit `W` so that OPF minimizers computed
//! from reconstructed data match those computed from the true data.
//!
//! With normalized scenarios `θ̃_t`, per-feature scale `σ` and mean `m`, the
//! OPF sees `θ̂_t = Dσ W θ̃_t + m` and
//!
//! ```txt
//!     f2(W)   = (1/2T) Σ_t ‖x̂_t − x_t‖²
//!     ∇f2(W)  = (1/T)  Σ_t Dσ J_tᵀ (x̂_t − x_t) θ̃_tᵀ
//! ```
//!
//! where `J_t` is the minimizer Jacobian at `θ̂_t`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::map::{DistillationMap, Method};
use crate::opf::{solve_opf_batch_with, solve_opf_with, OpfSolution, OpfSpec, OpfTheta};
use crate::proxalg::{apg_nonconvex, ApgConfig, ApgResult, GroupStructure, SmoothObjective};
use crate::qp::QpOptions;
use crate::scenario::{Normalization, ScenarioSet};
use crate::sensitivity::{minimizer_jacobian, Redundancy, SensitivityOptions};
use crate::type1::{bisect_lambda_for_k, Target, DEFAULT_BISECTION_ROUNDS, ZERO_GROUP_THRESHOLD};

/// Normalized scenarios with the OPF minimizers of the true data.
#[derive(Debug, Clone)]
pub struct OpfDataset {
    theta: DMatrix<f64>,
    x: DMatrix<f64>,
    norm: Normalization,
    hints: Vec<Vec<usize>>,
}

impl OpfDataset {
    /// Solves the OPF on the raw data of a normalized scenario set.
    pub fn new(spec: &OpfSpec, set: &ScenarioSet) -> Result<Self> {
        let norm = set
            .normalization()
            .ok_or_else(|| Error::State("OPF dataset needs normalized scenarios".into()))?
            .clone();
        Self::from_parts(spec, set.theta().clone(), norm)
    }

    pub fn from_parts(spec: &OpfSpec, theta: DMatrix<f64>, norm: Normalization) -> Result<Self> {
        if theta.nrows() != spec.p() || norm.mean.len() != spec.p() || norm.scale.len() != spec.p()
        {
            return Err(Error::Compatibility(format!(
                "OPF has P = {}, data has {} rows",
                spec.p(),
                theta.nrows()
            )));
        }
        if theta.ncols() == 0 {
            return Err(Error::Argument("empty scenario set".into()));
        }
        let raw = norm.denormalize(&theta);
        let sols = collect(solve_opf_batch_with(
            spec,
            &raw,
            None,
            &QpOptions::default(),
        ))?;
        let x = stack(&sols, spec.g());
        let hints = sols.iter().map(OpfSolution::active_hint).collect();
        Ok(OpfDataset {
            theta,
            x,
            norm,
            hints,
        })
    }

    /// Normalized scenarios `Θ̃`, `P × T`.
    pub fn theta(&self) -> &DMatrix<f64> {
        &self.theta
    }

    /// Reference minimizers `X`, `(G+1) × T`.
    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn normalization(&self) -> &Normalization {
        &self.norm
    }

    pub fn p(&self) -> usize {
        self.theta.nrows()
    }

    pub fn t(&self) -> usize {
        self.theta.ncols()
    }

    /// True data `Dσ Θ̃ + m`.
    pub fn raw(&self) -> DMatrix<f64> {
        self.norm.denormalize(&self.theta)
    }

    /// `Dσ W Θ̃ + m`.
    pub fn reconstruct(&self, w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if w.shape() != (self.p(), self.p()) {
            return Err(Error::Compatibility(format!(
                "map is {}x{}, data has P = {}",
                w.nrows(),
                w.ncols(),
                self.p()
            )));
        }
        Ok(self.norm.denormalize(&(w * &self.theta)))
    }

    /// Minimizers of the OPF on reconstructed data, `(G+1) × T`.
    pub fn decisions(&self, spec: &OpfSpec, w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let sols = collect(solve_opf_batch_with(
            spec,
            &self.reconstruct(w)?,
            Some(&self.hints),
            &QpOptions::default(),
        ))?;
        Ok(stack(&sols, spec.g()))
    }
}

fn collect(results: Vec<Result<OpfSolution>>) -> Result<Vec<OpfSolution>> {
    results.into_iter().collect()
}

fn stack(sols: &[OpfSolution], g: usize) -> DMatrix<f64> {
    let mut x = DMatrix::zeros(g + 1, sols.len());
    for (t, s) in sols.iter().enumerate() {
        x.set_column(t, &s.x());
    }
    x
}

fn sensitivity_options() -> SensitivityOptions {
    SensitivityOptions {
        redundancy: Redundancy::Drop,
        ..Default::default()
    }
}

struct Evaluation {
    w: DMatrix<f64>,
    sols: Vec<OpfSolution>,
    xhat: DMatrix<f64>,
    cost: f64,
    grad: Option<DMatrix<f64>>,
    jacobians: Option<Vec<DMatrix<f64>>>,
}

const CACHE_SIZE: usize = 6;

/// `f2` and its gradient for one dataset. Batch solutions are cached per
/// iterate, and each scenario's last active set seeds its next solve.
pub struct F2Oracle<'a> {
    spec: &'a OpfSpec,
    data: &'a OpfDataset,
    hints: Vec<Vec<usize>>,
    cache: Vec<Evaluation>,
    batches: usize,
    degenerate: usize,
}

impl<'a> F2Oracle<'a> {
    pub fn new(spec: &'a OpfSpec, data: &'a OpfDataset) -> Result<Self> {
        if spec.p() != data.p() {
            return Err(Error::Compatibility(format!(
                "OPF has P = {}, data has {}",
                spec.p(),
                data.p()
            )));
        }
        if data.x.nrows() != spec.g() + 1 {
            return Err(Error::Compatibility(
                "reference minimizers do not match the OPF".into(),
            ));
        }
        Ok(F2Oracle {
            spec,
            data,
            hints: data.hints.clone(),
            cache: Vec::new(),
            batches: 0,
            degenerate: 0,
        })
    }

    /// Number of OPF batches solved so far.
    pub fn batches(&self) -> usize {
        self.batches
    }

    /// Degenerate scenario Jacobians met so far.
    pub fn degenerate_count(&self) -> usize {
        self.degenerate
    }

    fn lookup(&self, w: &DMatrix<f64>) -> Option<usize> {
        self.cache.iter().position(|e| e.w == *w)
    }

    fn evaluate(&mut self, w: &DMatrix<f64>) -> Result<usize> {
        if let Some(i) = self.lookup(w) {
            return Ok(i);
        }
        let theta = self.data.reconstruct(w)?;
        let sols = collect(solve_opf_batch_with(
            self.spec,
            &theta,
            Some(&self.hints),
            &QpOptions::default(),
        ))?;
        self.batches += 1;
        for (h, s) in self.hints.iter_mut().zip(&sols) {
            *h = s.active_hint();
        }
        let xhat = stack(&sols, self.spec.g());
        let cost = (&xhat - &self.data.x).norm_squared() / (2.0 * self.data.t() as f64);
        if self.cache.len() == CACHE_SIZE {
            self.cache.remove(0);
        }
        self.cache.push(Evaluation {
            w: w.clone(),
            sols,
            xhat,
            cost,
            grad: None,
            jacobians: None,
        });
        Ok(self.cache.len() - 1)
    }

    pub fn cost(&mut self, w: &DMatrix<f64>) -> Result<f64> {
        let i = self.evaluate(w)?;
        Ok(self.cache[i].cost)
    }

    /// Reconstructed-data minimizers at `w`.
    pub fn decisions(&mut self, w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let i = self.evaluate(w)?;
        Ok(self.cache[i].xhat.clone())
    }

    /// `J_t Dσ` for every scenario at `w`.
    pub fn scaled_jacobians(&mut self, w: &DMatrix<f64>) -> Result<Vec<DMatrix<f64>>> {
        let i = self.evaluate(w)?;
        if let Some(j) = &self.cache[i].jacobians {
            return Ok(j.clone());
        }
        let (jacs, degenerate) = scaled_jacobians(self.spec, self.data, &self.cache[i].sols)?;
        if degenerate > 0 {
            log::debug!("{degenerate} degenerate scenario sensitivities");
        }
        self.degenerate += degenerate;
        self.cache[i].jacobians = Some(jacs.clone());
        Ok(jacs)
    }

    pub fn grad(&mut self, w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let i = self.evaluate(w)?;
        if let Some(g) = &self.cache[i].grad {
            return Ok(g.clone());
        }
        let jacs = self.scaled_jacobians(w)?;
        let entry = &self.cache[i];
        let t = jacs.len();
        let mut gmat = DMatrix::zeros(self.data.p(), t);
        for (k, jd) in jacs.iter().enumerate() {
            let resid = entry.xhat.column(k) - self.data.x.column(k);
            gmat.set_column(k, &jd.tr_mul(&resid));
        }
        let g = gmat * self.data.theta.transpose() / t as f64;
        self.cache[i].grad = Some(g.clone());
        Ok(g)
    }
}

/// `J_t Dσ` per scenario and the number of degenerate ones.
fn scaled_jacobians(
    spec: &OpfSpec,
    data: &OpfDataset,
    sols: &[OpfSolution],
) -> Result<(Vec<DMatrix<f64>>, usize)> {
    let opts = sensitivity_options();
    let per: Vec<Result<(DMatrix<f64>, bool)>> = (0..sols.len())
        .into_par_iter()
        .map(|t| {
            let sens = minimizer_jacobian(spec, &sols[t], &opts).map_err(|e| e.in_scenario(t))?;
            let mut jd = sens.jacobian;
            for j in 0..jd.ncols() {
                jd.column_mut(j).scale_mut(data.norm.scale[j]);
            }
            Ok((jd, sens.degenerate))
        })
        .collect();
    let mut jacs = Vec::with_capacity(sols.len());
    let mut degenerate = 0;
    for r in per {
        let (j, d) = r?;
        jacs.push(j);
        degenerate += d as usize;
    }
    Ok((jacs, degenerate))
}

impl SmoothObjective for F2Oracle<'_> {
    fn value(&mut self, w: &DMatrix<f64>) -> Result<f64> {
        self.cost(w)
    }

    fn gradient(&mut self, w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.grad(w)
    }
}

pub fn f2_cost(w: &DMatrix<f64>, data: &OpfDataset, spec: &OpfSpec) -> Result<f64> {
    F2Oracle::new(spec, data)?.cost(w)
}

pub fn grad_f2(w: &DMatrix<f64>, data: &OpfDataset, spec: &OpfSpec) -> Result<DMatrix<f64>> {
    F2Oracle::new(spec, data)?.grad(w)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lambda2 {
    pub value: f64,
    /// The sensitivity at the mean data point was degenerate.
    pub degenerate: bool,
}

/// Largest group norm of `∇f2(0)`: with `θ₀ = m` the OPF data for `W = 0`,
/// `(1/T) Dσ J(θ₀)ᵀ Σ_t (x(θ₀) − x_t) θ̃_tᵀ`.
pub fn lambda2_max(data: &OpfDataset, spec: &OpfSpec, groups: &GroupStructure) -> Result<Lambda2> {
    let theta0 = OpfTheta(data.norm.mean.clone());
    let sol = solve_opf_with(spec, &theta0, None, &QpOptions::default())?;
    let sens = minimizer_jacobian(spec, &sol, &sensitivity_options())?;
    let x0 = sol.x();
    let t = data.t();
    let mut weights = DVector::zeros(data.p());
    // Σ_t (x0 − x_t) θ̃_tᵀ = (x0 1ᵀ − X) Θ̃ᵀ.
    let mut resid = DMatrix::zeros(x0.len(), t);
    for k in 0..t {
        resid.set_column(k, &(&x0 - data.x.column(k)));
    }
    let outer = resid * data.theta.transpose();
    let mut g = sens.jacobian.transpose() * outer / t as f64;
    for i in 0..data.p() {
        weights[i] = data.norm.scale[i];
        g.row_mut(i).scale_mut(weights[i]);
    }
    Ok(Lambda2 {
        value: groups.norms(&g).into_iter().fold(0.0, f64::max),
        degenerate: sens.degenerate,
    })
}

/// Largest eigenvalue of `Cθ̃` times `‖J Dσ‖₂²` at the mean data point: an
/// estimate of the curvature of `f2`, used to pick initial step sizes.
pub fn curvature_estimate(data: &OpfDataset, spec: &OpfSpec) -> Result<f64> {
    let sol = solve_opf_with(
        spec,
        &OpfTheta(data.norm.mean.clone()),
        None,
        &QpOptions::default(),
    )?;
    let sens = minimizer_jacobian(spec, &sol, &sensitivity_options())?;
    let mut jd = sens.jacobian;
    for j in 0..jd.ncols() {
        jd.column_mut(j).scale_mut(data.norm.scale[j]);
    }
    let jnorm = jd.singular_values().max();
    let cov = &data.theta * data.theta.transpose() / data.t() as f64;
    let lmax = cov.symmetric_eigenvalues().max();
    Ok((jnorm * jnorm * lmax).max(f64::MIN_POSITIVE))
}

#[derive(Debug, Clone)]
pub struct BglConfig {
    pub apg: ApgConfig,
    /// Iteration cap of the stage-two descent.
    pub refit_max_iter: usize,
    /// Relative cost decrease that stops the stage-two descent.
    pub refit_tol: f64,
    pub refit_solver: RefitSolver,
    pub bisection_rounds: usize,
}

impl Default for BglConfig {
    fn default() -> Self {
        BglConfig {
            apg: ApgConfig::default(),
            refit_max_iter: 200,
            refit_tol: 1e-6,
            refit_solver: RefitSolver::default(),
            bisection_rounds: DEFAULT_BISECTION_ROUNDS,
        }
    }
}

impl BglConfig {
    /// Step sizes `2 / L` from [`curvature_estimate`]; backtracking shrinks
    /// them where needed.
    pub fn with_estimated_steps(mut self, data: &OpfDataset, spec: &OpfSpec) -> Result<Self> {
        let step = 2.0 / curvature_estimate(data, spec)?;
        self.apg.step = step;
        self.apg.step_bar = step;
        Ok(self)
    }
}

/// Bilevel group lasso: monitored nonconvex APG from `cfg.apg.initial(P)`.
pub fn solve_bgl(
    data: &OpfDataset,
    spec: &OpfSpec,
    lambda: f64,
    groups: &GroupStructure,
    cfg: &BglConfig,
) -> Result<ApgResult> {
    if groups.p() != data.p() {
        return Err(Error::Shape(format!(
            "groups cover {} columns, data has P = {}",
            groups.p(),
            data.p()
        )));
    }
    let mut oracle = F2Oracle::new(spec, data)?;
    let apg = ApgConfig {
        lambda,
        ..cfg.apg.clone()
    };
    let res = apg_nonconvex(&mut oracle, groups, &apg, apg.initial(data.p()))?;
    log::debug!(
        "BGL lambda {lambda:.4e}: {} iterations, {} OPF batches, {} degenerate sensitivities",
        res.iterations,
        oracle.batches(),
        oracle.degenerate_count()
    );
    Ok(res)
}

pub fn fit_bgl(
    data: &OpfDataset,
    spec: &OpfSpec,
    lambda: f64,
    groups: &GroupStructure,
    cfg: &BglConfig,
) -> Result<(DistillationMap, ApgResult)> {
    let res = solve_bgl(data, spec, lambda, groups, cfg)?;
    let map = DistillationMap::from_sparse(
        Method::Bgl,
        res.w.clone(),
        groups,
        ZERO_GROUP_THRESHOLD,
        lambda,
    )?;
    Ok((map, res))
}

/// BGL at a fixed `λ` or at the `λ` found by bisection for a target K.
pub fn fit_bgl_target(
    data: &OpfDataset,
    spec: &OpfSpec,
    target: Target,
    groups: &GroupStructure,
    cfg: &BglConfig,
) -> Result<(DistillationMap, Option<ApgResult>)> {
    match target {
        Target::Lambda(l) => fit_bgl(data, spec, l, groups, cfg).map(|(m, r)| (m, Some(r))),
        Target::K(k) => {
            let hi = lambda2_max(data, spec, groups)?.value;
            let b = bisect_lambda_for_k(
                |l| fit_bgl(data, spec, l, groups, cfg).map(|(m, _)| m),
                groups,
                k,
                hi,
                cfg.bisection_rounds,
            )?;
            Ok((b.map, None))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RefitSolver {
    /// Steepest descent with Armijo backtracking.
    GradientDescent,
    /// Gauss-Newton direction from the per-scenario minimizer Jacobians,
    /// with Armijo backtracking.
    #[default]
    GaussNewton,
}

#[derive(Debug, Clone)]
pub struct RefitResult {
    pub c: DMatrix<f64>,
    pub cost: f64,
    pub start_cost: f64,
    pub iterations: usize,
}

/// Minimizes `f2(C Sᵀ)` over `C`, starting from `c0`. Every accepted step
/// decreases the cost.
#[allow(clippy::too_many_arguments)]
pub fn refit_decisions(
    data: &OpfDataset,
    spec: &OpfSpec,
    selected: &[usize],
    c0: DMatrix<f64>,
    solver: RefitSolver,
    step0: f64,
    max_iter: usize,
    tol: f64,
) -> Result<RefitResult> {
    let p = data.p();
    let k = selected.len();
    if k == 0 {
        return Err(Error::State("refit needs a nonempty selection".into()));
    }
    if c0.shape() != (p, k) {
        return Err(Error::Shape(
            "initial reconstruction has the wrong shape".into(),
        ));
    }
    let embed = |c: &DMatrix<f64>| {
        let mut w = DMatrix::zeros(p, p);
        for (j, &col) in selected.iter().enumerate() {
            w.set_column(col, &c.column(j));
        }
        w
    };
    // Selected normalized features per scenario, K × T.
    let z = data.theta.select_rows(selected);
    let mut oracle = F2Oracle::new(spec, data)?;
    let mut c = c0;
    let mut cost = oracle.cost(&embed(&c))?;
    let start_cost = cost;
    let mut step = step0;
    let mut iterations = 0;
    for it in 1..=max_iter {
        iterations = it;
        if cost == 0.0 {
            break;
        }
        let w = embed(&c);
        let g = oracle
            .grad(&w)
            .map_err(|e| e.at_iteration(it))?
            .select_columns(selected);
        let gn = g.norm_squared();
        if gn == 0.0 {
            break;
        }
        let (dir, mut s) = match solver {
            RefitSolver::GradientDescent => (-&g, step),
            RefitSolver::GaussNewton => {
                let jacs = oracle
                    .scaled_jacobians(&w)
                    .map_err(|e| e.at_iteration(it))?;
                match gauss_newton_direction(&jacs, &z, &g) {
                    Some(d) if d.dot(&g) < 0.0 => (d, 1.0),
                    _ => (-&g, step),
                }
            }
        };
        let slope = dir.dot(&g);
        let mut accepted = None;
        for _ in 0..50 {
            let cand = &c + &dir * s;
            let cc = oracle.cost(&embed(&cand)).map_err(|e| e.at_iteration(it))?;
            if cc <= cost + 1e-4 * s * slope {
                accepted = Some((cand, cc));
                break;
            }
            s *= 0.5;
        }
        log::trace!(
            "refit iteration {it}: cost {cost:.6e}, step {s:.3e}, accepted {}",
            accepted.is_some()
        );
        let Some((cand, cc)) = accepted else { break };
        if solver == RefitSolver::GradientDescent {
            step = 2.0 * s;
        }
        let change = (cost - cc) / cost;
        c = cand;
        cost = cc;
        if change <= tol {
            break;
        }
    }
    Ok(RefitResult {
        c,
        cost,
        start_cost,
        iterations,
    })
}

/// Solves `(Σ_t (z_t z_tᵀ) ⊗ (J_tᵀ J_t) / T + εI) vec(D) = −vec(G)` where
/// `J_t` are scaled minimizer Jacobians and `z_t` the selected features.
fn gauss_newton_direction(
    jacs: &[DMatrix<f64>],
    z: &DMatrix<f64>,
    g: &DMatrix<f64>,
) -> Option<DMatrix<f64>> {
    let (p, k) = g.shape();
    let t = jacs.len();
    let n = p * k;
    let mut normal = DMatrix::zeros(n, n);
    for (s, jd) in jacs.iter().enumerate() {
        let jtj = jd.tr_mul(jd);
        let zt = z.column(s);
        for a in 0..k {
            for b in a..k {
                let w = zt[a] * zt[b] / t as f64;
                if w == 0.0 {
                    continue;
                }
                let mut block = normal.view_mut((a * p, b * p), (p, p));
                block += &jtj * w;
            }
        }
    }
    for a in 0..k {
        for b in 0..a {
            let upper = normal.view((b * p, a * p), (p, p)).transpose();
            normal.view_mut((a * p, b * p), (p, p)).copy_from(&upper);
        }
    }
    let scale = (0..n).map(|i| normal[(i, i)]).fold(0.0, f64::max);
    if !(scale > 0.0) {
        return None;
    }
    for i in 0..n {
        normal[(i, i)] += 1e-10 * scale;
    }
    let rhs = DVector::from_iterator(n, g.iter().map(|v| -v));
    let d = normal.cholesky()?.solve(&rhs);
    Some(DMatrix::from_column_slice(p, k, d.as_slice()))
}

/// Two-stage fit: BGL support, then `f2` descent over the reconstruction.
pub fn fit_bgl2(
    data: &OpfDataset,
    spec: &OpfSpec,
    target: Target,
    groups: &GroupStructure,
    cfg: &BglConfig,
) -> Result<DistillationMap> {
    let (stage1, _) = fit_bgl_target(data, spec, target, groups, cfg)?;
    refit_bgl(data, spec, &stage1, cfg)
}

/// Stage two of [`fit_bgl2`] for a given stage-one map.
pub fn refit_bgl(
    data: &OpfDataset,
    spec: &OpfSpec,
    stage1: &DistillationMap,
    cfg: &BglConfig,
) -> Result<DistillationMap> {
    if stage1.selected().is_empty() {
        return Err(Error::State(
            "BGL selected no features; lower lambda".into(),
        ));
    }
    let r = refit_decisions(
        data,
        spec,
        stage1.selected(),
        stage1.c().clone(),
        cfg.refit_solver,
        cfg.apg.step,
        cfg.refit_max_iter,
        cfg.refit_tol,
    )?;
    log::debug!(
        "BGL2 refit: f2 {:.6e} -> {:.6e} in {} iterations",
        r.start_cost,
        r.cost,
        r.iterations
    );
    Ok(DistillationMap::from_selection(
        Method::Bgl2,
        data.p(),
        stage1.selected().to_vec(),
        r.c,
        stage1.groups_mode(),
        stage1.lambda(),
    )?
    .with_k_exact(stage1.k_exact()))
}
