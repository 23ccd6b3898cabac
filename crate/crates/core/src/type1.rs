//! Data-fidelity distillation: PCA, DEIM, group lasso and its least-squares
//! refit, all driven by the covariance `Cθ = ΘΘᵀ/T` of normalized data.
//!
//! The fitting cost is `f1(W) = ‖Θ − WΘ‖²_F / 2T = ½ tr((I−W) Cθ (I−W)ᵀ)`.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::map::{DistillationMap, Method};
use crate::proxalg::{apg_convex, ApgConfig, ApgResult, GroupStructure, Init, SmoothObjective};

/// Group norms at or below this are treated as zero after fitting.
pub const ZERO_GROUP_THRESHOLD: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct CovarianceBundle {
    cov: DMatrix<f64>,
    eigenvalues: Vec<f64>,
    eigenvectors: DMatrix<f64>,
}

impl CovarianceBundle {
    /// Covariance of the `P × T` data matrix and its full eigendecomposition,
    /// eigenvalues sorted descending.
    pub fn new(theta: &DMatrix<f64>) -> Result<Self> {
        let t = theta.ncols();
        if t == 0 || theta.nrows() == 0 {
            return Err(Error::Argument("empty scenario set".into()));
        }
        let mut cov = theta * theta.transpose() / t as f64;
        cov = (&cov + cov.transpose()) * 0.5;
        Self::from_covariance(cov)
    }

    pub fn from_covariance(cov: DMatrix<f64>) -> Result<Self> {
        if !cov.is_square() || cov.nrows() == 0 {
            return Err(Error::Shape(
                "covariance must be square and nonempty".into(),
            ));
        }
        let eig = SymmetricEigen::new(cov.clone());
        let p = cov.nrows();
        let mut order: Vec<usize> = (0..p).collect();
        order.sort_by(|&a, &b| {
            eig.eigenvalues[b]
                .total_cmp(&eig.eigenvalues[a])
                .then(a.cmp(&b))
        });
        let eigenvalues = order.iter().map(|&i| eig.eigenvalues[i]).collect();
        let mut eigenvectors = eig.eigenvectors.select_columns(&order);
        // Sign convention: largest-magnitude entry of each vector is positive.
        for mut col in eigenvectors.column_iter_mut() {
            let imax = col.iamax();
            if col[imax] < 0.0 {
                col.neg_mut();
            }
        }
        Ok(CovarianceBundle {
            cov,
            eigenvalues,
            eigenvectors,
        })
    }

    pub fn p(&self) -> usize {
        self.cov.nrows()
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn eigenvectors(&self) -> &DMatrix<f64> {
        &self.eigenvectors
    }

    pub fn top(&self, k: usize) -> DMatrix<f64> {
        self.eigenvectors.columns(0, k).into_owned()
    }

    pub fn lambda_max(&self) -> f64 {
        self.eigenvalues[0]
    }

    /// `½ tr((I−W) Cθ (I−W)ᵀ)`.
    pub fn f1(&self, w: &DMatrix<f64>) -> f64 {
        let p = self.p();
        let e = DMatrix::identity(p, p) - w;
        0.5 * (&e * &self.cov).component_mul(&e).sum().max(0.0)
    }

    /// `(W − I) Cθ`.
    pub fn f1_gradient(&self, w: &DMatrix<f64>) -> DMatrix<f64> {
        let p = self.p();
        (w - DMatrix::identity(p, p)) * &self.cov
    }

    fn check_k(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.p() {
            return Err(Error::Argument(format!("K = {k} outside 1..={}", self.p())));
        }
        Ok(())
    }
}

/// `‖Θ − WΘ‖²_F / 2T` evaluated directly.
pub fn f1_direct(theta: &DMatrix<f64>, w: &DMatrix<f64>) -> f64 {
    (theta - w * theta).norm_squared() / (2.0 * theta.ncols() as f64)
}

pub fn fit_pca(cov: &CovarianceBundle, k: usize) -> Result<DistillationMap> {
    cov.check_k(k)?;
    Ok(DistillationMap::pca(cov.top(k)))
}

/// Greedy interpolation indices for the columns of `u`.
pub fn deim_indices(u: &DMatrix<f64>) -> Result<Vec<usize>> {
    let k = u.ncols();
    let mut idx: Vec<usize> = Vec::with_capacity(k);
    for j in 0..k {
        let col = u.column(j).into_owned();
        let residual = if j == 0 {
            col
        } else {
            let basis = u.columns(0, j).into_owned();
            let st_basis = basis.select_rows(&idx);
            let rhs = col.select_rows(&idx);
            let coeff = st_basis.lu().solve(&rhs).ok_or_else(|| Error::Rank {
                message: format!("interpolation matrix singular at step {}", j + 1),
                redundant: Vec::new(),
            })?;
            col - basis * coeff
        };
        let mut best = 0;
        for i in 1..residual.len() {
            if residual[i].abs() > residual[best].abs() {
                best = i;
            }
        }
        if idx.contains(&best) || residual[best].abs() == 0.0 {
            return Err(Error::Rank {
                message: format!("interpolation residual vanished at step {}", j + 1),
                redundant: Vec::new(),
            });
        }
        idx.push(best);
    }
    Ok(idx)
}

/// DEIM map `C = U_K (SᵀU_K)⁻¹`. Returns the map and `‖(SᵀU_K)⁻¹‖₂²`.
pub fn fit_deim_with_bound(cov: &CovarianceBundle, k: usize) -> Result<(DistillationMap, f64)> {
    cov.check_k(k)?;
    let u = cov.top(k);
    let mut idx = deim_indices(&u)?;
    idx.sort_unstable();
    let st_u = u.select_rows(&idx);
    let svals = st_u.singular_values();
    let smin = svals.min();
    if !(smin > 1e-12 * svals.max()) {
        return Err(Error::Rank {
            message: "SᵀU_K is numerically singular".into(),
            redundant: Vec::new(),
        });
    }
    let inv = st_u.try_inverse().ok_or_else(|| Error::Rank {
        message: "SᵀU_K is singular".into(),
        redundant: Vec::new(),
    })?;
    let mut c = &u * inv;
    // SᵀC = I up to rounding; make it exact so selected entries pass through unchanged.
    for (k, &row) in idx.iter().enumerate() {
        c.row_mut(row).fill(0.0);
        c[(row, k)] = 1.0;
    }
    let map = DistillationMap::from_selection(
        Method::Deim,
        cov.p(),
        idx,
        c,
        crate::proxalg::GroupMode::Column,
        None,
    )?;
    Ok((map, 1.0 / (smin * smin)))
}

pub fn fit_deim(cov: &CovarianceBundle, k: usize) -> Result<DistillationMap> {
    fit_deim_with_bound(cov, k).map(|(m, _)| m)
}

/// Largest group norm of the columns of `Cθ`: any `λ₁` above it makes the
/// zero matrix a minimizer of the group lasso.
pub fn lambda1_max(cov: &CovarianceBundle, groups: &GroupStructure) -> f64 {
    groups.norms(cov.cov()).into_iter().fold(0.0, f64::max)
}

#[derive(Debug, Clone)]
pub struct GlOptions {
    pub max_iter: usize,
    pub tol: f64,
    pub init: Init,
    pub seed: u64,
}

impl Default for GlOptions {
    fn default() -> Self {
        GlOptions {
            max_iter: 20_000,
            tol: 1e-12,
            init: Init::Zero,
            seed: 0,
        }
    }
}

struct F1<'a>(&'a CovarianceBundle);

impl SmoothObjective for F1<'_> {
    fn value(&mut self, w: &DMatrix<f64>) -> Result<f64> {
        Ok(self.0.f1(w))
    }

    fn gradient(&mut self, w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(self.0.f1_gradient(w))
    }
}

/// Raw group-lasso solve; the returned matrix is not thresholded.
pub fn solve_gl(
    cov: &CovarianceBundle,
    lambda: f64,
    groups: &GroupStructure,
    opts: &GlOptions,
) -> Result<ApgResult> {
    if groups.p() != cov.p() {
        return Err(Error::Shape(format!(
            "groups cover {} columns, data has P = {}",
            groups.p(),
            cov.p()
        )));
    }
    let lmax = cov.lambda_max();
    let cfg = ApgConfig {
        step: if lmax > 0.0 { 1.0 / lmax } else { 1.0 },
        lambda,
        max_iter: opts.max_iter,
        tol: opts.tol,
        init: opts.init.clone(),
        seed: opts.seed,
        ..Default::default()
    };
    cfg.validate()?;
    apg_convex(&mut F1(cov), groups, &cfg, cfg.initial(cov.p()))
}

pub fn fit_gl(
    cov: &CovarianceBundle,
    lambda: f64,
    groups: &GroupStructure,
    opts: &GlOptions,
) -> Result<DistillationMap> {
    let res = solve_gl(cov, lambda, groups, opts)?;
    DistillationMap::from_sparse(Method::Gl, res.w, groups, ZERO_GROUP_THRESHOLD, lambda)
}

/// `C = Cθ S (SᵀCθS)⁻¹`, the least-squares reconstruction from the selected
/// features.
pub fn refit_least_squares(cov: &CovarianceBundle, selected: &[usize]) -> Result<DMatrix<f64>> {
    if selected.is_empty() {
        return Err(Error::State("refit needs a nonempty selection".into()));
    }
    let cs = cov.cov().select_columns(selected);
    let scs = cs.select_rows(selected);
    let eig = scs.clone().symmetric_eigenvalues();
    let (lo, hi) = (eig.min(), eig.max());
    if !(lo > 1e-12 * hi.max(f64::MIN_POSITIVE)) {
        return Err(Error::Rank {
            message: "selected features are collinear".into(),
            redundant: Vec::new(),
        });
    }
    let chol = scs.cholesky().ok_or_else(|| Error::Rank {
        message: "selected feature covariance is not positive definite".into(),
        redundant: Vec::new(),
    })?;
    // C = Cθ S (SᵀCθS)⁻¹ = (chol⁻¹ (Cθ S)ᵀ)ᵀ by symmetry.
    Ok(chol.solve(&cs.transpose()).transpose())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Target {
    Lambda(f64),
    K(usize),
}

/// Result of a bisection on `λ` for a target number of nonzero groups.
#[derive(Debug, Clone)]
pub struct Bisection {
    pub lambda: f64,
    pub map: DistillationMap,
    pub exact: bool,
    pub rounds: usize,
}

pub const DEFAULT_BISECTION_ROUNDS: usize = 40;

/// Bisection on `λ ∈ [0, lambda_hi]` for a fit with `k_target` nonzero
/// groups; a target of every group first tries `λ = 0`. When no probed `λ`
/// hits the target, the closest achieved count is returned with
/// `exact = false` (ties prefer the larger count).
pub fn bisect_lambda_for_k<F>(
    mut fitter: F,
    groups: &GroupStructure,
    k_target: usize,
    lambda_hi: f64,
    max_rounds: usize,
) -> Result<Bisection>
where
    F: FnMut(f64) -> Result<DistillationMap>,
{
    if k_target == 0 || k_target > groups.len() {
        return Err(Error::Argument(format!(
            "target K = {k_target} outside 1..={}",
            groups.len()
        )));
    }
    let count = |m: &DistillationMap| groups.count_nonzero(m.w());
    if k_target == groups.len() {
        let map = fitter(0.0)?;
        if count(&map) == k_target {
            return Ok(Bisection {
                lambda: 0.0,
                map: map.with_k_exact(true),
                exact: true,
                rounds: 0,
            });
        }
    }
    let (mut lo, mut hi) = (0.0_f64, lambda_hi.max(0.0));
    let mut best: Option<(usize, usize, f64, DistillationMap)> = None;
    for round in 1..=max_rounds {
        let lambda = 0.5 * (lo + hi);
        let map = fitter(lambda)?;
        let got = count(&map);
        log::debug!("bisection round {round}: lambda {lambda:.6e} gives {got} groups");
        if got == k_target {
            return Ok(Bisection {
                lambda,
                map: map.with_k_exact(true),
                exact: true,
                rounds: round,
            });
        }
        let dist = got.abs_diff(k_target);
        let better = match &best {
            None => true,
            Some((d, g, _, _)) => dist < *d || (dist == *d && got > *g),
        };
        if better {
            best = Some((dist, got, lambda, map));
        }
        if got > k_target {
            lo = lambda;
        } else {
            hi = lambda;
        }
    }
    let (_, got, lambda, map) =
        best.ok_or_else(|| Error::Argument("bisection needs at least one round".into()))?;
    log::warn!("bisection settled on {got} groups instead of {k_target}");
    Ok(Bisection {
        lambda,
        map: map.with_k_exact(false),
        exact: false,
        rounds: max_rounds,
    })
}

/// GL fit at a fixed `λ` or at the `λ` found by bisection for a target K.
pub fn fit_gl_target(
    cov: &CovarianceBundle,
    target: Target,
    groups: &GroupStructure,
    opts: &GlOptions,
) -> Result<DistillationMap> {
    match target {
        Target::Lambda(l) => fit_gl(cov, l, groups, opts),
        Target::K(k) => {
            let hi = lambda1_max(cov, groups);
            Ok(bisect_lambda_for_k(
                |l| fit_gl(cov, l, groups, opts),
                groups,
                k,
                hi,
                DEFAULT_BISECTION_ROUNDS,
            )?
            .map)
        }
    }
}

/// Two-stage fit: group-lasso support, then least-squares reconstruction.
pub fn fit_gl2(
    cov: &CovarianceBundle,
    target: Target,
    groups: &GroupStructure,
    opts: &GlOptions,
) -> Result<DistillationMap> {
    let gl = fit_gl_target(cov, target, groups, opts)?;
    refit_selection(cov, &gl, Method::Gl2)
}

/// Replaces the reconstruction of `stage1` by the least-squares one.
pub fn refit_selection(
    cov: &CovarianceBundle,
    stage1: &DistillationMap,
    method: Method,
) -> Result<DistillationMap> {
    let c = refit_least_squares(cov, stage1.selected())?;
    Ok(DistillationMap::from_selection(
        method,
        cov.p(),
        stage1.selected().to_vec(),
        c,
        stage1.groups_mode(),
        stage1.lambda(),
    )?
    .with_k_exact(stage1.k_exact()))
}
