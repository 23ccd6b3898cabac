//! Soft-constrained reactive-power OPF on the linearized feeder model.
//!
//! Decision vector `x = [q^g; s]` with one entry per DER plus the voltage
//! slack. With `q = E q^g - q^ℓ` the problem is
//!
//! ```txt
//!     min  qᵀRq + ν s² + ρ s
//!     s.to -s1 - v̄1 ≤ Rp + Xq ≤ v̄1 + s1
//!          -q̄ ≤ q^g ≤ q̄,   s ≥ 0
//! ```
//!
//! Inequality rows are laid out as `[upper voltage (N); lower voltage (N);
//! upper rating (G); lower rating (G); s ≥ 0]`.

use std::io::Write;
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{build_grid_matrices, FeederModel, GridMatrices};
use crate::qp::{DenseQp, QpOptions, QpSolution, SolveStatus};

pub const DEFAULT_NU: f64 = 1000.0;
pub const DEFAULT_RHO: f64 = 100.0;

/// Which entries of the full `2N` data vector `[p; q^ℓ]` are features, and
/// what the remaining entries are fixed to.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureLayout {
    n: usize,
    indices: Vec<usize>,
    fixed: DVector<f64>,
}

impl FeatureLayout {
    /// All `2N` entries are features.
    pub fn full(n: usize) -> Self {
        FeatureLayout {
            n,
            indices: (0..2 * n).collect(),
            fixed: DVector::zeros(2 * n),
        }
    }

    pub fn new(n: usize, indices: Vec<usize>, fixed: DVector<f64>) -> Result<Self> {
        if fixed.len() != 2 * n {
            return Err(Error::Shape(format!(
                "fixed data vector has length {}, expected {}",
                fixed.len(),
                2 * n
            )));
        }
        let mut seen = vec![false; 2 * n];
        for &i in &indices {
            if i >= 2 * n {
                return Err(Error::Argument(format!(
                    "feature index {i} outside 0..{}",
                    2 * n
                )));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::Argument(format!("feature index {i} listed twice")));
            }
        }
        Ok(FeatureLayout { n, indices, fixed })
    }

    pub fn p(&self) -> usize {
        self.indices.len()
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn fixed(&self) -> &DVector<f64> {
        &self.fixed
    }

    /// Expands a feature vector into `(p, q^ℓ)`.
    pub fn expand(&self, theta: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        if theta.len() != self.p() {
            return Err(Error::Shape(format!(
                "data vector has length {}, expected {}",
                theta.len(),
                self.p()
            )));
        }
        let mut full = self.fixed.clone();
        for (k, &i) in self.indices.iter().enumerate() {
            full[i] = theta[k];
        }
        Ok((
            full.rows(0, self.n).into_owned(),
            full.rows(self.n, self.n).into_owned(),
        ))
    }
}

/// OPF data vector `θ` restricted to the declared features.
#[derive(Debug, Clone, PartialEq)]
pub struct OpfTheta(pub DVector<f64>);

impl OpfTheta {
    pub fn zeros(p: usize) -> Self {
        OpfTheta(DVector::zeros(p))
    }
}

impl From<DVector<f64>> for OpfTheta {
    fn from(v: DVector<f64>) -> Self {
        OpfTheta(v)
    }
}

#[derive(Debug, Clone)]
pub struct OpfSpec {
    grid: GridMatrices,
    der_buses: Vec<usize>,
    qmax: DVector<f64>,
    vmax: f64,
    nu: f64,
    rho: f64,
    layout: FeatureLayout,
    /// Constant across `θ`.
    hessian: DMatrix<f64>,
    hessian_chol: Cholesky<f64, Dyn>,
    constraints: DMatrix<f64>,
    /// `∂c/∂θ_full` and `∂b/∂θ_full`, restricted to feature columns.
    dc_dtheta: DMatrix<f64>,
    db_dtheta: DMatrix<f64>,
}

impl OpfSpec {
    /// `der_buses` are internal indices in `1..=N`.
    pub fn new(
        grid: GridMatrices,
        der_buses: Vec<usize>,
        qmax: DVector<f64>,
        vmax: f64,
        nu: f64,
        rho: f64,
        layout: FeatureLayout,
    ) -> Result<Self> {
        let n = grid.n();
        let g = der_buses.len();
        if !(nu > 0.0 && rho > 0.0) {
            return Err(Error::Argument(format!(
                "penalties must be positive, got nu={nu} rho={rho}"
            )));
        }
        if !(vmax > 0.0) {
            return Err(Error::Argument(format!(
                "voltage limit must be positive, got {vmax}"
            )));
        }
        if qmax.len() != g {
            return Err(Error::Shape(format!("{} ratings for {g} DERs", qmax.len())));
        }
        if qmax.iter().any(|&q| !(q >= 0.0)) {
            return Err(Error::Argument("DER ratings must be nonnegative".into()));
        }
        if layout.n() != n {
            return Err(Error::Shape(format!(
                "feature layout for {} buses, grid has {n}",
                layout.n()
            )));
        }
        let mut sorted = der_buses.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != g || sorted.iter().any(|&b| b == 0 || b > n) {
            return Err(Error::Argument(format!(
                "DER buses {der_buses:?} must be unique and in 1..={n}"
            )));
        }

        let e = incidence(n, &der_buses);
        let r_e = &grid.r * &e;
        let x_e = &grid.x * &e;
        let mut hessian = DMatrix::zeros(g + 1, g + 1);
        hessian
            .view_mut((0, 0), (g, g))
            .copy_from(&(2.0 * e.transpose() * &r_e));
        hessian[(g, g)] = 2.0 * nu;
        // Exact symmetry.
        let hessian = (&hessian + hessian.transpose()) * 0.5;
        let hessian_chol = Cholesky::new(hessian.clone())
            .ok_or_else(|| Error::Model("OPF Hessian is not positive definite".into()))?;

        let m = 2 * n + 2 * g + 1;
        let mut a = DMatrix::zeros(m, g + 1);
        for i in 0..n {
            for k in 0..g {
                a[(i, k)] = x_e[(i, k)];
                a[(n + i, k)] = -x_e[(i, k)];
            }
            a[(i, g)] = -1.0;
            a[(n + i, g)] = -1.0;
        }
        for k in 0..g {
            a[(2 * n + k, k)] = 1.0;
            a[(2 * n + g + k, k)] = -1.0;
        }
        a[(m - 1, g)] = -1.0;

        let full_dc = {
            // c = [-2 EᵀR q^ℓ; ρ]
            let mut d = DMatrix::zeros(g + 1, 2 * n);
            d.view_mut((0, n), (g, n))
                .copy_from(&(-2.0 * r_e.transpose()));
            d
        };
        let full_db = {
            // upper: v̄ - Rp + Xq^ℓ, lower: v̄ + Rp - Xq^ℓ
            let mut d = DMatrix::zeros(m, 2 * n);
            d.view_mut((0, 0), (n, n)).copy_from(&(-&grid.r));
            d.view_mut((0, n), (n, n)).copy_from(&grid.x);
            d.view_mut((n, 0), (n, n)).copy_from(&grid.r);
            d.view_mut((n, n), (n, n)).copy_from(&(-&grid.x));
            d
        };
        let dc_dtheta = full_dc.select_columns(layout.indices());
        let db_dtheta = full_db.select_columns(layout.indices());

        Ok(OpfSpec {
            grid,
            der_buses,
            qmax,
            vmax,
            nu,
            rho,
            layout,
            hessian,
            hessian_chol,
            constraints: a,
            dc_dtheta,
            db_dtheta,
        })
    }

    /// DERs, ratings and voltage limit taken from the feeder.
    pub fn from_feeder(
        model: &FeederModel,
        layout: FeatureLayout,
        nu: f64,
        rho: f64,
    ) -> Result<Self> {
        OpfSpec::new(
            build_grid_matrices(model)?,
            model.der_buses(),
            model.der_ratings(),
            model.vmax(),
            nu,
            rho,
            layout,
        )
    }

    pub fn grid(&self) -> &GridMatrices {
        &self.grid
    }

    pub fn n(&self) -> usize {
        self.grid.n()
    }

    pub fn g(&self) -> usize {
        self.der_buses.len()
    }

    /// Length of the feature vector.
    pub fn p(&self) -> usize {
        self.layout.p()
    }

    /// Number of inequality rows.
    pub fn m(&self) -> usize {
        self.constraints.nrows()
    }

    pub fn der_buses(&self) -> &[usize] {
        &self.der_buses
    }

    pub fn qmax(&self) -> &DVector<f64> {
        &self.qmax
    }

    pub fn vmax(&self) -> f64 {
        self.vmax
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn layout(&self) -> &FeatureLayout {
        &self.layout
    }

    pub fn hessian(&self) -> &DMatrix<f64> {
        &self.hessian
    }

    pub(crate) fn hessian_chol(&self) -> &Cholesky<f64, Dyn> {
        &self.hessian_chol
    }

    pub fn constraints(&self) -> &DMatrix<f64> {
        &self.constraints
    }

    /// `∂c/∂θ`, `(G+1) × P`.
    pub fn dc_dtheta(&self) -> &DMatrix<f64> {
        &self.dc_dtheta
    }

    /// `∂b/∂θ`, `m × P`.
    pub fn db_dtheta(&self) -> &DMatrix<f64> {
        &self.db_dtheta
    }

    /// Human-readable label of an inequality row.
    pub fn row_label(&self, row: usize) -> String {
        let (n, g) = (self.n(), self.g());
        match row {
            r if r < n => format!("v[{}] <= vmax + s", r + 1),
            r if r < 2 * n => format!("v[{}] >= -vmax - s", r - n + 1),
            r if r < 2 * n + g => format!("qg[{}] <= qmax", r - 2 * n),
            r if r < 2 * n + 2 * g => format!("qg[{}] >= -qmax", r - 2 * n - g),
            _ => "s >= 0".to_string(),
        }
    }

    /// Extends `q^g` over all buses: `E q^g`.
    pub fn spread(&self, qg: &DVector<f64>) -> DVector<f64> {
        let mut q = DVector::zeros(self.n());
        for (k, &b) in self.der_buses.iter().enumerate() {
            q[b - 1] = qg[k];
        }
        q
    }
}

fn incidence(n: usize, der_buses: &[usize]) -> DMatrix<f64> {
    let mut e = DMatrix::zeros(n, der_buses.len());
    for (k, &b) in der_buses.iter().enumerate() {
        e[(b - 1, k)] = 1.0;
    }
    e
}

/// A QP instance together with the constant dropped from its objective.
#[derive(Debug, Clone)]
pub struct OpfQp {
    pub qp: DenseQp,
    /// `q^ℓᵀ R q^ℓ`, so that the OPF objective is `½xᵀHx + cᵀx + constant`.
    pub constant: f64,
}

pub fn assemble_opf(spec: &OpfSpec, theta: &OpfTheta) -> Result<OpfQp> {
    let (p, ql) = spec.layout.expand(&theta.0)?;
    let (n, g) = (spec.n(), spec.g());
    let r_ql = &spec.grid.r * &ql;
    let mut c = DVector::zeros(g + 1);
    for (k, &bus) in spec.der_buses.iter().enumerate() {
        c[k] = -2.0 * r_ql[bus - 1];
    }
    c[g] = spec.rho;

    let dv = &spec.grid.r * &p - &spec.grid.x * &ql;
    let mut b = DVector::zeros(spec.m());
    for i in 0..n {
        b[i] = spec.vmax - dv[i];
        b[n + i] = spec.vmax + dv[i];
    }
    for k in 0..g {
        b[2 * n + k] = spec.qmax[k];
        b[2 * n + g + k] = spec.qmax[k];
    }
    Ok(OpfQp {
        qp: DenseQp {
            h: spec.hessian.clone(),
            c,
            a: spec.constraints.clone(),
            b,
        },
        constant: ql.dot(&r_ql),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpfSolution {
    pub qg: DVector<f64>,
    pub s: f64,
    pub objective: f64,
    /// Multipliers in row layout order.
    pub duals: DVector<f64>,
    /// `b - Ax` in row layout order.
    pub slack: DVector<f64>,
    pub status: SolveStatus,
    pub iterations: usize,
}

impl OpfSolution {
    /// `x = [q^g; s]`.
    pub fn x(&self) -> DVector<f64> {
        let g = self.qg.len();
        let mut x = DVector::zeros(g + 1);
        x.rows_mut(0, g).copy_from(&self.qg);
        x[g] = self.s;
        x
    }

    /// Rows whose slack is below their multiplier; the active set guess used
    /// to warm-start later solves.
    pub fn active_hint(&self) -> Vec<usize> {
        (0..self.slack.len())
            .filter(|&i| self.slack[i] < self.duals[i])
            .collect()
    }
}

fn finish(spec: &OpfSpec, opf: &OpfQp, sol: QpSolution) -> OpfSolution {
    let g = spec.g();
    let objective = opf.qp.objective(&sol.x) + opf.constant;
    OpfSolution {
        qg: sol.x.rows(0, g).into_owned(),
        s: sol.x[g],
        objective,
        duals: sol.z,
        slack: sol.slack,
        status: sol.status,
        iterations: sol.iterations,
    }
}

pub fn solve_opf(spec: &OpfSpec, theta: &OpfTheta) -> Result<OpfSolution> {
    solve_opf_with(spec, theta, None, &QpOptions::default())
}

/// Solve with an optional active-set hint (see [`OpfSolution::active_hint`]).
/// A hint only short-cuts the computation when it is verified optimal.
pub fn solve_opf_with(
    spec: &OpfSpec,
    theta: &OpfTheta,
    hint: Option<&[usize]>,
    opts: &QpOptions,
) -> Result<OpfSolution> {
    let opf = assemble_opf(spec, theta)?;
    let sol = match hint {
        Some(h) => opf.qp.solve_with_hint(h, opts)?,
        None => opf.qp.solve(opts)?,
    };
    Ok(finish(spec, &opf, sol))
}

/// Solves every column of `thetas` (`P × T`). Per-scenario failures carry the
/// scenario index and do not stop the remaining scenarios.
pub fn solve_opf_batch(spec: &OpfSpec, thetas: &DMatrix<f64>) -> Vec<Result<OpfSolution>> {
    solve_opf_batch_with(spec, thetas, None, &QpOptions::default())
}

pub fn solve_opf_batch_with(
    spec: &OpfSpec,
    thetas: &DMatrix<f64>,
    hints: Option<&[Vec<usize>]>,
    opts: &QpOptions,
) -> Vec<Result<OpfSolution>> {
    (0..thetas.ncols())
        .into_par_iter()
        .map(|t| {
            let theta = OpfTheta(thetas.column(t).into_owned());
            let hint = hints.and_then(|h| h.get(t)).map(|v| v.as_slice());
            let sol = solve_opf_with(spec, &theta, hint, opts).map_err(|e| e.in_scenario(t))?;
            if sol.status != SolveStatus::Optimal {
                return Err(Error::Numeric {
                    iter: sol.iterations,
                    what: format!("OPF solver status {}", sol.status.as_str()),
                }
                .in_scenario(t));
            }
            Ok(sol)
        })
        .collect()
}

/// Writes `scenario,qg_1..qg_G,s,objective,status`. Failed scenarios get
/// empty value cells and the error text as status.
pub fn write_batch_csv(path: &Path, results: &[Result<OpfSolution>], g: usize) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    let mut header = vec!["scenario".to_string()];
    header.extend((1..=g).map(|k| format!("qg_{k}")));
    header.extend(["s", "objective", "status"].map(String::from));
    let mut text = header.join(",");
    text.push('\n');
    for (t, r) in results.iter().enumerate() {
        let mut cells = vec![t.to_string()];
        match r {
            Ok(sol) => {
                cells.extend(sol.qg.iter().map(|v| v.to_string()));
                cells.push(sol.s.to_string());
                cells.push(sol.objective.to_string());
                cells.push(sol.status.as_str().to_string());
            }
            Err(e) => {
                cells.extend(std::iter::repeat_n(String::new(), g + 2));
                cells.push(format!("\"error: {}\"", e.to_string().replace('"', "'")));
            }
        }
        text.push_str(&cells.join(","));
        text.push('\n');
    }
    out.write_all(text.as_bytes())
        .map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktReport {
    pub stationarity: f64,
    pub primal_violation: f64,
    pub min_dual: f64,
    pub max_complementarity: f64,
}

impl KktReport {
    pub fn satisfied(&self, tol: f64) -> bool {
        self.stationarity <= tol
            && self.primal_violation <= tol
            && self.min_dual >= -tol
            && self.max_complementarity <= tol
    }
}

/// KKT certificate of `sol` recomputed from scratch.
pub fn kkt_residuals(spec: &OpfSpec, theta: &OpfTheta, sol: &OpfSolution) -> Result<KktReport> {
    let opf = assemble_opf(spec, theta)?;
    let x = sol.x();
    let slack = &opf.qp.b - &opf.qp.a * &x;
    Ok(KktReport {
        stationarity: opf.qp.stationarity(&x, &sol.duals),
        primal_violation: slack.iter().fold(0.0_f64, |m, &s| m.max(-s)),
        min_dual: sol.duals.min(),
        max_complementarity: slack
            .iter()
            .zip(sol.duals.iter())
            .fold(0.0_f64, |m, (s, z)| m.max((s * z).abs())),
    })
}

/// Solution of the OPF with hard voltage limits (no slack).
#[derive(Debug, Clone, PartialEq)]
pub struct HardOpfSolution {
    pub qg: DVector<f64>,
    pub objective: f64,
}

/// Solves the hard-constrained OPF, or returns `None` when the voltage band
/// cannot be met within the DER ratings (decided by a phase-one problem that
/// minimizes the required stretch).
pub fn solve_hard_opf(spec: &OpfSpec, theta: &OpfTheta) -> Result<Option<HardOpfSolution>> {
    let opf = assemble_opf(spec, theta)?;
    let g = spec.g();
    let m = spec.m();
    // Phase one: min s² + s over the same constraints, tiny ridge on q^g.
    let mut h1 = DMatrix::zeros(g + 1, g + 1);
    for k in 0..g {
        h1[(k, k)] = 1e-8;
    }
    h1[(g, g)] = 2.0;
    let mut c1 = DVector::zeros(g + 1);
    c1[g] = 1.0;
    let phase1 = DenseQp {
        h: h1,
        c: c1,
        a: opf.qp.a.clone(),
        b: opf.qp.b.clone(),
    }
    .solve(&QpOptions::default())?;
    if phase1.status != SolveStatus::Optimal {
        return Err(Error::Numeric {
            iter: phase1.iterations,
            what: "phase-one feasibility problem did not converge".into(),
        });
    }
    if phase1.x[g] > 1e-9 {
        return Ok(None);
    }
    // Drop the slack column and the s ≥ 0 row.
    let a = opf.qp.a.view((0, 0), (m - 1, g)).into_owned();
    let b = opf.qp.b.rows(0, m - 1).into_owned();
    let hard = DenseQp {
        h: opf.qp.h.view((0, 0), (g, g)).into_owned(),
        c: opf.qp.c.rows(0, g).into_owned(),
        a,
        b,
    };
    let sol = hard.solve(&QpOptions::default())?;
    if sol.status != SolveStatus::Optimal {
        return Err(Error::Numeric {
            iter: sol.iterations,
            what: format!("hard OPF status {}", sol.status.as_str()),
        });
    }
    Ok(Some(HardOpfSolution {
        objective: hard.objective(&sol.x) + opf.constant,
        qg: sol.x,
    }))
}
