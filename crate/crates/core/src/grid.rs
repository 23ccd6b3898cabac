//! Radial single-phase feeder: topology, linearized voltage/loss models and
//! an exact AC power flow used for evaluation.
//!
//! Bus 0 is always the substation. External bus ids are remapped so that the
//! substation becomes 0 and the remaining ids, sorted ascending, become
//! `1..=N`. All vectors indexed by bus exclude the substation, so entry `n - 1`
//! of an `N`-vector belongs to internal bus `n`.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::Path;

use nalgebra::{Complex, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_V0: f64 = 1.0;
pub const DEFAULT_VMAX: f64 = 0.03;
pub const AC_TOLERANCE: f64 = 1e-10;
pub const AC_MAX_SWEEPS: usize = 200;

/// A line given in external bus ids.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineSpec {
    pub from: u64,
    pub to: u64,
    pub r: f64,
    pub x: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Der {
    /// Internal bus index in `1..=N`.
    pub bus: usize,
    pub qmax: f64,
}

/// Radial feeder in internal indexing. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct FeederModel {
    bus_ids: Vec<u64>,
    /// `parent[n]` for `n >= 1`; `parent[0]` is unused and set to 0.
    parent: Vec<usize>,
    /// Impedance of the line feeding bus `n` (index 0 unused).
    r: Vec<f64>,
    x: Vec<f64>,
    /// Buses ordered so that every parent precedes its children.
    order: Vec<usize>,
    ders: Vec<Der>,
    v0: f64,
    vmax: f64,
}

impl FeederModel {
    /// Builds a feeder from lines given in external ids. The substation is
    /// the unique bus that never appears in the `to` position.
    pub fn from_lines(lines: &[LineSpec], ders: &[(u64, f64)]) -> Result<Self> {
        if lines.is_empty() {
            return Err(Error::Topology("feeder has no lines".into()));
        }
        let mut ids = BTreeSet::new();
        let mut receiving = BTreeSet::new();
        for l in lines {
            ids.insert(l.from);
            ids.insert(l.to);
            receiving.insert(l.to);
        }
        let roots: Vec<u64> = ids.difference(&receiving).copied().collect();
        let root = match roots.as_slice() {
            [r] => *r,
            [] => {
                return Err(Error::Topology(
                    "no substation: every bus is fed by a line".into(),
                ))
            }
            many => {
                return Err(Error::Topology(format!(
                    "ambiguous substation: buses {many:?} are never on the receiving end"
                )))
            }
        };
        let mut bus_ids = vec![root];
        bus_ids.extend(ids.iter().copied().filter(|&id| id != root));
        let index: BTreeMap<u64, usize> =
            bus_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        let n_bus = bus_ids.len();
        if lines.len() != n_bus - 1 {
            return Err(Error::Topology(format!(
                "{} buses need exactly {} lines, got {}",
                n_bus,
                n_bus - 1,
                lines.len()
            )));
        }

        let mut adj: Vec<Vec<(usize, f64, f64)>> = vec![Vec::new(); n_bus];
        for l in lines {
            if !(l.r >= 0.0 && l.x >= 0.0) || !l.r.is_finite() || !l.x.is_finite() {
                return Err(Error::Model(format!(
                    "line {}-{} has invalid impedance r={} x={}",
                    l.from, l.to, l.r, l.x
                )));
            }
            let (a, b) = (index[&l.from], index[&l.to]);
            if a == b {
                return Err(Error::Topology(format!("self-loop at bus {}", l.from)));
            }
            adj[a].push((b, l.r, l.x));
            adj[b].push((a, l.r, l.x));
        }

        let mut parent = vec![usize::MAX; n_bus];
        let mut r = vec![0.0; n_bus];
        let mut x = vec![0.0; n_bus];
        let mut order = Vec::with_capacity(n_bus);
        parent[0] = 0;
        let mut queue = VecDeque::from([0usize]);
        while let Some(u) = queue.pop_front() {
            order.push(u);
            for &(v, rv, xv) in &adj[u] {
                if parent[v] != usize::MAX {
                    continue;
                }
                parent[v] = u;
                r[v] = rv;
                x[v] = xv;
                queue.push_back(v);
            }
        }
        // N lines over N + 1 buses: connected iff acyclic.
        if order.len() != n_bus {
            let missing: Vec<u64> = (0..n_bus)
                .filter(|&b| parent[b] == usize::MAX)
                .map(|b| bus_ids[b])
                .collect();
            return Err(Error::Topology(format!(
                "not a spanning tree: buses {missing:?} are unreachable from the substation (cycle or disconnected part)"
            )));
        }

        let mut seen = BTreeSet::new();
        let mut internal_ders = Vec::with_capacity(ders.len());
        for &(id, qmax) in ders {
            let bus = *index
                .get(&id)
                .ok_or_else(|| Error::Model(format!("DER at unknown bus {id}")))?;
            if bus == 0 {
                return Err(Error::Model(format!("DER placed at substation bus {id}")));
            }
            if !(qmax >= 0.0) || !qmax.is_finite() {
                return Err(Error::Model(format!(
                    "DER at bus {id} has invalid rating {qmax}"
                )));
            }
            if !seen.insert(bus) {
                return Err(Error::Model(format!("more than one DER at bus {id}")));
            }
            internal_ders.push(Der { bus, qmax });
        }
        internal_ders.sort_by_key(|d| d.bus);

        Ok(FeederModel {
            bus_ids,
            parent,
            r,
            x,
            order,
            ders: internal_ders,
            v0: DEFAULT_V0,
            vmax: DEFAULT_VMAX,
        })
    }

    pub fn with_v0(mut self, v0: f64) -> Result<Self> {
        if !(v0 > 0.0) {
            return Err(Error::Model(format!(
                "substation voltage must be positive, got {v0}"
            )));
        }
        self.v0 = v0;
        Ok(self)
    }

    pub fn with_vmax(mut self, vmax: f64) -> Result<Self> {
        if !(vmax > 0.0) {
            return Err(Error::Model(format!(
                "voltage limit must be positive, got {vmax}"
            )));
        }
        self.vmax = vmax;
        Ok(self)
    }

    /// Number of non-substation buses `N`.
    pub fn n(&self) -> usize {
        self.bus_ids.len() - 1
    }

    pub fn bus_ids(&self) -> &[u64] {
        &self.bus_ids
    }

    pub fn internal_index(&self, id: u64) -> Option<usize> {
        self.bus_ids.iter().position(|&b| b == id)
    }

    pub fn parent(&self, bus: usize) -> Option<usize> {
        (bus != 0).then(|| self.parent[bus])
    }

    /// `(r, x)` of the line feeding `bus`.
    pub fn line_impedance(&self, bus: usize) -> Option<(f64, f64)> {
        (bus != 0 && bus < self.r.len()).then(|| (self.r[bus], self.x[bus]))
    }

    pub fn ders(&self) -> &[Der] {
        &self.ders
    }

    pub fn der_buses(&self) -> Vec<usize> {
        self.ders.iter().map(|d| d.bus).collect()
    }

    pub fn der_ratings(&self) -> DVector<f64> {
        DVector::from_iterator(self.ders.len(), self.ders.iter().map(|d| d.qmax))
    }

    pub fn v0(&self) -> f64 {
        self.v0
    }

    pub fn vmax(&self) -> f64 {
        self.vmax
    }

    /// Lines in external ids, ordered by receiving bus.
    pub fn lines(&self) -> Vec<LineSpec> {
        (1..self.bus_ids.len())
            .map(|b| LineSpec {
                from: self.bus_ids[self.parent[b]],
                to: self.bus_ids[b],
                r: self.r[b],
                x: self.x[b],
            })
            .collect()
    }

    pub fn load_csv(buses: impl AsRef<Path>, lines: impl AsRef<Path>) -> Result<Self> {
        let lines_path = lines.as_ref();
        let rows = read_rows(lines_path, &["from", "to", "r_pu", "x_pu"])?;
        let mut specs = Vec::with_capacity(rows.len());
        for (line, cells) in rows {
            specs.push(LineSpec {
                from: parse_cell(lines_path, line, "from", &cells[0])?,
                to: parse_cell(lines_path, line, "to", &cells[1])?,
                r: parse_cell(lines_path, line, "r_pu", &cells[2])?,
                x: parse_cell(lines_path, line, "x_pu", &cells[3])?,
            });
        }

        let buses_path = buses.as_ref();
        let rows = read_rows(buses_path, &["bus_id", "der_qmax"])?;
        let mut ders = Vec::new();
        let mut listed = BTreeSet::new();
        for (line, cells) in rows {
            let id: u64 = parse_cell(buses_path, line, "bus_id", &cells[0])?;
            listed.insert(id);
            if cells[1].is_empty() {
                continue;
            }
            let q: f64 = parse_cell(buses_path, line, "der_qmax", &cells[1])?;
            if q != 0.0 {
                ders.push((id, q));
            }
        }
        let model = FeederModel::from_lines(&specs, &ders)?;
        if let Some(id) = listed
            .iter()
            .find(|id| model.internal_index(**id).is_none())
        {
            return Err(Error::Model(format!(
                "{}: bus {id} does not appear in any line",
                buses_path.display()
            )));
        }
        Ok(model)
    }

    pub fn save_csv(&self, buses: impl AsRef<Path>, lines: impl AsRef<Path>) -> Result<()> {
        let buses = buses.as_ref();
        let mut w = csv::Writer::from_path(buses).map_err(|e| csv_io(buses, e))?;
        w.write_record(["bus_id", "der_qmax"])
            .map_err(|e| csv_io(buses, e))?;
        for (b, id) in self.bus_ids.iter().enumerate() {
            let q = self
                .ders
                .iter()
                .find(|d| d.bus == b)
                .map(|d| d.qmax.to_string())
                .unwrap_or_default();
            w.write_record([id.to_string(), q])
                .map_err(|e| csv_io(buses, e))?;
        }
        w.flush().map_err(|e| Error::io(buses, e))?;

        let lines = lines.as_ref();
        let mut w = csv::Writer::from_path(lines).map_err(|e| csv_io(lines, e))?;
        w.write_record(["from", "to", "r_pu", "x_pu"])
            .map_err(|e| csv_io(lines, e))?;
        for l in self.lines() {
            w.write_record([
                l.from.to_string(),
                l.to.to_string(),
                l.r.to_string(),
                l.x.to_string(),
            ])
            .map_err(|e| csv_io(lines, e))?;
        }
        w.flush().map_err(|e| Error::io(lines, e))?;
        Ok(())
    }

    /// Resistance accumulated from the substation to each bus.
    fn path_sums(&self) -> (Vec<f64>, Vec<f64>) {
        let mut cr = vec![0.0; self.bus_ids.len()];
        let mut cx = vec![0.0; self.bus_ids.len()];
        for &b in self.order.iter().skip(1) {
            let p = self.parent[b];
            cr[b] = cr[p] + self.r[b];
            cx[b] = cx[p] + self.x[b];
        }
        (cr, cx)
    }

    fn depth(&self) -> Vec<usize> {
        let mut d = vec![0; self.bus_ids.len()];
        for &b in self.order.iter().skip(1) {
            d[b] = d[self.parent[b]] + 1;
        }
        d
    }
}

pub(crate) fn csv_io(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: format!("{other:?}"),
        },
    }
}

/// Reads a headed CSV, skipping `#` comment lines, and returns trimmed cells
/// together with their 1-based line numbers.
pub(crate) fn read_rows(path: &Path, header: &[&str]) -> Result<Vec<(usize, Vec<String>)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    let mut seen_header = false;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let cells: Vec<String> = trimmed.split(',').map(|c| c.trim().to_string()).collect();
        if !seen_header {
            if cells != header {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line,
                    message: format!("expected header `{}`, found `{trimmed}`", header.join(",")),
                });
            }
            seen_header = true;
            continue;
        }
        if cells.len() != header.len() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("expected {} columns, found {}", header.len(), cells.len()),
            });
        }
        rows.push((line, cells));
    }
    if !seen_header {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: "missing header".into(),
        });
    }
    Ok(rows)
}

pub(crate) fn parse_cell<T: std::str::FromStr>(
    path: &Path,
    line: usize,
    column: &str,
    cell: &str,
) -> Result<T> {
    cell.parse().map_err(|_| Error::Parse {
        path: path.to_path_buf(),
        line,
        message: format!("column `{column}`: cannot parse `{cell}`"),
    })
}

/// Sensitivity matrices of the linearized voltage model.
#[derive(Debug, Clone, PartialEq)]
pub struct GridMatrices {
    pub r: DMatrix<f64>,
    pub x: DMatrix<f64>,
}

impl GridMatrices {
    pub fn n(&self) -> usize {
        self.r.nrows()
    }
}

/// `R[n][m]` is the resistance shared by the substation-to-`n` and
/// substation-to-`m` paths (same for `X` with reactances). No factor of two.
pub fn build_grid_matrices(model: &FeederModel) -> Result<GridMatrices> {
    for b in 1..model.bus_ids.len() {
        if !(model.r[b] > 0.0 && model.x[b] > 0.0) {
            return Err(Error::Model(format!(
                "line feeding bus {} has nonpositive impedance r={} x={}",
                model.bus_ids[b], model.r[b], model.x[b]
            )));
        }
    }
    let n = model.n();
    let (cr, cx) = model.path_sums();
    let depth = model.depth();
    let lca = |mut a: usize, mut b: usize| {
        while depth[a] > depth[b] {
            a = model.parent[a];
        }
        while depth[b] > depth[a] {
            b = model.parent[b];
        }
        while a != b {
            a = model.parent[a];
            b = model.parent[b];
        }
        a
    };
    let mut r = DMatrix::zeros(n, n);
    let mut x = DMatrix::zeros(n, n);
    for i in 1..=n {
        for j in i..=n {
            let c = lca(i, j);
            r[(i - 1, j - 1)] = cr[c];
            r[(j - 1, i - 1)] = cr[c];
            x[(i - 1, j - 1)] = cx[c];
            x[(j - 1, i - 1)] = cx[c];
        }
    }
    Ok(GridMatrices { r, x })
}

fn check_len(what: &str, v: &DVector<f64>, n: usize) -> Result<()> {
    if v.len() != n {
        return Err(Error::Shape(format!(
            "{what} has length {}, expected {n}",
            v.len()
        )));
    }
    Ok(())
}

/// `R p + X q + v0 1`.
pub fn linear_voltage(
    mat: &GridMatrices,
    p: &DVector<f64>,
    q: &DVector<f64>,
    v0: f64,
) -> Result<DVector<f64>> {
    check_len("p", p, mat.n())?;
    check_len("q", q, mat.n())?;
    Ok(&mat.r * p + &mat.x * q + DVector::from_element(mat.n(), v0))
}

/// Second-order line-loss model `2 pᵀRp + 2 qᵀRq`.
pub fn quadratic_losses(mat: &GridMatrices, p: &DVector<f64>, q: &DVector<f64>) -> Result<f64> {
    check_len("p", p, mat.n())?;
    check_len("q", q, mat.n())?;
    let loss = 2.0 * p.dot(&(&mat.r * p)) + 2.0 * q.dot(&(&mat.r * q));
    // Rounding can push an exact zero slightly negative.
    Ok(loss.max(0.0))
}

/// Voltage magnitudes from a backward/forward sweep of the exact branch-flow
/// equations. Injections are positive into the grid.
pub fn ac_power_flow(
    model: &FeederModel,
    p: &DVector<f64>,
    q: &DVector<f64>,
    v0: f64,
) -> Result<DVector<f64>> {
    ac_power_flow_with(model, p, q, v0, AC_TOLERANCE, AC_MAX_SWEEPS)
}

pub fn ac_power_flow_with(
    model: &FeederModel,
    p: &DVector<f64>,
    q: &DVector<f64>,
    v0: f64,
    tol: f64,
    max_sweeps: usize,
) -> Result<DVector<f64>> {
    let n = model.n();
    check_len("p", p, n)?;
    check_len("q", q, n)?;
    let nb = n + 1;
    let slack = Complex::new(v0, 0.0);
    let mut v = vec![slack; nb];
    let mut branch = vec![Complex::new(0.0, 0.0); nb];
    let mut residual = f64::INFINITY;
    for _ in 0..max_sweeps {
        // Backward: current drawn through the line feeding each bus.
        for b in 1..nb {
            let s = Complex::new(p[b - 1], q[b - 1]);
            branch[b] = -(s / v[b]).conj();
        }
        for &b in model.order.iter().rev() {
            if b == 0 {
                continue;
            }
            let par = model.parent[b];
            if par != 0 {
                let child = branch[b];
                branch[par] += child;
            }
        }
        // Forward: voltage drop along each line.
        residual = 0.0;
        for &b in model.order.iter().skip(1) {
            let z = Complex::new(model.r[b], model.x[b]);
            let nv = v[model.parent[b]] - z * branch[b];
            residual = f64::max(residual, (nv - v[b]).norm());
            v[b] = nv;
        }
        if !residual.is_finite() {
            break;
        }
        if residual <= tol {
            return Ok(DVector::from_iterator(n, v[1..].iter().map(|c| c.norm())));
        }
    }
    Err(Error::Convergence {
        sweeps: max_sweeps,
        residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn line(from: u64, to: u64, r: f64, x: f64) -> LineSpec {
        LineSpec { from, to, r, x }
    }

    fn chain() -> FeederModel {
        FeederModel::from_lines(&[line(0, 1, 0.01, 0.01), line(1, 2, 0.02, 0.02)], &[]).unwrap()
    }

    #[test]
    fn chain_resistance_matrix() {
        let m = build_grid_matrices(&chain()).unwrap();
        assert_eq!(
            m.r,
            DMatrix::from_row_slice(2, 2, &[0.01, 0.01, 0.01, 0.03])
        );
    }

    #[test]
    fn single_line_and_star() {
        let one = FeederModel::from_lines(&[line(0, 1, 0.05, 0.05)], &[]).unwrap();
        let m = build_grid_matrices(&one).unwrap();
        assert_eq!(m.r[(0, 0)], 0.05);
        assert_eq!(m.x[(0, 0)], 0.05);

        let star = FeederModel::from_lines(&[line(0, 1, 0.01, 0.01), line(0, 2, 0.01, 0.01)], &[])
            .unwrap();
        let m = build_grid_matrices(&star).unwrap();
        assert_eq!(
            m.r,
            DMatrix::from_diagonal(&DVector::from_vec(vec![0.01, 0.01]))
        );
    }

    #[test]
    fn external_ids_remap() {
        let m = FeederModel::from_lines(
            &[line(650, 632, 0.01, 0.02), line(632, 671, 0.03, 0.04)],
            &[(671, 0.2)],
        )
        .unwrap();
        assert_eq!(m.bus_ids(), &[650, 632, 671]);
        assert_eq!(m.ders(), &[Der { bus: 2, qmax: 0.2 }]);
        assert_eq!(m.parent(2), Some(1));
    }

    #[test]
    fn topology_errors() {
        // Cycle 0-1-2-1 style: three buses with three lines.
        let cyc = FeederModel::from_lines(
            &[
                line(0, 1, 0.1, 0.1),
                line(1, 2, 0.1, 0.1),
                line(2, 3, 0.1, 0.1),
                line(3, 1, 0.1, 0.1),
            ],
            &[],
        );
        assert!(matches!(cyc, Err(Error::Topology(_))));
        // Two roots.
        let two = FeederModel::from_lines(&[line(0, 1, 0.1, 0.1), line(2, 3, 0.1, 0.1)], &[]);
        assert!(matches!(two, Err(Error::Topology(_))));
        // Disconnected: 0-1, and 2<->3 in a loop.
        let disc = FeederModel::from_lines(
            &[
                line(0, 1, 0.1, 0.1),
                line(2, 3, 0.1, 0.1),
                line(3, 2, 0.1, 0.1),
            ],
            &[],
        );
        assert!(matches!(disc, Err(Error::Topology(_))));
    }

    #[test]
    fn nonpositive_impedance_rejected() {
        let m = FeederModel::from_lines(&[line(0, 1, 0.0, 0.1)], &[]).unwrap();
        assert!(matches!(build_grid_matrices(&m), Err(Error::Model(_))));
        assert!(matches!(
            FeederModel::from_lines(&[line(0, 1, -0.1, 0.1)], &[]),
            Err(Error::Model(_))
        ));
    }

    #[test]
    fn der_validation() {
        assert!(FeederModel::from_lines(&[line(0, 1, 0.1, 0.1)], &[(0, 0.1)]).is_err());
        assert!(FeederModel::from_lines(&[line(0, 1, 0.1, 0.1)], &[(5, 0.1)]).is_err());
        assert!(FeederModel::from_lines(&[line(0, 1, 0.1, 0.1)], &[(1, -0.1)]).is_err());
    }

    #[test]
    fn linear_voltage_examples() {
        let one = FeederModel::from_lines(&[line(0, 1, 0.05, 0.05)], &[]).unwrap();
        let m = build_grid_matrices(&one).unwrap();
        let v =
            linear_voltage(&m, &DVector::from_vec(vec![-1.0]), &DVector::zeros(1), 1.0).unwrap();
        assert_abs_diff_eq!(v[0], 0.95, epsilon = 1e-15);

        let m = build_grid_matrices(&chain()).unwrap();
        let v = linear_voltage(
            &m,
            &DVector::from_vec(vec![-1.0, -1.0]),
            &DVector::zeros(2),
            1.0,
        )
        .unwrap();
        assert_abs_diff_eq!(v[0], 0.98, epsilon = 1e-15);
        assert_abs_diff_eq!(v[1], 0.96, epsilon = 1e-15);
        let v = linear_voltage(&m, &DVector::zeros(2), &DVector::zeros(2), 1.02).unwrap();
        assert_eq!(v, DVector::from_element(2, 1.02));
        assert!(matches!(
            linear_voltage(&m, &DVector::zeros(3), &DVector::zeros(2), 1.0),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn losses_examples() {
        let one = FeederModel::from_lines(&[line(0, 1, 0.05, 0.05)], &[]).unwrap();
        let m = build_grid_matrices(&one).unwrap();
        let l = quadratic_losses(&m, &DVector::from_vec(vec![1.0]), &DVector::zeros(1)).unwrap();
        assert_abs_diff_eq!(l, 0.1, epsilon = 1e-15);
        assert_eq!(
            quadratic_losses(&m, &DVector::zeros(1), &DVector::zeros(1)).unwrap(),
            0.0
        );
    }

    #[test]
    fn ac_flat_start_is_exact() {
        let m = chain();
        let v = ac_power_flow(&m, &DVector::zeros(2), &DVector::zeros(2), 1.0).unwrap();
        assert_eq!(v, DVector::from_element(2, 1.0));
    }

    /// Receiving-end voltage of one line feeding a load `P + jQ`.
    fn single_branch_closed_form(r: f64, x: f64, load_p: f64, load_q: f64, v0: f64) -> f64 {
        let b = v0 * v0 - 2.0 * (r * load_p + x * load_q);
        let c = (r * r + x * x) * (load_p * load_p + load_q * load_q);
        ((b + (b * b - 4.0 * c).sqrt()) / 2.0).sqrt()
    }

    #[test]
    fn ac_matches_single_branch_closed_form() {
        let m = FeederModel::from_lines(&[line(0, 1, 0.05, 0.05)], &[]).unwrap();
        let v = ac_power_flow(&m, &DVector::from_vec(vec![-0.5]), &DVector::zeros(1), 1.0).unwrap();
        let oracle = single_branch_closed_form(0.05, 0.05, 0.5, 0.0, 1.0);
        assert_abs_diff_eq!(v[0], oracle, epsilon = 1e-9);
    }

    #[test]
    fn ac_close_to_linear_under_light_load() {
        let model = chain();
        let mat = build_grid_matrices(&model).unwrap();
        for &(p1, p2, q1, q2) in &[
            (-0.05, -0.05, -0.05, 0.05),
            (0.05, -0.03, 0.02, -0.05),
            (-0.05, 0.05, 0.0, 0.0),
        ] {
            let p = DVector::from_vec(vec![p1, p2]);
            let q = DVector::from_vec(vec![q1, q2]);
            let ac = ac_power_flow(&model, &p, &q, 1.0).unwrap();
            let lin = linear_voltage(&mat, &p, &q, 1.0).unwrap();
            assert!((ac - lin).amax() <= 5e-3);
        }
    }

    #[test]
    fn ac_reports_non_convergence() {
        let m = FeederModel::from_lines(&[line(0, 1, 0.5, 0.5)], &[]).unwrap();
        let err = ac_power_flow(
            &m,
            &DVector::from_vec(vec![-10.0]),
            &DVector::from_vec(vec![-10.0]),
            1.0,
        );
        assert!(matches!(err, Err(Error::Convergence { sweeps: 200, .. })));
    }

    #[test]
    fn csv_round_trip_and_comments() {
        let dir = tempfile::tempdir().unwrap();
        let b = dir.path().join("buses.csv");
        let l = dir.path().join("lines.csv");
        std::fs::write(&b, "# feeder\nbus_id,der_qmax\n10,\n11,0.3\n12,0\n").unwrap();
        std::fs::write(
            &l,
            "from,to,r_pu,x_pu\n# trunk\n10,11,0.01,0.02\n11,12,0.02,0.03\n",
        )
        .unwrap();
        let m = FeederModel::load_csv(&b, &l).unwrap();
        assert_eq!(m.n(), 2);
        assert_eq!(m.ders(), &[Der { bus: 1, qmax: 0.3 }]);

        let b2 = dir.path().join("b2.csv");
        let l2 = dir.path().join("l2.csv");
        m.save_csv(&b2, &l2).unwrap();
        assert_eq!(FeederModel::load_csv(&b2, &l2).unwrap(), m);
    }

    #[test]
    fn csv_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let b = dir.path().join("buses.csv");
        let l = dir.path().join("lines.csv");
        std::fs::write(&b, "bus_id,der_qmax\n1,\n").unwrap();
        std::fs::write(&l, "from,to,r_pu,x_pu\n0,1,abc,0.1\n").unwrap();
        match FeederModel::load_csv(&b, &l) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        std::fs::write(&l, "from,to,r\n0,1,0.1\n").unwrap();
        assert!(matches!(
            FeederModel::load_csv(&b, &l),
            Err(Error::Parse { line: 1, .. })
        ));
    }
}
