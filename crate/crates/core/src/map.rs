//! Distillation maps `W = C·Sᵀ` and their JSON form.

use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::proxalg::GroupMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "PCA")]
    Pca,
    #[serde(rename = "DEIM")]
    Deim,
    #[serde(rename = "GL")]
    Gl,
    #[serde(rename = "GL2")]
    Gl2,
    #[serde(rename = "BGL")]
    Bgl,
    #[serde(rename = "BGL2")]
    Bgl2,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Pca,
        Method::Deim,
        Method::Gl,
        Method::Gl2,
        Method::Bgl,
        Method::Bgl2,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Pca => "PCA",
            Method::Deim => "DEIM",
            Method::Gl => "GL",
            Method::Gl2 => "GL2",
            Method::Bgl => "BGL",
            Method::Bgl2 => "BGL2",
        }
    }

    /// Whether the method needs OPF solves to fit.
    pub fn is_decision_aware(self) -> bool {
        matches!(self, Method::Bgl | Method::Bgl2)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                Error::Argument(format!(
                    "unknown method '{s}' (expected one of pca, deim, gl, gl2, bgl, bgl2)"
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillationMap {
    method: Method,
    selected: Vec<usize>,
    c: DMatrix<f64>,
    w: DMatrix<f64>,
    groups_mode: GroupMode,
    lambda: Option<f64>,
    k_exact: bool,
}

impl DistillationMap {
    /// Map from a selection and a `P × K` reconstruction matrix.
    pub fn from_selection(
        method: Method,
        p: usize,
        selected: Vec<usize>,
        c: DMatrix<f64>,
        groups_mode: GroupMode,
        lambda: Option<f64>,
    ) -> Result<Self> {
        if method == Method::Pca {
            return Err(Error::Argument("PCA maps carry no selection".into()));
        }
        if c.nrows() != p || c.ncols() != selected.len() {
            return Err(Error::Shape(format!(
                "reconstruction matrix is {}x{}, expected {}x{}",
                c.nrows(),
                c.ncols(),
                p,
                selected.len()
            )));
        }
        if selected.windows(2).any(|w| w[0] >= w[1]) || selected.last().is_some_and(|&s| s >= p) {
            return Err(Error::Argument(
                "selected indices must be increasing and below P".into(),
            ));
        }
        let mut w = DMatrix::zeros(p, p);
        for (k, &col) in selected.iter().enumerate() {
            w.set_column(col, &c.column(k));
        }
        Ok(DistillationMap {
            method,
            selected,
            c,
            w,
            groups_mode,
            lambda,
            k_exact: true,
        })
    }

    /// Projection `U_K U_Kᵀ` onto the span of orthonormal columns `u`.
    pub fn pca(u: DMatrix<f64>) -> Self {
        let w = &u * u.transpose();
        DistillationMap {
            method: Method::Pca,
            selected: Vec::new(),
            c: u,
            w,
            groups_mode: GroupMode::Column,
            lambda: None,
            k_exact: true,
        }
    }

    /// Keeps the nonzero columns of a penalized solution, zeroing whole
    /// groups whose norm is at most `threshold`.
    pub fn from_sparse(
        method: Method,
        mut w: DMatrix<f64>,
        groups: &crate::proxalg::GroupStructure,
        threshold: f64,
        lambda: f64,
    ) -> Result<Self> {
        if w.nrows() != w.ncols() || w.ncols() != groups.p() {
            return Err(Error::Shape("sparse map must be P x P".into()));
        }
        let mut selected = Vec::new();
        for (g, norm) in groups.groups().iter().zip(groups.norms(&w)) {
            if norm > threshold {
                selected.extend_from_slice(g);
            } else {
                for &c in g {
                    w.column_mut(c).fill(0.0);
                }
            }
        }
        selected.sort_unstable();
        let c = w.select_columns(&selected);
        Ok(DistillationMap {
            method,
            selected,
            c,
            w,
            groups_mode: groups.mode(),
            lambda: Some(lambda),
            k_exact: true,
        })
    }

    pub fn with_method(mut self, method: Method) -> Self {
        self.method = method;
        self
    }

    pub fn with_lambda(mut self, lambda: Option<f64>) -> Self {
        self.lambda = lambda;
        self
    }

    pub fn with_k_exact(mut self, exact: bool) -> Self {
        self.k_exact = exact;
        self
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn p(&self) -> usize {
        self.w.nrows()
    }

    /// Number of features kept (rank for PCA).
    pub fn k(&self) -> usize {
        self.c.ncols()
    }

    pub fn selected(&self) -> &[usize] {
        &self.selected
    }

    pub fn c(&self) -> &DMatrix<f64> {
        &self.c
    }

    pub fn w(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn groups_mode(&self) -> GroupMode {
        self.groups_mode
    }

    pub fn lambda(&self) -> Option<f64> {
        self.lambda
    }

    /// False when a requested feature count could not be hit exactly.
    pub fn k_exact(&self) -> bool {
        self.k_exact
    }

    /// `W θ̃` for one normalized scenario.
    pub fn apply(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        if theta.len() != self.p() {
            return Err(Error::Compatibility(format!(
                "map has P = {}, data has {}",
                self.p(),
                theta.len()
            )));
        }
        Ok(&self.w * theta)
    }

    /// `W Θ̃` for a `P × T` block of normalized scenarios.
    pub fn apply_all(&self, theta: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if theta.nrows() != self.p() {
            return Err(Error::Compatibility(format!(
                "map has P = {}, data has {}",
                self.p(),
                theta.nrows()
            )));
        }
        Ok(&self.w * theta)
    }

    pub fn to_json(&self) -> Result<String> {
        let json = MapJson {
            method: self.method,
            p: self.p(),
            k: self.k(),
            lambda: self.lambda,
            k_exact: self.k_exact,
            selected_indices: self.selected.clone(),
            groups_mode: self.groups_mode,
            c: (0..self.c.nrows())
                .flat_map(|i| self.c.row(i).iter().copied().collect::<Vec<_>>())
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&json)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let j: MapJson = serde_json::from_str(text)?;
        if j.c.len() != j.p * j.k {
            return Err(Error::Shape(format!(
                "C has {} entries, expected {}x{}",
                j.c.len(),
                j.p,
                j.k
            )));
        }
        let c = DMatrix::from_row_slice(j.p, j.k, &j.c);
        let map = if j.method == Method::Pca {
            if !j.selected_indices.is_empty() {
                return Err(Error::Argument("PCA map lists selected indices".into()));
            }
            DistillationMap::pca(c)
        } else {
            if j.selected_indices.len() != j.k {
                return Err(Error::Shape(
                    "k differs from the number of selected indices".into(),
                ));
            }
            DistillationMap::from_selection(
                j.method,
                j.p,
                j.selected_indices,
                c,
                j.groups_mode,
                None,
            )?
        };
        Ok(map
            .with_lambda(j.lambda)
            .with_k_exact(j.k_exact)
            .with_groups_mode(j.groups_mode))
    }

    fn with_groups_mode(mut self, mode: GroupMode) -> Self {
        self.groups_mode = mode;
        self
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[derive(Serialize, Deserialize)]
struct MapJson {
    method: Method,
    p: usize,
    k: usize,
    lambda: Option<f64>,
    #[serde(default = "yes")]
    k_exact: bool,
    selected_indices: Vec<usize>,
    groups_mode: GroupMode,
    #[serde(rename = "C")]
    c: Vec<f64>,
}

fn yes() -> bool {
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::proxalg::GroupStructure;

    #[test]
    fn selection_embeds_columns() {
        let c = DMatrix::from_row_slice(3, 1, &[1.0, 0.5, -2.0]);
        let m = DistillationMap::from_selection(
            Method::Gl2,
            3,
            vec![1],
            c,
            GroupMode::Column,
            Some(0.1),
        )
        .unwrap();
        assert_eq!(m.w().column(0).norm(), 0.0);
        assert_eq!(m.w()[(2, 1)], -2.0);
        assert_eq!(m.k(), 1);
    }

    #[test]
    fn sparse_maps_zero_small_groups() {
        let w = DMatrix::from_row_slice(2, 2, &[1.0, 1e-7, 0.5, 0.0]);
        let m =
            DistillationMap::from_sparse(Method::Gl, w, &GroupStructure::per_column(2), 1e-6, 0.3)
                .unwrap();
        assert_eq!(m.selected(), &[0]);
        assert_eq!(m.w()[(0, 1)], 0.0);
    }

    #[test]
    fn json_round_trip_is_bitwise() {
        let c = DMatrix::from_fn(4, 2, |i, j| {
            (i as f64 + 1.0) / 3.0 - (j as f64) * std::f64::consts::PI
        });
        let m = DistillationMap::from_selection(
            Method::Bgl2,
            4,
            vec![0, 3],
            c,
            GroupMode::Bus,
            Some(1.0 / 7.0),
        )
        .unwrap()
        .with_k_exact(false);
        let back = DistillationMap::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back, m);
        let u = DMatrix::from_row_slice(2, 1, &[0.6, 0.8]);
        let pca = DistillationMap::pca(u);
        assert_eq!(
            DistillationMap::from_json(&pca.to_json().unwrap()).unwrap(),
            pca
        );
    }

    #[test]
    fn method_names_parse() {
        assert_eq!("bgl2".parse::<Method>().unwrap(), Method::Bgl2);
        assert!("lasso".parse::<Method>().is_err());
    }

    #[test]
    fn apply_checks_dimension() {
        let m = DistillationMap::pca(DMatrix::identity(3, 3));
        assert!(matches!(
            m.apply(&DVector::zeros(2)),
            Err(Error::Compatibility(_))
        ));
    }
}
