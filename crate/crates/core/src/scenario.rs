//! Scenario matrices `Θ` (features × scenarios), their normalization, the
//! synthetic load/solar/EV generator and the benchmark feeder.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{parse_cell, read_rows};
use crate::grid::{FeederModel, LineSpec};
use crate::opf::FeatureLayout;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    /// Net active injection `p^g − p^ℓ`.
    PNet,
    /// Reactive load `q^ℓ`.
    QLoad,
}

impl FeatureKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FeatureKind::PNet => "p_net",
            FeatureKind::QLoad => "q_load",
        }
    }
}

impl FromStr for FeatureKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "p_net" => Ok(FeatureKind::PNet),
            "q_load" => Ok(FeatureKind::QLoad),
            other => Err(format!("unknown feature kind `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Feature {
    pub id: String,
    pub kind: FeatureKind,
    pub bus: u64,
}

impl Feature {
    pub fn new(kind: FeatureKind, bus: u64) -> Self {
        let prefix = match kind {
            FeatureKind::PNet => "p",
            FeatureKind::QLoad => "q",
        };
        Feature {
            id: format!("{prefix}{bus}"),
            kind,
            bus,
        }
    }
}

/// Per-feature centering and scaling.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub mean: DVector<f64>,
    pub scale: DVector<f64>,
    /// Features with zero raw variance (scale forced to 1).
    pub constant: Vec<bool>,
}

impl Normalization {
    /// `σ ⊙ θ̃ + m` for each column.
    pub fn denormalize(&self, theta: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = theta.clone();
        for mut col in out.column_iter_mut() {
            for i in 0..col.len() {
                col[i] = col[i] * self.scale[i] + self.mean[i];
            }
        }
        out
    }

    pub fn normalize(&self, theta: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = theta.clone();
        for mut col in out.column_iter_mut() {
            for i in 0..col.len() {
                col[i] = (col[i] - self.mean[i]) / self.scale[i];
            }
        }
        out
    }

    pub fn identity(p: usize) -> Self {
        Normalization {
            mean: DVector::zeros(p),
            scale: DVector::from_element(p, 1.0),
            constant: vec![false; p],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSet {
    theta: DMatrix<f64>,
    features: Vec<Feature>,
    norm: Option<Normalization>,
}

impl ScenarioSet {
    /// Raw (unnormalized) scenarios; `theta` is `P × T`.
    pub fn new(theta: DMatrix<f64>, features: Vec<Feature>) -> Result<Self> {
        if theta.nrows() != features.len() {
            return Err(Error::Shape(format!(
                "{} features declared for {} data rows",
                features.len(),
                theta.nrows()
            )));
        }
        let mut seen = BTreeSet::new();
        for f in &features {
            if !seen.insert((f.kind, f.bus)) {
                return Err(Error::Argument(format!(
                    "feature {} {} declared twice",
                    f.kind.as_str(),
                    f.bus
                )));
            }
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::Argument("scenario data must be finite".into()));
        }
        Ok(ScenarioSet {
            theta,
            features,
            norm: None,
        })
    }

    pub fn theta(&self) -> &DMatrix<f64> {
        &self.theta
    }

    pub fn features(&self) -> &[Feature] {
        &self.features
    }

    pub fn p(&self) -> usize {
        self.theta.nrows()
    }

    pub fn t(&self) -> usize {
        self.theta.ncols()
    }

    pub fn is_normalized(&self) -> bool {
        self.norm.is_some()
    }

    pub fn normalization(&self) -> Option<&Normalization> {
        self.norm.as_ref()
    }

    /// Centers each row and divides by its population standard deviation.
    pub fn normalize(&self) -> Result<ScenarioSet> {
        if self.is_normalized() {
            return Err(Error::State("scenario set is already normalized".into()));
        }
        let (p, t) = self.theta.shape();
        if t == 0 {
            return Err(Error::Argument("empty scenario set".into()));
        }
        let mut mean = DVector::zeros(p);
        let mut scale = DVector::from_element(p, 1.0);
        let mut constant = vec![false; p];
        for i in 0..p {
            let row = self.theta.row(i);
            let m = row.sum() / t as f64;
            let var = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / t as f64;
            mean[i] = m;
            if var > 0.0 && row.iter().any(|&v| v != row[0]) {
                scale[i] = var.sqrt();
            } else {
                constant[i] = true;
            }
        }
        let norm = Normalization {
            mean,
            scale,
            constant,
        };
        let mut theta = norm.normalize(&self.theta);
        for (i, &c) in norm.constant.iter().enumerate() {
            if c {
                theta.row_mut(i).fill(0.0);
            }
        }
        Ok(ScenarioSet {
            theta,
            features: self.features.clone(),
            norm: Some(norm),
        })
    }

    pub fn denormalize(&self) -> Result<ScenarioSet> {
        let norm = self
            .norm
            .as_ref()
            .ok_or_else(|| Error::State("scenario set is not normalized".into()))?;
        Ok(ScenarioSet {
            theta: norm.denormalize(&self.theta),
            features: self.features.clone(),
            norm: None,
        })
    }

    /// Raw data, whether or not the set is normalized.
    pub fn raw(&self) -> DMatrix<f64> {
        match &self.norm {
            Some(n) => n.denormalize(&self.theta),
            None => self.theta.clone(),
        }
    }

    /// Where each feature lands in the OPF data vector `[p; q^ℓ]`.
    pub fn layout(&self, model: &FeederModel) -> Result<FeatureLayout> {
        let n = model.n();
        let mut indices = Vec::with_capacity(self.p());
        for f in &self.features {
            let b = model.internal_index(f.bus).ok_or_else(|| {
                Error::Compatibility(format!("feature {} refers to unknown bus {}", f.id, f.bus))
            })?;
            if b == 0 {
                return Err(Error::Compatibility(format!(
                    "feature {} sits at the substation",
                    f.id
                )));
            }
            indices.push(match f.kind {
                FeatureKind::PNet => b - 1,
                FeatureKind::QLoad => n + b - 1,
            });
        }
        FeatureLayout::new(n, indices, DVector::zeros(2 * n))
    }

    /// Internal bus index of each feature, for grouping columns by bus.
    pub fn feature_buses(&self) -> Vec<usize> {
        let mut ids: Vec<u64> = self.features.iter().map(|f| f.bus).collect();
        ids.sort_unstable();
        ids.dedup();
        self.features
            .iter()
            .map(|f| ids.binary_search(&f.bus).unwrap_or(0))
            .collect()
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<ScenarioSet> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let header_line = text
            .lines()
            .map(str::trim)
            .find(|l| !l.is_empty() && !l.starts_with('#'))
            .ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: 0,
                message: "missing header".into(),
            })?;
        let columns: Vec<String> = header_line
            .split(',')
            .map(|c| c.trim().to_string())
            .collect();
        let t = columns.len().saturating_sub(3);
        let mut expected = vec!["feature_id".to_string(), "kind".into(), "bus_id".into()];
        expected.extend((1..=t).map(|i| format!("t{i}")));
        let header: Vec<&str> = expected.iter().map(String::as_str).collect();
        let rows = read_rows(path, &header)?;
        let mut features = Vec::with_capacity(rows.len());
        let mut values = Vec::with_capacity(rows.len() * t);
        for (line, cells) in &rows {
            let kind: FeatureKind = cells[1].parse().map_err(|m| Error::Parse {
                path: path.to_path_buf(),
                line: *line,
                message: m,
            })?;
            let bus: u64 = parse_cell(path, *line, "bus_id", &cells[2])?;
            for (k, cell) in cells[3..].iter().enumerate() {
                let v: f64 = parse_cell(path, *line, header[k + 3], cell)?;
                if !v.is_finite() {
                    return Err(Error::Parse {
                        path: path.to_path_buf(),
                        line: *line,
                        message: format!("column `{}`: non-finite value `{cell}`", header[k + 3]),
                    });
                }
                values.push(v);
            }
            features.push(Feature {
                id: cells[0].clone(),
                kind,
                bus,
            });
        }
        let theta = DMatrix::from_row_slice(rows.len(), t, &values);
        ScenarioSet::new(theta, features)
    }

    /// Writes the raw data.
    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let raw = self.raw();
        let mut out = String::from("feature_id,kind,bus_id");
        for i in 1..=self.t() {
            let _ = write!(out, ",t{i}");
        }
        out.push('\n');
        for (i, f) in self.features.iter().enumerate() {
            let _ = write!(out, "{},{},{}", f.id, f.kind.as_str(), f.bus);
            for v in raw.row(i).iter() {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn stats(&self) -> Vec<FeatureStats> {
        let raw = self.raw();
        let t = raw.ncols().max(1) as f64;
        self.features
            .iter()
            .enumerate()
            .map(|(i, f)| {
                let row = raw.row(i);
                let mean = row.sum() / t;
                let std = (row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / t).sqrt();
                FeatureStats {
                    id: f.id.clone(),
                    kind: f.kind,
                    bus: f.bus,
                    mean,
                    std,
                    min: row.min(),
                    max: row.max(),
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeatureStats {
    pub id: String,
    pub kind: FeatureKind,
    pub bus: u64,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

/// `‖Θ − WΘ‖²_F / ‖Θ‖²_F` on normalized data.
pub fn eval_data_error(w: &DMatrix<f64>, set: &ScenarioSet) -> Result<f64> {
    if !set.is_normalized() {
        return Err(Error::State(
            "data error is defined on normalized scenarios".into(),
        ));
    }
    let theta = set.theta();
    if w.nrows() != theta.nrows() || w.ncols() != theta.nrows() {
        return Err(Error::Compatibility(format!(
            "map is {}x{}, data has P = {}",
            w.nrows(),
            w.ncols(),
            theta.nrows()
        )));
    }
    let total = theta.norm_squared();
    if total == 0.0 {
        return Ok(0.0);
    }
    Ok((theta - w * theta).norm_squared() / total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub t: usize,
    /// Buses with consumption; each gets a `p_net` and a `q_load` feature.
    pub load_buses: Vec<u64>,
    /// Buses with rooftop solar; each gets a `p_net` feature.
    pub pv_buses: Vec<u64>,
    /// Mean peak active load per bus (pu).
    pub load_scale: f64,
    /// Peak solar output per PV bus (pu).
    pub pv_scale: f64,
    /// EV charger rating (pu).
    pub ev_scale: f64,
    /// Share of load buses with an EV charger.
    pub ev_share: f64,
    /// Relative standard deviation of the multiplicative load noise.
    pub noise: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            seed: 0,
            t: 200,
            load_buses: Vec::new(),
            pv_buses: Vec::new(),
            load_scale: 0.02,
            pv_scale: 0.05,
            ev_scale: 0.02,
            ev_share: 0.3,
            noise: 0.05,
        }
    }
}

/// Diurnal residential load shape with morning and evening peaks, in `[0.4, 1]`.
fn load_shape(hour: f64) -> f64 {
    let bump = |center: f64, width: f64| {
        let d = (hour - center).abs().min(24.0 - (hour - center).abs());
        (-(d * d) / (2.0 * width * width)).exp()
    };
    (0.4 + 0.25 * bump(8.0, 1.5) + 0.6 * bump(19.5, 2.0)).min(1.0)
}

fn solar_shape(hour: f64) -> f64 {
    if (6.0..18.0).contains(&hour) {
        (std::f64::consts::PI * (hour - 6.0) / 12.0).sin()
    } else {
        0.0
    }
}

/// Seeded scenarios `θ = [p^g − p^ℓ; q^ℓ]` for the configured buses.
/// Scenarios are snapshots at random times of day on random days sharing
/// the same daily shapes; reactive loads follow power factors drawn
/// uniformly in `[0.85, 1]`.
pub fn generate_synthetic(cfg: &SyntheticConfig, model: &FeederModel) -> Result<ScenarioSet> {
    if cfg.t == 0 {
        return Err(Error::Config("scenario count must be positive".into()));
    }
    if cfg.load_buses.is_empty() && cfg.pv_buses.is_empty() {
        return Err(Error::Config("no load or PV buses configured".into()));
    }
    for (what, list) in [("load", &cfg.load_buses), ("PV", &cfg.pv_buses)] {
        let mut seen = BTreeSet::new();
        for &b in list {
            match model.internal_index(b) {
                None => {
                    return Err(Error::Config(format!(
                        "{what} bus {b} is not in the feeder"
                    )))
                }
                Some(0) => return Err(Error::Config(format!("{what} bus {b} is the substation"))),
                Some(_) => {}
            }
            if !seen.insert(b) {
                return Err(Error::Config(format!("{what} bus {b} listed twice")));
            }
        }
    }
    for (name, v) in [
        ("load_scale", cfg.load_scale),
        ("pv_scale", cfg.pv_scale),
        ("ev_scale", cfg.ev_scale),
        ("noise", cfg.noise),
    ] {
        if !(v >= 0.0 && v.is_finite()) {
            return Err(Error::Config(format!(
                "{name} must be finite and nonnegative"
            )));
        }
    }
    if !(0.0..=1.0).contains(&cfg.ev_share) {
        return Err(Error::Config("ev_share must lie in [0, 1]".into()));
    }

    let p_buses: Vec<u64> = cfg
        .load_buses
        .iter()
        .chain(&cfg.pv_buses)
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut q_buses = cfg.load_buses.clone();
    q_buses.sort_unstable();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, cfg.noise).map_err(|e| Error::Config(e.to_string()))?;

    // Per-bus constants.
    let peak: Vec<f64> = q_buses
        .iter()
        .map(|_| cfg.load_scale * rng.gen_range(0.5..1.5))
        .collect();
    let pv_cap: Vec<f64> = cfg
        .pv_buses
        .iter()
        .map(|_| cfg.pv_scale * rng.gen_range(0.8..1.2))
        .collect();
    let has_ev: Vec<bool> = q_buses.iter().map(|_| rng.gen_bool(cfg.ev_share)).collect();

    let t = cfg.t;
    let np = p_buses.len();
    let mut theta = DMatrix::zeros(np + q_buses.len(), t);
    for s in 0..t {
        let hour: f64 = rng.gen_range(0.0..24.0);
        let day_level: f64 = rng.gen_range(0.8..1.2);
        let clouds: f64 = rng.gen_range(0.5..1.0);
        for (j, &bus) in q_buses.iter().enumerate() {
            let base =
                peak[j] * day_level * load_shape(hour) * (1.0 + noise.sample(&mut rng)).max(0.0);
            let charging = has_ev[j] && !(2.0..18.0).contains(&hour) && rng.gen_bool(0.5);
            let ev = if charging { cfg.ev_scale } else { 0.0 };
            let pf: f64 = rng.gen_range(0.85..=1.0);
            let load = base + ev;
            let i = p_buses.binary_search(&bus).expect("load bus is a p bus");
            theta[(i, s)] -= load;
            theta[(np + j, s)] = load * pf.acos().tan();
        }
        for (k, &bus) in cfg.pv_buses.iter().enumerate() {
            let gen = pv_cap[k] * solar_shape(hour) * clouds;
            let i = p_buses.binary_search(&bus).expect("pv bus is a p bus");
            theta[(i, s)] += gen;
        }
    }
    let mut features: Vec<Feature> = p_buses
        .iter()
        .map(|&b| Feature::new(FeatureKind::PNet, b))
        .collect();
    features.extend(q_buses.iter().map(|&b| Feature::new(FeatureKind::QLoad, b)));
    ScenarioSet::new(theta, features)
}

/// Parent of buses `1..=36` in the 37-bus benchmark tree.
const BENCHMARK_PARENT: [u64; 36] = [
    0, 1, 2, 3, 4, 5, 6, 7, 8, // trunk 1..9
    2, 10, 11, // lateral at 2
    3, 13, 14, 15, // lateral at 3
    5, 17, 18, 19, // lateral at 5
    6, 21, 22, // lateral at 6
    7, 24, 25, 26, // lateral at 7
    8, 28, 29, // lateral at 8
    9, 31, 32, 33, 34, 35, // extension past 9
];

pub const BENCHMARK_LOAD_BUSES: [u64; 25] = [
    4, 9, 11, 12, 14, 15, 16, 18, 19, 20, 22, 23, 25, 26, 27, 29, 30, 31, 32, 33, 34, 35, 36, 10,
    21,
];

pub const BENCHMARK_DER_BUSES: [u64; 10] = [12, 16, 20, 23, 27, 30, 32, 34, 36, 19];

/// Radial 37-bus test feeder (36 lines) with 10 DERs at the listed buses.
pub fn benchmark_feeder() -> FeederModel {
    let lines: Vec<LineSpec> = BENCHMARK_PARENT
        .iter()
        .enumerate()
        .map(|(i, &parent)| {
            let bus = i as u64 + 1;
            let trunk = bus <= 9 || parent == 0;
            let (r, x) = if trunk {
                (0.006, 0.004)
            } else {
                (0.010, 0.006)
            };
            // Mild deterministic variation in line lengths.
            let len = 0.8 + 0.4 * ((bus * 7 % 11) as f64 / 10.0);
            LineSpec {
                from: parent,
                to: bus,
                r: r * len,
                x: x * len,
            }
        })
        .collect();
    let ders: Vec<(u64, f64)> = BENCHMARK_DER_BUSES.iter().map(|&b| (b, 0.06)).collect();
    FeederModel::from_lines(&lines, &ders).expect("benchmark feeder is valid")
}

/// Generator settings for the benchmark feeder: 25 load buses, 10 of them
/// with solar, `P = 50` features.
pub fn benchmark_config(seed: u64, t: usize) -> SyntheticConfig {
    let mut load: Vec<u64> = BENCHMARK_LOAD_BUSES.to_vec();
    load.sort_unstable();
    let mut pv: Vec<u64> = BENCHMARK_DER_BUSES.to_vec();
    pv.sort_unstable();
    SyntheticConfig {
        seed,
        t,
        load_buses: load,
        pv_buses: pv,
        ..Default::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn two_by_three() -> ScenarioSet {
        ScenarioSet::new(
            DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 5.0, 5.0, 5.0]),
            vec![
                Feature::new(FeatureKind::PNet, 1),
                Feature::new(FeatureKind::QLoad, 1),
            ],
        )
        .unwrap()
    }

    #[test]
    fn normalization_examples() {
        let set = two_by_three().normalize().unwrap();
        let s = (2.0f64 / 3.0).sqrt();
        assert_abs_diff_eq!(set.normalization().unwrap().scale[0], s, epsilon = 1e-15);
        assert_abs_diff_eq!(set.theta()[(0, 0)], -1.224744871391589, epsilon = 1e-12);
        assert_eq!(set.theta()[(0, 1)], 0.0);
        assert_eq!(
            set.theta().row(1).iter().copied().collect::<Vec<_>>(),
            vec![0.0; 3]
        );
        assert!(set.normalization().unwrap().constant[1]);
        assert_eq!(set.normalization().unwrap().scale[1], 1.0);
        assert!(matches!(set.normalize(), Err(Error::State(_))));
        assert!(matches!(two_by_three().denormalize(), Err(Error::State(_))));
    }

    proptest! {
        #[test]
        fn normalization_invariants(v in proptest::collection::vec(-10.0..10.0f64, 4 * 7)) {
            let features = (1..=4).map(|b| Feature::new(FeatureKind::PNet, b)).collect();
            let set = ScenarioSet::new(DMatrix::from_vec(4, 7, v), features).unwrap();
            let n = set.normalize().unwrap();
            for i in 0..4 {
                let row = n.theta().row(i);
                let mean = row.sum() / 7.0;
                let std = (row.iter().map(|x| x * x).sum::<f64>() / 7.0).sqrt();
                prop_assert!(mean.abs() <= 1e-10);
                prop_assert!((std - 1.0).abs() <= 1e-10);
            }
            prop_assert!((n.denormalize().unwrap().theta() - set.theta()).amax() <= 1e-12);
        }
    }

    #[test]
    fn csv_round_trip_is_bitwise() {
        let model = benchmark_feeder();
        let set = generate_synthetic(&benchmark_config(3, 12), &model).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        set.save_csv(&path).unwrap();
        let back = ScenarioSet::load_csv(&path).unwrap();
        assert_eq!(back, set);
        assert!(!back.is_normalized());
    }

    #[test]
    fn csv_small_and_bad_cells() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        std::fs::write(
            &path,
            "feature_id,kind,bus_id,t1,t2,t3\np1,p_net,1,1,2,3\nq1,q_load,1,0.1,0.2,0.3\n",
        )
        .unwrap();
        let set = ScenarioSet::load_csv(&path).unwrap();
        assert_eq!(set.theta().shape(), (2, 3));
        std::fs::write(&path, "feature_id,kind,bus_id,t1,t2\np1,p_net,1,1,NaN\n").unwrap();
        match ScenarioSet::load_csv(&path) {
            Err(Error::Parse { line, message, .. }) => {
                assert_eq!(line, 2);
                assert!(message.contains("t2"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
        std::fs::write(&path, "feature_id,kind,bus_id,t1,t2\np1,p_net,1,1\n").unwrap();
        assert!(matches!(
            ScenarioSet::load_csv(&path),
            Err(Error::Parse { line: 2, .. })
        ));
        std::fs::write(&path, "feature_id,kind,bus_id,t1\np1,v_mag,1,1\n").unwrap();
        assert!(matches!(
            ScenarioSet::load_csv(&path),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn generator_is_deterministic_and_bounded() {
        let model = benchmark_feeder();
        let cfg = benchmark_config(9, 100);
        let a = generate_synthetic(&cfg, &model).unwrap();
        let b = generate_synthetic(&cfg, &model).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.p(), 50);
        let c = generate_synthetic(&benchmark_config(10, 100), &model).unwrap();
        assert_ne!(a, c);

        // Reactive load bounded by the worst power factor times the active load,
        // which is recoverable at non-PV buses.
        let tan = 0.85f64.acos().tan();
        let pv: BTreeSet<u64> = cfg.pv_buses.iter().copied().collect();
        for (i, f) in a.features().iter().enumerate() {
            if f.kind != FeatureKind::QLoad || pv.contains(&f.bus) {
                continue;
            }
            let pi = a
                .features()
                .iter()
                .position(|g| g.kind == FeatureKind::PNet && g.bus == f.bus)
                .unwrap();
            for s in 0..a.t() {
                let q = a.theta()[(i, s)];
                let p_load = -a.theta()[(pi, s)];
                assert!(q >= 0.0 && q <= tan * p_load * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn zero_scales_give_zero_data() {
        let model = benchmark_feeder();
        let cfg = SyntheticConfig {
            load_scale: 0.0,
            pv_scale: 0.0,
            ev_scale: 0.0,
            ..benchmark_config(1, 20)
        };
        let set = generate_synthetic(&cfg, &model).unwrap();
        assert!(set.theta().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn generator_rejects_unknown_buses() {
        let model = benchmark_feeder();
        let cfg = SyntheticConfig {
            pv_buses: vec![99],
            ..benchmark_config(1, 20)
        };
        assert!(matches!(
            generate_synthetic(&cfg, &model),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn benchmark_layout() {
        let model = benchmark_feeder();
        assert_eq!(model.n(), 36);
        assert_eq!(model.ders().len(), 10);
        let set = generate_synthetic(&benchmark_config(1, 5), &model).unwrap();
        let layout = set.layout(&model).unwrap();
        assert_eq!(layout.p(), 50);
        assert_eq!(
            set.feature_buses().iter().collect::<BTreeSet<_>>().len(),
            25
        );
    }

    #[test]
    fn data_error_examples() {
        let model = benchmark_feeder();
        let set = generate_synthetic(&benchmark_config(2, 40), &model)
            .unwrap()
            .normalize()
            .unwrap();
        let p = set.p();
        assert_eq!(
            eval_data_error(&DMatrix::identity(p, p), &set).unwrap(),
            0.0
        );
        assert_eq!(eval_data_error(&DMatrix::zeros(p, p), &set).unwrap(), 1.0);
        let cov = crate::type1::CovarianceBundle::new(set.theta()).unwrap();
        let ev = cov.eigenvalues();
        let total: f64 = ev.iter().sum();
        for k in [1, 5, 20] {
            let pca = crate::type1::fit_pca(&cov, k).unwrap();
            let tail: f64 = ev[k..].iter().sum();
            assert_abs_diff_eq!(
                eval_data_error(pca.w(), &set).unwrap(),
                tail / total,
                epsilon = 1e-10
            );
        }
        assert!(matches!(
            eval_data_error(&DMatrix::identity(p, p), &set.denormalize().unwrap()),
            Err(Error::State(_))
        ));
    }
}
