//! Evaluation of distillation maps: data error, minimizer error and the
//! voltages obtained when reconstructed-data decisions meet the true loads.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{ac_power_flow, linear_voltage, FeederModel};
use crate::opf::OpfSpec;
use crate::type2::OpfDataset;

/// `‖X − X̂‖²_F / ‖X‖²_F` for minimizers `X̂` of the reconstructed data.
pub fn eval_minimizer_error(w: &DMatrix<f64>, data: &OpfDataset, spec: &OpfSpec) -> Result<f64> {
    let xhat = data.decisions(spec, w)?;
    Ok(minimizer_error(data.x(), &xhat))
}

pub fn minimizer_error(x: &DMatrix<f64>, xhat: &DMatrix<f64>) -> f64 {
    let total = x.norm_squared();
    let diff = (x - xhat).norm_squared();
    if total == 0.0 {
        diff
    } else {
        diff / total
    }
}

/// Samples on the band edge up to this much count as inside.
pub const BAND_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VoltageModel {
    Linear,
    Ac,
}

impl VoltageModel {
    pub fn as_str(self) -> &'static str {
        match self {
            VoltageModel::Linear => "linear",
            VoltageModel::Ac => "ac",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoltageSamples {
    pub model: VoltageModel,
    /// `N × T` voltage magnitudes; columns of failed scenarios are NaN.
    pub values: DMatrix<f64>,
    /// Scenarios whose power flow did not converge.
    pub failed: Vec<usize>,
    pub v0: f64,
    pub vmax: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoltageSummary {
    pub samples: usize,
    pub out_of_band: usize,
    pub out_of_band_fraction: f64,
    pub min: f64,
    pub max: f64,
    pub failed_scenarios: Vec<usize>,
}

impl VoltageSamples {
    pub fn summary(&self) -> VoltageSummary {
        let vals: Vec<f64> = self
            .values
            .iter()
            .copied()
            .filter(|v| v.is_finite())
            .collect();
        let out = vals
            .iter()
            .filter(|&&v| (v - self.v0).abs() > self.vmax + BAND_TOLERANCE)
            .count();
        VoltageSummary {
            samples: vals.len(),
            out_of_band: out,
            out_of_band_fraction: if vals.is_empty() {
                0.0
            } else {
                out as f64 / vals.len() as f64
            },
            min: vals.iter().copied().fold(f64::INFINITY, f64::min),
            max: vals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            failed_scenarios: self.failed.clone(),
        }
    }
}

/// Voltages when decisions `x̂_t` (columns of `decisions`) are applied to
/// the true data `θ_t`.
pub fn voltage_samples(
    decisions: &DMatrix<f64>,
    data: &OpfDataset,
    spec: &OpfSpec,
    model: &FeederModel,
    kind: VoltageModel,
) -> Result<VoltageSamples> {
    let n = spec.n();
    if model.n() != n {
        return Err(Error::Compatibility(format!(
            "feeder has N = {}, OPF has {n}",
            model.n()
        )));
    }
    if decisions.shape() != (spec.g() + 1, data.t()) {
        return Err(Error::Shape(
            "decision matrix does not match the dataset".into(),
        ));
    }
    let raw = data.raw();
    let v0 = model.v0();
    let cols: Vec<Result<Option<DVector<f64>>>> = (0..data.t())
        .into_par_iter()
        .map(|t| {
            let (p, ql) = spec.layout().expand(&raw.column(t).into_owned())?;
            let qg = decisions.column(t).rows(0, spec.g()).into_owned();
            let q = spec.spread(&qg) - ql;
            match kind {
                VoltageModel::Linear => linear_voltage(spec.grid(), &p, &q, v0).map(Some),
                VoltageModel::Ac => match ac_power_flow(model, &p, &q, v0) {
                    Ok(v) => Ok(Some(v)),
                    Err(Error::Convergence { .. }) => Ok(None),
                    Err(e) => Err(e.in_scenario(t)),
                },
            }
        })
        .collect();
    let mut values = DMatrix::from_element(n, data.t(), f64::NAN);
    let mut failed = Vec::new();
    for (t, c) in cols.into_iter().enumerate() {
        match c? {
            Some(v) => values.set_column(t, &v),
            None => failed.push(t),
        }
    }
    if !failed.is_empty() {
        log::warn!("AC power flow failed in {} scenarios", failed.len());
    }
    Ok(VoltageSamples {
        model: kind,
        values,
        failed,
        v0,
        vmax: spec.vmax(),
    })
}

pub fn eval_voltage_feasibility(
    w: &DMatrix<f64>,
    data: &OpfDataset,
    spec: &OpfSpec,
    model: &FeederModel,
    kind: VoltageModel,
) -> Result<VoltageSamples> {
    let xhat = data.decisions(spec, w)?;
    voltage_samples(&xhat, data, spec, model, kind)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Method tag, or `OPF` for the full-data baseline.
    pub method: String,
    pub k: usize,
    pub data_error: f64,
    pub minimizer_error: f64,
    pub linear: VoltageSummary,
    pub ac: VoltageSummary,
}

/// Report row and voltage samples for one map. `data_error` is computed by
/// the caller since it needs only the scenarios.
pub fn evaluate_map(
    method: &str,
    k: usize,
    w: &DMatrix<f64>,
    data_error: f64,
    data: &OpfDataset,
    spec: &OpfSpec,
    model: &FeederModel,
) -> Result<(EvalReport, [VoltageSamples; 2])> {
    let xhat = data.decisions(spec, w)?;
    let lin = voltage_samples(&xhat, data, spec, model, VoltageModel::Linear)?;
    let ac = voltage_samples(&xhat, data, spec, model, VoltageModel::Ac)?;
    Ok((
        EvalReport {
            method: method.to_string(),
            k,
            data_error,
            minimizer_error: minimizer_error(data.x(), &xhat),
            linear: lin.summary(),
            ac: ac.summary(),
        },
        [lin, ac],
    ))
}

/// The full-data OPF: decisions from the true scenarios.
pub fn evaluate_baseline(
    data: &OpfDataset,
    spec: &OpfSpec,
    model: &FeederModel,
) -> Result<(EvalReport, [VoltageSamples; 2])> {
    let lin = voltage_samples(data.x(), data, spec, model, VoltageModel::Linear)?;
    let ac = voltage_samples(data.x(), data, spec, model, VoltageModel::Ac)?;
    Ok((
        EvalReport {
            method: "OPF".into(),
            k: data.p(),
            data_error: 0.0,
            minimizer_error: 0.0,
            linear: lin.summary(),
            ac: ac.summary(),
        },
        [lin, ac],
    ))
}

/// Appends `method,k,scenario,bus,model,v_pu` rows (no header) with
/// external bus ids; failed scenarios are skipped.
pub fn append_voltage_rows(
    out: &mut String,
    method: &str,
    k: usize,
    samples: &VoltageSamples,
    model: &FeederModel,
) {
    let ids = model.bus_ids();
    for t in 0..samples.values.ncols() {
        for b in 0..samples.values.nrows() {
            let v = samples.values[(b, t)];
            if v.is_finite() {
                let _ = writeln!(
                    out,
                    "{method},{k},{t},{},{},{v}",
                    ids[b + 1],
                    samples.model.as_str()
                );
            }
        }
    }
}

pub const VOLTAGE_CSV_HEADER: &str = "method,k,scenario,bus,model,v_pu\n";

pub fn write_voltage_csv(path: &Path, rows: &str) -> Result<()> {
    std::fs::write(path, format!("{VOLTAGE_CSV_HEADER}{rows}")).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::opf::{DEFAULT_NU, DEFAULT_RHO};
    use crate::scenario::{
        benchmark_config, benchmark_feeder, generate_synthetic, SyntheticConfig,
    };

    fn setup(cfg: SyntheticConfig) -> (FeederModel, OpfSpec, OpfDataset) {
        let model = benchmark_feeder();
        let set = generate_synthetic(&cfg, &model)
            .unwrap()
            .normalize()
            .unwrap();
        let spec =
            OpfSpec::from_feeder(&model, set.layout(&model).unwrap(), DEFAULT_NU, DEFAULT_RHO)
                .unwrap();
        let data = OpfDataset::new(&spec, &set).unwrap();
        (model, spec, data)
    }

    #[test]
    fn identity_map_matches_baseline() {
        let (model, spec, data) = setup(benchmark_config(4, 30));
        let p = data.p();
        assert!(eval_minimizer_error(&DMatrix::identity(p, p), &data, &spec).unwrap() <= 1e-12);
        let (base, _) = evaluate_baseline(&data, &spec, &model).unwrap();
        let (rep, samples) = evaluate_map(
            "GL2",
            p,
            &DMatrix::identity(p, p),
            0.0,
            &data,
            &spec,
            &model,
        )
        .unwrap();
        assert_eq!(rep.linear.out_of_band, base.linear.out_of_band);
        assert_eq!(rep.ac.out_of_band, base.ac.out_of_band);
        assert_eq!(rep.linear.samples, spec.n() * data.t());
        assert_eq!(
            samples[1].summary().samples + samples[1].failed.len() * spec.n(),
            spec.n() * data.t()
        );
    }

    #[test]
    fn zero_load_stays_at_nominal() {
        let cfg = SyntheticConfig {
            load_scale: 0.0,
            pv_scale: 0.0,
            ev_scale: 0.0,
            ..benchmark_config(1, 5)
        };
        let (model, spec, data) = setup(cfg);
        let (base, samples) = evaluate_baseline(&data, &spec, &model).unwrap();
        assert_eq!(base.linear.out_of_band, 0);
        assert_eq!(base.ac.out_of_band, 0);
        for s in &samples {
            assert!(s.values.iter().all(|&v| (v - 1.0).abs() <= 1e-12));
        }
    }

    #[test]
    fn voltage_csv_rows() {
        let (model, spec, data) = setup(benchmark_config(5, 3));
        let s = voltage_samples(data.x(), &data, &spec, &model, VoltageModel::Linear).unwrap();
        let mut rows = String::new();
        append_voltage_rows(&mut rows, "OPF", 50, &s, &model);
        assert_eq!(rows.lines().count(), 36 * 3);
        assert!(rows.starts_with("OPF,50,0,1,linear,"));
    }
}
