//! End-to-end fitting and evaluation on one feeder and scenario set.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::OnceLock;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{evaluate_baseline, evaluate_map, EvalReport, VoltageSamples};
use crate::grid::FeederModel;
use crate::map::{DistillationMap, Method};
use crate::opf::OpfSpec;
use crate::proxalg::{GroupMode, GroupStructure, Init, TraceRow};
use crate::scenario::{eval_data_error, ScenarioSet};
use crate::type1::{
    bisect_lambda_for_k, fit_deim, fit_pca, lambda1_max, refit_selection, CovarianceBundle,
    GlOptions, Target,
};
use crate::type2::{fit_bgl, lambda2_max, refit_bgl, BglConfig, OpfDataset};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlgorithmSettings {
    pub max_iter: usize,
    pub tol: f64,
    pub eta: f64,
    pub delta: f64,
    /// Starting point of the bilevel solve.
    pub init: Init,
    pub bisection_rounds: usize,
    pub refit_max_iter: usize,
    pub refit_tol: f64,
}

impl Default for AlgorithmSettings {
    fn default() -> Self {
        let b = BglConfig::default();
        AlgorithmSettings {
            max_iter: b.apg.max_iter,
            tol: b.apg.tol,
            eta: b.apg.eta,
            delta: b.apg.delta,
            init: Init::Identity,
            bisection_rounds: b.bisection_rounds,
            refit_max_iter: b.refit_max_iter,
            refit_tol: b.refit_tol,
        }
    }
}

/// A fitted map with the iteration trace of its final solve, if any.
#[derive(Debug, Clone)]
pub struct FitOutput {
    pub map: DistillationMap,
    pub trace: Option<Vec<TraceRow>>,
}

/// Feeder, normalized scenarios and everything derived from them.
pub struct Workbench {
    pub model: FeederModel,
    pub set: ScenarioSet,
    pub spec: OpfSpec,
    pub cov: CovarianceBundle,
    pub groups: GroupStructure,
    data: OnceLock<OpfDataset>,
}

impl Workbench {
    /// `set` may be raw or normalized.
    pub fn new(
        model: FeederModel,
        set: ScenarioSet,
        nu: f64,
        rho: f64,
        mode: GroupMode,
    ) -> Result<Self> {
        let set = if set.is_normalized() {
            set
        } else {
            set.normalize()?
        };
        let spec = OpfSpec::from_feeder(&model, set.layout(&model)?, nu, rho)?;
        let cov = CovarianceBundle::new(set.theta())?;
        let groups = match mode {
            GroupMode::Column => GroupStructure::per_column(set.p()),
            GroupMode::Bus => GroupStructure::by_bus(&set.feature_buses()),
            GroupMode::Custom => {
                return Err(Error::Config("custom groups are not available here".into()))
            }
        };
        Ok(Workbench {
            model,
            set,
            spec,
            cov,
            groups,
            data: OnceLock::new(),
        })
    }

    /// Solves the OPF on the true data once.
    pub fn dataset(&self) -> Result<&OpfDataset> {
        if let Some(d) = self.data.get() {
            return Ok(d);
        }
        let d = OpfDataset::new(&self.spec, &self.set)?;
        Ok(self.data.get_or_init(|| d))
    }

    pub fn bgl_config(&self, s: &AlgorithmSettings, seed: u64) -> Result<BglConfig> {
        let mut cfg = BglConfig {
            refit_max_iter: s.refit_max_iter,
            refit_tol: s.refit_tol,
            bisection_rounds: s.bisection_rounds,
            ..Default::default()
        };
        cfg.apg.max_iter = s.max_iter;
        cfg.apg.tol = s.tol;
        cfg.apg.eta = s.eta;
        cfg.apg.delta = s.delta;
        cfg.apg.init = s.init.clone();
        cfg.apg.seed = seed;
        let data = self.dataset()?;
        cfg.with_estimated_steps(data, &self.spec)
    }

    pub fn fit(
        &self,
        method: Method,
        target: Target,
        settings: &AlgorithmSettings,
        seed: u64,
    ) -> Result<FitOutput> {
        if let Target::K(k) = target {
            let limit = match method {
                Method::Pca | Method::Deim => self.set.p(),
                _ => self.groups.len(),
            };
            if k == 0 || k > limit {
                return Err(Error::Argument(format!(
                    "{method}: K = {k} outside 1..={limit}"
                )));
            }
        }
        match method {
            Method::Pca | Method::Deim => {
                let Target::K(k) = target else {
                    return Err(Error::Config(format!("{method} takes K, not lambda")));
                };
                let map = if method == Method::Pca {
                    fit_pca(&self.cov, k)?
                } else {
                    fit_deim(&self.cov, k)?
                };
                Ok(FitOutput { map, trace: None })
            }
            Method::Gl | Method::Gl2 => {
                let opts = GlOptions {
                    seed,
                    ..Default::default()
                };
                let traces = RefCell::new(HashMap::new());
                let fitter = |l: f64| {
                    let res = crate::type1::solve_gl(&self.cov, l, &self.groups, &opts)?;
                    traces.borrow_mut().insert(l.to_bits(), res.trace.clone());
                    DistillationMap::from_sparse(
                        Method::Gl,
                        res.w,
                        &self.groups,
                        crate::type1::ZERO_GROUP_THRESHOLD,
                        l,
                    )
                };
                let (lambda, map) = match target {
                    Target::Lambda(l) => (l, fitter(l)?),
                    Target::K(k) => {
                        let hi = lambda1_max(&self.cov, &self.groups);
                        let b = bisect_lambda_for_k(
                            fitter,
                            &self.groups,
                            k,
                            hi,
                            settings.bisection_rounds,
                        )?;
                        (b.lambda, b.map)
                    }
                };
                let trace = traces.borrow_mut().remove(&lambda.to_bits());
                let map = if method == Method::Gl2 {
                    refit_selection(&self.cov, &map, Method::Gl2)?
                } else {
                    map
                };
                Ok(FitOutput { map, trace })
            }
            Method::Bgl | Method::Bgl2 => {
                let cfg = self.bgl_config(settings, seed)?;
                let data = self.dataset()?;
                let spec = &self.spec;
                let groups = &self.groups;
                let traces = RefCell::new(HashMap::new());
                let fitter = |l: f64| {
                    let (m, res) = fit_bgl(data, spec, l, groups, &cfg)?;
                    traces.borrow_mut().insert(l.to_bits(), res.trace);
                    Ok(m)
                };
                let (lambda, map) = match target {
                    Target::Lambda(l) => (l, fitter(l)?),
                    Target::K(k) => {
                        let hi = lambda2_max(data, spec, groups)?.value;
                        let b = bisect_lambda_for_k(fitter, groups, k, hi, cfg.bisection_rounds)?;
                        (b.lambda, b.map)
                    }
                };
                let trace = traces.borrow_mut().remove(&lambda.to_bits());
                let map = if method == Method::Bgl2 {
                    if map.k() == 0 {
                        return Err(Error::State(format!(
                            "{method}: stage one selected no features"
                        )));
                    }
                    refit_bgl(data, spec, &map, &cfg)?
                } else {
                    map
                };
                Ok(FitOutput { map, trace })
            }
        }
    }

    pub fn evaluate(&self, map: &DistillationMap) -> Result<(EvalReport, [VoltageSamples; 2])> {
        self.evaluate_matrix(map.method().as_str(), map.k(), map.w())
    }

    pub fn evaluate_matrix(
        &self,
        method: &str,
        k: usize,
        w: &DMatrix<f64>,
    ) -> Result<(EvalReport, [VoltageSamples; 2])> {
        if w.nrows() != self.set.p() || w.ncols() != self.set.p() {
            return Err(Error::Compatibility(format!(
                "map has P = {}, scenarios have P = {}",
                w.nrows(),
                self.set.p()
            )));
        }
        let de = eval_data_error(w, &self.set)?;
        let data = self.dataset()?;
        evaluate_map(method, k, w, de, data, &self.spec, &self.model)
    }

    pub fn baseline(&self) -> Result<(EvalReport, [VoltageSamples; 2])> {
        let data = self.dataset()?;
        evaluate_baseline(data, &self.spec, &self.model)
    }
}
