use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use opf_distill::eval::{append_voltage_rows, write_voltage_csv, EvalReport, VoltageSamples};
use opf_distill::grid::{build_grid_matrices, FeederModel};
use opf_distill::map::{DistillationMap, Method};
use opf_distill::opf::{solve_opf_batch, write_batch_csv, OpfSpec, DEFAULT_NU, DEFAULT_RHO};
use opf_distill::pipeline::{AlgorithmSettings, Workbench};
use opf_distill::proxalg::{write_trace_csv, GroupMode, Init};
use opf_distill::scenario::{
    benchmark_config, benchmark_feeder, generate_synthetic, ScenarioSet, SyntheticConfig,
};
use opf_distill::type1::Target;
use opf_distill::{Error, ErrorKind, Result};

#[derive(Debug, Parser)]
#[command(
    name = "opf-distill",
    version,
    about = "Decision-aware feature distillation for distribution-grid OPF"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Feeder model commands.
    #[command(subcommand)]
    Model(ModelCommand),
    /// Scenario commands.
    #[command(subcommand)]
    Scenarios(ScenarioCommand),
    /// OPF commands.
    #[command(subcommand)]
    Opf(OpfCommand),
    /// Fit every (method, K) or (method, λ) pair and write the maps.
    Fit,
    /// Evaluate saved maps against the scenarios.
    Eval {
        #[arg(required = true)]
        maps: Vec<PathBuf>,
    },
    /// Fit and evaluate every (method, K) pair.
    Sweep,
}

#[derive(Debug, Subcommand)]
pub enum ModelCommand {
    /// Validate the feeder and print a summary.
    Check {
        /// Also write the feeder as buses.csv and lines.csv into the output directory.
        #[arg(long)]
        export: bool,
    },
}

#[derive(Debug, Subcommand)]
pub enum ScenarioCommand {
    /// Generate synthetic scenarios into the output directory.
    Gen,
    /// Print per-feature statistics of the raw scenarios.
    Stats,
}

#[derive(Debug, Subcommand)]
pub enum OpfCommand {
    /// Solve the OPF for every raw scenario.
    Solve,
}

/// Command-line values for the [`RunConfig`] keys; each `--some-key`
/// overrides `some_key` from `--config`.
#[derive(Debug, Default, Args)]
pub struct Overrides {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[arg(long, global = true)]
    pub buses: Option<PathBuf>,
    #[arg(long, global = true)]
    pub lines: Option<PathBuf>,
    #[arg(long, global = true)]
    pub scenarios: Option<PathBuf>,
    /// Generator settings as a JSON object.
    #[arg(long, global = true)]
    pub generator: Option<String>,
    /// Number of generated scenarios.
    #[arg(long, global = true)]
    pub t: Option<usize>,
    #[arg(long, global = true, value_delimiter = ',')]
    pub methods: Option<Vec<String>>,
    #[arg(long, global = true, value_delimiter = ',')]
    pub k: Option<Vec<usize>>,
    #[arg(long, global = true, value_delimiter = ',')]
    pub lambda: Option<Vec<f64>>,
    #[arg(long, global = true)]
    pub nu: Option<f64>,
    #[arg(long, global = true)]
    pub rho: Option<f64>,
    /// `column` or `bus`.
    #[arg(long, global = true)]
    pub groups: Option<String>,
    #[arg(long, global = true)]
    pub max_iter: Option<usize>,
    #[arg(long, global = true)]
    pub tol: Option<f64>,
    #[arg(long, global = true)]
    pub eta: Option<f64>,
    #[arg(long, global = true)]
    pub delta: Option<f64>,
    /// `identity`, `zero` or `standard_normal`.
    #[arg(long, global = true)]
    pub init: Option<String>,
    #[arg(long, global = true)]
    pub bisection_rounds: Option<usize>,
    #[arg(long, global = true)]
    pub refit_max_iter: Option<usize>,
    #[arg(long, global = true)]
    pub refit_tol: Option<f64>,
    /// More log output; repeat for more.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub buses: Option<PathBuf>,
    pub lines: Option<PathBuf>,
    pub scenarios: Option<PathBuf>,
    pub generator: Option<SyntheticConfig>,
    pub t: Option<usize>,
    pub methods: Vec<String>,
    pub k: Vec<usize>,
    pub lambda: Vec<f64>,
    pub nu: f64,
    pub rho: f64,
    pub groups: GroupMode,
    pub algorithm: AlgorithmSettings,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub jobs: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            buses: None,
            lines: None,
            scenarios: None,
            generator: None,
            t: None,
            methods: Vec::new(),
            k: Vec::new(),
            lambda: Vec::new(),
            nu: DEFAULT_NU,
            rho: DEFAULT_RHO,
            groups: GroupMode::Column,
            algorithm: AlgorithmSettings::default(),
            seed: 0,
            out_dir: PathBuf::from("out"),
            jobs: None,
        }
    }
}

fn parse_keyword<T: serde::de::DeserializeOwned>(key: &str, value: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(value.to_string()))
        .map_err(|_| Error::Config(format!("--{key}: unknown value `{value}`")))
}

impl RunConfig {
    pub fn resolve(o: &Overrides) -> Result<RunConfig> {
        let mut c = match &o.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
                serde_json::from_str(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
            }
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($field:ident),*) => {$(
                if let Some(v) = &o.$field {
                    c.$field = v.clone().into();
                }
            )*};
        }
        set!(buses, lines, scenarios, t, nu, rho, seed, out_dir, jobs, methods, k, lambda);
        if let Some(g) = &o.generator {
            c.generator = Some(
                serde_json::from_str(g).map_err(|e| Error::Config(format!("--generator: {e}")))?,
            );
        }
        if let Some(g) = &o.groups {
            c.groups = parse_keyword("groups", g)?;
        }
        let a = &mut c.algorithm;
        macro_rules! set_alg {
            ($($field:ident),*) => {$(
                if let Some(v) = o.$field {
                    a.$field = v;
                }
            )*};
        }
        set_alg!(
            max_iter,
            tol,
            eta,
            delta,
            bisection_rounds,
            refit_max_iter,
            refit_tol
        );
        if let Some(i) = &o.init {
            a.init = parse_keyword::<Init>("init", i)?;
        }
        if c.buses.is_some() != c.lines.is_some() {
            return Err(Error::Config(
                "`buses` and `lines` must be given together".into(),
            ));
        }
        if c.groups == GroupMode::Custom {
            return Err(Error::Config("groups: use `column` or `bus`".into()));
        }
        if c.jobs == Some(0) {
            return Err(Error::Config("jobs: must be at least 1".into()));
        }
        Ok(c)
    }

    pub fn feeder(&self) -> Result<FeederModel> {
        match (&self.buses, &self.lines) {
            (Some(b), Some(l)) => FeederModel::load_csv(b, l),
            _ => Ok(benchmark_feeder()),
        }
    }

    /// Generator settings; the run seed always replaces the generator's own.
    pub fn generator_config(&self) -> Result<SyntheticConfig> {
        let mut g = match &self.generator {
            Some(g) => g.clone(),
            None if self.buses.is_none() => benchmark_config(self.seed, 200),
            None => {
                return Err(Error::Config(
                    "a custom feeder needs either `scenarios` or a `generator` configuration"
                        .into(),
                ))
            }
        };
        g.seed = self.seed;
        if let Some(t) = self.t {
            g.t = t;
        }
        Ok(g)
    }

    pub fn scenario_set(&self, model: &FeederModel) -> Result<ScenarioSet> {
        match &self.scenarios {
            Some(path) => ScenarioSet::load_csv(path),
            None => generate_synthetic(&self.generator_config()?, model),
        }
    }

    pub fn parsed_methods(&self) -> Result<Vec<Method>> {
        if self.methods.is_empty() {
            return Err(Error::Config(
                "methods: at least one method is required".into(),
            ));
        }
        self.methods
            .iter()
            .map(|m| {
                m.parse::<Method>()
                    .map_err(|_| Error::Config(format!("methods: unknown method `{m}`")))
            })
            .collect()
    }

    pub fn targets(&self) -> Result<Vec<Target>> {
        match (self.k.is_empty(), self.lambda.is_empty()) {
            (false, true) => Ok(self.k.iter().map(|&k| Target::K(k)).collect()),
            (true, false) => {
                if let Some(l) = self.lambda.iter().find(|l| !l.is_finite() || **l < 0.0) {
                    return Err(Error::Config(format!(
                        "lambda: {l} is not a nonnegative number"
                    )));
                }
                Ok(self.lambda.iter().map(|&l| Target::Lambda(l)).collect())
            }
            (true, true) => Err(Error::Config("give a `k` list or a `lambda` list".into())),
            (false, false) => Err(Error::Config(
                "`k` and `lambda` are mutually exclusive".into(),
            )),
        }
    }

    fn workbench(&self) -> Result<Workbench> {
        let model = self.feeder()?;
        let set = self.scenario_set(&model)?;
        Workbench::new(model, set, self.nu, self.rho, self.groups)
    }
}

/// Error carrying the exit code of a failed run.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: e.kind().exit_code(),
            message: e.to_string(),
        }
    }
}

type CliResult = std::result::Result<(), Failure>;

pub fn run(cli: Cli) -> CliResult {
    let cfg = RunConfig::resolve(&cli.overrides)?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(j) = cfg.jobs {
        builder = builder.num_threads(j);
    }
    let pool = builder.build().map_err(|e| Failure {
        code: ErrorKind::Usage.exit_code(),
        message: format!("thread pool: {e}"),
    })?;
    pool.install(|| dispatch(&cli.command, &cfg))
}

fn dispatch(command: &Command, cfg: &RunConfig) -> CliResult {
    match command {
        Command::Model(ModelCommand::Check { export }) => model_check(cfg, *export),
        Command::Scenarios(ScenarioCommand::Gen) => scenarios_gen(cfg),
        Command::Scenarios(ScenarioCommand::Stats) => scenarios_stats(cfg),
        Command::Opf(OpfCommand::Solve) => opf_solve(cfg),
        Command::Fit => cmd_fit(cfg),
        Command::Eval { maps } => cmd_eval(cfg, maps),
        Command::Sweep => cmd_sweep(cfg),
    }
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

fn model_check(cfg: &RunConfig, export: bool) -> CliResult {
    let model = cfg.feeder()?;
    let grid = build_grid_matrices(&model)?;
    let r_min = grid.r.clone().symmetric_eigen().eigenvalues.min();
    let summary = serde_json::json!({
        "buses": model.n() + 1,
        "lines": model.lines().len(),
        "ders": model.ders().len(),
        "der_capacity": model.der_ratings().sum(),
        "v0": model.v0(),
        "vmax": model.vmax(),
        "r_min_eigenvalue": r_min,
        "r_max_entry": grid.r.max(),
        "x_max_entry": grid.x.max(),
    });
    print!("{}", to_json(&summary)?);
    if export {
        create_dir(&cfg.out_dir)?;
        model.save_csv(cfg.out_dir.join("buses.csv"), cfg.out_dir.join("lines.csv"))?;
    }
    Ok(())
}

fn scenarios_gen(cfg: &RunConfig) -> CliResult {
    let model = cfg.feeder()?;
    let g = cfg.generator_config()?;
    let set = generate_synthetic(&g, &model)?;
    create_dir(&cfg.out_dir)?;
    set.save_csv(cfg.out_dir.join("scenarios.csv"))?;
    if cfg.buses.is_none() {
        model.save_csv(cfg.out_dir.join("buses.csv"), cfg.out_dir.join("lines.csv"))?;
    }
    log::info!("wrote {} features x {} scenarios", set.p(), set.t());
    Ok(())
}

fn scenarios_stats(cfg: &RunConfig) -> CliResult {
    let model = cfg.feeder()?;
    let set = cfg.scenario_set(&model)?;
    print!("{}", to_json(&set.stats())?);
    Ok(())
}

fn opf_solve(cfg: &RunConfig) -> CliResult {
    let model = cfg.feeder()?;
    let set = cfg.scenario_set(&model)?;
    let spec = OpfSpec::from_feeder(&model, set.layout(&model)?, cfg.nu, cfg.rho)?;
    let raw = set.raw();
    let results = solve_opf_batch(&spec, &raw);
    create_dir(&cfg.out_dir)?;
    write_batch_csv(&cfg.out_dir.join("opf.csv"), &results, spec.g())?;
    let failed: Vec<&Error> = results.iter().filter_map(|r| r.as_ref().err()).collect();
    match failed.first() {
        None => Ok(()),
        Some(e) => Err(Failure {
            code: e.kind().exit_code(),
            message: format!(
                "{} of {} scenarios failed; first: {e}",
                failed.len(),
                results.len()
            ),
        }),
    }
}

fn task_name(method: Method, target: Target) -> String {
    let m = method.as_str().to_lowercase();
    match target {
        Target::K(k) => format!("{m}_k{k}"),
        Target::Lambda(l) => format!("{m}_lambda{l}"),
    }
}

fn tasks(cfg: &RunConfig) -> Result<Vec<(Method, Target)>> {
    let methods = cfg.parsed_methods()?;
    let targets = cfg.targets()?;
    Ok(methods
        .iter()
        .flat_map(|&m| targets.iter().map(move |&t| (m, t)))
        .collect())
}

/// Runs one fit and writes `map.json` (and `trace.csv`) into `dir`.
fn fit_task(
    wb: &Workbench,
    cfg: &RunConfig,
    method: Method,
    target: Target,
    dir: &Path,
) -> Result<DistillationMap> {
    let out = wb.fit(method, target, &cfg.algorithm, cfg.seed)?;
    create_dir(dir)?;
    write_text(&dir.join("map.json"), &out.map.to_json()?)?;
    if let Some(trace) = &out.trace {
        write_trace_csv(&dir.join("trace.csv"), trace)?;
    }
    Ok(out.map)
}

fn voltage_rows(report: &EvalReport, samples: &[VoltageSamples; 2], model: &FeederModel) -> String {
    let mut rows = String::new();
    for s in samples {
        append_voltage_rows(&mut rows, &report.method, report.k, s, model);
    }
    rows
}

/// Reports failed tasks and returns the most severe exit code.
fn summarize(failures: Vec<(String, Error)>) -> CliResult {
    if failures.is_empty() {
        return Ok(());
    }
    for (task, e) in &failures {
        eprintln!("task {task} failed: {e}");
    }
    let code = failures
        .iter()
        .map(|(_, e)| e.kind())
        .max()
        .expect("nonempty")
        .exit_code();
    Err(Failure {
        code,
        message: format!("{} task(s) failed", failures.len()),
    })
}

fn cmd_fit(cfg: &RunConfig) -> CliResult {
    let tasks = tasks(cfg)?;
    let wb = cfg.workbench()?;
    let results: Vec<Result<DistillationMap>> = tasks
        .par_iter()
        .map(|&(m, t)| fit_task(&wb, cfg, m, t, &cfg.out_dir.join(task_name(m, t))))
        .collect();
    let failures = tasks
        .iter()
        .zip(results)
        .filter_map(|(&(m, t), r)| r.err().map(|e| (task_name(m, t), e)))
        .collect();
    summarize(failures)
}

fn cmd_eval(cfg: &RunConfig, paths: &[PathBuf]) -> CliResult {
    let maps: Vec<DistillationMap> = paths
        .iter()
        .map(|p| DistillationMap::load(p))
        .collect::<Result<_>>()?;
    let wb = cfg.workbench()?;
    let (base, base_samples) = wb.baseline()?;
    let mut reports = vec![base.clone()];
    let mut rows = voltage_rows(&base, &base_samples, &wb.model);
    for (map, path) in maps.iter().zip(paths) {
        let (rep, samples) = wb.evaluate(map).map_err(|e| Failure {
            code: e.kind().exit_code(),
            message: format!("{}: {e}", path.display()),
        })?;
        rows.push_str(&voltage_rows(&rep, &samples, &wb.model));
        reports.push(rep);
    }
    create_dir(&cfg.out_dir)?;
    write_text(&cfg.out_dir.join("report.json"), &to_json(&reports)?)?;
    write_voltage_csv(&cfg.out_dir.join("voltages.csv"), &rows)?;
    Ok(())
}

fn cmd_sweep(cfg: &RunConfig) -> CliResult {
    let tasks = tasks(cfg)?;
    let wb = cfg.workbench()?;
    create_dir(&cfg.out_dir)?;
    write_text(&cfg.out_dir.join("config.json"), &to_json(cfg)?)?;

    let (base, base_samples) = wb.baseline()?;
    let base_dir = cfg.out_dir.join("baseline");
    create_dir(&base_dir)?;
    write_text(&base_dir.join("report.json"), &to_json(&base)?)?;
    write_voltage_csv(
        &base_dir.join("voltages.csv"),
        &voltage_rows(&base, &base_samples, &wb.model),
    )?;

    let results: Vec<Result<EvalReport>> = tasks
        .par_iter()
        .map(|&(m, t)| {
            let dir = cfg.out_dir.join(task_name(m, t));
            let map = fit_task(&wb, cfg, m, t, &dir)?;
            let (rep, samples) = wb.evaluate(&map)?;
            write_text(&dir.join("report.json"), &to_json(&rep)?)?;
            write_voltage_csv(
                &dir.join("voltages.csv"),
                &voltage_rows(&rep, &samples, &wb.model),
            )?;
            log::info!(
                "{}: minimizer error {:.3e}",
                task_name(m, t),
                rep.minimizer_error
            );
            Ok(rep)
        })
        .collect();

    let mut metrics = vec![serde_json::json!({"task": "baseline", "report": base})];
    let mut failures = Vec::new();
    for (&(m, t), r) in tasks.iter().zip(results) {
        match r {
            Ok(rep) => metrics.push(serde_json::json!({"task": task_name(m, t), "report": rep})),
            Err(e) => failures.push((task_name(m, t), e)),
        }
    }
    write_text(&cfg.out_dir.join("metrics.json"), &to_json(&metrics)?)?;
    summarize(failures)
}
