//! Experiment configs, run orchestration and output files.
//!
//! An [`ExperimentConfig`] names one instance, a list of algorithms and a
//! list of seeds. Every `(algorithm, seed)` pair runs on a bounded worker
//! pool and writes `<algorithm>_seed<seed>.csv` and `.json` into the output
//! directory; a combined `objective.svg` plots `F` against wall time.

pub mod csv;
pub mod svg;

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Instant;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diagnostics::{add_high_fidelity, analyze_run, window_norms, DiagnosticsReport};
use crate::dsblo::{run_dsblo, run_igd_baseline, DsbloParams, IgdParams, IterateRecord, RunHooks, RunLog};
use crate::lower_level::QuadraticLowerLevel;
use crate::problem::{generate, GeneratorConfig, ProblemError, ProblemOracle, QuadraticBilevel};
use crate::rng::{self, Stream};

pub use self::csv::{mask_wall_time, render_csv, CSV_HEADER};
pub use self::svg::{render_svg, Series};

pub const ENV_OUTPUT_DIR: &str = "DSBLO_OUTPUT_DIR";
pub const ENV_THREADS: &str = "DSBLO_THREADS";
pub const PLOT_FILE: &str = "objective.svg";
pub const INSTANCE_FILE: &str = "instance.json";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error("cannot parse experiment config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("cannot start worker pool: {0}")]
    Pool(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InstanceSpec {
    Generate(GeneratorConfig),
    File { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AlgorithmSpec {
    Dsblo(DsbloParams),
    Igd(IgdParams),
}

impl AlgorithmSpec {
    pub fn name(&self) -> &'static str {
        match self {
            AlgorithmSpec::Dsblo(_) => "dsblo",
            AlgorithmSpec::Igd(_) => "igd",
        }
    }

    fn perturb_radius(&self) -> f64 {
        match self {
            AlgorithmSpec::Dsblo(p) => p.perturb_radius,
            AlgorithmSpec::Igd(p) => p.perturb_radius,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    Csv,
    Svg,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSpec {
    pub dir: PathBuf,
    pub formats: Vec<OutputFormat>,
}

impl Default for OutputSpec {
    fn default() -> Self {
        OutputSpec {
            dir: PathBuf::from("results"),
            formats: vec![OutputFormat::Csv, OutputFormat::Svg],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub instance: InstanceSpec,
    pub algorithms: Vec<AlgorithmSpec>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub output: OutputSpec,
    /// Evaluate `F(x_t)` every this many iterations; 1 for `d_u <= 10`, else 5.
    #[serde(default)]
    pub eval_every: Option<usize>,
    /// Per-run wall-clock budget in seconds; runs past it stop early.
    #[serde(default)]
    pub budget_s: Option<f64>,
    #[serde(default)]
    pub threads: Option<usize>,
    /// Re-estimate the final stationarity window from fresh `q` draws.
    #[serde(default)]
    pub high_fidelity: bool,
}

fn default_seeds() -> Vec<u64> {
    vec![1]
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; a relative instance path is taken relative to
    /// the config file's directory.
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let mut cfg: ExperimentConfig = toml::from_str(&text)?;
        if let InstanceSpec::File { path: inst } = &mut cfg.instance {
            if inst.is_relative() {
                if let Some(parent) = path.parent() {
                    *inst = parent.join(&*inst);
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is TOML-representable")
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let fail = |msg: &str| Err(HarnessError::Config(msg.to_string()));
        if self.algorithms.is_empty() {
            return fail("at least one algorithm is required");
        }
        let mut names: Vec<&str> = self.algorithms.iter().map(AlgorithmSpec::name).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return fail("each algorithm may appear once");
        }
        if self.seeds.is_empty() {
            return fail("the seed list is empty");
        }
        if self.eval_every == Some(0) {
            return fail("eval_every must be at least 1");
        }
        if self.threads == Some(0) {
            return fail("threads must be at least 1");
        }
        if let Some(b) = self.budget_s {
            if !(b > 0.0) {
                return fail("budget_s must be positive");
            }
        }
        if let InstanceSpec::File { path } = &self.instance {
            if !path.is_file() {
                return Err(HarnessError::Config(format!("instance file {} does not exist", path.display())));
            }
        }
        Ok(())
    }

    /// Output directory and thread count from the environment, when set.
    pub fn apply_env(&mut self) -> Result<(), HarnessError> {
        let dir = std::env::var_os(ENV_OUTPUT_DIR).map(PathBuf::from);
        let threads = match std::env::var(ENV_THREADS) {
            Ok(v) => Some(
                v.parse::<usize>()
                    .ok()
                    .filter(|&n| n > 0)
                    .ok_or_else(|| HarnessError::Config(format!("{ENV_THREADS}={v} is not a positive integer")))?,
            ),
            Err(_) => None,
        };
        self.apply_overrides(dir, threads);
        Ok(())
    }

    pub fn apply_overrides(&mut self, dir: Option<PathBuf>, threads: Option<usize>) {
        if let Some(d) = dir {
            self.output.dir = d;
        }
        if let Some(t) = threads {
            self.threads = Some(t);
        }
    }

    pub fn build_instance(&self) -> Result<QuadraticBilevel, HarnessError> {
        Ok(match &self.instance {
            InstanceSpec::Generate(g) => generate(g)?,
            InstanceSpec::File { path } => QuadraticBilevel::load(path)?,
        })
    }
}

/// Run file written next to each CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFile {
    pub config: ExperimentConfig,
    pub algorithm: AlgorithmSpec,
    pub log: RunLog,
    pub diagnostics: DiagnosticsReport,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub algorithm: String,
    pub seed: u64,
    pub csv_path: Option<PathBuf>,
    pub json_path: PathBuf,
    pub result: Result<(RunLog, DiagnosticsReport), String>,
}

#[derive(Debug, Clone)]
pub struct ExperimentSummary {
    pub fingerprint: String,
    pub outcomes: Vec<RunOutcome>,
    pub plot_path: Option<PathBuf>,
}

impl ExperimentSummary {
    pub fn failures(&self) -> usize {
        self.outcomes.iter().filter(|o| o.result.is_err()).count()
    }
}

pub fn run_file_stem(algorithm: &str, seed: u64) -> String {
    format!("{algorithm}_seed{seed}")
}

/// Stationarity column: the windowed norm for DS-BLO, the gradient norm for
/// the baseline.
pub fn stationarity_column(log: &RunLog) -> Vec<Option<f64>> {
    match log.schedule {
        Some(s) => window_norms(log, s.beta, s.k),
        None => log
            .records
            .iter()
            .map(|r| Some(DVector::from_column_slice(&r.grad).norm()))
            .collect(),
    }
}

fn run_one(
    cfg: &ExperimentConfig,
    inst: &QuadraticBilevel,
    spec: &AlgorithmSpec,
    seed: u64,
) -> Result<(RunLog, DiagnosticsReport), String> {
    let eval_every = cfg.eval_every.unwrap_or(if inst.dim_x() <= 10 { 1 } else { 5 });
    let cancel = AtomicBool::new(false);
    let started = Instant::now();
    let budget = cfg.budget_s;
    let mut watch = |_: &IterateRecord| {
        if budget.is_some_and(|b| started.elapsed().as_secs_f64() > b) {
            cancel.store(true, Ordering::Relaxed);
        }
    };
    let hooks = RunHooks {
        progress: Some(&mut watch),
        cancel: Some(&cancel),
        eval_every: Some(eval_every),
    };
    let log = match spec {
        AlgorithmSpec::Dsblo(p) => run_dsblo(inst, &DsbloParams { seed, ..p.clone() }, hooks),
        AlgorithmSpec::Igd(p) => run_igd_baseline(inst, &IgdParams { seed, ..p.clone() }, hooks),
    }
    .map_err(|e| e.to_string())?;
    let mut report = analyze_run(&log);
    if cfg.high_fidelity && log.schedule.is_some() {
        let ll = QuadraticLowerLevel::new(inst).map_err(|e| e.to_string())?;
        let mut rng = rng::stream(seed, Stream::MonteCarlo);
        add_high_fidelity(&mut report, &ll, &log, spec.perturb_radius(), &mut rng).map_err(|e| e.to_string())?;
    }
    Ok((log, report))
}

fn write_outputs(
    cfg: &ExperimentConfig,
    spec: &AlgorithmSpec,
    log: &RunLog,
    report: &DiagnosticsReport,
    csv_path: Option<&Path>,
    json_path: &Path,
) -> Result<(), HarnessError> {
    if let Some(p) = csv_path {
        std::fs::write(p, render_csv(log, &stationarity_column(log))).map_err(io_err(p))?;
    }
    let file = RunFile {
        config: cfg.clone(),
        algorithm: spec.clone(),
        log: log.clone(),
        diagnostics: report.clone(),
    };
    let text = serde_json::to_string_pretty(&file).expect("run file is serializable");
    std::fs::write(json_path, text).map_err(io_err(json_path))
}

/// Runs every `(algorithm, seed)` pair. Individual run failures are recorded
/// in the summary; only setup and I/O problems are returned as errors.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentSummary, HarnessError> {
    cfg.validate()?;
    let inst = cfg.build_instance()?;
    let dir = &cfg.output.dir;
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    inst.save(&dir.join(INSTANCE_FILE))?;
    let fingerprint = inst.fingerprint();

    let jobs: Vec<(&AlgorithmSpec, u64)> = cfg
        .algorithms
        .iter()
        .flat_map(|a| cfg.seeds.iter().map(move |&s| (a, s)))
        .collect();
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(t) = cfg.threads {
        pool = pool.num_threads(t);
    }
    let pool = pool.build().map_err(|e| HarnessError::Pool(e.to_string()))?;
    let want_csv = cfg.output.formats.contains(&OutputFormat::Csv);

    let results: Vec<Result<RunOutcome, HarnessError>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(spec, seed)| {
                let stem = run_file_stem(spec.name(), seed);
                let csv_path = want_csv.then(|| dir.join(format!("{stem}.csv")));
                let json_path = dir.join(format!("{stem}.json"));
                let result = run_one(cfg, &inst, spec, seed);
                if let Ok((log, report)) = &result {
                    write_outputs(cfg, spec, log, report, csv_path.as_deref(), &json_path)?;
                }
                Ok(RunOutcome {
                    algorithm: spec.name().to_string(),
                    seed,
                    csv_path,
                    json_path,
                    result,
                })
            })
            .collect()
    });
    let outcomes = results.into_iter().collect::<Result<Vec<_>, _>>()?;

    let plot_path = if cfg.output.formats.contains(&OutputFormat::Svg) {
        let series: Vec<Series> = outcomes
            .iter()
            .filter_map(|o| {
                let (log, _) = o.result.as_ref().ok()?;
                let label = if cfg.seeds.len() > 1 {
                    format!("{} (seed {})", o.algorithm, o.seed)
                } else {
                    o.algorithm.clone()
                };
                let points = log
                    .records
                    .iter()
                    .filter_map(|r| r.f_exact.map(|f| (r.wall_time, f)))
                    .collect();
                Some(Series { label, points })
            })
            .collect();
        let path = dir.join(PLOT_FILE);
        let title = format!("d_u = {}, d_l = {}", inst.dim_x(), inst.dim_y());
        std::fs::write(&path, render_svg(&series, &title, "wall time (s)", "F(x)")).map_err(io_err(&path))?;
        Some(path)
    } else {
        None
    };
    Ok(ExperimentSummary {
        fingerprint,
        outcomes,
        plot_path,
    })
}
