//! Experiment matrices: cells of (problem, algorithm, schedule, noise level,
//! seed), run independently and written as one CSV row each.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::det::{solve_deterministic, DetSqpConfig};
use crate::error::SolverError;
use crate::nlp::{kkt_residual, problem_by_name, PrimalDualPoint};
use crate::oracle::{BatchSize, NoiseModel};
use crate::sto::{solve_adaptive, solve_nonadaptive, AdaptConfig, NonAdaptConfig, StepSchedule};
use crate::stopping::{SolveStatus, PROTOCOL_MAX_ITER, PROTOCOL_THRESHOLD};

/// Column order of the results file.
pub const CSV_HEADER: [&str; 11] = [
    "problem",
    "algorithm",
    "schedule",
    "sigma_sq",
    "seed",
    "converged",
    "final_log_kkt",
    "iterations",
    "wall_time_seconds",
    "final_mu",
    "total_samples_drawn",
];

/// Schedule column of the algorithms without prescribed stepsizes.
const DET_SCHEDULE: &str = "armijo";
const ADAPT_SCHEDULE: &str = "adaptive";

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("invalid experiment spec: {0}")]
    Spec(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
}

type Result<T> = std::result::Result<T, BenchError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Det,
    Nonadapt,
    Adapt,
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Algorithm::Det => "det",
            Algorithm::Nonadapt => "nonadapt",
            Algorithm::Adapt => "adapt",
        })
    }
}

impl FromStr for Algorithm {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "det" => Ok(Algorithm::Det),
            "nonadapt" => Ok(Algorithm::Nonadapt),
            "adapt" => Ok(Algorithm::Adapt),
            other => Err(BenchError::Spec(format!("unknown algorithm `{other}`"))),
        }
    }
}

/// One experiment matrix as read from a TOML file.
///
/// `det`, `nonadapt` and `adapt` hold partial solver configurations laid over
/// the protocol defaults. Noise level, seed and schedule come from the matrix
/// and may not be set there.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub problems: Vec<String>,
    pub algorithms: Vec<Algorithm>,
    #[serde(default)]
    pub schedules: Vec<StepSchedule>,
    #[serde(default)]
    pub noise_levels: Vec<f64>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub det: toml::Table,
    #[serde(default)]
    pub nonadapt: toml::Table,
    #[serde(default)]
    pub adapt: toml::Table,
    #[serde(default)]
    pub output_path: Option<PathBuf>,
}

impl ExperimentSpec {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| BenchError::Spec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| BenchError::Io {
            path: path.into(),
            source,
        })?;
        let spec: Self = toml::from_str(&text).map_err(|e| BenchError::Parse {
            path: path.into(),
            message: e.to_string(),
        })?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(BenchError::Spec(m));
        if self.problems.is_empty() || self.algorithms.is_empty() || self.seeds.is_empty() {
            return bad("problems, algorithms and seeds must be nonempty".into());
        }
        for name in &self.problems {
            problem_by_name(name).map_err(|e| BenchError::Spec(e.to_string()))?;
        }
        let stochastic = self.algorithms.iter().any(|a| *a != Algorithm::Det);
        if stochastic && self.noise_levels.is_empty() {
            return bad("noise_levels must be nonempty for stochastic algorithms".into());
        }
        if self.algorithms.contains(&Algorithm::Nonadapt) && self.schedules.is_empty() {
            return bad("schedules must be nonempty for nonadapt".into());
        }
        for s in &self.schedules {
            s.validate().map_err(|e| BenchError::Spec(e.to_string()))?;
        }
        if let Some(s) = self
            .noise_levels
            .iter()
            .find(|s| !(**s >= 0.0 && s.is_finite()))
        {
            return bad(format!("noise level {s} must be finite and >= 0"));
        }
        for (name, table) in [("nonadapt", &self.nonadapt), ("adapt", &self.adapt)] {
            for key in ["noise", "seed", "schedule"] {
                if table.contains_key(key) {
                    return bad(format!("`{name}.{key}` is set by the experiment matrix"));
                }
            }
        }
        // surface override typos before any cell runs
        self.det_config()?;
        self.nonadapt_config(StepSchedule::Constant(1.0), 0.0, 0)?;
        self.adapt_config(0.0, 0)?;
        Ok(())
    }

    /// Deterministic configuration of a det cell: protocol stopping rule
    /// unless the override sets its own.
    pub fn det_config(&self) -> Result<DetSqpConfig> {
        let mut config: DetSqpConfig = override_config(&self.det, "det")?;
        if !self.det.contains_key("tol_kkt") {
            config.tol_kkt = PROTOCOL_THRESHOLD;
        }
        if !self.det.contains_key("tol_step") {
            config.tol_step = Some(PROTOCOL_THRESHOLD);
        }
        if !self.det.contains_key("max_iter") {
            config.max_iter = PROTOCOL_MAX_ITER;
        }
        config
            .validate()
            .map_err(|e| BenchError::Spec(e.to_string()))?;
        Ok(config)
    }

    pub fn nonadapt_config(
        &self,
        schedule: StepSchedule,
        sigma_sq: f64,
        seed: u64,
    ) -> Result<NonAdaptConfig> {
        let mut config: NonAdaptConfig = override_config(&self.nonadapt, "nonadapt")?;
        config.schedule = schedule;
        config.noise = NoiseModel::new(sigma_sq).map_err(|e| BenchError::Spec(e.to_string()))?;
        config.seed = seed;
        config
            .validate()
            .map_err(|e| BenchError::Spec(e.to_string()))?;
        Ok(config)
    }

    pub fn adapt_config(&self, sigma_sq: f64, seed: u64) -> Result<AdaptConfig> {
        let mut config: AdaptConfig = override_config(&self.adapt, "adapt")?;
        config.noise = NoiseModel::new(sigma_sq).map_err(|e| BenchError::Spec(e.to_string()))?;
        config.seed = seed;
        config
            .validate()
            .map_err(|e| BenchError::Spec(e.to_string()))?;
        Ok(config)
    }

    /// Every cell of the matrix in a fixed order. Det cells ignore the noise
    /// levels and carry `sigma_sq = 0`.
    pub fn cells(&self) -> Vec<Cell> {
        let mut cells = Vec::new();
        for problem in &self.problems {
            for &algorithm in &self.algorithms {
                let variants: Vec<(String, Vec<f64>)> = match algorithm {
                    Algorithm::Det => vec![(DET_SCHEDULE.into(), vec![0.0])],
                    Algorithm::Nonadapt => self
                        .schedules
                        .iter()
                        .map(|s| (s.to_string(), self.noise_levels.clone()))
                        .collect(),
                    Algorithm::Adapt => vec![(ADAPT_SCHEDULE.into(), self.noise_levels.clone())],
                };
                for (schedule, levels) in variants {
                    for &sigma_sq in &levels {
                        for &seed in &self.seeds {
                            cells.push(Cell {
                                problem: problem.clone(),
                                algorithm,
                                schedule: schedule.clone(),
                                sigma_sq,
                                seed,
                            });
                        }
                    }
                }
            }
        }
        cells
    }
}

fn override_config<T: serde::de::DeserializeOwned>(table: &toml::Table, name: &str) -> Result<T> {
    table
        .clone()
        .try_into()
        .map_err(|e| BenchError::Spec(format!("[{name}] {e}")))
}

/// Coordinates of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub problem: String,
    pub algorithm: Algorithm,
    pub schedule: String,
    pub sigma_sq: f64,
    pub seed: u64,
}

impl Cell {
    /// Solver seed derived from the whole cell key, so a cell's random
    /// stream does not depend on which other cells are in the matrix.
    pub fn stream_seed(&self) -> u64 {
        let mut h = Sha256::new();
        h.update(self.problem.as_bytes());
        h.update([0]);
        h.update(self.algorithm.to_string().as_bytes());
        h.update([0]);
        h.update(self.schedule.as_bytes());
        h.update([0]);
        h.update(self.sigma_sq.to_bits().to_le_bytes());
        h.update(self.seed.to_le_bytes());
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub problem: String,
    pub algorithm: Algorithm,
    pub schedule: String,
    pub sigma_sq: f64,
    pub seed: u64,
    pub converged: bool,
    /// Natural log of the final true KKT residual.
    pub final_log_kkt: f64,
    pub iterations: usize,
    pub wall_time_seconds: f64,
    /// NaN when the algorithm has no penalty parameter or the run failed.
    pub final_mu: f64,
    pub total_samples_drawn: BatchSize,
    /// Tag of the error that ended the run, if any. Not part of the CSV.
    pub error: Option<String>,
}

impl RunResult {
    /// Equality on everything except wall time and bit-level NaN payloads.
    pub fn same_outcome(&self, other: &Self) -> bool {
        let eq = |a: f64, b: f64| a.to_bits() == b.to_bits() || (a.is_nan() && b.is_nan());
        self.problem == other.problem
            && self.algorithm == other.algorithm
            && self.schedule == other.schedule
            && eq(self.sigma_sq, other.sigma_sq)
            && self.seed == other.seed
            && self.converged == other.converged
            && eq(self.final_log_kkt, other.final_log_kkt)
            && self.iterations == other.iterations
            && eq(self.final_mu, other.final_mu)
            && self.total_samples_drawn == other.total_samples_drawn
    }
}

/// Runs one cell. Solver failures become non-converged results.
pub fn run_cell(spec: &ExperimentSpec, cell: &Cell) -> Result<RunResult> {
    let entry = problem_by_name(&cell.problem).map_err(|e| BenchError::Spec(e.to_string()))?;
    let problem = entry.problem.as_ref();
    let seed = cell.stream_seed();
    let mut result = RunResult {
        problem: cell.problem.clone(),
        algorithm: cell.algorithm,
        schedule: cell.schedule.clone(),
        sigma_sq: cell.sigma_sq,
        seed: cell.seed,
        converged: false,
        final_log_kkt: f64::NAN,
        iterations: 0,
        wall_time_seconds: 0.0,
        final_mu: f64::NAN,
        total_samples_drawn: 0,
        error: None,
    };
    let record_failure = |r: &mut RunResult,
                          iteration: usize,
                          error: &SolverError,
                          last: &PrimalDualPoint,
                          samples: BatchSize| {
        r.iterations = iteration;
        r.final_log_kkt = kkt_residual(problem, last).ln();
        r.total_samples_drawn = samples;
        r.error = Some(error.tag().to_owned());
    };
    let clock = Instant::now();
    match cell.algorithm {
        Algorithm::Det => {
            let config = spec.det_config()?;
            match solve_deterministic(problem, &entry.start, &config) {
                Ok(sol) => {
                    result.converged = sol.status == SolveStatus::Converged;
                    result.final_log_kkt = sol.final_kkt.ln();
                    result.iterations = sol.trace.len();
                    result.final_mu = sol.trace.last().map_or(config.mu0, |r| r.mu);
                }
                Err(f) => record_failure(&mut result, f.iteration, &f.error, &f.last, 0),
            }
        }
        Algorithm::Nonadapt | Algorithm::Adapt => {
            let outcome = if cell.algorithm == Algorithm::Nonadapt {
                let schedule: StepSchedule = cell
                    .schedule
                    .parse()
                    .map_err(|e: SolverError| BenchError::Spec(e.to_string()))?;
                solve_nonadaptive(
                    problem,
                    &entry.start,
                    &spec.nonadapt_config(schedule, cell.sigma_sq, seed)?,
                )
            } else {
                solve_adaptive(
                    problem,
                    &entry.start,
                    &spec.adapt_config(cell.sigma_sq, seed)?,
                )
            };
            match outcome {
                Ok(sol) => {
                    result.converged = sol.status == SolveStatus::Converged;
                    result.final_log_kkt = sol.final_kkt.ln();
                    result.iterations = sol.iterations;
                    result.final_mu = sol.final_mu;
                    result.total_samples_drawn = sol.samples_drawn;
                }
                Err(f) => {
                    record_failure(&mut result, f.iteration, &f.error, &f.last, f.samples_drawn)
                }
            }
        }
    }
    result.wall_time_seconds = clock.elapsed().as_secs_f64();
    Ok(result)
}

/// Runs every cell of `spec` on `jobs` worker threads (all cores when
/// `None`). Results come back in cell order whatever the completion order.
pub fn run_experiment(spec: &ExperimentSpec, jobs: Option<usize>) -> Result<Vec<RunResult>> {
    spec.validate()?;
    let cells = spec.cells();
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = jobs {
        builder = builder.num_threads(n.max(1));
    }
    let pool = builder
        .build()
        .map_err(|e| BenchError::Spec(format!("thread pool: {e}")))?;
    pool.install(|| cells.par_iter().map(|c| run_cell(spec, c)).collect())
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> BenchError + '_ {
    move |source| BenchError::Io {
        path: path.into(),
        source,
    }
}

fn csv_err(path: &Path, e: csv::Error) -> BenchError {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => BenchError::Io {
            path: path.into(),
            source,
        },
        other => BenchError::Parse {
            path: path.into(),
            message: format!("{other:?}"),
        },
    }
}

/// Writes the results as CSV: floats in shortest round-trip form, booleans
/// as 0/1.
pub fn emit_csv(results: &[RunResult], path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(path))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(CSV_HEADER).map_err(|e| csv_err(path, e))?;
    for r in results {
        w.write_record([
            r.problem.clone(),
            r.algorithm.to_string(),
            r.schedule.clone(),
            r.sigma_sq.to_string(),
            r.seed.to_string(),
            u8::from(r.converged).to_string(),
            r.final_log_kkt.to_string(),
            r.iterations.to_string(),
            r.wall_time_seconds.to_string(),
            r.final_mu.to_string(),
            r.total_samples_drawn.to_string(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(io_err(path))
}

/// Reads a file written by [`emit_csv`]. The error column is not stored, so
/// parsed results have `error = None`.
pub fn parse_csv(path: &Path) -> Result<Vec<RunResult>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
    if header.iter().ne(CSV_HEADER) {
        return Err(BenchError::Parse {
            path: path.into(),
            message: format!("unexpected header {header:?}"),
        });
    }
    let mut out = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let bad = |field: &str| BenchError::Parse {
            path: path.into(),
            message: format!("row {}: bad {field}", line + 1),
        };
        let num = |i: usize| rec[i].parse::<f64>().map_err(|_| bad(CSV_HEADER[i]));
        out.push(RunResult {
            problem: rec[0].to_owned(),
            algorithm: rec[1].parse().map_err(|_| bad("algorithm"))?,
            schedule: rec[2].to_owned(),
            sigma_sq: num(3)?,
            seed: rec[4].parse().map_err(|_| bad("seed"))?,
            converged: match &rec[5] {
                "1" => true,
                "0" => false,
                _ => return Err(bad("converged")),
            },
            final_log_kkt: num(6)?,
            iterations: rec[7].parse().map_err(|_| bad("iterations"))?,
            wall_time_seconds: num(8)?,
            final_mu: num(9)?,
            total_samples_drawn: rec[10].parse().map_err(|_| bad("total_samples_drawn"))?,
            error: None,
        });
    }
    Ok(out)
}

/// One line of the summary table.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub problem: String,
    pub algorithm: Algorithm,
    /// The schedule, or `best` for the best-of-schedules row of nonadapt.
    pub schedule: String,
    pub sigma_sq: f64,
    pub runs: usize,
    pub converged_fraction: f64,
    pub median_log_kkt: f64,
}

pub const BEST_SCHEDULE: &str = "best";

/// Median with the two middle values averaged; NaN sorts last.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Per (problem, algorithm, schedule, noise level): fraction converged and
/// median log residual over seeds. Each nonadapt group of schedules gets an
/// extra `best` row holding the smallest median and that schedule's fraction.
pub fn summary_rows(results: &[RunResult]) -> Vec<SummaryRow> {
    let mut order: Vec<(String, Algorithm, u64)> = Vec::new();
    let mut groups: BTreeMap<(String, Algorithm, u64), Vec<(String, Vec<&RunResult>)>> =
        BTreeMap::new();
    for r in results {
        let key = (r.problem.clone(), r.algorithm, r.sigma_sq.to_bits());
        let slot = groups.entry(key.clone()).or_insert_with(|| {
            order.push(key);
            Vec::new()
        });
        match slot.iter_mut().find(|(s, _)| *s == r.schedule) {
            Some((_, v)) => v.push(r),
            None => slot.push((r.schedule.clone(), vec![r])),
        }
    }
    let mut rows = Vec::new();
    for key in order {
        let (problem, algorithm, bits) = key.clone();
        let mut cell_rows: Vec<SummaryRow> = groups[&key]
            .iter()
            .map(|(schedule, runs)| SummaryRow {
                problem: problem.clone(),
                algorithm,
                schedule: schedule.clone(),
                sigma_sq: f64::from_bits(bits),
                runs: runs.len(),
                converged_fraction: runs.iter().filter(|r| r.converged).count() as f64
                    / runs.len() as f64,
                median_log_kkt: median(&runs.iter().map(|r| r.final_log_kkt).collect::<Vec<_>>()),
            })
            .collect();
        if algorithm == Algorithm::Nonadapt {
            let best = cell_rows
                .iter()
                .min_by(|a, b| a.median_log_kkt.total_cmp(&b.median_log_kkt))
                .expect("group is nonempty");
            let best = SummaryRow {
                schedule: BEST_SCHEDULE.into(),
                ..best.clone()
            };
            cell_rows.push(best);
        }
        rows.extend(cell_rows);
    }
    rows
}

/// Text rendering of [`summary_rows`].
pub fn summarize(results: &[RunResult]) -> String {
    let rows = summary_rows(results);
    let mut out = format!(
        "{:<16} {:<9} {:<10} {:>9} {:>5} {:>9} {:>12}\n",
        "problem", "algorithm", "schedule", "sigma_sq", "runs", "converged", "median_logR"
    );
    for r in rows {
        out += &format!(
            "{:<16} {:<9} {:<10} {:>9.0e} {:>5} {:>9.2} {:>12.3}\n",
            r.problem,
            r.algorithm.to_string(),
            r.schedule,
            r.sigma_sq,
            r.runs,
            r.converged_fraction,
            r.median_log_kkt
        );
    }
    out
}
