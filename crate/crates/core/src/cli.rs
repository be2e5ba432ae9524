//! Run matrices over (policy, seed), per-cell output files, the comparison
//! report and the window-size sweep.

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, ExperimentConfig, PolicyEntry};
use crate::engine::{self, median, CurvePoint, EngineError, Milestone, RoundRecord, RunResult};
use crate::selection::PolicyKind;

/// Environment variable capping the number of cells run in parallel.
pub const THREADS_ENV: &str = "FEDSIM_THREADS";

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("cannot write {path}: {message}")]
    Io { path: String, message: String },
    #[error("thread pool: {0}")]
    Pool(String),
}

fn io_err(path: &Path, e: impl ToString) -> CliError {
    CliError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Command-line overrides; empty lists leave the config untouched.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub outdir: Option<PathBuf>,
    pub seeds: Vec<u64>,
    pub policies: Vec<String>,
}

impl Overrides {
    pub fn apply(&self, mut cfg: ExperimentConfig) -> Result<ExperimentConfig, ConfigError> {
        if let Some(d) = &self.outdir {
            cfg.outdir = d.clone();
        }
        if !self.seeds.is_empty() {
            cfg.seeds = self.seeds.clone();
        }
        if !self.policies.is_empty() {
            for name in &self.policies {
                if cfg.policy(name).is_none() {
                    return Err(ConfigError::validation(
                        "--policy",
                        format!("no policy named `{name}`"),
                    ));
                }
            }
            cfg.policies.retain(|p| self.policies.contains(&p.name));
            if cfg
                .baseline
                .as_ref()
                .is_some_and(|b| !self.policies.contains(b))
            {
                cfg.baseline = None;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parallelism from `FEDSIM_THREADS`, if set to a positive integer.
pub fn threads_from_env() -> Option<usize> {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|n| *n > 0)
}

fn with_pool<T: Send>(
    threads: Option<usize>,
    f: impl FnOnce() -> T + Send,
) -> Result<T, CliError> {
    match threads {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| CliError::Pool(e.to_string()))?;
            Ok(pool.install(f))
        }
        None => Ok(f()),
    }
}

/// Writes `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| io_err(dir, e))?;
    tmp.write_all(bytes).map_err(|e| io_err(path, e))?;
    tmp.as_file().sync_all().map_err(|e| io_err(path, e))?;
    tmp.persist(path).map_err(|e| io_err(path, e.error))?;
    Ok(())
}

pub fn records_ndjson(records: &[RoundRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("records serialize"));
        out.push('\n');
    }
    out
}

pub fn curve_csv(curve: &[CurvePoint]) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for p in curve {
        w.serialize(p).expect("curve points serialize");
    }
    w.into_inner().expect("in-memory writer")
}

pub fn read_curve_csv(path: &Path) -> Result<Vec<CurvePoint>, CliError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| io_err(path, e))?;
    r.deserialize()
        .collect::<Result<Vec<CurvePoint>, _>>()
        .map_err(|e| io_err(path, e))
}

pub fn cell_stem(policy: &str, seed: u64) -> String {
    format!("{policy}_{seed}")
}

pub fn run_cell(
    cfg: &ExperimentConfig,
    policy: &PolicyEntry,
    seed: u64,
) -> Result<RunResult, EngineError> {
    let env = cfg.environment(policy.trace_mode, seed)?;
    engine::run_experiment(env, cfg.run_config(policy, seed))
}

/// What the report keeps from a successful cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub rounds: u64,
    pub wall_clock_s: f64,
    pub final_accuracy: Option<f64>,
    pub milestones: Vec<Milestone>,
    pub forecast_mae: Option<f64>,
}

impl CellSummary {
    pub fn time_to(&self, accuracy: f64) -> Option<f64> {
        self.milestones
            .iter()
            .find(|m| m.accuracy == accuracy)
            .and_then(|m| m.time_s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub policy: String,
    pub seed: u64,
    pub outcome: Result<CellSummary, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MedianRow {
    pub policy: String,
    pub milestone: f64,
    /// Median time over seeds, counting misses as never; `None` when the
    /// median run missed.
    pub median_time_s: Option<f64>,
    pub median_final_accuracy: Option<f64>,
    /// Median of baseline/policy time over seeds where both reached it.
    pub median_speedup: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonReport {
    pub baseline: String,
    pub milestones: Vec<f64>,
    pub cells: Vec<CellResult>,
    pub medians: Vec<MedianRow>,
}

impl ComparisonReport {
    pub fn build(
        baseline: &str,
        milestones: Vec<f64>,
        policies: &[String],
        cells: Vec<CellResult>,
    ) -> Self {
        let mut medians = Vec::new();
        for policy in policies {
            let own: Vec<&CellResult> = cells.iter().filter(|c| &c.policy == policy).collect();
            let finals: Vec<f64> = own
                .iter()
                .filter_map(|c| c.outcome.as_ref().ok()?.final_accuracy)
                .collect();
            for &m in &milestones {
                let times: Vec<f64> = own
                    .iter()
                    .filter_map(|c| c.outcome.as_ref().ok())
                    .map(|s| s.time_to(m).unwrap_or(f64::INFINITY))
                    .collect();
                let speedups: Vec<f64> = own
                    .iter()
                    .filter_map(|c| Self::speedup_in(&cells, baseline, c, m))
                    .collect();
                medians.push(MedianRow {
                    policy: policy.clone(),
                    milestone: m,
                    median_time_s: median(&times).filter(|t| t.is_finite()),
                    median_final_accuracy: median(&finals),
                    median_speedup: median(&speedups),
                });
            }
        }
        Self {
            baseline: baseline.to_string(),
            milestones,
            cells,
            medians,
        }
    }

    fn speedup_in(cells: &[CellResult], baseline: &str, cell: &CellResult, m: f64) -> Option<f64> {
        let own = cell.outcome.as_ref().ok()?.time_to(m)?;
        let base = cells
            .iter()
            .find(|c| c.policy == baseline && c.seed == cell.seed)?
            .outcome
            .as_ref()
            .ok()?
            .time_to(m)?;
        (own > 0.0).then(|| base / own)
    }

    /// Baseline time over this cell's time at milestone `m`, when both
    /// runs reached it.
    pub fn speedup(&self, cell: &CellResult, m: f64) -> Option<f64> {
        Self::speedup_in(&self.cells, &self.baseline, cell, m)
    }

    pub fn all_succeeded(&self) -> bool {
        self.cells.iter().all(|c| c.outcome.is_ok())
    }

    pub fn median_row(&self, policy: &str, milestone: f64) -> Option<&MedianRow> {
        self.medians
            .iter()
            .find(|r| r.policy == policy && r.milestone == milestone)
    }

    pub fn to_csv(&self) -> Vec<u8> {
        fn opt(v: Option<f64>) -> String {
            v.map_or_else(|| "n/a".to_string(), |x| x.to_string())
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "row",
            "policy",
            "seed",
            "milestone",
            "time_to_milestone_s",
            "final_accuracy",
            "speedup_vs_baseline",
            "status",
        ])
        .expect("in-memory writer");
        for c in &self.cells {
            for &m in &self.milestones {
                let (time, fin, status) = match &c.outcome {
                    Ok(s) => (opt(s.time_to(m)), opt(s.final_accuracy), "ok".to_string()),
                    Err(e) => ("n/a".into(), "n/a".into(), format!("failed: {e}")),
                };
                w.write_record([
                    "cell".to_string(),
                    c.policy.clone(),
                    c.seed.to_string(),
                    m.to_string(),
                    time,
                    fin,
                    opt(self.speedup(c, m)),
                    status,
                ])
                .expect("in-memory writer");
            }
        }
        for r in &self.medians {
            w.write_record([
                "median".to_string(),
                r.policy.clone(),
                String::new(),
                r.milestone.to_string(),
                opt(r.median_time_s),
                opt(r.median_final_accuracy),
                opt(r.median_speedup),
                format!("baseline={}", self.baseline),
            ])
            .expect("in-memory writer");
        }
        w.into_inner().expect("in-memory writer")
    }

    /// Human-readable summary of the median rows.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<20} {:>9} {:>14} {:>10} {:>9}",
            "policy", "milestone", "median_time_s", "final_acc", "speedup"
        );
        let f = |v: Option<f64>, p: usize| v.map_or("n/a".to_string(), |x| format!("{x:.p$}"));
        for r in &self.medians {
            let _ = writeln!(
                s,
                "{:<20} {:>9.3} {:>14} {:>10} {:>9}",
                r.policy,
                r.milestone,
                f(r.median_time_s, 1),
                f(r.median_final_accuracy, 4),
                f(r.median_speedup, 3)
            );
        }
        for c in self.cells.iter().filter(|c| c.outcome.is_err()) {
            let _ = writeln!(
                s,
                "FAILED {}: {}",
                cell_stem(&c.policy, c.seed),
                c.outcome.as_ref().unwrap_err()
            );
        }
        s
    }
}

fn summarize(result: &RunResult) -> CellSummary {
    CellSummary {
        rounds: result.summary.rounds,
        wall_clock_s: result.summary.wall_clock_s,
        final_accuracy: result.summary.final_accuracy,
        milestones: result.summary.milestones.clone(),
        forecast_mae: result.summary.forecast_mae,
    }
}

fn write_cell(outdir: &Path, stem: &str, result: &RunResult) -> Result<(), CliError> {
    write_atomic(
        &outdir.join(format!("{stem}.ndjson")),
        records_ndjson(&result.records).as_bytes(),
    )?;
    write_atomic(&outdir.join(format!("{stem}.csv")), &curve_csv(&result.curve))
}

/// Runs every (policy, seed) cell, writes per-cell records and curves plus
/// `report.csv` under the config's outdir. Cell failures are recorded in the
/// report; only I/O and pool errors abort.
pub fn run_matrix(
    cfg: &ExperimentConfig,
    threads: Option<usize>,
) -> Result<ComparisonReport, CliError> {
    let cells: Vec<(&PolicyEntry, u64)> = cfg
        .policies
        .iter()
        .flat_map(|p| cfg.seeds.iter().map(move |&s| (p, s)))
        .collect();
    let results = with_pool(threads, || {
        cells
            .par_iter()
            .map(|&(p, seed)| {
                let outcome = match run_cell(cfg, p, seed) {
                    Ok(result) => {
                        write_cell(&cfg.outdir, &cell_stem(&p.name, seed), &result)?;
                        Ok(summarize(&result))
                    }
                    Err(e) => Err(e.to_string()),
                };
                Ok(CellResult {
                    policy: p.name.clone(),
                    seed,
                    outcome,
                })
            })
            .collect::<Result<Vec<_>, CliError>>()
    })??;
    let names: Vec<String> = cfg.policies.iter().map(|p| p.name.clone()).collect();
    let report = ComparisonReport::build(cfg.baseline_name(), cfg.milestone_list(), &names, results);
    write_atomic(&cfg.outdir.join("report.csv"), &report.to_csv())?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub window: usize,
    pub seed: u64,
    pub predictor_mae: Option<f64>,
    pub wall_clock_to_target_s: Option<f64>,
    pub status: String,
}

pub const SWEEP_FILE: &str = "window_sweep.csv";

/// Runs the first dynamicfl policy of the config with the window pinned to
/// each size, and writes `window_sweep.csv` under the outdir.
pub fn sweep_window(
    cfg: &ExperimentConfig,
    sizes: &[usize],
    threads: Option<usize>,
) -> Result<Vec<SweepRow>, CliError> {
    if sizes.is_empty() {
        return Err(ConfigError::validation("sizes", "at least one window size is required").into());
    }
    if let Some(s) = sizes.iter().find(|s| **s == 0) {
        return Err(ConfigError::validation("sizes", format!("window size {s} must be >= 1")).into());
    }
    let base = cfg
        .policies
        .iter()
        .find(|p| p.kind == PolicyKind::Dynamicfl)
        .ok_or_else(|| ConfigError::validation("policies", "sweep needs a dynamicfl policy"))?;
    let cells: Vec<(PolicyEntry, usize, u64)> = sizes
        .iter()
        .flat_map(|&w| {
            let mut p = base.clone();
            p.name = format!("{}-w{w}", base.name);
            p.scheduler.w_init = w;
            p.scheduler.w_min = w;
            p.scheduler.w_max = w;
            p.scheduler.adaptive_window = false;
            cfg.seeds.iter().map(move |&s| (p.clone(), w, s))
        })
        .collect();
    let rows = with_pool(threads, || {
        cells
            .par_iter()
            .map(|(p, w, seed)| match run_cell(cfg, p, *seed) {
                Ok(result) => {
                    write_cell(&cfg.outdir, &cell_stem(&p.name, *seed), &result)?;
                    Ok(SweepRow {
                        window: *w,
                        seed: *seed,
                        predictor_mae: result.summary.forecast_mae,
                        wall_clock_to_target_s: result.summary.time_to_target,
                        status: "ok".into(),
                    })
                }
                Err(e) => Ok(SweepRow {
                    window: *w,
                    seed: *seed,
                    predictor_mae: None,
                    wall_clock_to_target_s: None,
                    status: format!("failed: {e}"),
                }),
            })
            .collect::<Result<Vec<_>, CliError>>()
    })??;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "window",
        "seed",
        "predictor_mae",
        "wall_clock_to_target_s",
        "status",
    ])
    .expect("in-memory writer");
    let opt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| x.to_string());
    for r in &rows {
        w.write_record([
            r.window.to_string(),
            r.seed.to_string(),
            opt(r.predictor_mae),
            opt(r.wall_clock_to_target_s),
            r.status.clone(),
        ])
        .expect("in-memory writer");
    }
    write_atomic(
        &cfg.outdir.join(SWEEP_FILE),
        &w.into_inner().expect("in-memory writer"),
    )?;
    Ok(rows)
}
