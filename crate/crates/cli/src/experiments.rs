//! Seeded experiment grids: regularization strength, problem size and step-size constant.
//!
//! Each `(params, seed)` cell owns its problem, state and generator, so cells
//! run concurrently and their rows are merged in grid order afterwards.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use wstoch_core::instances::{gaussian_clouds, grid_problem, GridMu};
use wstoch_core::measures::kl_divergence;
use wstoch_core::oracle::full_batch_ascent;
use wstoch_core::simplex::{run, Checkpoints, MetricsRow, RunStatus, ScheduleKind, SolverConfig, StepSchedule, DEFAULT_C0};
use wstoch_core::{DiscreteMeasure, Error, Problem, RegParams};

use crate::args::{ExperimentArgs, ExperimentKind};
use crate::commands::{ensure_dir, write_text};
use crate::error::CliResult;

pub const RESULTS_HEADER: &str = "experiment,seed,params,t,metric,value";
pub const DEFAULT_BURN_IN: f64 = 0.2;
const CHECKPOINTS_PER_DECADE: u32 = 10;
const SLOPE_POINTS: u64 = 100;

/// Least-squares slope of `log(value)` against `log(t)` after dropping the first
/// `burn_in` fraction of the points.
pub fn fit_loglog_slope(series: &[(f64, f64)], burn_in: f64) -> wstoch_core::Result<f64> {
    if !(0.0..1.0).contains(&burn_in) {
        return Err(Error::InvalidParameter(format!("burn-in must be in [0, 1), got {burn_in}")));
    }
    let skip = (series.len() as f64 * burn_in).floor() as usize;
    let kept = &series[skip..];
    if kept.len() < 10 {
        return Err(Error::InsufficientData(format!(
            "slope fit needs 10 points after burn-in, got {}",
            kept.len()
        )));
    }
    if let Some(&(t, v)) = kept.iter().find(|(t, v)| !(*t > 0.0 && *v > 0.0 && v.is_finite())) {
        return Err(Error::InsufficientData(format!("non-positive point ({t}, {v})")));
    }
    let n = kept.len() as f64;
    let xs: Vec<f64> = kept.iter().map(|(t, _)| t.ln()).collect();
    let ys: Vec<f64> = kept.iter().map(|(_, v)| v.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::InsufficientData("all points share one step".into()));
    }
    Ok(sxy / sxx)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum CellParams {
    Reg { epsilon: f64, eta: f64 },
    Dims { i: usize, j: usize, epsilon: f64, eta: f64 },
    Lr { c0: f64, epsilon: f64, eta: f64 },
}

impl CellParams {
    /// Value of the `params` column.
    pub fn label(&self) -> String {
        match self {
            CellParams::Reg { epsilon, eta } => format!("eps={epsilon};eta={eta}"),
            CellParams::Dims { i, j, .. } => format!("I={i};J={j}"),
            CellParams::Lr { c0, .. } => format!("c0={c0}"),
        }
    }

    fn slug(&self) -> String {
        match self {
            CellParams::Reg { epsilon, eta } => format!("eps{epsilon}_eta{eta}"),
            CellParams::Dims { i, j, .. } => format!("i{i}_j{j}"),
            CellParams::Lr { c0, .. } => format!("c0_{c0}"),
        }
    }
}

/// A fully resolved experiment grid.
#[derive(Debug, Clone, Serialize)]
pub struct ExperimentSpec {
    pub kind: &'static str,
    pub seeds: Vec<u64>,
    pub steps: u64,
    pub cells: Vec<CellParams>,
    /// Grid length for reg and lr.
    pub grid: usize,
    /// Seed of the bimodal observed measure on the grid.
    pub mu_seed: u64,
    /// Point dimension for dims.
    pub dim: usize,
    pub schedule: String,
    /// `c0` for reg and dims. `None` on reg selects the largest constant the
    /// convex-schedule guarantee allows, `B e^(-m) / epsilon`, per cell.
    pub c0: Option<f64>,
    pub burn_in: f64,
}

impl ExperimentSpec {
    pub fn reg(epsilons: &[f64], c0: Option<f64>, steps: u64, seeds: Vec<u64>, grid: usize) -> Self {
        Self {
            kind: "reg",
            seeds,
            steps,
            cells: epsilons
                .iter()
                .map(|&e| CellParams::Reg { epsilon: e, eta: 2.0 * e })
                .collect(),
            grid,
            mu_seed: 0,
            dim: 0,
            schedule: ScheduleKind::Convex.to_string(),
            c0,
            burn_in: DEFAULT_BURN_IN,
        }
    }

    pub fn dims(sizes: &[usize], epsilon: f64, steps: u64, seeds: Vec<u64>) -> Self {
        let cells = sizes
            .iter()
            .flat_map(|&i| sizes.iter().map(move |&j| CellParams::Dims { i, j, epsilon, eta: 2.0 * epsilon }))
            .collect();
        Self {
            kind: "dims",
            seeds,
            steps,
            cells,
            grid: 0,
            mu_seed: 0,
            dim: 2,
            schedule: ScheduleKind::Combined.to_string(),
            c0: Some(2.0),
            burn_in: DEFAULT_BURN_IN,
        }
    }

    pub fn lr(c0s: &[f64], steps: u64, seeds: Vec<u64>, grid: usize) -> Self {
        Self {
            kind: "lr",
            seeds,
            steps,
            cells: c0s
                .iter()
                .map(|&c0| CellParams::Lr { c0, epsilon: 0.001, eta: 0.002 })
                .collect(),
            grid,
            mu_seed: 0,
            dim: 0,
            schedule: ScheduleKind::Combined.to_string(),
            c0: None,
            burn_in: DEFAULT_BURN_IN,
        }
    }

    pub fn from_args(args: &ExperimentArgs) -> Self {
        let seeds = args.seeds.clone();
        let grid = args.grid.unwrap_or(50);
        match args.kind {
            ExperimentKind::Reg => Self::reg(
                args.epsilon.as_deref().unwrap_or(&[0.1, 0.01]),
                args.c0.as_ref().and_then(|c| c.first().copied()),
                args.steps.unwrap_or(100_000),
                seeds,
                grid,
            ),
            ExperimentKind::Dims => Self::dims(
                args.sizes.as_deref().unwrap_or(&[10, 100, 1000]),
                args.epsilon.as_ref().and_then(|e| e.first().copied()).unwrap_or(1.0),
                args.steps.unwrap_or(100_000),
                seeds,
            ),
            ExperimentKind::Lr => Self::lr(
                args.c0.as_deref().unwrap_or(&[0.5, 1.0, 2.0, 5.0, 10.0]),
                args.steps.unwrap_or(1_000_000),
                seeds,
                grid,
            ),
        }
    }

    pub fn validate(&self) -> wstoch_core::Result<()> {
        if self.cells.is_empty() || self.seeds.is_empty() {
            return Err(Error::InvalidParameter("experiment grid and seed list must be non-empty".into()));
        }
        if self.steps == 0 {
            return Err(Error::InvalidParameter("steps must be >= 1".into()));
        }
        Ok(())
    }

    /// Log-spaced for reg curves. Evenly spaced for dims and lr, so the
    /// burn-in fraction of the slope fit is also a fraction of the run.
    fn checkpoints(&self) -> Checkpoints {
        match self.kind {
            "reg" => Checkpoints::log_spaced(self.steps, CHECKPOINTS_PER_DECADE),
            _ => Checkpoints::Every((self.steps / SLOPE_POINTS).max(1)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultRow {
    pub experiment: String,
    pub seed: u64,
    pub params: String,
    pub t: u64,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellReport {
    pub params: CellParams,
    pub seed: u64,
    /// `completed`, `diverged at step N` or an error message.
    pub status: String,
    /// Scalar results such as the fitted decay rate or final divergences.
    pub summary: BTreeMap<String, f64>,
    #[serde(skip)]
    pub rows: Vec<ResultRow>,
    /// Extra output files: `(name, contents)`.
    #[serde(skip)]
    pub files: Vec<(String, String)>,
}

impl CellReport {
    pub fn completed(&self) -> bool {
        self.status == "completed"
    }

    pub fn metric(&self, name: &str) -> Vec<(f64, f64)> {
        self.rows
            .iter()
            .filter(|r| r.metric == name)
            .map(|r| (r.t as f64, r.value))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub spec: ExperimentSpec,
    /// In grid order, then seed order.
    pub cells: Vec<CellReport>,
}

impl ExperimentReport {
    pub fn rows(&self) -> impl Iterator<Item = &ResultRow> {
        self.cells.iter().flat_map(|c| c.rows.iter())
    }

    pub fn cells_for(&self, params: CellParams) -> impl Iterator<Item = &CellReport> + '_ {
        self.cells.iter().filter(move |c| c.params == params)
    }

    pub fn results_csv(&self) -> CliResult<String> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        for row in self.rows() {
            w.serialize(row)?;
        }
        let body = String::from_utf8(w.into_inner().map_err(|e| csv::Error::from(e.into_error()))?).expect("csv output is utf-8");
        Ok(format!("{RESULTS_HEADER}\n{body}"))
    }
}

/// Observed measure, prior and cost shared by the reg and lr experiments.
pub fn grid_instance(spec: &ExperimentSpec, epsilon: f64, eta: f64) -> wstoch_core::Result<Problem> {
    grid_problem(spec.grid, &GridMu::Bimodal, spec.mu_seed, RegParams::new(epsilon, eta)?, None)
}

/// `B e^(-m) / epsilon`, the largest `c0` covered by the convex-schedule guarantee.
pub fn max_convex_c0(p: &Problem) -> f64 {
    let c = p.constants();
    c.big_b * (-c.m).exp() / p.epsilon()
}

/// Share of plan mass on the band `|i - j| <= 1`.
pub fn band_mass(plan: &[f64], n: usize) -> f64 {
    let total: f64 = plan.iter().sum();
    let band: f64 = plan
        .iter()
        .enumerate()
        .filter(|(k, _)| (k / n).abs_diff(k % n) <= 1)
        .map(|(_, v)| v)
        .sum();
    band / total
}

fn metric_rows(
    spec: &ExperimentSpec,
    params: &CellParams,
    seed: u64,
    rows: &[MetricsRow],
    picks: &[(&str, fn(&MetricsRow) -> Option<f64>)],
) -> Vec<ResultRow> {
    let label = params.label();
    let mut out = Vec::new();
    for (name, pick) in picks {
        for r in rows {
            if let Some(value) = pick(r) {
                out.push(ResultRow {
                    experiment: spec.kind.to_string(),
                    seed,
                    params: label.clone(),
                    t: r.t,
                    metric: name.to_string(),
                    value,
                });
            }
        }
    }
    out
}

fn status_text(status: &RunStatus) -> String {
    match status {
        RunStatus::Completed => "completed".into(),
        RunStatus::Diverged { step, .. } => format!("diverged at step {step}"),
    }
}

fn summary_row(spec: &ExperimentSpec, params: &CellParams, seed: u64, metric: &str, value: f64) -> ResultRow {
    ResultRow {
        experiment: spec.kind.to_string(),
        seed,
        params: params.label(),
        t: spec.steps,
        metric: metric.to_string(),
        value,
    }
}

/// Per-experiment data computed once and shared by all cells.
enum Shared {
    None,
    /// Oracle estimate for the lr grid instance.
    Oracle(DiscreteMeasure),
}

fn run_cell(spec: &ExperimentSpec, shared: &Shared, params: CellParams, seed: u64) -> wstoch_core::Result<CellReport> {
    let mut summary = BTreeMap::new();
    let mut files = Vec::new();
    let (mut rows, status) = match params {
        CellParams::Reg { epsilon, eta } => {
            let p = grid_instance(spec, epsilon, eta)?;
            let c0 = spec.c0.unwrap_or_else(|| max_convex_c0(&p));
            summary.insert("c0".into(), c0);
            let schedule = StepSchedule::for_problem(ScheduleKind::Convex, &p, c0)?;
            let cfg = SolverConfig::new(spec.steps, seed, schedule).with_checkpoints(spec.checkpoints());
            let out = run(&p, &cfg, Some(p.mu()))?;
            let mut rows = metric_rows(
                spec,
                &params,
                seed,
                &out.metrics.rows,
                &[
                    ("kl_mu", |r| r.kl_to_reference),
                    ("grad_norm", |r| Some(r.grad_norm)),
                    ("grad_second_moment", |r| Some(r.grad_second_moment)),
                ],
            );
            if out.status == RunStatus::Completed {
                let plan = p.plan_matrix(&out.state.a_bar(), &out.state.b_bar())?;
                let band = band_mass(&plan, p.j_len());
                let kl = kl_divergence(p.mu(), &out.estimate)?;
                summary.insert("band_mass".into(), band);
                summary.insert("kl_mu".into(), kl);
                rows.push(summary_row(spec, &params, seed, "band_mass", band));
                let slug = format!("{}_seed{seed}", params.slug());
                files.push((format!("estimator_{slug}.json"), out.estimate.to_json_string()));
                let mut csv = String::new();
                for row in plan.chunks(p.j_len()) {
                    let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
                    csv.push_str(&line.join(","));
                    csv.push('\n');
                }
                files.push((format!("plan_{slug}.csv"), csv));
            }
            (rows, out.status)
        }
        CellParams::Dims { i, j, epsilon, eta } => {
            let p = gaussian_clouds(i, j, spec.dim, seed, RegParams::new(epsilon, eta)?, None)?;
            let schedule = StepSchedule::for_problem(ScheduleKind::Combined, &p, spec.c0.unwrap_or(DEFAULT_C0))?;
            let cfg = SolverConfig::new(spec.steps, seed, schedule).with_checkpoints(spec.checkpoints());
            let out = run(&p, &cfg, None)?;
            let rows = metric_rows(
                spec,
                &params,
                seed,
                &out.metrics.rows,
                &[
                    ("grad_norm", |r| Some(r.grad_norm)),
                    ("grad_second_moment", |r| Some(r.grad_second_moment)),
                ],
            );
            (rows, out.status)
        }
        CellParams::Lr { c0, epsilon, eta } => {
            let Shared::Oracle(target) = shared else {
                unreachable!("lr cells run with an oracle")
            };
            let p = grid_instance(spec, epsilon, eta)?;
            let schedule = StepSchedule::for_problem(ScheduleKind::Combined, &p, c0)?;
            let cfg = SolverConfig::new(spec.steps, seed, schedule).with_checkpoints(spec.checkpoints());
            let out = run(&p, &cfg, Some(target))?;
            let rows = metric_rows(
                spec,
                &params,
                seed,
                &out.metrics.rows,
                &[
                    ("kl_oracle", |r| r.kl_to_reference),
                    ("grad_second_moment", |r| Some(r.grad_second_moment)),
                ],
            );
            let start = kl_divergence(target, p.beta())?;
            let last = out.metrics.rows.last().and_then(|r| r.kl_to_reference).unwrap_or(f64::NAN);
            let converged = out.status == RunStatus::Completed && last < start;
            summary.insert("converged".into(), if converged { 1.0 } else { 0.0 });
            summary.insert("kl_oracle".into(), last);
            (rows, out.status)
        }
    };
    let decay_metric = match params {
        CellParams::Reg { .. } => None,
        CellParams::Dims { .. } => Some("grad_norm"),
        CellParams::Lr { .. } => (summary.get("converged") == Some(&1.0)).then_some("kl_oracle"),
    };
    if let Some(name) = decay_metric.filter(|_| status == RunStatus::Completed) {
        let series: Vec<(f64, f64)> = rows
            .iter()
            .filter(|r| r.metric == name)
            .map(|r| (r.t as f64, r.value))
            .collect();
        match fit_loglog_slope(&series, spec.burn_in) {
            Ok(slope) => {
                summary.insert("delta".into(), -slope);
                rows.push(summary_row(spec, &params, seed, "delta", -slope));
            }
            Err(e) => log::warn!("{} seed {seed}: no slope ({e})", params.label()),
        }
    }
    if let CellParams::Lr { .. } = params {
        let flag = summary["converged"];
        rows.push(summary_row(spec, &params, seed, "converged", flag));
    }
    Ok(CellReport {
        params,
        seed,
        status: status_text(&status),
        summary,
        rows,
        files,
    })
}

/// Worker count: `WSTOCH_THREADS` if set, else the available parallelism.
pub fn thread_count() -> usize {
    std::env::var("WSTOCH_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

pub fn run_experiment(spec: &ExperimentSpec) -> wstoch_core::Result<ExperimentReport> {
    spec.validate()?;
    let shared = match spec.cells[0] {
        CellParams::Lr { epsilon, eta, .. } => {
            let p = grid_instance(spec, epsilon, eta)?;
            Shared::Oracle(full_batch_ascent(&p, 1e-10, 500)?.nu_star)
        }
        _ => Shared::None,
    };
    let tasks: Vec<(CellParams, u64)> = spec
        .cells
        .iter()
        .flat_map(|&c| spec.seeds.iter().map(move |&s| (c, s)))
        .collect();
    let results: Mutex<Vec<Option<CellReport>>> = Mutex::new(vec![None; tasks.len()]);
    let next = AtomicUsize::new(0);
    let workers = thread_count().min(tasks.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(params, seed)) = tasks.get(k) else { break };
                let report = run_cell(spec, &shared, params, seed).unwrap_or_else(|e| {
                    log::warn!("cell {} seed {seed} failed: {e}", params.label());
                    CellReport {
                        params,
                        seed,
                        status: format!("error: {e}"),
                        summary: BTreeMap::new(),
                        rows: Vec::new(),
                        files: Vec::new(),
                    }
                });
                results.lock().expect("no worker panicked")[k] = Some(report);
            });
        }
    });
    let cells = results
        .into_inner()
        .expect("no worker panicked")
        .into_iter()
        .map(|c| c.expect("every task ran"))
        .collect();
    Ok(ExperimentReport {
        spec: spec.clone(),
        cells,
    })
}

fn unix_seconds() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Writes `results.csv`, the per-cell files and `manifest.json` into `out`.
pub fn write_report(report: &ExperimentReport, out: &Path, started_at: u64) -> CliResult<()> {
    ensure_dir(out)?;
    write_text(&out.join("results.csv"), &report.results_csv()?)?;
    for cell in &report.cells {
        for (name, contents) in &cell.files {
            write_text(&out.join(name), contents)?;
        }
    }
    let manifest = serde_json::json!({
        "tool": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "settings": report.spec,
        "observed_measure": match report.spec.kind {
            "dims" => "uniform on Gaussian cloud".to_string(),
            _ => format!("{} seed {}", GridMu::Bimodal.describe(), report.spec.mu_seed),
        },
        "threads": thread_count(),
        "cells": report.cells,
        "started_at": started_at,
        "finished_at": unix_seconds(),
    });
    write_text(
        &out.join("manifest.json"),
        &serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )
}

pub fn cmd_experiment(args: &ExperimentArgs) -> CliResult<()> {
    let started_at = unix_seconds();
    let spec = ExperimentSpec::from_args(args);
    let report = run_experiment(&spec)?;
    for cell in &report.cells {
        let summary: Vec<String> = cell.summary.iter().map(|(k, v)| format!("{k}={v:.4}")).collect();
        log::info!("{} seed {}: {} {}", cell.params.label(), cell.seed, cell.status, summary.join(" "));
    }
    write_report(&report, &args.out, started_at)
}
