use std::fs;
use std::path::{Path, PathBuf};

use wstoch_core::barycenter::{run_barycenter, BarycenterProblem};
use wstoch_core::measures::{build_cost_matrix, ComponentsFile};
use wstoch_core::mixture::{build_mixture, run_mixture};
use wstoch_core::simplex::{run, Averaging, Checkpoints, RunMetrics, RunStatus, SolverConfig, StepSchedule};
use wstoch_core::{DiscreteMeasure, Problem, RegParams};

use crate::args::{BarycenterArgs, EstimateArgs, MixtureArgs, SolverArgs};
use crate::error::{CliError, CliResult};

pub fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

pub fn load_measure(path: &Path) -> CliResult<DiscreteMeasure> {
    DiscreteMeasure::from_json_str(&read_text(path)?).map_err(|e| CliError::BadFile {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn write_text(path: &Path, contents: &str) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

pub fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn reg_params(args: &SolverArgs) -> CliResult<RegParams> {
    Ok(RegParams::new(args.epsilon, args.eta)?)
}

/// Solver configuration; `lambda` feeds the strongly convex part of the schedule.
pub fn solver_config(args: &SolverArgs, lambda: f64) -> CliResult<SolverConfig> {
    let schedule = StepSchedule::new(args.schedule, lambda, args.c0, args.epsilon)?;
    let mut cfg = SolverConfig::new(args.steps, args.seed, schedule).with_clamp(args.clamp);
    if let Some(alpha) = args.suffix_alpha {
        cfg = cfg.with_averaging(Averaging::Suffix(alpha));
    }
    if let Some(every) = args.checkpoint_every {
        cfg = cfg.with_checkpoints(Checkpoints::Every(every));
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_metrics(out: &Path, metrics: &RunMetrics) -> CliResult<PathBuf> {
    let path = out.join("metrics.csv");
    write_text(&path, &metrics.to_csv())?;
    Ok(path)
}

fn finish(status: RunStatus) -> CliResult<()> {
    match status {
        RunStatus::Completed => Ok(()),
        RunStatus::Diverged { step, exponent } => Err(CliError::Diverged { step, exponent }),
    }
}

fn plan_csv(plan: &[f64], cols: usize) -> String {
    let mut out = String::new();
    for row in plan.chunks(cols) {
        let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

pub fn estimate_problem(mu: DiscreteMeasure, beta: DiscreteMeasure, args: &SolverArgs) -> CliResult<Problem> {
    let cost = build_cost_matrix(mu.support(), beta.support(), args.cost)?;
    Ok(Problem::new(mu, beta, cost, reg_params(args)?, args.m)?)
}

pub fn cmd_estimate(args: &EstimateArgs) -> CliResult<()> {
    let s = &args.solver;
    let p = estimate_problem(load_measure(&args.mu)?, load_measure(&s.beta)?, s)?;
    let cfg = solver_config(s, p.constants().lambda)?;
    ensure_dir(&s.out)?;
    let out = run(&p, &cfg, None)?;
    write_metrics(&s.out, &out.metrics)?;
    finish(out.status)?;
    write_text(&s.out.join("estimator.json"), &out.estimate.to_json_string())?;
    if args.plan {
        let plan = p.plan_matrix(&out.state.a_bar(), &out.state.b_bar())?;
        write_text(&s.out.join("plan.csv"), &plan_csv(&plan, p.j_len()))?;
    }
    log::info!("estimate written to {}", s.out.display());
    Ok(())
}

pub fn cmd_mixture(args: &MixtureArgs) -> CliResult<()> {
    let s = &args.solver;
    let beta = load_measure(&s.beta)?;
    let components = ComponentsFile::from_json_str(&read_text(&args.components)?).map_err(|e| CliError::BadFile {
        path: args.components.clone(),
        message: e.to_string(),
    })?;
    let mm = build_mixture(&components, &beta)?;
    let p = estimate_problem(load_measure(&args.mu)?, beta, s)?;
    let cfg = solver_config(s, p.constants().lambda)?;
    ensure_dir(&s.out)?;
    let out = run_mixture(&p, &mm, &cfg, None)?;
    write_metrics(&s.out, &out.metrics)?;
    finish(out.status)?;
    write_text(&s.out.join("estimator.json"), &out.estimate.to_json_string())?;
    let weights = serde_json::json!({ "theta": out.theta });
    write_text(
        &s.out.join("mixture_weights.json"),
        &serde_json::to_string_pretty(&weights).expect("weights serialize"),
    )?;
    Ok(())
}

pub fn cmd_barycenter(args: &BarycenterArgs) -> CliResult<()> {
    let s = &args.solver;
    if args.mu.len() != args.weights.len() {
        return Err(CliError::Usage(format!(
            "{} input measures but {} weights",
            args.mu.len(),
            args.weights.len()
        )));
    }
    let beta = load_measure(&s.beta)?;
    let inputs = args.mu.iter().map(|p| load_measure(p)).collect::<CliResult<Vec<_>>>()?;
    let costs = inputs
        .iter()
        .map(|mu| build_cost_matrix(mu.support(), beta.support(), s.cost))
        .collect::<wstoch_core::Result<Vec<_>>>()?;
    let bp = BarycenterProblem::new(inputs, args.weights.clone(), beta, costs, reg_params(s)?, s.m)?;
    let cfg = solver_config(s, bp.lambda())?;
    ensure_dir(&s.out)?;
    let out = run_barycenter(&bp, &cfg, args.variant, None)?;
    write_metrics(&s.out, &out.metrics)?;
    finish(out.status)?;
    write_text(&s.out.join("estimator.json"), &out.estimate.to_json_string())?;
    Ok(())
}
