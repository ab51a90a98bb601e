//! CSV and JSON result files: round logs, adaptation traces, per-run metric
//! summaries and CDF curves.

use std::path::Path;

use femloc_core::federation::{AdaptationStep, AdaptationTrace, InitMode, RoundReport};
use femloc_core::metrics::{self, ImprovementKind};
use serde::{Deserialize, Serialize};

use crate::error::{AppError, Result};

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| AppError::format(path, e))
}

fn finish(path: &Path, mut w: csv::Writer<std::fs::File>) -> Result<()> {
    w.flush().map_err(|e| AppError::io(path, e))
}

/// `round, mean_query_loss, query_loss_<task>...`
pub fn write_round_log(path: &Path, task_ids: &[String], log: &[RoundReport]) -> Result<()> {
    let mut w = writer(path)?;
    let mut header = vec!["round".to_string(), "mean_query_loss".to_string()];
    header.extend(task_ids.iter().map(|t| format!("query_loss_{t}")));
    w.write_record(&header).map_err(|e| AppError::format(path, e))?;
    for r in log {
        let mut row = vec![r.round.to_string(), r.mean_query_loss.to_string()];
        row.extend(r.client_losses.iter().map(f64::to_string));
        w.write_record(&row).map_err(|e| AppError::format(path, e))?;
    }
    finish(path, w)
}

#[derive(Debug, Serialize, Deserialize)]
struct TraceRow {
    step: usize,
    support_loss: f64,
    query_mde: f64,
}

pub fn write_trace(path: &Path, trace: &AdaptationTrace) -> Result<()> {
    let mut w = writer(path)?;
    // an empty trace still gets its header row
    w.write_record(["step", "support_loss", "query_mde"]).map_err(|e| AppError::format(path, e))?;
    for s in &trace.steps {
        w.write_record([s.step.to_string(), s.support_loss.to_string(), s.query_mde.to_string()])
            .map_err(|e| AppError::format(path, e))?;
    }
    finish(path, w)
}

pub fn read_trace_steps(path: &Path) -> Result<Vec<AdaptationStep>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| AppError::format(path, e))?;
    let mut steps = Vec::new();
    for (i, row) in r.deserialize::<TraceRow>().enumerate() {
        let row = row.map_err(|e| AppError::Parse { path: path.to_path_buf(), line: i as u64 + 2, message: e.to_string() })?;
        if row.step != i + 1 {
            return Err(AppError::Parse {
                path: path.to_path_buf(),
                line: i as u64 + 2,
                message: format!("expected step {}, found {}", i + 1, row.step),
            });
        }
        steps.push(AdaptationStep { step: row.step, support_loss: row.support_loss, query_mde: row.query_mde });
    }
    Ok(steps)
}

pub fn write_cdf(path: &Path, errors: &[f64]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["error_m", "fraction"]).map_err(|e| AppError::format(path, e))?;
    for (e, f) in metrics::cdf_curve(errors) {
        w.write_record([e.to_string(), f.to_string()]).map_err(|e| AppError::format(path, e))?;
    }
    finish(path, w)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSpeed {
    pub target_m: f64,
    /// `1/(b·n_A)`, 0 when the target was not reached.
    pub im: f64,
    pub reached_at: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSpeed {
    pub n_star: usize,
    pub mde_m: Option<f64>,
    /// `MDE(n*)/b`, absent when the trace is shorter than `n*`.
    pub im: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Improvement {
    /// Step-count improvement per target; absent unless both modes reached it.
    pub steps_percent: Vec<(f64, Option<f64>)>,
    /// MDE improvement per `n*`; absent when either trace is too short.
    pub accuracy_percent: Vec<(usize, Option<f64>)>,
}

/// Metrics of one (task, mode, seed) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub task: String,
    pub mode: InitMode,
    pub seed: u64,
    pub batch_size: usize,
    pub mde_initial: f64,
    pub mde_final: Option<f64>,
    pub im_a: Vec<TargetSpeed>,
    pub im_nstar: Vec<StepSpeed>,
    pub not_reached: bool,
    /// MI relative to RI for the same seed.
    pub improvement: Option<Improvement>,
}

pub fn run_metrics(trace: &AdaptationTrace, targets: &[f64], n_stars: &[usize], batch: usize) -> RunMetrics {
    let im_a: Vec<TargetSpeed> = targets
        .iter()
        .map(|&a| {
            let reached_at = metrics::steps_to_target(trace, a);
            TargetSpeed { target_m: a, im: reached_at.map_or(0.0, |n| metrics::accuracy_speed(n, batch)), reached_at }
        })
        .collect();
    let im_nstar = n_stars
        .iter()
        .map(|&n| {
            let mde_m = trace.mde_at(n);
            StepSpeed { n_star: n, mde_m, im: mde_m.map(|m| metrics::step_speed(m, batch)) }
        })
        .collect();
    RunMetrics {
        task: trace.task_id.clone(),
        mode: trace.mode,
        seed: trace.seed,
        batch_size: batch,
        mde_initial: trace.initial_mde,
        mde_final: trace.steps.last().map(|s| s.query_mde),
        not_reached: trace.steps.is_empty() || im_a.iter().any(|t| t.reached_at.is_none()),
        im_a,
        im_nstar,
        improvement: None,
    }
}

/// %↑ of `mi` over `ri`, per target and per `n*`.
pub fn improvement(mi: &RunMetrics, ri: &RunMetrics) -> Improvement {
    let steps_percent = mi
        .im_a
        .iter()
        .zip(&ri.im_a)
        .map(|(m, r)| {
            let pct = match (m.reached_at, r.reached_at) {
                (Some(m), Some(r)) => metrics::improvement_percent(m as f64, r as f64, ImprovementKind::Steps).ok(),
                _ => None,
            };
            (m.target_m, pct)
        })
        .collect();
    let accuracy_percent = mi
        .im_nstar
        .iter()
        .zip(&ri.im_nstar)
        .map(|(m, r)| {
            let pct = match (m.mde_m, r.mde_m) {
                (Some(m), Some(r)) => metrics::improvement_percent(m, r, ImprovementKind::Accuracy).ok(),
                _ => None,
            };
            (m.n_star, pct)
        })
        .collect();
    Improvement { steps_percent, accuracy_percent }
}
