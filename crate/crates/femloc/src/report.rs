//! Adaptation-speed table: per task, `Im(A)` for every target and `Im(n*)`
//! for every step budget, RI against MI, averaged over seeds.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use femloc_core::federation::{AdaptationTrace, InitMode};
use femloc_core::metrics::{self, adaptation_speed_accuracy, ImprovementKind};
use serde::{Deserialize, Serialize};

use crate::error::{AppError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    /// Target accuracy `A` in meters.
    Target,
    /// Step budget `n*`.
    Steps,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub task: String,
    pub criterion: Criterion,
    /// `A` (meters) or `n*`.
    pub at: f64,
    /// Mean steps to reach `A`, or mean MDE after `n*` steps.
    pub ri_value: Option<f64>,
    pub mi_value: Option<f64>,
    /// `Im(A)` (higher is better) or `Im(n*)` (lower is better).
    pub ri_im: Option<f64>,
    pub mi_im: Option<f64>,
    pub improvement_percent: Option<f64>,
    /// Seeds that missed the target (always 0 for step budgets).
    pub ri_missed: usize,
    pub mi_missed: usize,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// One row per (task, target) and per (task, n*). Step counts only enter
/// `ri_value`/`mi_value` when every seed reached the target.
pub fn summarize(
    traces: &BTreeMap<String, Vec<AdaptationTrace>>,
    targets: &[f64],
    n_stars: &[usize],
    batch: usize,
) -> Result<Vec<TableRow>> {
    let mut rows = Vec::new();
    for (task, all) in traces {
        let by_mode = |mode: InitMode| -> Vec<AdaptationTrace> { all.iter().filter(|t| t.mode == mode).cloned().collect() };
        let (ri, mi) = (by_mode(InitMode::Random), by_mode(InitMode::Meta));
        if ri.is_empty() || mi.is_empty() || ri.iter().chain(&mi).any(|t| t.steps.is_empty()) {
            continue;
        }
        for &a in targets {
            let r = adaptation_speed_accuracy(&ri, a, batch)?;
            let m = adaptation_speed_accuracy(&mi, a, batch)?;
            let steps = |s: &metrics::AccuracySpeed| -> Option<f64> {
                let n: Option<Vec<f64>> = s.reached_at.iter().map(|n| n.map(|n| n as f64)).collect();
                n.and_then(|n| mean(&n))
            };
            let (rv, mv) = (steps(&r), steps(&m));
            let improvement_percent = match (mv, rv) {
                (Some(m), Some(r)) => metrics::improvement_percent(m, r, ImprovementKind::Steps).ok(),
                _ => None,
            };
            rows.push(TableRow {
                task: task.clone(),
                criterion: Criterion::Target,
                at: a,
                ri_value: rv,
                mi_value: mv,
                ri_im: Some(r.value),
                mi_im: Some(m.value),
                improvement_percent,
                ri_missed: r.reached_at.iter().filter(|n| n.is_none()).count(),
                mi_missed: m.reached_at.iter().filter(|n| n.is_none()).count(),
            });
        }
        for &n in n_stars {
            let at = |ts: &[AdaptationTrace]| -> Option<f64> {
                let v: Option<Vec<f64>> = ts.iter().map(|t| t.mde_at(n)).collect();
                v.and_then(|v| mean(&v))
            };
            let (rv, mv) = (at(&ri), at(&mi));
            let improvement_percent = match (mv, rv) {
                (Some(m), Some(r)) => metrics::improvement_percent(m, r, ImprovementKind::Accuracy).ok(),
                _ => None,
            };
            rows.push(TableRow {
                task: task.clone(),
                criterion: Criterion::Steps,
                at: n as f64,
                ri_value: rv,
                mi_value: mv,
                ri_im: rv.map(|v| metrics::step_speed(v, batch)),
                mi_im: mv.map(|v| metrics::step_speed(v, batch)),
                improvement_percent,
                ri_missed: 0,
                mi_missed: 0,
            });
        }
    }
    Ok(rows)
}

pub fn write_table(path: &Path, rows: &[TableRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| AppError::format(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| AppError::format(path, e))?;
    }
    w.flush().map_err(|e| AppError::io(path, e))
}

fn cell(v: Option<f64>, scale: f64) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{:.2}", v * scale))
}

/// Plain-text rendering; `Im(A)` is shown in units of 1e-3.
pub fn render(rows: &[TableRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<12} {:<10} {:>10} {:>10} {:>8}  {:>8} {:>8}", "task", "criterion", "Im RI", "Im MI", "%up", "RI", "MI");
    for r in rows {
        let (label, scale) = match r.criterion {
            Criterion::Target => (format!("A={}m", r.at), 1e3),
            Criterion::Steps => (format!("n*={}", r.at), 1.0),
        };
        let _ = writeln!(
            s,
            "{:<12} {:<10} {:>10} {:>10} {:>8}  {:>8} {:>8}",
            r.task,
            label,
            cell(r.ri_im, scale),
            cell(r.mi_im, scale),
            cell(r.improvement_percent, 1.0),
            cell(r.ri_value, 1.0),
            cell(r.mi_value, 1.0),
        );
    }
    s
}
