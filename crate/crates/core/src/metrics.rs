//! Localization accuracy, adaptation speed, CDF curves and the KNN baseline.

use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::data::LocalizationTask;
use crate::error::{Error, Result};
use crate::federation::AdaptationTrace;
use crate::linalg::Matrix;

/// Mean Euclidean distance between corresponding rows.
pub fn mde(pred: &Matrix, truth: &Matrix) -> Result<f64> {
    let errors = distance_errors(pred, truth)?;
    Ok(errors.iter().sum::<f64>() / errors.len() as f64)
}

/// Per-row Euclidean distance between `pred` and `truth`.
pub fn distance_errors(pred: &Matrix, truth: &Matrix) -> Result<Vec<f64>> {
    if pred.shape() != truth.shape() {
        return Err(Error::dims("prediction rows", truth.rows(), pred.rows()));
    }
    if pred.rows() == 0 {
        return Err(Error::EmptyDataset);
    }
    Ok(pred
        .row_iter()
        .zip(truth.row_iter())
        .map(|(a, b)| {
            let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
            libm::sqrt(sq)
        })
        .collect())
}

/// `1 / (b · n)`: accuracy-based adaptation speed for a target first reached
/// at step `n`.
pub fn accuracy_speed(step: usize, batch: usize) -> f64 {
    1.0 / (batch as f64 * step as f64)
}

/// `MDE(n*) / b`: step-based adaptation speed (lower is better).
pub fn step_speed(mde_at_step: f64, batch: usize) -> f64 {
    mde_at_step / batch as f64
}

/// First step whose query MDE is at or below `target`.
pub fn steps_to_target(trace: &AdaptationTrace, target: f64) -> Option<usize> {
    trace.steps.iter().find(|s| s.query_mde <= target).map(|s| s.step)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AccuracySpeed {
    /// Mean of `1/(b·n_A)` over traces, unreached traces counting 0.
    pub value: f64,
    /// `n_A` per trace.
    pub reached_at: Vec<Option<usize>>,
}

impl AccuracySpeed {
    pub fn any_not_reached(&self) -> bool {
        self.reached_at.iter().any(Option::is_none)
    }
}

/// Accuracy-based adaptation speed averaged over traces (e.g. seeds).
pub fn adaptation_speed_accuracy(traces: &[AdaptationTrace], target: f64, batch: usize) -> Result<AccuracySpeed> {
    if batch == 0 {
        return Err(Error::InvalidConfig("batch size must be >= 1".into()));
    }
    if traces.is_empty() || traces.iter().any(|t| t.steps.is_empty()) {
        return Err(Error::TraceTooShort { requested: 1, len: 0 });
    }
    let reached_at: Vec<Option<usize>> = traces.iter().map(|t| steps_to_target(t, target)).collect();
    let value = reached_at
        .iter()
        .map(|n| n.map_or(0.0, |n| accuracy_speed(n, batch)))
        .sum::<f64>()
        / traces.len() as f64;
    Ok(AccuracySpeed { value, reached_at })
}

/// Step-based adaptation speed `MDE(n*)/b` of one trace.
pub fn adaptation_speed_steps(trace: &AdaptationTrace, n_star: usize, batch: usize) -> Result<f64> {
    if batch == 0 {
        return Err(Error::InvalidConfig("batch size must be >= 1".into()));
    }
    let m = trace.mde_at(n_star).ok_or(Error::TraceTooShort {
        requested: n_star,
        len: trace.steps.len(),
    })?;
    Ok(step_speed(m, batch))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImprovementKind {
    /// Compares steps needed to reach a target accuracy.
    Steps,
    /// Compares the MDE reached after a fixed number of steps.
    Accuracy,
}

/// Relative improvement of MI over RI in percent: `100·(ri − mi)/ri`, where
/// both are step counts (`Steps`) or distance errors (`Accuracy`).
pub fn improvement_percent(mi: f64, ri: f64, _kind: ImprovementKind) -> Result<f64> {
    if ri == 0.0 {
        return Err(Error::DivisionByZero("improvement relative to a zero RI value"));
    }
    Ok(100.0 * (ri - mi) / ri)
}

/// Empirical CDF: errors ascending, the i-th (1-based) paired with `i/N`.
pub fn cdf_curve(errors: &[f64]) -> Vec<(f64, f64)> {
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    sorted
        .into_iter()
        .enumerate()
        .map(|(i, e)| (e, (i + 1) as f64 / n))
        .collect()
}

/// Smallest error whose cumulative fraction reaches `q`.
pub fn cdf_quantile(curve: &[(f64, f64)], q: f64) -> Option<f64> {
    curve.iter().find(|(_, f)| *f >= q).map(|(e, _)| *e)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn by_distance_then_index(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// KNN regression: mean coordinates of the `k` support fingerprints closest
/// in Euclidean distance, ties going to the lower support index. The
/// neighbours are summed nearest first.
pub fn knn_predict(support_x: &Matrix, support_y: &Matrix, query_x: &Matrix, k: usize) -> Result<Matrix> {
    if k == 0 {
        return Err(Error::InvalidConfig("k must be >= 1".into()));
    }
    if support_x.rows() < k {
        return Err(Error::TooFewSamples {
            needed: k,
            available: support_x.rows(),
        });
    }
    if support_x.cols() != query_x.cols() {
        return Err(Error::dims("query fingerprint", support_x.cols(), query_x.cols()));
    }
    if support_y.rows() != support_x.rows() {
        return Err(Error::dims("support labels", support_x.rows(), support_y.rows()));
    }
    let p = support_y.cols();
    let mut out = Matrix::zeros(query_x.rows(), p);
    let mut dist: Vec<(f64, usize)> = Vec::with_capacity(support_x.rows());
    for (qi, q) in query_x.row_iter().enumerate() {
        dist.clear();
        dist.extend(support_x.row_iter().enumerate().map(|(i, s)| (sq_dist(q, s), i)));
        if k < dist.len() {
            dist.select_nth_unstable_by(k - 1, by_distance_then_index);
        }
        let nearest = &mut dist[..k];
        nearest.sort_unstable_by(by_distance_then_index);
        let row = out.row_mut(qi);
        for &(_, i) in nearest.iter() {
            for (acc, v) in row.iter_mut().zip(support_y.row(i)) {
                *acc += v;
            }
        }
        row.iter_mut().for_each(|v| *v /= k as f64);
    }
    Ok(out)
}

/// KNN baseline on a task: predictions for the query set and their MDE.
pub fn knn_baseline(task: &LocalizationTask, k: usize) -> Result<(Matrix, f64)> {
    let pred = knn_predict(task.support.rssi(), task.support.coords(), task.query.rssi(), k)?;
    let err = mde(&pred, task.query.coords())?;
    Ok((pred, err))
}
