use std::path::Path;

use serde::{Deserialize, Serialize};

use super::train::TrainLog;
use crate::error::{Error, Result};

pub const METRICS_HEADER: [&str; 11] = [
    "iteration",
    "step",
    "task_index",
    "weight",
    "val_loss",
    "val_accuracy",
    "theta1",
    "epsilon_accepted",
    "ls_trials",
    "delta_emp",
    "wall_ms",
];

/// One CSV row: a single task weight plus the iteration-level diagnostics.
/// Missing quantities are NaN.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iteration: usize,
    pub step: usize,
    pub task_index: usize,
    pub weight: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub theta1: f64,
    pub epsilon_accepted: f64,
    pub ls_trials: usize,
    pub delta_emp: f64,
    pub wall_ms: f64,
}

impl MetricsRow {
    /// Field-wise equality that treats NaN as equal to NaN.
    pub fn same_as(&self, other: &MetricsRow) -> bool {
        let f = |a: f64, b: f64| a.to_bits() == b.to_bits() || (a.is_nan() && b.is_nan());
        self.iteration == other.iteration
            && self.step == other.step
            && self.task_index == other.task_index
            && self.ls_trials == other.ls_trials
            && f(self.weight, other.weight)
            && f(self.val_loss, other.val_loss)
            && f(self.val_accuracy, other.val_accuracy)
            && f(self.theta1, other.theta1)
            && f(self.epsilon_accepted, other.epsilon_accepted)
            && f(self.delta_emp, other.delta_emp)
            && f(self.wall_ms, other.wall_ms)
    }
}

pub fn metrics_rows(log: &TrainLog) -> Vec<MetricsRow> {
    let mut rows = Vec::new();
    for rec in &log.records {
        for (step, u) in rec.weights.iter().enumerate() {
            for (task_index, &weight) in u.iter().enumerate() {
                rows.push(MetricsRow {
                    iteration: rec.iteration,
                    step: step + 1,
                    task_index,
                    weight,
                    val_loss: rec.val_loss,
                    val_accuracy: rec.val_accuracy,
                    theta1: rec.theta1,
                    epsilon_accepted: rec.epsilon_accepted,
                    ls_trials: rec.ls_trials,
                    delta_emp: rec.delta_emp,
                    wall_ms: rec.wall_ms,
                });
            }
        }
    }
    rows
}

fn fmt(v: f64) -> String {
    if v.is_nan() {
        "NaN".to_string()
    } else {
        format!("{v:.16e}")
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e.to_string()),
    }
}

/// Writes one row per (iteration, step, task). Floats carry 17 significant
/// digits so a reload reproduces them bit for bit.
pub fn emit_metrics(log: &TrainLog, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    w.write_record(METRICS_HEADER).map_err(|e| io_err(path, e))?;
    for r in metrics_rows(log) {
        w.write_record([
            r.iteration.to_string(),
            r.step.to_string(),
            r.task_index.to_string(),
            fmt(r.weight),
            fmt(r.val_loss),
            fmt(r.val_accuracy),
            fmt(r.theta1),
            fmt(r.epsilon_accepted),
            r.ls_trials.to_string(),
            fmt(r.delta_emp),
            fmt(r.wall_ms),
        ])
        .map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| io_err(path, e))?;
    let header = r.headers().map_err(|e| io_err(path, e))?.clone();
    if header.iter().ne(METRICS_HEADER.iter().copied()) {
        return Err(Error::Metrics {
            path: path.to_path_buf(),
            message: format!("unexpected header {:?}", header.iter().collect::<Vec<_>>()),
        });
    }
    r.deserialize()
        .map(|row| {
            row.map_err(|e| Error::Metrics {
                path: path.to_path_buf(),
                message: e.to_string(),
            })
        })
        .collect()
}

/// Exponential moving average `s_t = f·s_{t−1} + (1−f)·x_t`, seeded with the
/// first value. NaN entries are carried through without updating the state.
pub fn ema(values: &[f64], factor: f64) -> Vec<f64> {
    let mut state: Option<f64> = None;
    values
        .iter()
        .map(|&v| {
            if v.is_nan() {
                return state.unwrap_or(f64::NAN);
            }
            let s = match state {
                None => v,
                Some(s) => factor * s + (1.0 - factor) * v,
            };
            state = Some(s);
            s
        })
        .collect()
}

/// Per-iteration validation curves with smoothed copies, for plotting only.
pub fn emit_curve(log: &TrainLog, path: &Path, smoothing: f64) -> Result<()> {
    let evaluated: Vec<_> = log.records.iter().filter(|r| !r.val_loss.is_nan()).collect();
    let loss: Vec<f64> = evaluated.iter().map(|r| r.val_loss).collect();
    let acc: Vec<f64> = evaluated.iter().map(|r| r.val_accuracy).collect();
    let loss_s = ema(&loss, smoothing);
    let acc_s = ema(&acc, smoothing);
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    w.write_record(["iteration", "val_loss", "val_loss_ema", "val_accuracy", "val_accuracy_ema"])
        .map_err(|e| io_err(path, e))?;
    for (i, r) in evaluated.iter().enumerate() {
        w.write_record([
            r.iteration.to_string(),
            fmt(loss[i]),
            fmt(loss_s[i]),
            fmt(acc[i]),
            fmt(acc_s[i]),
        ])
        .map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}
