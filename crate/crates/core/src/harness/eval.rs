use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metalearn::MetaObjective;
use crate::model::ParamVector;
use crate::tasks::{sample_task, Task, TaskEnvironment};

/// Means over held-out tasks with 95% confidence half-widths
/// (`1.96 · s / √n`, sample standard deviation).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub n_tasks: usize,
    pub mean_loss: f64,
    pub loss_ci: f64,
    pub mean_accuracy: Option<f64>,
    pub accuracy_ci: Option<f64>,
}

pub fn evaluate_tasks(objective: &MetaObjective, x: &ParamVector, tasks: &[Task]) -> Result<EvalSummary> {
    if tasks.len() < 2 {
        return Err(Error::argument("evaluation needs at least 2 tasks"));
    }
    let mut losses = Vec::with_capacity(tasks.len());
    let mut accs = Vec::with_capacity(tasks.len());
    for task in tasks {
        let (l, a) = objective.evaluate_task(x, task)?;
        losses.push(l);
        if let Some(a) = a {
            accs.push(a);
        }
    }
    let (mean_loss, loss_ci) = mean_ci(&losses);
    let (mean_accuracy, accuracy_ci) = if accs.len() == tasks.len() {
        let (m, c) = mean_ci(&accs);
        (Some(m), Some(c))
    } else {
        (None, None)
    };
    Ok(EvalSummary {
        n_tasks: tasks.len(),
        mean_loss,
        loss_ci,
        mean_accuracy,
        accuracy_ci,
    })
}

/// Samples `n_tasks` tasks from `env` and evaluates on them.
pub fn evaluate<R: Rng + ?Sized>(
    objective: &MetaObjective,
    x: &ParamVector,
    env: &TaskEnvironment,
    n_tasks: usize,
    rng: &mut R,
) -> Result<EvalSummary> {
    if n_tasks < 2 {
        return Err(Error::argument("evaluation needs at least 2 tasks"));
    }
    let tasks = (0..n_tasks)
        .map(|_| sample_task(env, rng))
        .collect::<Result<Vec<_>>>()?;
    evaluate_tasks(objective, x, &tasks)
}

pub(crate) fn mean_ci(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 || values.iter().all(|&v| v == values[0]) {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, 1.96 * (var / n).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_values_have_zero_ci() {
        assert_eq!(mean_ci(&[0.5, 0.5, 0.5]), (0.5, 0.0));
    }

    #[test]
    fn ci_matches_formula() {
        let (m, c) = mean_ci(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        let sd = (5.0f64 / 3.0).sqrt();
        assert!((c - 1.96 * sd / 2.0).abs() < 1e-15);
    }
}
