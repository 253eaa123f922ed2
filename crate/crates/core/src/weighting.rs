//! Task-weighting strategies: uniform, the two Dirichlet-regularized
//! baselines, and trajectory-optimized weights.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::cost::ActionPrior;
use crate::dynamics::{LinearizationMode, OptimizerState};
use crate::error::{Error, Result};
use crate::ilqr::{ilqr_solve, IlqrConfig, IlqrSolution, StartState, TowProblem};
use crate::metalearn::{LossVector, MetaObjective};
use crate::tasks::TaskBatch;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMode {
    /// Favour tasks with large validation loss.
    Exploration,
    /// Favour tasks with small validation loss.
    Exploitation,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum NominalActions {
    #[default]
    Uniform,
    /// `(1/M)(1 + ξ)` with `ξ ~ U(−spread, spread)`, `spread < 1`.
    Random { spread: f64 },
}

/// Settings of the trajectory-optimized strategy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TowSettings {
    pub ilqr: IlqrConfig,
    pub beta_u: f64,
    /// Prior mean; `None` means `1/M`.
    pub mu_u: Option<f64>,
    pub linearization: LinearizationMode,
    pub nominal: NominalActions,
    /// Continue from `x_T` instead of `x_{T+1}` after the horizon.
    pub restart_from_x_t: bool,
}

impl Default for TowSettings {
    fn default() -> Self {
        TowSettings {
            ilqr: IlqrConfig::default(),
            beta_u: 10.0,
            mu_u: None,
            linearization: LinearizationMode::Diag,
            nominal: NominalActions::Uniform,
            restart_from_x_t: false,
        }
    }
}

impl TowSettings {
    pub fn prior(&self, m: usize) -> ActionPrior {
        ActionPrior {
            mu_u: self.mu_u.unwrap_or(1.0 / m as f64),
            beta_u: self.beta_u,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.ilqr.validate()?;
        self.prior(1).validate()?;
        if let NominalActions::Random { spread } = self.nominal {
            if !(0.0..1.0).contains(&spread) {
                return Err(Error::config("nominal spread must lie in [0, 1)"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum WeightingStrategy {
    Uniform,
    Exploration { kappa: f64 },
    Exploitation { kappa: f64 },
    Tow(TowSettings),
}

impl WeightingStrategy {
    pub fn name(&self) -> &'static str {
        match self {
            WeightingStrategy::Uniform => "uniform",
            WeightingStrategy::Exploration { .. } => "exploration",
            WeightingStrategy::Exploitation { .. } => "exploitation",
            WeightingStrategy::Tow(_) => "tow",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            WeightingStrategy::Uniform => Ok(()),
            WeightingStrategy::Exploration { kappa } | WeightingStrategy::Exploitation { kappa } => check_kappa(*kappa),
            WeightingStrategy::Tow(s) => s.validate(),
        }
    }
}

fn check_kappa(kappa: f64) -> Result<()> {
    if kappa > 1.0 && kappa.is_finite() {
        Ok(())
    } else {
        Err(Error::config(format!("kappa must be finite and > 1, got {kappa}")))
    }
}

pub fn uniform_weights(m: usize) -> Result<DVector<f64>> {
    if m == 0 {
        return Err(Error::argument("batch size must be >= 1"));
    }
    Ok(DVector::from_element(m, 1.0 / m as f64))
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaselineSolution {
    pub weights: DVector<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Spread of the objective gradient across coordinates; zero at the
    /// interior optimum.
    pub residual: f64,
}

const BASELINE_TOL: f64 = 1e-10;
const BASELINE_MAX_ITER: usize = 10_000;

/// Minimizes `∓uᵀℓ − (κ−1) Σ ln uᵢ` over the probability simplex by
/// exponentiated-gradient steps with a curvature-scaled, backtracked step.
pub fn baseline_weights(ell: &LossVector, mode: BaselineMode, kappa: f64) -> Result<BaselineSolution> {
    check_kappa(kappa)?;
    let m = ell.len();
    if m == 0 {
        return Err(Error::argument("empty loss vector"));
    }
    if ell.values().iter().any(|v| !v.is_finite()) {
        return Err(Error::argument("losses must be finite"));
    }
    let sign = match mode {
        BaselineMode::Exploration => -1.0,
        BaselineMode::Exploitation => 1.0,
    };
    let ell = ell.values();
    let c = kappa - 1.0;
    let objective = |u: &DVector<f64>| sign * u.dot(ell) - c * u.iter().map(|v| v.ln()).sum::<f64>();
    let gradient = |u: &DVector<f64>| DVector::from_fn(m, |i, _| sign * ell[i] - c / u[i]);
    let spread = |g: &DVector<f64>| g.max() - g.min();

    let mut u = DVector::from_element(m, 1.0 / m as f64);
    let mut f = objective(&u);
    let mut g = gradient(&u);
    let mut residual = spread(&g);
    let mut scale = 1.0;
    let mut iterations = 0;
    while residual > BASELINE_TOL * (1.0 + g.amax()) && iterations < BASELINE_MAX_ITER {
        iterations += 1;
        // In log coordinates the barrier curvature is c/uᵢ, so u_min/c keeps
        // every coordinate's update from overshooting.
        let base = u.min() / c;
        let mut accepted = false;
        for _ in 0..60 {
            let eta = base * scale;
            let shift = g.min();
            let mut next = DVector::from_fn(m, |i, _| u[i] * (-eta * (g[i] - shift)).exp());
            let total = next.sum();
            next /= total;
            let fn_next = objective(&next);
            // Near the optimum objective differences drown in round-off; a
            // step that is flat to machine precision still counts if it
            // shrinks the stationarity residual.
            let flat = fn_next - f <= 8.0 * f64::EPSILON * (f.abs() + 1.0)
                && spread(&gradient(&next)) < residual;
            if next.iter().all(|&v| v > 0.0) && (fn_next <= f || flat) {
                u = next;
                f = fn_next;
                accepted = true;
                scale = (scale * 1.5).min(1.0);
                break;
            }
            scale *= 0.5;
        }
        g = gradient(&u);
        residual = spread(&g);
        if !accepted {
            break;
        }
    }
    let converged = residual <= BASELINE_TOL * (1.0 + g.amax());
    if !converged {
        log::warn!("baseline weights did not converge: residual {residual:.3e} after {iterations} iterations");
    }
    Ok(BaselineSolution {
        weights: u,
        converged,
        iterations,
        residual,
    })
}

/// Trajectory-optimized weights over the horizon `batches`, starting from
/// the given nominal actions. Weights are not normalized.
pub fn tow_weights_from(
    objective: &MetaObjective,
    start: &StartState<OptimizerState>,
    batches: &[TaskBatch],
    settings: &TowSettings,
    nominal: Vec<DVector<f64>>,
) -> Result<IlqrSolution<OptimizerState>> {
    let m = batches.first().map(TaskBatch::len).ok_or_else(|| Error::argument("empty horizon"))?;
    if batches.iter().any(|b| b.len() != m) {
        return Err(Error::argument("all batches in a horizon must have the same size"));
    }
    let problem = TowProblem::new(objective, batches, settings.prior(m), settings.linearization)?;
    ilqr_solve(&problem, start, nominal, &settings.ilqr)
}

/// As [`tow_weights_from`] with uniform nominal actions.
pub fn tow_weights(
    objective: &MetaObjective,
    start: &StartState<OptimizerState>,
    batches: &[TaskBatch],
    settings: &TowSettings,
) -> Result<IlqrSolution<OptimizerState>> {
    let nominal = batches
        .iter()
        .map(|b| uniform_weights(b.len()))
        .collect::<Result<Vec<_>>>()?;
    tow_weights_from(objective, start, batches, settings, nominal)
}
