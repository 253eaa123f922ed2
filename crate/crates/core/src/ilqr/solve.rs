use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::backward::{ilqr_backward, Controller, ValueMode};
use super::problem::{push_step, rollout, NominalTrajectory, TrajectoryProblem};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IlqrConfig {
    pub n_ilqr: usize,
    pub value_mode: ValueMode,
    pub max_line_search_trials: usize,
    pub eps_min: f64,
    /// Reject candidates with any negative action.
    pub nonnegative_actions: bool,
    /// Relative round-off allowance in the acceptance test, scaled by
    /// `max(1, |J(û)|)`. Exact LQ problems hit the bound with equality.
    pub acceptance_rtol: f64,
}

impl Default for IlqrConfig {
    fn default() -> Self {
        IlqrConfig {
            n_ilqr: 2,
            value_mode: ValueMode::DiagV,
            max_line_search_trials: 40,
            eps_min: 2f64.powi(-30),
            nonnegative_actions: true,
            acceptance_rtol: 1e-14,
        }
    }
}

impl IlqrConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_ilqr == 0 {
            return Err(Error::config("n_ilqr must be >= 1"));
        }
        if self.max_line_search_trials == 0 {
            return Err(Error::config("max_line_search_trials must be >= 1"));
        }
        if !(self.eps_min > 0.0 && self.eps_min < 1.0) {
            return Err(Error::config("eps_min must lie in (0, 1)"));
        }
        if !(self.acceptance_rtol >= 0.0) {
            return Err(Error::config("acceptance_rtol must be >= 0"));
        }
        Ok(())
    }

    /// The acceptance inequality `J(u) − J(û) ≤ ½εθ₁`, with round-off slack.
    pub fn accepts(&self, j_nominal: f64, j_candidate: f64, epsilon: f64, theta1: f64) -> bool {
        let slack = self.acceptance_rtol * j_nominal.abs().max(1.0);
        j_candidate - j_nominal <= 0.5 * epsilon * theta1 + slack
    }
}

/// Diagnostics of one outer iLQR iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IlqrIteration {
    pub theta1: f64,
    pub max_qu_norm: f64,
    pub regularized_steps: usize,
    pub j_nominal: f64,
    /// Cost of the accepted candidate, or of the nominal when none was.
    pub j_accepted: f64,
    /// `None` when the line search gave up.
    pub epsilon: Option<f64>,
    pub trials: usize,
}

#[derive(Clone, Debug)]
pub struct IlqrSolution<S> {
    pub trajectory: NominalTrajectory<S>,
    pub initial_actions: Vec<DVector<f64>>,
    pub iterations: Vec<IlqrIteration>,
}

impl<S> IlqrSolution<S> {
    pub fn actions(&self) -> &[DVector<f64>] {
        &self.trajectory.actions
    }

    /// `max_t ‖u_t − û_t‖₂` against the initial nominal.
    pub fn delta_emp(&self) -> f64 {
        self.trajectory.max_action_deviation(&self.initial_actions)
    }
}

/// Initial state and hidden state of a rollout.
#[derive(Clone, Debug)]
pub struct StartState<S> {
    pub x: DVector<f64>,
    pub snapshot: S,
}

/// Closed-loop rollout `u_t = K_t (x_t − x̂_t) + ε k_t + û_t` on the true
/// dynamics.
pub fn ilqr_forward<P: TrajectoryProblem>(
    problem: &P,
    nominal: &NominalTrajectory<P::Snapshot>,
    controllers: &[Controller],
    epsilon: f64,
) -> Result<NominalTrajectory<P::Snapshot>> {
    let horizon = nominal.horizon();
    if controllers.len() != horizon {
        return Err(Error::argument(format!(
            "{} controllers for a horizon of {horizon}",
            controllers.len()
        )));
    }
    let mut traj = NominalTrajectory {
        states: vec![nominal.states[0].clone()],
        actions: Vec::with_capacity(horizon),
        snapshots: vec![nominal.snapshots[0].clone()],
        costs: Vec::with_capacity(horizon),
    };
    for (t, c) in controllers.iter().enumerate() {
        let dx = &traj.states[t] - &nominal.states[t];
        let u = &c.gain * dx + &c.feedforward * epsilon + &nominal.actions[t];
        push_step(problem, &mut traj, t, u)?;
    }
    Ok(traj)
}

/// Runs `cfg.n_ilqr` backward/forward iterations from the given nominal
/// actions. When the line search fails the current nominal is kept and the
/// remaining iterations are skipped, since they would repeat the same pass.
pub fn ilqr_solve<P: TrajectoryProblem>(
    problem: &P,
    start: &StartState<P::Snapshot>,
    initial_actions: Vec<DVector<f64>>,
    cfg: &IlqrConfig,
) -> Result<IlqrSolution<P::Snapshot>> {
    cfg.validate()?;
    let mut nominal = rollout(problem, &start.x, &start.snapshot, &initial_actions)?;
    let mut iterations = Vec::with_capacity(cfg.n_ilqr);
    for _ in 0..cfg.n_ilqr {
        let bp = ilqr_backward(problem, &nominal, cfg.value_mode)?;
        let j_nominal = nominal.total_cost();
        let mut epsilon = 2.0;
        let mut trials = 0;
        let mut accepted = None;
        while trials < cfg.max_line_search_trials {
            epsilon *= 0.5;
            if epsilon < cfg.eps_min {
                break;
            }
            trials += 1;
            let candidate = match ilqr_forward(problem, &nominal, &bp.controllers, epsilon) {
                Ok(c) => c,
                // A diverging candidate is just a rejected one.
                Err(Error::Numeric(msg)) => {
                    log::debug!("candidate at eps={epsilon} rejected: {msg}");
                    continue;
                }
                Err(e) => return Err(e),
            };
            let nonneg = !cfg.nonnegative_actions || candidate.actions.iter().all(|u| u.iter().all(|&v| v >= 0.0));
            if nonneg && cfg.accepts(j_nominal, candidate.total_cost(), epsilon, bp.theta1) {
                accepted = Some(candidate);
                break;
            }
        }
        let record = IlqrIteration {
            theta1: bp.theta1,
            max_qu_norm: bp.max_qu_norm,
            regularized_steps: bp.regularized_steps,
            j_nominal,
            j_accepted: accepted.as_ref().map_or(j_nominal, |c| c.total_cost()),
            epsilon: accepted.as_ref().map(|_| epsilon),
            trials,
        };
        iterations.push(record);
        match accepted {
            Some(c) => nominal = c,
            None => {
                log::debug!("line search exhausted after {trials} trials; keeping nominal");
                break;
            }
        }
    }
    Ok(IlqrSolution {
        trajectory: nominal,
        initial_actions,
        iterations,
    })
}
