use nalgebra::DVector;

use crate::cost::QuadraticCost;
use crate::dynamics::LinearizedDynamics;
use crate::error::{Error, Result};
use crate::linalg::all_finite;

/// Result of applying one action from one state.
#[derive(Clone, Debug)]
pub struct Transition<S> {
    pub next: DVector<f64>,
    pub snapshot: S,
    pub cost: f64,
}

/// Linear dynamics and quadratic cost around one nominal step.
#[derive(Clone, Debug)]
pub struct LocalModel {
    pub dynamics: LinearizedDynamics,
    pub cost: QuadraticCost,
}

/// A finite-horizon discrete-time control problem.
///
/// `Snapshot` carries whatever hidden state the transition depends on besides
/// `x` (optimizer moments, for instance). It is threaded through rollouts and
/// never mutated in place.
pub trait TrajectoryProblem {
    type Snapshot: Clone;

    fn horizon(&self) -> usize;

    fn action_dim(&self, t: usize) -> usize;

    fn transition(
        &self,
        t: usize,
        x: &DVector<f64>,
        u: &DVector<f64>,
        snapshot: &Self::Snapshot,
    ) -> Result<Transition<Self::Snapshot>>;

    fn local_model(
        &self,
        t: usize,
        x: &DVector<f64>,
        u: &DVector<f64>,
        snapshot: &Self::Snapshot,
    ) -> Result<LocalModel>;
}

/// States `x_1..x_{T+1}`, actions `u_1..u_T`, the snapshot in effect before
/// each transition (plus the final one), and per-step costs.
#[derive(Clone, Debug)]
pub struct NominalTrajectory<S> {
    pub states: Vec<DVector<f64>>,
    pub actions: Vec<DVector<f64>>,
    pub snapshots: Vec<S>,
    pub costs: Vec<f64>,
}

impl<S> NominalTrajectory<S> {
    pub fn horizon(&self) -> usize {
        self.actions.len()
    }

    pub fn total_cost(&self) -> f64 {
        self.costs.iter().sum()
    }

    pub fn final_state(&self) -> &DVector<f64> {
        self.states.last().expect("trajectory always holds x_1")
    }

    pub fn final_snapshot(&self) -> &S {
        self.snapshots.last().expect("trajectory always holds a snapshot")
    }

    /// Largest deviation `max_t ‖u_t − û_t‖₂` from another action sequence.
    pub fn max_action_deviation(&self, other: &[DVector<f64>]) -> f64 {
        self.actions
            .iter()
            .zip(other)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }
}

/// Open-loop rollout of `actions` from `(x1, snapshot)`.
pub fn rollout<P: TrajectoryProblem>(
    problem: &P,
    x1: &DVector<f64>,
    snapshot: &P::Snapshot,
    actions: &[DVector<f64>],
) -> Result<NominalTrajectory<P::Snapshot>> {
    if actions.len() != problem.horizon() {
        return Err(Error::argument(format!(
            "{} actions for a horizon of {}",
            actions.len(),
            problem.horizon()
        )));
    }
    let mut traj = NominalTrajectory {
        states: vec![x1.clone()],
        actions: Vec::with_capacity(actions.len()),
        snapshots: vec![snapshot.clone()],
        costs: Vec::with_capacity(actions.len()),
    };
    for (t, u) in actions.iter().enumerate() {
        push_step(problem, &mut traj, t, u.clone())?;
    }
    Ok(traj)
}

pub(crate) fn push_step<P: TrajectoryProblem>(
    problem: &P,
    traj: &mut NominalTrajectory<P::Snapshot>,
    t: usize,
    u: DVector<f64>,
) -> Result<()> {
    if u.len() != problem.action_dim(t) {
        return Err(Error::argument(format!(
            "action at step {t} has length {}, expected {}",
            u.len(),
            problem.action_dim(t)
        )));
    }
    let step = problem.transition(t, &traj.states[t], &u, &traj.snapshots[t])?;
    if !all_finite(&step.next) || !step.cost.is_finite() {
        return Err(Error::numeric(format!("non-finite state or cost after step {}", t + 1)));
    }
    traj.states.push(step.next);
    traj.snapshots.push(step.snapshot);
    traj.actions.push(u);
    traj.costs.push(step.cost);
    Ok(())
}
