//! Iterative LQR: backward value recursion, forward rollout with
//! backtracking, and an exact LQR solver used as a reference.

mod backward;
mod lqr;
mod problem;
mod solve;
mod tow;

pub use backward::{backward_pass, ilqr_backward, BackwardPass, Controller, ValueMode, ValueModel};
pub use lqr::{lqr_oracle, LqProblem};
pub use problem::{rollout, LocalModel, NominalTrajectory, TrajectoryProblem, Transition};
pub use solve::{ilqr_forward, ilqr_solve, IlqrConfig, IlqrIteration, IlqrSolution, StartState};
pub use tow::TowProblem;
