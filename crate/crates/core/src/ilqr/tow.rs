use nalgebra::DVector;

use super::problem::{LocalModel, TrajectoryProblem, Transition};
use crate::cost::{cost_from_losses, ActionPrior, QuadraticCost};
use crate::dynamics::{weighted_diag_sum, LinearizationMode, OptimizerState};
use crate::error::{Error, Result};
use crate::linalg::SquareMatrix;
use crate::metalearn::{weighted_rows, MetaObjective};
use crate::tasks::TaskBatch;

/// Meta-training over a horizon of fixed task batches as a control problem:
/// state = meta-parameters, action = task weights, transition = one
/// optimizer step, cost = summed validation loss plus the action prior.
pub struct TowProblem<'a> {
    pub objective: &'a MetaObjective,
    pub batches: &'a [TaskBatch],
    pub prior: ActionPrior,
    pub mode: LinearizationMode,
}

impl<'a> TowProblem<'a> {
    pub fn new(
        objective: &'a MetaObjective,
        batches: &'a [TaskBatch],
        prior: ActionPrior,
        mode: LinearizationMode,
    ) -> Result<Self> {
        if batches.is_empty() {
            return Err(Error::argument("horizon must contain at least one batch"));
        }
        prior.validate()?;
        if mode == LinearizationMode::Full && !objective.model.is_linear() {
            return Err(Error::Unsupported(
                "full linearization requires a linear architecture".into(),
            ));
        }
        Ok(TowProblem {
            objective,
            batches,
            prior,
            mode,
        })
    }
}

impl TrajectoryProblem for TowProblem<'_> {
    type Snapshot = OptimizerState;

    fn horizon(&self) -> usize {
        self.batches.len()
    }

    fn action_dim(&self, t: usize) -> usize {
        self.batches[t].len()
    }

    fn transition(
        &self,
        t: usize,
        x: &DVector<f64>,
        u: &DVector<f64>,
        snapshot: &OptimizerState,
    ) -> Result<Transition<OptimizerState>> {
        let (ell, jac) = self.objective.loss_and_jacobian(x, &self.batches[t])?;
        let cost = cost_from_losses(&ell, u, &self.prior)?;
        let (next, snapshot) = snapshot.apply(x, &weighted_rows(&jac, u))?;
        Ok(Transition { next, snapshot, cost })
    }

    fn local_model(
        &self,
        t: usize,
        x: &DVector<f64>,
        u: &DVector<f64>,
        snapshot: &OptimizerState,
    ) -> Result<LocalModel> {
        let batch = &self.batches[t];
        let jac = self.objective.meta_loss_jacobian(x, batch)?;
        let ones = DVector::from_element(batch.len(), 1.0);
        let (h_weighted, h_sum) = match self.mode {
            LinearizationMode::Diag => {
                let diags = self.objective.gauss_newton_diags(x, batch)?;
                (
                    SquareMatrix::Diagonal(weighted_diag_sum(&diags, u, x.len())),
                    SquareMatrix::Diagonal(weighted_diag_sum(&diags, &ones, x.len())),
                )
            }
            LinearizationMode::Full => (
                SquareMatrix::Dense(self.objective.weighted_grad_jacobian(x, batch, u)?),
                SquareMatrix::Dense(self.objective.weighted_grad_jacobian(x, batch, &ones)?),
            ),
        };
        Ok(LocalModel {
            dynamics: snapshot.linearize_parts(&jac, u, &h_weighted),
            cost: QuadraticCost::from_parts(&jac, h_sum, u, &self.prior),
        })
    }
}
