//! Trajectory cost `c(x, u) = 1ᵀℓ(x) + (β_u/2)‖u − μ_u·1‖²` and its local
//! quadratic model.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::{weighted_hessian, LinearizationMode};
use crate::error::{Error, Result};
use crate::linalg::SquareMatrix;
use crate::metalearn::{weighted_rows, LossVector, MetaObjective};
use crate::model::ParamVector;
use crate::tasks::TaskBatch;

/// Gaussian prior on the task weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionPrior {
    pub mu_u: f64,
    pub beta_u: f64,
}

impl ActionPrior {
    /// Prior centred on uniform weights `1/M`.
    pub fn uniform(m: usize, beta_u: f64) -> Self {
        ActionPrior {
            mu_u: 1.0 / m as f64,
            beta_u,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta_u > 0.0 && self.beta_u.is_finite()) {
            return Err(Error::config("beta_u must be positive and finite"));
        }
        if !self.mu_u.is_finite() {
            return Err(Error::config("mu_u must be finite"));
        }
        Ok(())
    }

    pub fn penalty(&self, u: &DVector<f64>) -> f64 {
        let sq: f64 = u.iter().map(|&ui| (ui - self.mu_u) * (ui - self.mu_u)).sum();
        0.5 * self.beta_u * sq
    }
}

/// Second-order model of the cost increment around `(x̂, û)`. The cross terms
/// `C_xu`, `C_ux` are identically zero and not stored.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticCost {
    pub c_xx: SquareMatrix,
    pub c_uu: DMatrix<f64>,
    pub c_x: DVector<f64>,
    pub c_u: DVector<f64>,
}

impl QuadraticCost {
    pub fn c_xu(&self) -> DMatrix<f64> {
        DMatrix::zeros(self.c_x.len(), self.c_u.len())
    }

    /// Predicted increment `c(x̂+δx, û+δu) − c(x̂, û)`.
    pub fn model_increment(&self, dx: &DVector<f64>, du: &DVector<f64>) -> f64 {
        self.c_x.dot(dx) + 0.5 * dx.dot(&self.c_xx.mul_vec(dx)) + self.c_u.dot(du) + 0.5 * du.dot(&(&self.c_uu * du))
    }

    /// Builds the model from the loss Jacobian and the Hessian (or surrogate)
    /// of the unweighted loss sum.
    pub fn from_parts(jac: &DMatrix<f64>, c_xx: SquareMatrix, u_hat: &DVector<f64>, prior: &ActionPrior) -> Self {
        let m = u_hat.len();
        let ones = DVector::from_element(m, 1.0);
        QuadraticCost {
            c_xx,
            c_uu: DMatrix::identity(m, m) * prior.beta_u,
            c_x: weighted_rows(jac, &ones),
            c_u: u_hat.map(|u| prior.beta_u * (u - prior.mu_u)),
        }
    }
}

pub fn cost_from_losses(ell: &LossVector, u: &DVector<f64>, prior: &ActionPrior) -> Result<f64> {
    if u.len() != ell.len() {
        return Err(Error::argument(format!(
            "action has length {}, batch has {} tasks",
            u.len(),
            ell.len()
        )));
    }
    Ok(ell.sum() + prior.penalty(u))
}

pub fn cost(
    objective: &MetaObjective,
    x: &ParamVector,
    u: &DVector<f64>,
    batch: &TaskBatch,
    prior: &ActionPrior,
) -> Result<f64> {
    if u.len() != batch.len() {
        return Err(Error::argument("action length differs from batch size"));
    }
    let ell = objective.validation_loss_vector(x, batch)?;
    cost_from_losses(&ell, u, prior)
}

pub fn quadraticize(
    objective: &MetaObjective,
    x_hat: &ParamVector,
    u_hat: &DVector<f64>,
    batch: &TaskBatch,
    prior: &ActionPrior,
    mode: LinearizationMode,
) -> Result<QuadraticCost> {
    if u_hat.len() != batch.len() {
        return Err(Error::argument("action length differs from batch size"));
    }
    let jac = objective.meta_loss_jacobian(x_hat, batch)?;
    let ones = DVector::from_element(batch.len(), 1.0);
    let c_xx = weighted_hessian(objective, x_hat, &ones, batch, mode)?;
    Ok(QuadraticCost::from_parts(&jac, c_xx, u_hat, prior))
}

/// `J = Σ_t c(x_t, u_t)`.
pub fn total_cost(
    objective: &MetaObjective,
    states: &[ParamVector],
    actions: &[DVector<f64>],
    batches: &[TaskBatch],
    prior: &ActionPrior,
) -> Result<f64> {
    if states.len() != actions.len() || actions.len() != batches.len() {
        return Err(Error::argument(format!(
            "trajectory lengths differ: {} states, {} actions, {} batches",
            states.len(),
            actions.len(),
            batches.len()
        )));
    }
    states
        .iter()
        .zip(actions)
        .zip(batches)
        .map(|((x, u), b)| cost(objective, x, u, b, prior))
        .sum()
}
