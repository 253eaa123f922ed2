//! One meta-optimizer step as the state transition `x' = f(x, u)`, and its
//! first-order Taylor coefficients `F_x`, `F_u`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{all_finite, SquareMatrix};
use crate::metalearn::{weighted_rows, MetaObjective};
use crate::model::ParamVector;
use crate::tasks::TaskBatch;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd {
        alpha: f64,
    },
    Adam {
        alpha: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl OptimizerKind {
    pub fn adam(alpha: f64) -> Self {
        OptimizerKind::Adam {
            alpha,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }

    pub fn alpha(&self) -> f64 {
        match *self {
            OptimizerKind::Sgd { alpha } | OptimizerKind::Adam { alpha, .. } => alpha,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            OptimizerKind::Sgd { alpha } => {
                if !(alpha >= 0.0 && alpha.is_finite()) {
                    return Err(Error::config("alpha must be finite and >= 0"));
                }
            }
            OptimizerKind::Adam {
                alpha,
                beta1,
                beta2,
                eps,
            } => {
                if !(alpha >= 0.0 && alpha.is_finite()) {
                    return Err(Error::config("alpha must be finite and >= 0"));
                }
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
                    return Err(Error::config("Adam betas must lie in [0, 1)"));
                }
                if !(eps > 0.0) {
                    return Err(Error::config("Adam eps must be > 0"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinearizationMode {
    /// Hessian terms replaced by Gauss-Newton diagonals.
    #[default]
    Diag,
    /// Exact dense Hessians; linear models only.
    Full,
}

/// Optimizer hyper-parameters plus the running moment estimates.
///
/// `step` counts applied updates, so the next update uses bias-correction
/// exponent `step + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub m: DVector<f64>,
    pub v: DVector<f64>,
    pub step: u64,
}

/// `x' ≈ f(x̂, û) + F_x δx + F_u δu`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearizedDynamics {
    pub f_x: SquareMatrix,
    pub f_u: DMatrix<f64>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, dim: usize) -> Self {
        OptimizerState {
            kind,
            m: DVector::zeros(dim),
            v: DVector::zeros(dim),
            step: 0,
        }
    }

    /// Applies one update with the already computed gradient `g = ∇ₓ[uᵀℓ]`.
    pub fn apply(&self, x: &ParamVector, g: &DVector<f64>) -> Result<(ParamVector, OptimizerState)> {
        if !all_finite(g) {
            let bad = g.iter().filter(|v| !v.is_finite()).count();
            return Err(Error::numeric(format!(
                "non-finite meta-gradient ({bad} of {} entries) at optimizer step {}",
                g.len(),
                self.step + 1
            )));
        }
        match self.kind {
            OptimizerKind::Sgd { alpha } => {
                let next = x - g * alpha;
                Ok((
                    next,
                    OptimizerState {
                        step: self.step + 1,
                        ..self.clone()
                    },
                ))
            }
            OptimizerKind::Adam {
                alpha,
                beta1,
                beta2,
                eps,
            } => {
                let t = self.step + 1;
                let m = &self.m * beta1 + g * (1.0 - beta1);
                let v = &self.v * beta2 + g.component_mul(g) * (1.0 - beta2);
                let c1 = 1.0 - beta1.powi(t as i32);
                let c2 = 1.0 - beta2.powi(t as i32);
                let next = DVector::from_fn(x.len(), |i, _| {
                    x[i] - alpha * (m[i] / c1) / ((v[i] / c2).sqrt() + eps)
                });
                Ok((
                    next,
                    OptimizerState {
                        kind: self.kind,
                        m,
                        v,
                        step: t,
                    },
                ))
            }
        }
    }

    /// `x' = f(x, u)` on `batch`. The receiver is left untouched.
    pub fn step(
        &self,
        objective: &MetaObjective,
        x: &ParamVector,
        u: &DVector<f64>,
        batch: &TaskBatch,
    ) -> Result<(ParamVector, OptimizerState)> {
        let g = objective.meta_grad_weighted(x, batch, u)?;
        self.apply(x, &g)
    }

    /// Per-coordinate derivative of the update `x − x'` w.r.t. the gradient,
    /// evaluated at gradient `g`.
    ///
    /// For Adam the previous moments are held constant, so the coefficient is
    /// exact for this step but ignores how earlier steps shaped `m` and `v`.
    pub fn update_sensitivity(&self, g: &DVector<f64>) -> DVector<f64> {
        match self.kind {
            OptimizerKind::Sgd { alpha } => DVector::from_element(g.len(), alpha),
            OptimizerKind::Adam {
                alpha,
                beta1,
                beta2,
                eps,
            } => {
                let t = (self.step + 1) as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                DVector::from_fn(g.len(), |i, _| {
                    let m = beta1 * self.m[i] + (1.0 - beta1) * g[i];
                    let v = beta2 * self.v[i] + (1.0 - beta2) * g[i] * g[i];
                    let s = (v / c2).sqrt();
                    let den = s + eps;
                    // d s / d g = (1 − β₂) g / (c₂ s); taken as 0 when v = 0,
                    // where the expression is 0/0.
                    let ds = if s > 0.0 { (1.0 - beta2) * g[i] / (c2 * s) } else { 0.0 };
                    alpha / c1 * ((1.0 - beta1) / den - m / (den * den) * ds)
                })
            }
        }
    }

    /// Taylor coefficients from precomputed pieces: the loss Jacobian `jac`
    /// (M×D) and the Hessian (or surrogate) of `ûᵀℓ`.
    pub fn linearize_parts(
        &self,
        jac: &DMatrix<f64>,
        u_hat: &DVector<f64>,
        weighted_hessian: &SquareMatrix,
    ) -> LinearizedDynamics {
        let g = weighted_rows(jac, u_hat);
        let scale = self.update_sensitivity(&g);
        let f_x = match weighted_hessian {
            SquareMatrix::Diagonal(h) => {
                SquareMatrix::Diagonal(DVector::from_fn(h.len(), |i, _| 1.0 - scale[i] * h[i]))
            }
            SquareMatrix::Dense(h) => {
                let mut f = -h.clone();
                for (i, mut row) in f.row_iter_mut().enumerate() {
                    row *= scale[i];
                }
                f += DMatrix::identity(h.nrows(), h.ncols());
                SquareMatrix::Dense(f)
            }
        };
        let mut f_u = -jac.transpose();
        for (i, mut row) in f_u.row_iter_mut().enumerate() {
            row *= scale[i];
        }
        LinearizedDynamics { f_x, f_u }
    }

    /// `F_x`, `F_u` at `(x̂, û)`. `Diag` uses `Σᵢ ûᵢ·GNᵢ` for the Hessian of the
    /// weighted loss; `Full` differentiates the meta-gradient exactly.
    pub fn linearize(
        &self,
        objective: &MetaObjective,
        x_hat: &ParamVector,
        u_hat: &DVector<f64>,
        batch: &TaskBatch,
        mode: LinearizationMode,
    ) -> Result<LinearizedDynamics> {
        if u_hat.len() != batch.len() {
            return Err(Error::argument("action length differs from batch size"));
        }
        let jac = objective.meta_loss_jacobian(x_hat, batch)?;
        let hessian = weighted_hessian(objective, x_hat, u_hat, batch, mode)?;
        Ok(self.linearize_parts(&jac, u_hat, &hessian))
    }
}

/// Hessian (Full) or Gauss-Newton diagonal surrogate (Diag) of `wᵀℓ(x)`.
pub(crate) fn weighted_hessian(
    objective: &MetaObjective,
    x: &ParamVector,
    w: &DVector<f64>,
    batch: &TaskBatch,
    mode: LinearizationMode,
) -> Result<SquareMatrix> {
    match mode {
        LinearizationMode::Diag => {
            let diags = objective.gauss_newton_diags(x, batch)?;
            Ok(SquareMatrix::Diagonal(weighted_diag_sum(&diags, w, x.len())))
        }
        LinearizationMode::Full => Ok(SquareMatrix::Dense(objective.weighted_grad_jacobian(x, batch, w)?)),
    }
}

pub(crate) fn weighted_diag_sum(
    diags: &[crate::model::GaussNewtonDiag],
    w: &DVector<f64>,
    dim: usize,
) -> DVector<f64> {
    let mut h = DVector::zeros(dim);
    for (d, &wi) in diags.iter().zip(w.iter()) {
        h.axpy(wi, d.values(), 1.0);
    }
    h
}
