use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::problem::{LocalModel, NominalTrajectory, TrajectoryProblem};
use crate::error::{Error, Result};
use crate::linalg::SquareMatrix;

/// Representation of the value Hessian `V_t` during the backward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueMode {
    /// Keep only `diag(V_t)` after each update.
    #[default]
    DiagV,
    FullV,
}

/// Affine policy `u = K (x − x̂) + ε k + û`.
#[derive(Clone, Debug, PartialEq)]
pub struct Controller {
    pub gain: DMatrix<f64>,
    pub feedforward: DVector<f64>,
}

/// Quadratic model of the optimal cost-to-go at one step.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueModel {
    pub v_xx: SquareMatrix,
    pub v_x: DVector<f64>,
    pub theta: f64,
}

#[derive(Clone, Debug)]
pub struct BackwardPass {
    pub controllers: Vec<Controller>,
    /// `values[t]` is the model at step `t + 1`; the last entry is the zero
    /// terminal model.
    pub values: Vec<ValueModel>,
    pub theta1: f64,
    /// Largest `‖q_u‖₂` over the horizon.
    pub max_qu_norm: f64,
    /// Steps at which `Q_uu` needed a diagonal shift.
    pub regularized_steps: usize,
}

const MIN_EIGENVALUE: f64 = 1e-8;

/// Backward recursion over precomputed local models.
pub fn backward_pass(models: &[LocalModel], mode: ValueMode) -> Result<BackwardPass> {
    let horizon = models.len();
    let dim = models
        .first()
        .map(|m| m.cost.c_x.len())
        .ok_or_else(|| Error::argument("empty horizon"))?;
    let mut v_xx = match mode {
        ValueMode::DiagV => SquareMatrix::Diagonal(DVector::zeros(dim)),
        ValueMode::FullV => SquareMatrix::Dense(DMatrix::zeros(dim, dim)),
    };
    let mut v_x = DVector::zeros(dim);
    let mut theta = 0.0;
    let mut values = vec![ValueModel {
        v_xx: v_xx.clone(),
        v_x: v_x.clone(),
        theta,
    }];
    let mut controllers = Vec::with_capacity(horizon);
    let mut max_qu_norm: f64 = 0.0;
    let mut regularized_steps = 0;

    for t in (0..horizon).rev() {
        let LocalModel { dynamics, cost } = &models[t];
        let f_x = &dynamics.f_x;
        let f_u = &dynamics.f_u;
        if f_x.dim() != dim || f_u.nrows() != dim || cost.c_x.len() != dim {
            return Err(Error::argument(format!("inconsistent state dimension at step {}", t + 1)));
        }

        let v_fu = v_xx.mul_mat(f_u);
        let mut q_uu = &cost.c_uu + f_u.tr_mul(&v_fu);
        q_uu = (&q_uu + q_uu.transpose()) * 0.5;
        let q_xu = f_x.tr_mul_mat(&v_fu);
        let q_x = &cost.c_x + f_x.tr_mul_vec(&v_x);
        let q_u = &cost.c_u + f_u.tr_mul(&v_x);
        max_qu_norm = max_qu_norm.max(q_u.norm());

        let (chol, shifted) = factor_pd(q_uu).map_err(|e| match e {
            Error::Numeric(msg) => Error::numeric(format!("step {}: {msg}", t + 1)),
            other => other,
        })?;
        if shifted {
            regularized_steps += 1;
        }
        let gain = -chol.solve(&q_xu.transpose());
        let feedforward = -chol.solve(&q_u);

        let q_xu_k = &q_xu * &feedforward;
        let next_v_x = q_x + &q_xu_k;
        theta += q_u.dot(&feedforward);

        let next_v_xx = match mode {
            ValueMode::DiagV => {
                let q_xx = value_hessian_diag(&cost.c_xx, f_x, &v_xx);
                let mut d = q_xx;
                for i in 0..dim {
                    d[i] += q_xu.row(i).dot(&gain.column(i).transpose());
                }
                SquareMatrix::Diagonal(d)
            }
            ValueMode::FullV => {
                let q_xx = cost.c_xx.to_dense() + f_x.tr_mul_mat(&v_xx.mul_mat(&f_x.to_dense()));
                let v = q_xx + &q_xu * &gain;
                SquareMatrix::Dense((&v + v.transpose()) * 0.5)
            }
        };

        if !next_v_xx.is_finite()
            || next_v_x.iter().any(|v| !v.is_finite())
            || !theta.is_finite()
            || gain.iter().chain(feedforward.iter()).any(|v| !v.is_finite())
        {
            return Err(Error::numeric(format!("non-finite value model at step {}", t + 1)));
        }
        v_xx = next_v_xx;
        v_x = next_v_x;
        controllers.push(Controller { gain, feedforward });
        values.push(ValueModel {
            v_xx: v_xx.clone(),
            v_x: v_x.clone(),
            theta,
        });
    }
    controllers.reverse();
    values.reverse();
    Ok(BackwardPass {
        controllers,
        values,
        theta1: theta,
        max_qu_norm,
        regularized_steps,
    })
}

/// Linearizes `problem` about `nominal` and runs the backward recursion.
pub fn ilqr_backward<P: TrajectoryProblem>(
    problem: &P,
    nominal: &NominalTrajectory<P::Snapshot>,
    mode: ValueMode,
) -> Result<BackwardPass> {
    let models = (0..nominal.horizon())
        .map(|t| problem.local_model(t, &nominal.states[t], &nominal.actions[t], &nominal.snapshots[t]))
        .collect::<Result<Vec<_>>>()?;
    backward_pass(&models, mode)
}

/// `diag(C_xx + F_xᵀ V F_x)` without forming dense products when avoidable.
fn value_hessian_diag(c_xx: &SquareMatrix, f_x: &SquareMatrix, v_xx: &SquareMatrix) -> DVector<f64> {
    let mut d = c_xx.diagonal();
    match (f_x, v_xx) {
        (SquareMatrix::Diagonal(f), SquareMatrix::Diagonal(v)) => {
            for i in 0..d.len() {
                d[i] += f[i] * v[i] * f[i];
            }
        }
        (SquareMatrix::Dense(f), SquareMatrix::Diagonal(v)) => {
            for i in 0..d.len() {
                d[i] += f.column(i).iter().zip(v.iter()).map(|(a, b)| a * b * a).sum::<f64>();
            }
        }
        _ => {
            let full = f_x.tr_mul_mat(&v_xx.mul_mat(&f_x.to_dense()));
            d += full.diagonal();
        }
    }
    d
}

/// Cholesky of `a`, shifting the spectrum so its smallest eigenvalue is at
/// least `MIN_EIGENVALUE` when the plain factorization fails or is too close
/// to singular. If round-off still defeats the factorization the shift grows
/// tenfold per attempt.
fn factor_pd(a: DMatrix<f64>) -> Result<(Cholesky<f64, nalgebra::Dyn>, bool)> {
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("non-finite Q_uu"));
    }
    let min_eig = SymmetricEigen::new(a.clone()).eigenvalues.min();
    if min_eig >= MIN_EIGENVALUE {
        if let Some(c) = Cholesky::new(a.clone()) {
            return Ok((c, false));
        }
    }
    let n = a.nrows();
    let mut shift = (MIN_EIGENVALUE - min_eig).max(MIN_EIGENVALUE);
    for _ in 0..32 {
        if let Some(c) = Cholesky::new(&a + DMatrix::identity(n, n) * shift) {
            return Ok((c, true));
        }
        shift = (shift * 10.0).max(f64::EPSILON * a.amax());
    }
    Err(Error::numeric("Q_uu could not be regularized"))
}
