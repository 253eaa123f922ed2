use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::problem::{LocalModel, TrajectoryProblem, Transition};
use crate::cost::QuadraticCost;
use crate::dynamics::LinearizedDynamics;
use crate::error::{Error, Result};
use crate::linalg::SquareMatrix;

/// Time-varying linear dynamics `x' = A x + B u + d` with cost
/// `½xᵀQx + qᵀx + ½uᵀRu + rᵀu` at every step.
#[derive(Clone, Debug)]
pub struct LqProblem {
    pub a: Vec<DMatrix<f64>>,
    pub b: Vec<DMatrix<f64>>,
    pub d: Vec<DVector<f64>>,
    pub q: Vec<DMatrix<f64>>,
    pub q_lin: Vec<DVector<f64>>,
    pub r: Vec<DMatrix<f64>>,
    pub r_lin: Vec<DVector<f64>>,
}

impl LqProblem {
    /// The same matrices at every one of `horizon` steps.
    pub fn stationary(
        horizon: usize,
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
    ) -> Self {
        let (n, m) = (a.nrows(), b.ncols());
        LqProblem {
            a: vec![a; horizon],
            b: vec![b; horizon],
            d: vec![DVector::zeros(n); horizon],
            q: vec![q; horizon],
            q_lin: vec![DVector::zeros(n); horizon],
            r: vec![r; horizon],
            r_lin: vec![DVector::zeros(m); horizon],
        }
    }

    /// A random well-posed problem: stable-ish `A`, PSD state cost, PD
    /// action cost, random affine terms.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, n: usize, m: usize, horizon: usize) -> Self {
        let mut normal = |r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(rng));
        let scale = 1.0 / (n as f64).sqrt();
        let mut p = LqProblem {
            a: Vec::new(),
            b: Vec::new(),
            d: Vec::new(),
            q: Vec::new(),
            q_lin: Vec::new(),
            r: Vec::new(),
            r_lin: Vec::new(),
        };
        for _ in 0..horizon {
            p.a.push(DMatrix::identity(n, n) + normal(n, n) * (0.3 * scale));
            p.b.push(normal(n, m) * scale);
            p.d.push(normal(n, 1).column(0) * 0.1);
            let l = normal(n, n);
            p.q.push(&l * l.transpose() * (1.0 / n as f64));
            p.q_lin.push(normal(n, 1).column(0).into_owned());
            let s = normal(m, m);
            p.r.push(DMatrix::identity(m, m) * 0.5 + &s * s.transpose() * (1.0 / m as f64));
            p.r_lin.push(normal(m, 1).column(0).into_owned());
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.a.len();
        if t == 0 {
            return Err(Error::argument("empty horizon"));
        }
        let lens = [self.b.len(), self.d.len(), self.q.len(), self.q_lin.len(), self.r.len(), self.r_lin.len()];
        if lens.iter().any(|&l| l != t) {
            return Err(Error::argument("LQ problem arrays have different lengths"));
        }
        let n = self.a[0].nrows();
        for s in 0..t {
            let m = self.b[s].ncols();
            let ok = self.a[s].shape() == (n, n)
                && self.b[s].nrows() == n
                && self.d[s].len() == n
                && self.q[s].shape() == (n, n)
                && self.q_lin[s].len() == n
                && self.r[s].shape() == (m, m)
                && self.r_lin[s].len() == m;
            if !ok {
                return Err(Error::argument(format!("inconsistent shapes at step {}", s + 1)));
            }
        }
        Ok(())
    }

    pub fn step_cost(&self, t: usize, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.q[t] * x)) + self.q_lin[t].dot(x) + 0.5 * u.dot(&(&self.r[t] * u)) + self.r_lin[t].dot(u)
    }
}

impl TrajectoryProblem for LqProblem {
    type Snapshot = ();

    fn horizon(&self) -> usize {
        self.a.len()
    }

    fn action_dim(&self, t: usize) -> usize {
        self.b[t].ncols()
    }

    fn transition(&self, t: usize, x: &DVector<f64>, u: &DVector<f64>, _: &()) -> Result<Transition<()>> {
        Ok(Transition {
            next: &self.a[t] * x + &self.b[t] * u + &self.d[t],
            snapshot: (),
            cost: self.step_cost(t, x, u),
        })
    }

    fn local_model(&self, t: usize, x: &DVector<f64>, u: &DVector<f64>, _: &()) -> Result<LocalModel> {
        Ok(LocalModel {
            dynamics: LinearizedDynamics {
                f_x: SquareMatrix::Dense(self.a[t].clone()),
                f_u: self.b[t].clone(),
            },
            cost: QuadraticCost {
                c_xx: SquareMatrix::Dense(self.q[t].clone()),
                c_uu: self.r[t].clone(),
                c_x: &self.q[t] * x + &self.q_lin[t],
                c_u: &self.r[t] * u + &self.r_lin[t],
            },
        })
    }
}

/// Exact finite-horizon LQR in absolute coordinates, returning the optimal
/// open-loop actions from `x1`. Fails if any `Q_uu` is not positive definite.
pub fn lqr_oracle(problem: &LqProblem, x1: &DVector<f64>) -> Result<Vec<DVector<f64>>> {
    problem.validate()?;
    let n = problem.a[0].nrows();
    if x1.len() != n {
        return Err(Error::argument("x1 has the wrong dimension"));
    }
    let horizon = problem.a.len();
    let mut p = DMatrix::zeros(n, n);
    let mut p_lin = DVector::zeros(n);
    let mut policy = Vec::with_capacity(horizon);
    for t in (0..horizon).rev() {
        let (a, b, d) = (&problem.a[t], &problem.b[t], &problem.d[t]);
        let g = &p_lin + &p * d;
        let h_uu = &problem.r[t] + b.transpose() * &p * b;
        let h_ux = b.transpose() * &p * a;
        let h_u = &problem.r_lin[t] + b.tr_mul(&g);
        let h_xx = &problem.q[t] + a.transpose() * &p * a;
        let h_x = &problem.q_lin[t] + a.tr_mul(&g);
        let chol = Cholesky::new((&h_uu + h_uu.transpose()) * 0.5)
            .ok_or_else(|| Error::numeric(format!("Q_uu not positive definite at step {}", t + 1)))?;
        let gain = -chol.solve(&h_ux);
        let offset = -chol.solve(&h_u);
        p = &h_xx + h_ux.transpose() * &gain;
        p = (&p + p.transpose()) * 0.5;
        p_lin = h_x + h_ux.transpose() * &offset;
        policy.push((gain, offset));
    }
    policy.reverse();
    let mut x = x1.clone();
    let mut actions = Vec::with_capacity(horizon);
    for (t, (gain, offset)) in policy.iter().enumerate() {
        let u = gain * &x + offset;
        x = &problem.a[t] * &x + &problem.b[t] * &u + &problem.d[t];
        actions.push(u);
    }
    Ok(actions)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn origin_is_optimal() {
        let p = LqProblem::stationary(
            3,
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
        );
        let u = lqr_oracle(&p, &DVector::zeros(2)).unwrap();
        assert!(u.iter().all(|v| v.iter().all(|&e| e == 0.0)));
    }

    #[test]
    fn one_step_scalar() {
        // x2 = x1 + u with cost ½x2² + ½u²: a zero-cost first step with a
        // second step whose action is free but penalized.
        let one = DMatrix::from_element(1, 1, 1.0);
        let p = LqProblem {
            a: vec![one.clone(), one.clone()],
            b: vec![one.clone(), DMatrix::zeros(1, 1)],
            d: vec![DVector::zeros(1); 2],
            q: vec![DMatrix::zeros(1, 1), one.clone()],
            q_lin: vec![DVector::zeros(1); 2],
            r: vec![one.clone(), one.clone()],
            r_lin: vec![DVector::zeros(1); 2],
        };
        let u = lqr_oracle(&p, &DVector::from_element(1, 1.0)).unwrap();
        assert!((u[0][0] + 0.5).abs() < 1e-14);
        assert!(u[1][0].abs() < 1e-14);
    }

    #[test]
    fn singular_quu_is_an_error() {
        let p = LqProblem::stationary(
            1,
            DMatrix::identity(1, 1),
            DMatrix::identity(1, 1),
            DMatrix::zeros(1, 1),
            DMatrix::zeros(1, 1),
        );
        assert!(lqr_oracle(&p, &DVector::zeros(1)).is_err());
    }
}
