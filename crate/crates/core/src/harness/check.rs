use nalgebra::DVector;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::train::{seeded_rng, SeedStream};
use crate::cost::{cost, quadraticize};
use crate::dynamics::{LinearizationMode, OptimizerState};
use crate::error::{Error, Result};
use crate::ilqr::{ilqr_backward, ilqr_solve, lqr_oracle, rollout, IlqrConfig, LqProblem, StartState, TowProblem, ValueMode};
use crate::metalearn::{MetaGradOrder, MetaObjective};
use crate::model::{self, ParamVector};
use crate::tasks::{sample_task_batch, TaskBatch};

pub const MAX_CHECK_PARAMS: usize = 50;
const FD_STEP: f64 = 1e-5;
const SEEDS: u64 = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckKind {
    Gradients,
    Linearization,
    Quadraticization,
    Lqr,
    ThetaSign,
}

impl CheckKind {
    pub const ALL: [CheckKind; 5] = [
        CheckKind::Gradients,
        CheckKind::Linearization,
        CheckKind::Quadraticization,
        CheckKind::Lqr,
        CheckKind::ThetaSign,
    ];
}

impl std::str::FromStr for CheckKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "gradients" => Ok(CheckKind::Gradients),
            "linearization" => Ok(CheckKind::Linearization),
            "quadraticization" => Ok(CheckKind::Quadraticization),
            "lqr" => Ok(CheckKind::Lqr),
            "theta_sign" | "thetasign" => Ok(CheckKind::ThetaSign),
            other => Err(Error::config(format!("unknown check '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub passed: bool,
}

impl Measurement {
    fn below(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Measurement {
            name: name.into(),
            value,
            threshold,
            passed: value < threshold,
        }
    }

    fn at_least(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Measurement {
            name: name.into(),
            value,
            threshold,
            passed: value >= threshold,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub kind: CheckKind,
    pub measurements: Vec<Measurement>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.measurements.iter().all(|m| m.passed)
    }
}

/// Runs one derivative or solver diagnostic on the configured model and
/// environment. Model-based checks need at most 50 parameters.
pub fn run_check(cfg: &ExperimentConfig, kind: CheckKind) -> Result<CheckReport> {
    cfg.validate()?;
    let objective = cfg.objective();
    if kind != CheckKind::Lqr && objective.n_params() > MAX_CHECK_PARAMS {
        return Err(Error::config(format!(
            "checks need at most {MAX_CHECK_PARAMS} parameters, model has {}",
            objective.n_params()
        )));
    }
    let mut rng = seeded_rng(cfg.seed, SeedStream::Checks);
    let measurements = match kind {
        CheckKind::Gradients => check_gradients(cfg, &objective, &mut rng)?,
        CheckKind::Linearization => check_linearization(cfg, &objective, &mut rng)?,
        CheckKind::Quadraticization => check_quadraticization(cfg, &objective, &mut rng)?,
        CheckKind::Lqr => check_lqr(&mut rng)?,
        CheckKind::ThetaSign => check_theta_sign(cfg, &objective, &mut rng)?,
    };
    Ok(CheckReport { kind, measurements })
}

pub(crate) fn rel_err(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm() / a.norm().max(b.norm()).max(1e-12)
}

/// Central-difference gradient of `f` at `x`.
pub(crate) fn fd_gradient(x: &DVector<f64>, h: f64, mut f: impl FnMut(&DVector<f64>) -> Result<f64>) -> Result<DVector<f64>> {
    let mut g = DVector::zeros(x.len());
    let mut xp = x.clone();
    for i in 0..x.len() {
        xp[i] = x[i] + h;
        let fp = f(&xp)?;
        xp[i] = x[i] - h;
        let fm = f(&xp)?;
        xp[i] = x[i];
        g[i] = (fp - fm) / (2.0 * h);
    }
    Ok(g)
}

fn random_point(cfg: &ExperimentConfig, rng: &mut ChaCha8Rng) -> Result<(ParamVector, TaskBatch, DVector<f64>)> {
    let x = cfg.model.init_params(rng);
    let batch = sample_task_batch(&cfg.environment, rng, cfg.training.batch_size)?;
    let m = batch.len();
    let u = DVector::from_fn(m, |_, _| rng.gen_range(0.5..1.5) / m as f64);
    Ok((x, batch, u))
}

fn random_direction(n: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
    let v = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
    let norm = v.norm();
    v / norm
}

fn check_gradients(cfg: &ExperimentConfig, objective: &MetaObjective, rng: &mut ChaCha8Rng) -> Result<Vec<Measurement>> {
    let full = objective.with_order(MetaGradOrder::Full);
    let (mut grad_err, mut cx_err, mut hvp_err) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..SEEDS {
        let (x, batch, u) = random_point(cfg, rng)?;
        let g = full.meta_grad_weighted(&x, &batch, &u)?;
        let fd = fd_gradient(&x, FD_STEP, |p| Ok(full.validation_loss_vector(p, &batch)?.values().dot(&u)))?;
        grad_err = grad_err.max(rel_err(&g, &fd));

        let ones = DVector::from_element(batch.len(), 1.0);
        let c_x = full.meta_grad_weighted(&x, &batch, &ones)?;
        let fd = fd_gradient(&x, FD_STEP, |p| Ok(full.validation_loss_vector(p, &batch)?.sum()))?;
        cx_err = cx_err.max(rel_err(&c_x, &fd));

        let support = &batch.tasks[0].support;
        let v = random_direction(x.len(), rng);
        let hv = model::hvp(&cfg.model, &x, support, &v)?;
        let (_, gp) = model::loss_and_grad(&cfg.model, &(&x + &v * FD_STEP), support)?;
        let (_, gm) = model::loss_and_grad(&cfg.model, &(&x - &v * FD_STEP), support)?;
        hvp_err = hvp_err.max(rel_err(&hv, &((gp - gm) / (2.0 * FD_STEP))));
    }
    Ok(vec![
        Measurement::below("meta-gradient rel. error", grad_err, 1e-4),
        Measurement::below("c_x rel. error", cx_err, 1e-4),
        Measurement::below("hvp rel. error", hvp_err, 1e-4),
    ])
}

/// A state with some optimizer history, so Adam moments are non-trivial.
fn warmed_state(objective: &MetaObjective, cfg: &ExperimentConfig, x: &ParamVector, batch: &TaskBatch, rng: &mut ChaCha8Rng) -> Result<OptimizerState> {
    let mut st = OptimizerState::new(cfg.optimizer, x.len());
    let mut xx = x.clone();
    for _ in 0..3 {
        let u = DVector::from_fn(batch.len(), |_, _| rng.gen_range(0.0..1.0));
        let (next, s) = st.step(objective, &xx, &u, batch)?;
        xx = next;
        st = s;
    }
    Ok(st)
}

/// `‖r(δ)‖ / ‖r(δ/2)‖` for the remainder of a first- or second-order model.
/// Exact models (remainder at round-off level) report `f64::INFINITY`.
fn remainder_ratio(mut remainder: impl FnMut(f64) -> Result<f64>, scale: f64) -> Result<f64> {
    let r1 = remainder(1.0)?;
    let r2 = remainder(0.5)?;
    if r1 <= 1e-11 * scale.max(1.0) {
        return Ok(f64::INFINITY);
    }
    Ok(r1 / r2.max(f64::MIN_POSITIVE))
}

fn check_linearization(cfg: &ExperimentConfig, objective: &MetaObjective, rng: &mut ChaCha8Rng) -> Result<Vec<Measurement>> {
    let mut fu_err = 0.0f64;
    let mut ratio = f64::INFINITY;
    for _ in 0..SEEDS {
        let (x, batch, u) = random_point(cfg, rng)?;
        let st = warmed_state(objective, cfg, &x, &batch, rng)?;
        let lin = st.linearize(objective, &x, &u, &batch, LinearizationMode::Diag)?;
        let h = 1e-6;
        for k in 0..u.len() {
            let mut up = u.clone();
            let mut um = u.clone();
            up[k] += h;
            um[k] -= h;
            let (xp, _) = st.step(objective, &x, &up, &batch)?;
            let (xm, _) = st.step(objective, &x, &um, &batch)?;
            let fd = (xp - xm) / (2.0 * h);
            fu_err = fu_err.max(rel_err(&lin.f_u.column(k).into_owned(), &fd));
        }
        if cfg.model.is_linear() {
            let full = st.linearize(objective, &x, &u, &batch, LinearizationMode::Full)?;
            let (x0, _) = st.step(objective, &x, &u, &batch)?;
            let dir = random_direction(x.len(), rng) * 1e-2;
            let r = remainder_ratio(
                |s| {
                    let dx = &dir * s;
                    let (x1, _) = st.step(objective, &(&x + &dx), &u, &batch)?;
                    Ok((x1 - &x0 - full.f_x.mul_vec(&dx)).norm())
                },
                x0.norm(),
            )?;
            ratio = ratio.min(r);
        }
    }
    let mut out = vec![Measurement::below("F_u column rel. error", fu_err, 1e-4)];
    if cfg.model.is_linear() {
        out.push(Measurement::at_least("F_x Taylor remainder ratio", ratio, 3.5));
    }
    Ok(out)
}

fn check_quadraticization(cfg: &ExperimentConfig, objective: &MetaObjective, rng: &mut ChaCha8Rng) -> Result<Vec<Measurement>> {
    let (mut cx_err, mut cu_err) = (0.0f64, 0.0f64);
    let mut ratio = f64::INFINITY;
    for _ in 0..SEEDS {
        let (x, batch, u) = random_point(cfg, rng)?;
        let prior = cfg.tow.prior(batch.len());
        let q = quadraticize(objective, &x, &u, &batch, &prior, LinearizationMode::Diag)?;
        let fd = fd_gradient(&x, FD_STEP, |p| Ok(objective.validation_loss_vector(p, &batch)?.sum()))?;
        if objective.order == MetaGradOrder::Full {
            cx_err = cx_err.max(rel_err(&q.c_x, &fd));
        }
        let fd_u = fd_gradient(&u, FD_STEP, |w| cost(objective, &x, w, &batch, &prior))?;
        cu_err = cu_err.max(rel_err(&q.c_u, &fd_u));
        if cfg.model.is_linear() {
            let full = quadraticize(objective, &x, &u, &batch, &prior, LinearizationMode::Full)?;
            let c0 = cost(objective, &x, &u, &batch, &prior)?;
            let dx = random_direction(x.len(), rng) * 0.1;
            let du = random_direction(u.len(), rng) * 0.1;
            let r = remainder_ratio(
                |s| {
                    let c1 = cost(objective, &(&x + &dx * s), &(&u + &du * s), &batch, &prior)?;
                    Ok((c1 - c0 - full.model_increment(&(&dx * s), &(&du * s))).abs())
                },
                c0.abs(),
            )?;
            ratio = ratio.min(r);
        }
    }
    let mut out = Vec::new();
    if objective.order == MetaGradOrder::Full {
        out.push(Measurement::below("c_x rel. error", cx_err, 1e-4));
    }
    out.push(Measurement::below("c_u rel. error", cu_err, 1e-4));
    if cfg.model.is_linear() {
        out.push(Measurement::at_least("quadratic model remainder ratio", ratio, 3.5));
    }
    Ok(out)
}

fn check_lqr(rng: &mut ChaCha8Rng) -> Result<Vec<Measurement>> {
    let cfg = IlqrConfig {
        n_ilqr: 1,
        value_mode: ValueMode::FullV,
        nonnegative_actions: false,
        ..IlqrConfig::default()
    };
    // One active step x2 = x1 + u, cost ½x2² + ½u², x1 = 1: u* = −1/2.
    let one = nalgebra::DMatrix::from_element(1, 1, 1.0);
    let zero = nalgebra::DMatrix::zeros(1, 1);
    let scalar = LqProblem {
        a: vec![one.clone(), one.clone()],
        b: vec![one.clone(), zero.clone()],
        d: vec![DVector::zeros(1); 2],
        q: vec![zero, one.clone()],
        q_lin: vec![DVector::zeros(1); 2],
        r: vec![one.clone(), one],
        r_lin: vec![DVector::zeros(1); 2],
    };
    let x1 = DVector::from_element(1, 1.0);
    let oracle = lqr_oracle(&scalar, &x1)?;
    let sol = ilqr_solve(&scalar, &StartState { x: x1, snapshot: () }, vec![DVector::zeros(1); 2], &cfg)?;
    let scalar_err = (oracle[0][0] + 0.5).abs().max((sol.actions()[0][0] + 0.5).abs());

    let mut random_err = 0.0f64;
    for _ in 0..SEEDS {
        let n = rng.gen_range(1..=6);
        let m = rng.gen_range(1..=3);
        let t = rng.gen_range(1..=8);
        let p = LqProblem::random(rng, n, m, t);
        let x1 = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        let oracle = lqr_oracle(&p, &x1)?;
        let sol = ilqr_solve(&p, &StartState { x: x1, snapshot: () }, vec![DVector::zeros(m); t], &cfg)?;
        for (a, b) in sol.actions().iter().zip(&oracle) {
            random_err = random_err.max((a - b).amax());
        }
    }
    Ok(vec![
        Measurement::below("scalar problem action error", scalar_err, 1e-8),
        Measurement::below("random LQ action error", random_err, 1e-8),
    ])
}

fn check_theta_sign(cfg: &ExperimentConfig, objective: &MetaObjective, rng: &mut ChaCha8Rng) -> Result<Vec<Measurement>> {
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..SEEDS {
        let x = cfg.model.init_params(rng);
        let batches = (0..cfg.training.horizon)
            .map(|_| sample_task_batch(&cfg.environment, rng, cfg.training.batch_size))
            .collect::<Result<Vec<_>>>()?;
        let m = cfg.training.batch_size;
        let prior = cfg.tow.prior(m);
        let problem = TowProblem::new(objective, &batches, prior, LinearizationMode::Diag)?;
        let actions: Vec<_> = (0..batches.len())
            .map(|_| DVector::from_fn(m, |_, _| rng.gen_range(0.5..1.5) / m as f64))
            .collect();
        let nominal = rollout(&problem, &x, &OptimizerState::new(cfg.optimizer, x.len()), &actions)?;
        let bp = ilqr_backward(&problem, &nominal, cfg.tow.ilqr.value_mode)?;
        if bp.max_qu_norm > 1e-8 {
            worst = worst.max(bp.theta1);
        }
    }
    if worst == f64::NEG_INFINITY {
        return Err(Error::numeric("every sampled nominal was stationary"));
    }
    Ok(vec![Measurement::below("largest θ₁ on non-stationary nominals", worst, 0.0)])
}
