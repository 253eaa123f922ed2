//! Inner-loop adaptation and the per-task validation losses `ℓ(x)` with their
//! derivatives w.r.t. the meta-parameter.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::autodiff::{self, Dual, Real};
use crate::error::{Error, Result};
use crate::model::{self, GaussNewtonDiag, ModelSpec, ParamVector};
use crate::tasks::{Sample, Target, Task, TaskBatch};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptationVariant {
    /// MAML-style gradient steps on the support set.
    Gradient,
    /// Prototypes from support embeddings; no inner gradient step.
    Prototypical,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InnerLoopConfig {
    pub gamma: f64,
    #[serde(default = "one")]
    pub n_inner_steps: usize,
    #[serde(default = "gradient_variant")]
    pub variant: AdaptationVariant,
}

fn one() -> usize {
    1
}

fn gradient_variant() -> AdaptationVariant {
    AdaptationVariant::Gradient
}

impl InnerLoopConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(Error::config("inner learning rate gamma must be finite and >= 0"));
        }
        if self.n_inner_steps == 0 {
            return Err(Error::config("n_inner_steps must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetaGradOrder {
    /// Treats `dφ/dx = I`.
    FirstOrder,
    /// Differentiates through every inner step.
    #[default]
    Full,
}

/// Per-task validation losses of one mini-batch.
#[derive(Clone, Debug, PartialEq)]
pub struct LossVector(DVector<f64>);

impl LossVector {
    pub fn values(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }
}

impl From<DVector<f64>> for LossVector {
    fn from(v: DVector<f64>) -> Self {
        LossVector(v)
    }
}

/// `uᵀℓ`.
pub fn weighted_loss(u: &DVector<f64>, ell: &LossVector) -> Result<f64> {
    if u.len() != ell.len() {
        return Err(Error::argument(format!(
            "weight vector has length {}, loss vector {}",
            u.len(),
            ell.len()
        )));
    }
    Ok(u.dot(ell.values()))
}

// ---------------------------------------------------------------------------
// Generic kernels.

pub(crate) fn adapt_t<T: Real>(spec: &ModelSpec, x: &[T], support: &[Sample], cfg: &InnerLoopConfig) -> Vec<T> {
    let mut phi = x.to_vec();
    for _ in 0..cfg.n_inner_steps {
        let (_, g) = model::loss_grad_t(spec, &phi, support);
        for (p, gi) in phi.iter_mut().zip(g) {
            *p -= gi.scale(cfg.gamma);
        }
    }
    phi
}

fn class_of(s: &Sample) -> usize {
    match s.target {
        Target::Class(c) => c,
        Target::Value(_) => unreachable!("validated"),
    }
}

/// Prototypical loss and gradient: softmax over negative squared distances to
/// class-mean support embeddings, averaged over the query set.
fn proto_loss_grad_t<T: Real>(spec: &ModelSpec, x: &[T], task: &Task, want_grad: bool) -> (T, Vec<T>) {
    let n_classes = task.support.iter().chain(&task.query).map(class_of).max().unwrap_or(0) + 1;
    let support_acts: Vec<Vec<Vec<T>>> = task
        .support
        .iter()
        .map(|s| model::forward_cache(spec, x, &s.input))
        .collect();
    let emb_dim = spec.out_dim();
    let mut counts = vec![0usize; n_classes];
    let mut protos = vec![vec![T::zero(); emb_dim]; n_classes];
    for (s, acts) in task.support.iter().zip(&support_acts) {
        let k = class_of(s);
        counts[k] += 1;
        for (p, &e) in protos[k].iter_mut().zip(acts.last().expect("output")) {
            *p += e;
        }
    }
    for (proto, &n) in protos.iter_mut().zip(&counts) {
        for p in proto.iter_mut() {
            *p = p.scale(1.0 / n as f64);
        }
    }

    let inv_q = 1.0 / task.query.len() as f64;
    let mut total = T::zero();
    let mut grad = vec![T::zero(); x.len()];
    let mut proto_cot = vec![vec![T::zero(); emb_dim]; n_classes];
    for q in &task.query {
        let acts = model::forward_cache(spec, x, &q.input);
        let e = acts.last().expect("output");
        let logits: Vec<T> = protos
            .iter()
            .map(|c| {
                let mut d = T::zero();
                for (&a, &b) in e.iter().zip(c) {
                    let diff = a - b;
                    d += diff * diff;
                }
                -d
            })
            .collect();
        let y = class_of(q);
        let (lse, probs) = model::log_softmax_parts(&logits);
        let value = lse - logits[y];
        if matches!(spec.loss_clip, Some(c) if value.re() > c) {
            total += T::from_f64(spec.loss_clip.unwrap_or_default());
            continue;
        }
        total += value;
        if !want_grad {
            continue;
        }
        let mut e_cot = vec![T::zero(); emb_dim];
        for (k, proto) in protos.iter().enumerate() {
            let mut w = probs[k];
            if k == y {
                w -= T::one();
            }
            // ∂logit_k/∂e = −2(e − c_k), ∂logit_k/∂c_k = 2(e − c_k)
            for j in 0..emb_dim {
                let diff = (e[j] - proto[j]).scale(2.0);
                e_cot[j] -= w * diff;
                proto_cot[k][j] += (w * diff).scale(inv_q);
            }
        }
        for c in &mut e_cot {
            *c = c.scale(inv_q);
        }
        model::vjp_into(spec, x, &acts, &e_cot, &mut grad);
    }
    if want_grad {
        for (s, acts) in task.support.iter().zip(&support_acts) {
            let k = class_of(s);
            let cot: Vec<T> = proto_cot[k].iter().map(|c| c.scale(1.0 / counts[k] as f64)).collect();
            model::vjp_into(spec, x, acts, &cot, &mut grad);
        }
    }
    (total.scale(inv_q), grad)
}

/// Validation loss of one task and its meta-gradient.
pub(crate) fn task_loss_grad_t<T: Real>(
    spec: &ModelSpec,
    x: &[T],
    task: &Task,
    cfg: &InnerLoopConfig,
    order: MetaGradOrder,
) -> (T, Vec<T>) {
    match cfg.variant {
        AdaptationVariant::Prototypical => proto_loss_grad_t(spec, x, task, true),
        AdaptationVariant::Gradient => {
            let mut path = Vec::with_capacity(cfg.n_inner_steps + 1);
            path.push(x.to_vec());
            for _ in 0..cfg.n_inner_steps {
                let phi = path.last().expect("non-empty");
                let (_, g) = model::loss_grad_t(spec, phi, &task.support);
                let next: Vec<T> = phi.iter().zip(g).map(|(&p, gi)| p - gi.scale(cfg.gamma)).collect();
                path.push(next);
            }
            let (l, mut g) = model::loss_grad_t(spec, path.last().expect("non-empty"), &task.query);
            if order == MetaGradOrder::Full {
                // g ← (I − γ H_s(φ_k)) g, innermost step last.
                for phi in path[..cfg.n_inner_steps].iter().rev() {
                    let hv = model::hvp_t(spec, phi, &task.support, &g);
                    for (gi, h) in g.iter_mut().zip(hv) {
                        *gi -= h.scale(cfg.gamma);
                    }
                }
            }
            (l, g)
        }
    }
}

fn task_loss_t<T: Real>(spec: &ModelSpec, x: &[T], task: &Task, cfg: &InnerLoopConfig) -> T {
    match cfg.variant {
        AdaptationVariant::Prototypical => proto_loss_grad_t(spec, x, task, false).0,
        AdaptationVariant::Gradient => {
            let phi = adapt_t(spec, x, &task.support, cfg);
            model::loss_t(spec, &phi, &task.query)
        }
    }
}

// ---------------------------------------------------------------------------

/// The model, its inner loop and the meta-gradient order: everything needed to
/// evaluate `ℓ(x)` and its derivatives for a batch of tasks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaObjective {
    pub model: ModelSpec,
    pub inner: InnerLoopConfig,
    #[serde(default)]
    pub order: MetaGradOrder,
}

impl MetaObjective {
    pub fn new(model: ModelSpec, inner: InnerLoopConfig, order: MetaGradOrder) -> Self {
        MetaObjective { model, inner, order }
    }

    pub fn with_order(&self, order: MetaGradOrder) -> Self {
        MetaObjective {
            order,
            ..self.clone()
        }
    }

    pub fn n_params(&self) -> usize {
        self.model.n_params()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.inner.validate()
    }

    fn check_task(&self, task: &Task) -> Result<()> {
        if task.support.is_empty() {
            return Err(Error::argument("task has an empty support set"));
        }
        self.model.check_samples(&task.support)?;
        self.model.check_samples(&task.query)?;
        if self.inner.variant == AdaptationVariant::Prototypical {
            let mut seen = Vec::new();
            for s in task.support.iter().chain(&task.query) {
                match s.target {
                    Target::Class(c) => seen.push(c),
                    Target::Value(_) => {
                        return Err(Error::argument("prototypical adaptation needs class targets"))
                    }
                }
            }
            let n = seen.iter().max().map_or(0, |m| m + 1);
            for k in 0..n {
                if !task.support.iter().any(|s| s.target == Target::Class(k)) {
                    return Err(Error::argument(format!("class {k} has no support example")));
                }
            }
        }
        Ok(())
    }

    fn check(&self, x: &ParamVector, batch: &TaskBatch) -> Result<()> {
        self.model.check_params(x.len())?;
        if batch.is_empty() {
            return Err(Error::argument("empty task batch"));
        }
        batch.tasks.iter().try_for_each(|t| self.check_task(t))
    }

    /// `φ(x)`: the task-specific parameters. Identity for the prototypical variant.
    pub fn inner_adapt(&self, x: &ParamVector, task: &Task) -> Result<ParamVector> {
        self.model.check_params(x.len())?;
        self.check_task(task)?;
        Ok(match self.inner.variant {
            AdaptationVariant::Gradient => {
                DVector::from_vec(adapt_t(&self.model, x.as_slice(), &task.support, &self.inner))
            }
            AdaptationVariant::Prototypical => x.clone(),
        })
    }

    pub fn task_loss(&self, x: &ParamVector, task: &Task) -> Result<f64> {
        self.model.check_params(x.len())?;
        self.check_task(task)?;
        Ok(task_loss_t(&self.model, x.as_slice(), task, &self.inner))
    }

    /// `ℓ(x) ∈ R^M`.
    pub fn validation_loss_vector(&self, x: &ParamVector, batch: &TaskBatch) -> Result<LossVector> {
        self.check(x, batch)?;
        let values = batch
            .tasks
            .iter()
            .map(|t| task_loss_t(&self.model, x.as_slice(), t, &self.inner))
            .collect::<Vec<_>>();
        Ok(LossVector(DVector::from_vec(values)))
    }

    /// `ℓ(x)` together with its Jacobian (row i = `∇ₓℓ_i`).
    pub fn loss_and_jacobian(&self, x: &ParamVector, batch: &TaskBatch) -> Result<(LossVector, DMatrix<f64>)> {
        self.check(x, batch)?;
        let d = x.len();
        let mut jac = DMatrix::zeros(batch.len(), d);
        let mut losses = DVector::zeros(batch.len());
        for (i, task) in batch.tasks.iter().enumerate() {
            let (l, g) = task_loss_grad_t(&self.model, x.as_slice(), task, &self.inner, self.order);
            losses[i] = l;
            for (j, v) in g.into_iter().enumerate() {
                jac[(i, j)] = v;
            }
        }
        Ok((LossVector(losses), jac))
    }

    pub fn meta_loss_jacobian(&self, x: &ParamVector, batch: &TaskBatch) -> Result<DMatrix<f64>> {
        Ok(self.loss_and_jacobian(x, batch)?.1)
    }

    /// `∇ₓ[uᵀℓ(x)]`, accumulated in task order.
    pub fn meta_grad_weighted(&self, x: &ParamVector, batch: &TaskBatch, u: &DVector<f64>) -> Result<DVector<f64>> {
        if u.len() != batch.len() {
            return Err(Error::argument("weight vector length differs from batch size"));
        }
        let jac = self.meta_loss_jacobian(x, batch)?;
        Ok(weighted_rows(&jac, u))
    }

    /// Gauss-Newton diagonal of each task's query loss at its adapted
    /// parameters, treating `dφ/dx` as the identity.
    pub fn gauss_newton_diags(&self, x: &ParamVector, batch: &TaskBatch) -> Result<Vec<GaussNewtonDiag>> {
        self.check(x, batch)?;
        batch
            .tasks
            .iter()
            .map(|task| match self.inner.variant {
                AdaptationVariant::Gradient => {
                    let phi = DVector::from_vec(adapt_t(&self.model, x.as_slice(), &task.support, &self.inner));
                    model::gauss_newton_diag(&self.model, &phi, &task.query)
                }
                AdaptationVariant::Prototypical => Ok(proto_gauss_newton_diag(&self.model, x, task)),
            })
            .collect()
    }

    /// Exact Jacobian of `x ↦ ∇ₓ[wᵀℓ(x)]` (the Hessian of the weighted loss
    /// under `Full` order). Linear models only: it costs `D` gradient sweeps.
    pub fn weighted_grad_jacobian(&self, x: &ParamVector, batch: &TaskBatch, w: &DVector<f64>) -> Result<DMatrix<f64>> {
        if !self.model.is_linear() {
            return Err(Error::Unsupported(
                "dense second derivatives of the meta-loss need a linear model".into(),
            ));
        }
        self.check(x, batch)?;
        if w.len() != batch.len() {
            return Err(Error::argument("weight vector length differs from batch size"));
        }
        let d = x.len();
        let mut out = DMatrix::zeros(d, d);
        let mut dir = vec![0.0; d];
        for j in 0..d {
            dir[j] = 1.0;
            let seeded = autodiff::seed(x.as_slice(), &dir);
            dir[j] = 0.0;
            let mut col = vec![0.0; d];
            for (task, &wi) in batch.tasks.iter().zip(w.iter()) {
                let (_, g) = task_loss_grad_t::<Dual<f64>>(&self.model, &seeded, task, &self.inner, self.order);
                for (c, gi) in col.iter_mut().zip(g) {
                    *c += wi * gi.eps;
                }
            }
            for (i, v) in col.into_iter().enumerate() {
                out[(i, j)] = v;
            }
        }
        Ok(out)
    }

    /// Query loss and accuracy after adaptation (accuracy is `None` for regression).
    pub fn evaluate_task(&self, x: &ParamVector, task: &Task) -> Result<(f64, Option<f64>)> {
        self.model.check_params(x.len())?;
        self.check_task(task)?;
        match self.inner.variant {
            AdaptationVariant::Gradient => {
                let phi = DVector::from_vec(adapt_t(&self.model, x.as_slice(), &task.support, &self.inner));
                let l = model::loss_t(&self.model, phi.as_slice(), &task.query);
                Ok((l, model::accuracy(&self.model, &phi, &task.query)?))
            }
            AdaptationVariant::Prototypical => {
                let l = task_loss_t(&self.model, x.as_slice(), task, &self.inner);
                Ok((l, Some(proto_accuracy(&self.model, x, task))))
            }
        }
    }
}

pub(crate) fn weighted_rows(jac: &DMatrix<f64>, u: &DVector<f64>) -> DVector<f64> {
    let mut g = DVector::zeros(jac.ncols());
    for (i, &ui) in u.iter().enumerate() {
        for j in 0..jac.ncols() {
            g[j] += ui * jac[(i, j)];
        }
    }
    g
}

fn prototypes(spec: &ModelSpec, x: &ParamVector, task: &Task) -> (Vec<DVector<f64>>, Vec<DMatrix<f64>>) {
    let n_classes = task.support.iter().chain(&task.query).map(class_of).max().unwrap_or(0) + 1;
    let e = spec.out_dim();
    let d = x.len();
    let mut protos = vec![DVector::zeros(e); n_classes];
    let mut jacs = vec![DMatrix::zeros(e, d); n_classes];
    let mut counts = vec![0usize; n_classes];
    for s in &task.support {
        let k = class_of(s);
        counts[k] += 1;
        protos[k] += DVector::from_vec(model::forward_t(spec, x.as_slice(), &s.input));
        jacs[k] += model::output_jacobian(spec, x.as_slice(), &s.input);
    }
    for k in 0..n_classes {
        protos[k] /= counts[k] as f64;
        jacs[k] /= counts[k] as f64;
    }
    (protos, jacs)
}

fn proto_gauss_newton_diag(spec: &ModelSpec, x: &ParamVector, task: &Task) -> GaussNewtonDiag {
    let (protos, proto_jacs) = prototypes(spec, x, task);
    let d = x.len();
    let mut diag = DVector::zeros(d);
    for q in &task.query {
        let e = DVector::from_vec(model::forward_t(spec, x.as_slice(), &q.input));
        let je = model::output_jacobian(spec, x.as_slice(), &q.input);
        let logits: Vec<f64> = protos.iter().map(|c| -(&e - c).norm_squared()).collect();
        let value = {
            let (lse, _) = model::log_softmax_parts(&logits);
            lse - logits[class_of(q)]
        };
        if matches!(spec.loss_clip, Some(c) if value > c) {
            continue;
        }
        let (_, p) = model::log_softmax_parts(&logits);
        let mut jl = DMatrix::zeros(protos.len(), d);
        for (k, c) in protos.iter().enumerate() {
            let row = (&e - c).transpose() * (&je - &proto_jacs[k]) * -2.0;
            jl.set_row(k, &row);
        }
        let p = DVector::from_vec(p);
        let h = DMatrix::from_diagonal(&p) - &p * p.transpose();
        let hj = &h * &jl;
        for j in 0..d {
            diag[j] += jl.column(j).dot(&hj.column(j)).max(0.0);
        }
    }
    diag /= task.query.len() as f64;
    GaussNewtonDiag::from_raw(diag)
}

fn proto_accuracy(spec: &ModelSpec, x: &ParamVector, task: &Task) -> f64 {
    let (protos, _) = prototypes(spec, x, task);
    let correct = task
        .query
        .iter()
        .filter(|q| {
            let e = DVector::from_vec(model::forward_t(spec, x.as_slice(), &q.input));
            let scores: Vec<f64> = protos.iter().map(|c| -(&e - c).norm_squared()).collect();
            model::argmax(&scores) == class_of(q)
        })
        .count();
    correct as f64 / task.query.len() as f64
}
