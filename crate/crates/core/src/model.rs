//! Differentiable predictors, losses and their second-order quantities.
//!
//! Losses are mean-reduced over the batch. MSE uses the `½‖f − t‖²` convention.
//! Parameters are flattened layer by layer: row-major weight matrix, then bias
//! (the `Linear` architecture has no bias).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::autodiff::{self, Dual, Real};
use crate::error::{Error, Result};
use crate::tasks::{Sample, Target};

pub type ParamVector = DVector<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Architecture {
    /// `f(s) = W s`, no bias.
    Linear { in_dim: usize, out_dim: usize },
    /// Fully connected; `layer_sizes` lists input, hidden and output widths.
    Mlp {
        layer_sizes: Vec<usize>,
        activation: Activation,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    CrossEntropy,
    /// Binary cross-entropy on a single sigmoid output.
    Logistic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub architecture: Architecture,
    pub loss: LossKind,
    #[serde(default)]
    pub loss_clip: Option<f64>,
}

#[derive(Clone, Copy, Debug)]
struct Layer {
    n_in: usize,
    n_out: usize,
    offset: usize,
    bias: bool,
}

impl Layer {
    fn weight(&self, row: usize, col: usize) -> usize {
        self.offset + row * self.n_in + col
    }

    fn bias_index(&self, row: usize) -> usize {
        self.offset + self.n_out * self.n_in + row
    }

    fn size(&self) -> usize {
        self.n_out * self.n_in + if self.bias { self.n_out } else { 0 }
    }
}

impl ModelSpec {
    pub fn linear(in_dim: usize, out_dim: usize, loss: LossKind) -> Self {
        ModelSpec {
            architecture: Architecture::Linear { in_dim, out_dim },
            loss,
            loss_clip: None,
        }
    }

    pub fn mlp(layer_sizes: Vec<usize>, activation: Activation, loss: LossKind) -> Self {
        ModelSpec {
            architecture: Architecture::Mlp {
                layer_sizes,
                activation,
            },
            loss,
            loss_clip: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match &self.architecture {
            Architecture::Linear { in_dim, out_dim } => {
                if *in_dim == 0 || *out_dim == 0 {
                    return Err(Error::config("linear dimensions must be >= 1"));
                }
            }
            Architecture::Mlp { layer_sizes, .. } => {
                if layer_sizes.len() < 2 || layer_sizes.iter().any(|&n| n == 0) {
                    return Err(Error::config(
                        "MLP layer_sizes needs input and output widths, all >= 1",
                    ));
                }
            }
        }
        if let Some(c) = self.loss_clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::config("loss_clip must be a positive finite number"));
            }
        }
        if self.loss == LossKind::Logistic && self.out_dim() != 1 {
            return Err(Error::config("logistic loss needs a single output"));
        }
        if self.loss == LossKind::CrossEntropy && self.out_dim() < 2 {
            return Err(Error::config("cross-entropy needs at least two outputs"));
        }
        Ok(())
    }

    pub fn in_dim(&self) -> usize {
        match &self.architecture {
            Architecture::Linear { in_dim, .. } => *in_dim,
            Architecture::Mlp { layer_sizes, .. } => layer_sizes[0],
        }
    }

    pub fn out_dim(&self) -> usize {
        match &self.architecture {
            Architecture::Linear { out_dim, .. } => *out_dim,
            Architecture::Mlp { layer_sizes, .. } => *layer_sizes.last().unwrap_or(&0),
        }
    }

    pub fn is_linear(&self) -> bool {
        matches!(self.architecture, Architecture::Linear { .. })
    }

    pub fn n_params(&self) -> usize {
        self.layers().iter().map(Layer::size).sum()
    }

    fn activation(&self) -> Option<Activation> {
        match &self.architecture {
            Architecture::Linear { .. } => None,
            Architecture::Mlp { activation, .. } => Some(*activation),
        }
    }

    fn layers(&self) -> Vec<Layer> {
        match &self.architecture {
            Architecture::Linear { in_dim, out_dim } => vec![Layer {
                n_in: *in_dim,
                n_out: *out_dim,
                offset: 0,
                bias: false,
            }],
            Architecture::Mlp { layer_sizes, .. } => {
                let mut offset = 0;
                layer_sizes
                    .windows(2)
                    .map(|w| {
                        let layer = Layer {
                            n_in: w[0],
                            n_out: w[1],
                            offset,
                            bias: true,
                        };
                        offset += layer.size();
                        layer
                    })
                    .collect()
            }
        }
    }

    /// Glorot-scaled Gaussian weights, zero biases.
    pub fn init_params<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> ParamVector {
        use rand_distr::{Distribution, Normal};
        let mut p = DVector::zeros(self.n_params());
        for layer in self.layers() {
            let std = (2.0 / (layer.n_in + layer.n_out) as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("finite std");
            for r in 0..layer.n_out {
                for c in 0..layer.n_in {
                    p[layer.weight(r, c)] = normal.sample(rng);
                }
            }
        }
        p
    }

    pub(crate) fn check_params(&self, len: usize) -> Result<()> {
        if len != self.n_params() {
            return Err(Error::argument(format!(
                "parameter vector has length {len}, model expects {}",
                self.n_params()
            )));
        }
        Ok(())
    }

    pub(crate) fn check_samples(&self, samples: &[Sample]) -> Result<()> {
        if samples.is_empty() {
            return Err(Error::argument("empty batch"));
        }
        for s in samples {
            if s.input.len() != self.in_dim() {
                return Err(Error::argument(format!(
                    "input has dimension {}, model expects {}",
                    s.input.len(),
                    self.in_dim()
                )));
            }
            match (&s.target, self.loss) {
                (Target::Class(c), LossKind::CrossEntropy | LossKind::Mse)
                    if *c >= self.out_dim() =>
                {
                    return Err(Error::argument(format!(
                        "class index {c} out of range for {} outputs",
                        self.out_dim()
                    )));
                }
                (Target::Class(c), LossKind::Logistic) if *c > 1 => {
                    return Err(Error::argument(format!("logistic target {c} not in {{0, 1}}")));
                }
                (Target::Value(v), LossKind::Mse) if v.len() != self.out_dim() => {
                    return Err(Error::argument(format!(
                        "target has dimension {}, model outputs {}",
                        v.len(),
                        self.out_dim()
                    )));
                }
                (Target::Value(_), LossKind::CrossEntropy | LossKind::Logistic) => {
                    return Err(Error::argument("classification loss needs class targets"));
                }
                _ => {}
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Generic kernels. Callers validate shapes first.

/// Activations of every layer; the last entry is the (pre-nonlinearity) output.
pub(crate) fn forward_cache<T: Real>(spec: &ModelSpec, p: &[T], input: &[f64]) -> Vec<Vec<T>> {
    let layers = spec.layers();
    let act = spec.activation();
    let mut acts = Vec::with_capacity(layers.len() + 1);
    acts.push(autodiff::from_f64_slice::<T>(input));
    for (l, layer) in layers.iter().enumerate() {
        let a_in = &acts[l];
        let last = l + 1 == layers.len();
        let out: Vec<T> = (0..layer.n_out)
            .map(|r| {
                let mut z = if layer.bias {
                    p[layer.bias_index(r)]
                } else {
                    T::zero()
                };
                for (c, &a) in a_in.iter().enumerate() {
                    z += p[layer.weight(r, c)] * a;
                }
                match (last, act) {
                    (false, Some(Activation::Tanh)) => z.tanh(),
                    (false, Some(Activation::Relu)) => z.relu(),
                    _ => z,
                }
            })
            .collect();
        acts.push(out);
    }
    acts
}

pub(crate) fn forward_t<T: Real>(spec: &ModelSpec, p: &[T], input: &[f64]) -> Vec<T> {
    forward_cache(spec, p, input).pop().unwrap_or_default()
}

/// Accumulates `cotᵀ ∂f/∂p` into `grad`.
pub(crate) fn vjp_into<T: Real>(
    spec: &ModelSpec,
    p: &[T],
    acts: &[Vec<T>],
    cot: &[T],
    grad: &mut [T],
) {
    let layers = spec.layers();
    let act = spec.activation();
    let mut delta = cot.to_vec();
    for (l, layer) in layers.iter().enumerate().rev() {
        let a_in = &acts[l];
        for r in 0..layer.n_out {
            let d = delta[r];
            for (c, &a) in a_in.iter().enumerate() {
                grad[layer.weight(r, c)] += d * a;
            }
            if layer.bias {
                grad[layer.bias_index(r)] += d;
            }
        }
        if l == 0 {
            break;
        }
        let mut back = vec![T::zero(); layer.n_in];
        for (r, &d) in delta.iter().enumerate() {
            for (c, b) in back.iter_mut().enumerate() {
                *b += p[layer.weight(r, c)] * d;
            }
        }
        for (b, &a) in back.iter_mut().zip(a_in) {
            *b = match act {
                Some(Activation::Tanh) => *b * (T::one() - a * a),
                Some(Activation::Relu) => {
                    if a.re() > 0.0 {
                        *b
                    } else {
                        T::zero()
                    }
                }
                None => *b,
            };
        }
        delta = back;
    }
}

/// Per-sample loss and its derivative w.r.t. the network output.
pub(crate) fn output_loss<T: Real>(
    loss: LossKind,
    clip: Option<f64>,
    f: &[T],
    target: &Target,
) -> (T, Vec<T>) {
    let (value, dl) = match loss {
        LossKind::Mse => {
            let t: Vec<f64> = match target {
                Target::Value(v) => v.clone(),
                Target::Class(c) => (0..f.len()).map(|k| if k == *c { 1.0 } else { 0.0 }).collect(),
            };
            let diff: Vec<T> = f.iter().zip(&t).map(|(&fi, &ti)| fi - T::from_f64(ti)).collect();
            let mut l = T::zero();
            for &d in &diff {
                l += d * d;
            }
            (l.scale(0.5), diff)
        }
        LossKind::CrossEntropy => {
            let c = match target {
                Target::Class(c) => *c,
                Target::Value(_) => unreachable!("validated"),
            };
            let (lse, probs) = log_softmax_parts(f);
            let mut dl = probs;
            dl[c] -= T::one();
            (lse - f[c], dl)
        }
        LossKind::Logistic => {
            let y = match target {
                Target::Class(c) => *c as f64,
                Target::Value(_) => unreachable!("validated"),
            };
            // ℓ = softplus(z) − y·z, computed without overflow.
            let z = f[0];
            let softplus = if z.re() > 0.0 {
                z + ((-z).exp() + T::one()).ln()
            } else {
                (z.exp() + T::one()).ln()
            };
            let sig = T::one() / (T::one() + (-z).exp());
            (softplus - z.scale(y), vec![sig - T::from_f64(y)])
        }
    };
    match clip {
        Some(c) if value.re() > c => (T::from_f64(c), vec![T::zero(); f.len()]),
        _ => (value, dl),
    }
}

/// `(log Σ exp f, softmax f)` with the max-shift applied.
pub(crate) fn log_softmax_parts<T: Real>(f: &[T]) -> (T, Vec<T>) {
    let m = f
        .iter()
        .copied()
        .fold(f[0], |a, b| if b.re() > a.re() { b } else { a });
    let exps: Vec<T> = f.iter().map(|&v| (v - m).exp()).collect();
    let mut s = T::zero();
    for &e in &exps {
        s += e;
    }
    let lse = m + s.ln();
    let probs = exps.into_iter().map(|e| e / s).collect();
    (lse, probs)
}

/// Mean loss and gradient over `samples`.
pub(crate) fn loss_grad_t<T: Real>(spec: &ModelSpec, p: &[T], samples: &[Sample]) -> (T, Vec<T>) {
    let mut grad = vec![T::zero(); p.len()];
    let mut total = T::zero();
    for s in samples {
        let acts = forward_cache(spec, p, &s.input);
        let out = acts.last().expect("output layer");
        let (l, dl) = output_loss(spec.loss, spec.loss_clip, out, &s.target);
        total += l;
        vjp_into(spec, p, &acts, &dl, &mut grad);
    }
    let inv = 1.0 / samples.len() as f64;
    for g in &mut grad {
        *g = g.scale(inv);
    }
    (total.scale(inv), grad)
}

pub(crate) fn loss_t<T: Real>(spec: &ModelSpec, p: &[T], samples: &[Sample]) -> T {
    let mut total = T::zero();
    for s in samples {
        let out = forward_t(spec, p, &s.input);
        total += output_loss(spec.loss, spec.loss_clip, &out, &s.target).0;
    }
    total.scale(1.0 / samples.len() as f64)
}

/// Exact Hessian-vector product of the mean loss at `p` (forward-over-reverse).
pub(crate) fn hvp_t<T: Real>(spec: &ModelSpec, p: &[T], samples: &[Sample], v: &[T]) -> Vec<T> {
    let seeded = autodiff::seed(p, v);
    let (_, g) = loss_grad_t::<Dual<T>>(spec, &seeded, samples);
    autodiff::tangents(&g)
}

/// Output Jacobian `∂f/∂p` (rows = outputs) at a single input.
pub(crate) fn output_jacobian(spec: &ModelSpec, p: &[f64], input: &[f64]) -> DMatrix<f64> {
    let acts = forward_cache(spec, p, input);
    let c = spec.out_dim();
    let mut jac = DMatrix::zeros(c, p.len());
    let mut row = vec![0.0; p.len()];
    let mut cot = vec![0.0; c];
    for k in 0..c {
        row.iter_mut().for_each(|r| *r = 0.0);
        cot.iter_mut().for_each(|v| *v = 0.0);
        cot[k] = 1.0;
        vjp_into(spec, p, &acts, &cot, &mut row);
        for (j, &r) in row.iter().enumerate() {
            jac[(k, j)] = r;
        }
    }
    jac
}

/// Hessian of the per-sample loss w.r.t. the network output (`H_σ`).
pub(crate) fn output_hessian(spec: &ModelSpec, f: &[f64], target: &Target) -> DMatrix<f64> {
    let c = f.len();
    let (value, _) = output_loss(spec.loss, None, f, target);
    if matches!(spec.loss_clip, Some(clip) if value > clip) {
        return DMatrix::zeros(c, c);
    }
    match spec.loss {
        LossKind::Mse => DMatrix::identity(c, c),
        LossKind::CrossEntropy => {
            let (_, p) = log_softmax_parts(f);
            let p = DVector::from_vec(p);
            DMatrix::from_diagonal(&p) - &p * p.transpose()
        }
        LossKind::Logistic => {
            let s = 1.0 / (1.0 + (-f[0]).exp());
            DMatrix::from_element(1, 1, s * (1.0 - s))
        }
    }
}

// ---------------------------------------------------------------------------
// Public f64 API.

/// Diagonal of the Gauss-Newton matrix; entries are non-negative.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussNewtonDiag(DVector<f64>);

impl GaussNewtonDiag {
    pub(crate) fn from_raw(values: DVector<f64>) -> Self {
        GaussNewtonDiag(values)
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DVector<f64> {
        self.0
    }
}

/// Batched outputs, one vector per input.
pub fn forward(spec: &ModelSpec, params: &ParamVector, inputs: &[Vec<f64>]) -> Result<Vec<DVector<f64>>> {
    spec.check_params(params.len())?;
    inputs
        .iter()
        .map(|x| {
            if x.len() != spec.in_dim() {
                return Err(Error::argument(format!(
                    "input has dimension {}, model expects {}",
                    x.len(),
                    spec.in_dim()
                )));
            }
            Ok(DVector::from_vec(forward_t(spec, params.as_slice(), x)))
        })
        .collect()
}

/// Embeddings for metric-based learners: the final-layer output.
pub fn embed(spec: &ModelSpec, params: &ParamVector, inputs: &[Vec<f64>]) -> Result<Vec<DVector<f64>>> {
    forward(spec, params, inputs)
}

pub fn loss_and_grad(spec: &ModelSpec, params: &ParamVector, batch: &[Sample]) -> Result<(f64, DVector<f64>)> {
    spec.check_params(params.len())?;
    spec.check_samples(batch)?;
    let (l, g) = loss_grad_t::<f64>(spec, params.as_slice(), batch);
    Ok((l, DVector::from_vec(g)))
}

pub fn loss(spec: &ModelSpec, params: &ParamVector, batch: &[Sample]) -> Result<f64> {
    spec.check_params(params.len())?;
    spec.check_samples(batch)?;
    Ok(loss_t::<f64>(spec, params.as_slice(), batch))
}

pub fn hvp(spec: &ModelSpec, params: &ParamVector, batch: &[Sample], vector: &DVector<f64>) -> Result<DVector<f64>> {
    spec.check_params(params.len())?;
    spec.check_params(vector.len())?;
    spec.check_samples(batch)?;
    Ok(DVector::from_vec(hvp_t::<f64>(
        spec,
        params.as_slice(),
        batch,
        vector.as_slice(),
    )))
}

/// `diag(mean_i J_iᵀ H_σi J_i)`.
pub fn gauss_newton_diag(spec: &ModelSpec, params: &ParamVector, batch: &[Sample]) -> Result<GaussNewtonDiag> {
    spec.check_params(params.len())?;
    spec.check_samples(batch)?;
    let p = params.as_slice();
    let mut diag = DVector::zeros(p.len());
    for s in batch {
        let jac = output_jacobian(spec, p, &s.input);
        let f: Vec<f64> = forward_t(spec, p, &s.input);
        let h = output_hessian(spec, &f, &s.target);
        let hj = &h * &jac;
        for d in 0..p.len() {
            diag[d] += jac.column(d).dot(&hj.column(d));
        }
    }
    diag /= batch.len() as f64;
    // Rounding can leave tiny negatives on the CE path.
    diag.iter_mut().for_each(|v| *v = v.max(0.0));
    Ok(GaussNewtonDiag(diag))
}

/// Dense Gauss-Newton matrix `mean_i J_iᵀ H_σi J_i`.
pub fn gauss_newton_matrix(spec: &ModelSpec, params: &ParamVector, batch: &[Sample]) -> Result<DMatrix<f64>> {
    spec.check_params(params.len())?;
    spec.check_samples(batch)?;
    let p = params.as_slice();
    let mut g = DMatrix::zeros(p.len(), p.len());
    for s in batch {
        let jac = output_jacobian(spec, p, &s.input);
        let f: Vec<f64> = forward_t(spec, p, &s.input);
        let h = output_hessian(spec, &f, &s.target);
        g += jac.transpose() * h * &jac;
    }
    Ok(g / batch.len() as f64)
}

/// Exact Hessian of the mean loss; linear architectures only.
pub fn hessian_exact(spec: &ModelSpec, params: &ParamVector, batch: &[Sample]) -> Result<DMatrix<f64>> {
    if !spec.is_linear() {
        return Err(Error::Unsupported(
            "exact Hessian is only available for linear models".into(),
        ));
    }
    spec.check_params(params.len())?;
    spec.check_samples(batch)?;
    let d = params.len();
    let mut h = DMatrix::zeros(d, d);
    let mut e = vec![0.0; d];
    for j in 0..d {
        e[j] = 1.0;
        let col = hvp_t::<f64>(spec, params.as_slice(), batch, &e);
        e[j] = 0.0;
        for (i, v) in col.into_iter().enumerate() {
            h[(i, j)] = v;
        }
    }
    Ok((&h + h.transpose()) * 0.5)
}

/// Output Jacobian at one input, `out_dim × D`.
pub fn jacobian(spec: &ModelSpec, params: &ParamVector, input: &[f64]) -> Result<DMatrix<f64>> {
    spec.check_params(params.len())?;
    if input.len() != spec.in_dim() {
        return Err(Error::argument("input dimension mismatch"));
    }
    Ok(output_jacobian(spec, params.as_slice(), input))
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

/// Fraction of correctly classified samples, `None` for regression targets.
pub fn accuracy(spec: &ModelSpec, params: &ParamVector, batch: &[Sample]) -> Result<Option<f64>> {
    spec.check_params(params.len())?;
    let mut correct = 0usize;
    for s in batch {
        let Target::Class(c) = s.target else {
            return Ok(None);
        };
        let f: Vec<f64> = forward_t(spec, params.as_slice(), &s.input);
        let predicted = if spec.loss == LossKind::Logistic {
            usize::from(f[0] > 0.0)
        } else {
            argmax(&f)
        };
        correct += usize::from(predicted == c);
    }
    Ok(Some(correct as f64 / batch.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn value(input: Vec<f64>, t: Vec<f64>) -> Sample {
        Sample {
            input,
            target: Target::Value(t),
        }
    }

    fn class(input: Vec<f64>, c: usize) -> Sample {
        Sample {
            input,
            target: Target::Class(c),
        }
    }

    fn fd_grad(spec: &ModelSpec, p: &ParamVector, batch: &[Sample], h: f64) -> DVector<f64> {
        DVector::from_fn(p.len(), |j, _| {
            let mut a = p.clone();
            let mut b = p.clone();
            a[j] += h;
            b[j] -= h;
            (loss(spec, &a, batch).unwrap() - loss(spec, &b, batch).unwrap()) / (2.0 * h)
        })
    }

    fn rel_err(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        (a - b).norm() / b.norm().max(1e-12)
    }

    #[test]
    fn linear_identity_forward() {
        let spec = ModelSpec::linear(2, 2, LossKind::Mse);
        let p = DVector::from_vec(vec![1.0, 0.0, 0.0, 1.0]);
        let out = forward(&spec, &p, &[vec![3.0, 4.0]]).unwrap();
        assert_eq!(out[0].as_slice(), &[3.0, 4.0]);
        let p = DVector::from_vec(vec![1.0, 2.0, 0.0, 1.0]);
        let out = forward(&spec, &p, &[vec![1.0, 1.0]]).unwrap();
        assert_eq!(out[0].as_slice(), &[3.0, 1.0]);
    }

    #[test]
    fn zero_mlp_outputs_zero() {
        let spec = ModelSpec::mlp(vec![3, 5, 2], Activation::Tanh, LossKind::Mse);
        let p = DVector::zeros(spec.n_params());
        let out = embed(&spec, &p, &[vec![1.0, -2.0, 3.0]]).unwrap();
        assert_eq!(out[0].len(), 2);
        assert!(out[0].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dimension_mismatch_is_argument_error() {
        let spec = ModelSpec::linear(2, 1, LossKind::Mse);
        let p = DVector::zeros(2);
        assert!(matches!(forward(&spec, &p, &[vec![1.0]]), Err(Error::Argument(_))));
        assert!(matches!(
            forward(&spec, &DVector::zeros(3), &[vec![1.0, 2.0]]),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn perfect_fit_has_zero_loss_and_gradient() {
        let spec = ModelSpec::linear(2, 1, LossKind::Mse);
        let p = DVector::from_vec(vec![1.0, 2.0]);
        let (l, g) = loss_and_grad(&spec, &p, &[value(vec![1.0, 1.0], vec![3.0])]).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn uniform_logits_give_log_c() {
        let spec = ModelSpec::linear(2, 4, LossKind::CrossEntropy);
        let p = DVector::zeros(8);
        let l = loss(&spec, &p, &[class(vec![0.3, -1.0], 2)]).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn invalid_class_index_rejected() {
        let spec = ModelSpec::linear(2, 3, LossKind::CrossEntropy);
        let p = DVector::zeros(6);
        assert!(matches!(
            loss_and_grad(&spec, &p, &[class(vec![0.0, 0.0], 3)]),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn clipped_loss_is_bounded_with_zero_gradient() {
        let mut spec = ModelSpec::linear(1, 1, LossKind::Mse);
        spec.loss_clip = Some(0.5);
        let p = DVector::from_vec(vec![0.0]);
        let (l, g) = loss_and_grad(&spec, &p, &[value(vec![1.0], vec![10.0])]).unwrap();
        assert_eq!(l, 0.5);
        assert_eq!(g[0], 0.0);
    }

    #[test]
    fn linear_mse_gauss_newton_and_hessian() {
        let spec = ModelSpec::linear(2, 1, LossKind::Mse);
        let p = DVector::from_vec(vec![0.3, -0.7]);
        let batch = [value(vec![1.0, 2.0], vec![0.5])];
        let gn = gauss_newton_diag(&spec, &p, &batch).unwrap();
        assert_eq!(gn.values().as_slice(), &[1.0, 4.0]);
        let h = hessian_exact(&spec, &p, &batch).unwrap();
        assert_eq!(h, DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]));
        assert_eq!((&h - h.transpose()).amax(), 0.0);
        let hv = hvp(&spec, &p, &batch, &DVector::from_vec(vec![1.0, 0.0])).unwrap();
        assert_eq!(hv.as_slice(), &[1.0, 2.0]);
        let zero = hvp(&spec, &p, &batch, &DVector::zeros(2)).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hessian_exact_rejects_mlp() {
        let spec = ModelSpec::mlp(vec![1, 2, 1], Activation::Tanh, LossKind::Mse);
        let p = DVector::zeros(spec.n_params());
        assert!(matches!(
            hessian_exact(&spec, &p, &[value(vec![1.0], vec![1.0])]),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let specs = [
            ModelSpec::mlp(vec![2, 4, 3], Activation::Tanh, LossKind::CrossEntropy),
            ModelSpec::mlp(vec![1, 5, 5, 1], Activation::Tanh, LossKind::Mse),
            ModelSpec::linear(3, 1, LossKind::Logistic),
        ];
        for spec in &specs {
            for _ in 0..3 {
                let p = DVector::from_fn(spec.n_params(), |_, _| rng.gen_range(-1.0..1.0));
                let batch: Vec<Sample> = (0..4)
                    .map(|k| {
                        let input: Vec<f64> = (0..spec.in_dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
                        match spec.loss {
                            LossKind::Mse => value(input, vec![rng.gen_range(-1.0..1.0)]),
                            LossKind::CrossEntropy => class(input, k % 3),
                            LossKind::Logistic => class(input, k % 2),
                        }
                    })
                    .collect();
                let (_, g) = loss_and_grad(spec, &p, &batch).unwrap();
                assert!(rel_err(&g, &fd_grad(spec, &p, &batch, 1e-5)) < 1e-5);
                let v = DVector::from_fn(p.len(), |_, _| rng.gen_range(-1.0..1.0));
                let hv = hvp(spec, &p, &batch, &v).unwrap();
                let h = 1e-5;
                let (_, ga) = loss_and_grad(spec, &(&p + &v * h), &batch).unwrap();
                let (_, gb) = loss_and_grad(spec, &(&p - &v * h), &batch).unwrap();
                assert!(rel_err(&hv, &((ga - gb) / (2.0 * h))) < 1e-4);
            }
        }
    }

    #[test]
    fn logistic_gauss_newton_uses_sigmoid_curvature() {
        let spec = ModelSpec::linear(1, 1, LossKind::Logistic);
        let p = DVector::from_vec(vec![0.4]);
        let gn = gauss_newton_diag(&spec, &p, &[class(vec![2.0], 1)]).unwrap();
        let s = 1.0 / (1.0 + (-0.8f64).exp());
        assert!((gn.values()[0] - 4.0 * s * (1.0 - s)).abs() < 1e-15);
    }

    #[test]
    fn parameter_count() {
        let spec = ModelSpec::mlp(vec![1, 16, 16, 1], Activation::Tanh, LossKind::Mse);
        assert_eq!(spec.n_params(), 16 + 16 + 256 + 16 + 16 + 1);
        assert_eq!(ModelSpec::linear(3, 2, LossKind::Mse).n_params(), 6);
    }
}
