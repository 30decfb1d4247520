//! Gaussian-variational feed-forward classifiers.
//!
//! A [`StochasticModel`] is a stack of affine layers with ReLU between them.
//! Variational layers carry a diagonal Gaussian posterior over their weights,
//! parameterized as `w = mu + softplus(rho) * eps` so that gradients with
//! respect to `mu` and `rho` flow through a sampled forward pass. A model
//! built only from point-weight layers is the deterministic special case.

mod loss;
mod noise;

pub use loss::{kl_to_prior, variational_loss_on, variational_loss_value};
pub use noise::{sample_noise, NoiseEntry, NoiseVector, ParamKind};

use thiserror::Error;

use crate::rng::SeededRng;
use crate::tensor::{DType, Tensor, TensorError, TensorId, Trace};

#[derive(Error, Debug)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("noise vector does not match the model: missing {missing:?}, unexpected {extra:?}")]
    NoiseMismatch {
        missing: Vec<String>,
        extra: Vec<String>,
    },
    #[error("prior sigma must be positive, got {0}")]
    NonPositivePrior(f64),
    #[error("batch is empty")]
    EmptyBatch,
    #[error("input has {got} features, model expects {expected}")]
    InputDimMismatch { expected: usize, got: usize },
    #[error("layer {layer}: {message}")]
    BadLayer { layer: usize, message: String },
}

/// Point-weight affine layer.
#[derive(Clone, Debug)]
pub struct AffineLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Diagonal Gaussian posterior over an affine layer's weights. `rho` is the
/// pre-softplus spread, so the effective sigma is positive for any value.
#[derive(Clone, Debug)]
pub struct GaussianVariationalLayer {
    pub mu_w: Tensor,
    pub rho_w: Tensor,
    pub mu_b: Tensor,
    pub rho_b: Tensor,
    pub prior_sigma: f64,
}

#[derive(Clone, Debug)]
pub enum Layer {
    Affine(AffineLayer),
    Variational(GaussianVariationalLayer),
}

impl Layer {
    fn in_dim(&self) -> usize {
        match self {
            Layer::Affine(l) => l.weight.shape()[0],
            Layer::Variational(l) => l.mu_w.shape()[0],
        }
    }

    fn out_dim(&self) -> usize {
        match self {
            Layer::Affine(l) => l.weight.shape()[1],
            Layer::Variational(l) => l.mu_w.shape()[1],
        }
    }

    fn dtype(&self) -> DType {
        match self {
            Layer::Affine(l) => l.weight.dtype(),
            Layer::Variational(l) => l.mu_w.dtype(),
        }
    }
}

/// Ordered layer stack with ReLU activations between layers.
#[derive(Clone, Debug)]
pub struct StochasticModel {
    layers: Vec<Layer>,
    classes: usize,
}

/// Role of a parameter tensor within its layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    Weight,
    Bias,
    MuW,
    RhoW,
    MuB,
    RhoB,
}

impl ParamRole {
    pub fn as_str(&self) -> &'static str {
        match self {
            ParamRole::Weight => "w",
            ParamRole::Bias => "b",
            ParamRole::MuW => "mu_w",
            ParamRole::RhoW => "rho_w",
            ParamRole::MuB => "mu_b",
            ParamRole::RhoB => "rho_b",
        }
    }
}

/// A model's parameters registered as leaves on a trace.
pub struct BoundModel {
    params: Vec<(usize, ParamRole, TensorId)>,
}

impl BoundModel {
    pub fn params(&self) -> &[(usize, ParamRole, TensorId)] {
        &self.params
    }

    fn get(&self, layer: usize, role: ParamRole) -> TensorId {
        self.params
            .iter()
            .find(|(l, r, _)| *l == layer && *r == role)
            .map(|(_, _, id)| *id)
            .expect("bound parameter exists")
    }
}

fn fan_in_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

/// Inverse of ln(1 + e^x): the rho that produces a given sigma.
pub fn softplus_inverse(sigma: f64) -> f64 {
    assert!(sigma > 0.0, "softplus_inverse needs a positive sigma");
    if sigma > 30.0 {
        sigma
    } else {
        sigma.exp_m1().ln()
    }
}

fn uniform_init(shape: Vec<usize>, bound: f64, dtype: DType, rng: &mut SeededRng) -> Tensor {
    use rand::Rng;
    let n: usize = shape.iter().product();
    let vals: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 2.0 * bound - bound).collect();
    Tensor::from_f64_values(shape, &vals, dtype).expect("shape matches value count")
}

impl StochasticModel {
    /// Validates layer chaining and mu/rho pairing.
    pub fn from_layers(layers: Vec<Layer>, classes: usize) -> Result<StochasticModel, ModelError> {
        if layers.is_empty() {
            return Err(ModelError::BadLayer {
                layer: 0,
                message: "model needs at least one layer".into(),
            });
        }
        for (i, layer) in layers.iter().enumerate() {
            if i > 0 && layers[i - 1].out_dim() != layer.in_dim() {
                return Err(ModelError::BadLayer {
                    layer: i,
                    message: format!(
                        "input width {} does not match previous output width {}",
                        layer.in_dim(),
                        layers[i - 1].out_dim()
                    ),
                });
            }
            if let Layer::Variational(v) = layer {
                if v.mu_w.shape() != v.rho_w.shape() || v.mu_b.shape() != v.rho_b.shape() {
                    return Err(ModelError::BadLayer {
                        layer: i,
                        message: "mu and rho shapes differ".into(),
                    });
                }
                if v.prior_sigma <= 0.0 {
                    return Err(ModelError::NonPositivePrior(v.prior_sigma));
                }
            }
        }
        let last = layers.last().expect("nonempty");
        if last.out_dim() != classes {
            return Err(ModelError::BadLayer {
                layer: layers.len() - 1,
                message: format!(
                    "final width {} does not match class count {}",
                    last.out_dim(),
                    classes
                ),
            });
        }
        Ok(StochasticModel { layers, classes })
    }

    /// Point-weight MLP with fan-in-scaled uniform initialization.
    pub fn deterministic_mlp(
        input_dim: usize,
        hidden: &[usize],
        classes: usize,
        dtype: DType,
        rng: &mut SeededRng,
    ) -> StochasticModel {
        let mut layers = Vec::new();
        let mut prev = input_dim;
        for &width in hidden.iter().chain(std::iter::once(&classes)) {
            let bound = fan_in_bound(prev);
            layers.push(Layer::Affine(AffineLayer {
                weight: uniform_init(vec![prev, width], bound, dtype, rng),
                bias: uniform_init(vec![width], bound, dtype, rng),
            }));
            prev = width;
        }
        StochasticModel { layers, classes }
    }

    /// Variational MLP. `mu` uses the same fan-in-scaled uniform init as the
    /// deterministic case; `rho` starts at sigma = 0.05 * init bound.
    pub fn variational_mlp(
        input_dim: usize,
        hidden: &[usize],
        classes: usize,
        prior_sigma: f64,
        dtype: DType,
        rng: &mut SeededRng,
    ) -> Result<StochasticModel, ModelError> {
        if prior_sigma <= 0.0 {
            return Err(ModelError::NonPositivePrior(prior_sigma));
        }
        let mut layers = Vec::new();
        let mut prev = input_dim;
        for &width in hidden.iter().chain(std::iter::once(&classes)) {
            let bound = fan_in_bound(prev);
            let rho0 = softplus_inverse(0.05 * bound);
            let rho_w = Tensor::from_f64_values(
                vec![prev, width],
                &vec![rho0; prev * width],
                dtype,
            )?;
            let rho_b = Tensor::from_f64_values(vec![width], &vec![rho0; width], dtype)?;
            layers.push(Layer::Variational(GaussianVariationalLayer {
                mu_w: uniform_init(vec![prev, width], bound, dtype, rng),
                rho_w,
                mu_b: uniform_init(vec![width], bound, dtype, rng),
                rho_b,
                prior_sigma,
            }));
            prev = width;
        }
        Ok(StochasticModel { layers, classes })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn dtype(&self) -> DType {
        self.layers[0].dtype()
    }

    pub fn is_stochastic(&self) -> bool {
        self.layers
            .iter()
            .any(|l| matches!(l, Layer::Variational(_)))
    }

    /// Largest effective sigma over all variational parameters.
    pub fn max_sigma(&self) -> f64 {
        let mut m: f64 = 0.0;
        for layer in &self.layers {
            if let Layer::Variational(v) = layer {
                for rho in [&v.rho_w, &v.rho_b] {
                    for r in rho.to_f64_vec() {
                        let s = if r > 0.0 {
                            r + (-r).exp().ln_1p()
                        } else {
                            r.exp().ln_1p()
                        };
                        m = m.max(s);
                    }
                }
            }
        }
        m
    }

    /// Parameter tensors in canonical order: layers ascending, affine as
    /// `(w, b)`, variational as `(mu_w, rho_w, mu_b, rho_b)`. The order
    /// matches [`StochasticModel::bind`] and the checkpoint layout.
    pub fn param_specs(&self) -> Vec<(usize, ParamRole)> {
        let mut specs = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Affine(_) => {
                    specs.push((i, ParamRole::Weight));
                    specs.push((i, ParamRole::Bias));
                }
                Layer::Variational(_) => {
                    specs.push((i, ParamRole::MuW));
                    specs.push((i, ParamRole::RhoW));
                    specs.push((i, ParamRole::MuB));
                    specs.push((i, ParamRole::RhoB));
                }
            }
        }
        specs
    }

    pub fn param(&self, layer: usize, role: ParamRole) -> &Tensor {
        match (&self.layers[layer], role) {
            (Layer::Affine(l), ParamRole::Weight) => &l.weight,
            (Layer::Affine(l), ParamRole::Bias) => &l.bias,
            (Layer::Variational(l), ParamRole::MuW) => &l.mu_w,
            (Layer::Variational(l), ParamRole::RhoW) => &l.rho_w,
            (Layer::Variational(l), ParamRole::MuB) => &l.mu_b,
            (Layer::Variational(l), ParamRole::RhoB) => &l.rho_b,
            _ => panic!("parameter role does not match layer kind"),
        }
    }

    /// Mutable references to every parameter tensor, in [`param_specs`]
    /// order.
    ///
    /// [`param_specs`]: StochasticModel::param_specs
    pub fn param_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for layer in self.layers.iter_mut() {
            match layer {
                Layer::Affine(l) => {
                    out.push(&mut l.weight);
                    out.push(&mut l.bias);
                }
                Layer::Variational(v) => {
                    out.push(&mut v.mu_w);
                    out.push(&mut v.rho_w);
                    out.push(&mut v.mu_b);
                    out.push(&mut v.rho_b);
                }
            }
        }
        out
    }

    pub fn param_mut(&mut self, layer: usize, role: ParamRole) -> &mut Tensor {
        match (&mut self.layers[layer], role) {
            (Layer::Affine(l), ParamRole::Weight) => &mut l.weight,
            (Layer::Affine(l), ParamRole::Bias) => &mut l.bias,
            (Layer::Variational(l), ParamRole::MuW) => &mut l.mu_w,
            (Layer::Variational(l), ParamRole::RhoW) => &mut l.rho_w,
            (Layer::Variational(l), ParamRole::MuB) => &mut l.mu_b,
            (Layer::Variational(l), ParamRole::RhoB) => &mut l.rho_b,
            _ => panic!("parameter role does not match layer kind"),
        }
    }

    /// Registers every parameter tensor as a leaf on `trace`. With
    /// `mark = true` the leaves become differentiation targets.
    pub fn bind(&self, trace: &mut Trace, mark: bool) -> BoundModel {
        let params = self
            .param_specs()
            .into_iter()
            .map(|(layer, role)| {
                let id = trace.leaf(self.param(layer, role).clone(), mark);
                (layer, role, id)
            })
            .collect();
        BoundModel { params }
    }

    fn validate_noise(&self, eps: &NoiseVector) -> Result<(), ModelError> {
        let mut missing = Vec::new();
        let mut expected: Vec<(usize, ParamKind, Vec<usize>)> = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            if let Layer::Variational(v) = layer {
                expected.push((i, ParamKind::Weight, v.mu_w.shape().to_vec()));
                expected.push((i, ParamKind::Bias, v.mu_b.shape().to_vec()));
            }
        }
        for (layer, kind, shape) in &expected {
            match eps.get(*layer, *kind) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => missing.push(format!(
                    "layer{}.{} (shape {:?}, expected {:?})",
                    layer,
                    kind.as_str(),
                    t.shape(),
                    shape
                )),
                None => missing.push(format!("layer{}.{}", layer, kind.as_str())),
            }
        }
        let extra: Vec<String> = eps
            .entries()
            .iter()
            .filter(|e| {
                !expected
                    .iter()
                    .any(|(l, k, _)| *l == e.layer && *k == e.kind)
            })
            .map(|e| e.name())
            .collect();
        if missing.is_empty() && extra.is_empty() {
            Ok(())
        } else {
            Err(ModelError::NoiseMismatch { missing, extra })
        }
    }

    /// Records the logits computation `f(x; w, eps)` on `trace`.
    ///
    /// The output is differentiable with respect to the input leaf and, when
    /// `bound` was marked, the parameter leaves. All randomness enters via
    /// `eps`; the same arguments always produce the same logits.
    pub fn logits_on(
        &self,
        trace: &mut Trace,
        bound: &BoundModel,
        x: TensorId,
        eps: &NoiseVector,
    ) -> Result<TensorId, ModelError> {
        self.validate_noise(eps)?;
        let in_shape = trace.value(x).shape().to_vec();
        if in_shape.len() != 2 || in_shape[1] != self.input_dim() {
            return Err(ModelError::InputDimMismatch {
                expected: self.input_dim(),
                got: if in_shape.len() == 2 { in_shape[1] } else { 0 },
            });
        }
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let (w, b) = match layer {
                Layer::Affine(_) => (
                    bound.get(i, ParamRole::Weight),
                    bound.get(i, ParamRole::Bias),
                ),
                Layer::Variational(_) => {
                    let eps_w = trace.constant(
                        eps.get(i, ParamKind::Weight)
                            .expect("validated above")
                            .clone(),
                    );
                    let eps_b = trace.constant(
                        eps.get(i, ParamKind::Bias).expect("validated above").clone(),
                    );
                    let sigma_w = trace.softplus(bound.get(i, ParamRole::RhoW))?;
                    let sigma_b = trace.softplus(bound.get(i, ParamRole::RhoB))?;
                    let noise_w = trace.mul(sigma_w, eps_w)?;
                    let noise_b = trace.mul(sigma_b, eps_b)?;
                    let w = trace.add(bound.get(i, ParamRole::MuW), noise_w)?;
                    let b = trace.add(bound.get(i, ParamRole::MuB), noise_b)?;
                    (w, b)
                }
            };
            let z = trace.matmul(h, w)?;
            let z = trace.bias_add(z, b)?;
            h = if i == last { z } else { trace.relu(z)? };
        }
        Ok(h)
    }

    /// One forward pass on a fresh, unmarked trace.
    pub fn forward(&self, x: &Tensor, eps: &NoiseVector) -> Result<Tensor, ModelError> {
        let mut trace = Trace::new();
        let x_id = trace.constant(x.clone());
        let bound = self.bind(&mut trace, false);
        let logits = self.logits_on(&mut trace, &bound, x_id, eps)?;
        Ok(trace.value(logits).clone())
    }
}

/// How ensemble members are combined into class probabilities.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EnsembleMode {
    /// Mean of per-member softmax probabilities (the default).
    AverageProbs,
    /// Softmax of the mean logits.
    AverageLogits,
}

/// Row-wise softmax of logits, computed in f64.
pub fn softmax_probs_f64(logits: &Tensor) -> Tensor {
    let shape = logits.shape().to_vec();
    assert_eq!(shape.len(), 2, "softmax_probs_f64 expects [rows, classes]");
    let (rows, cols) = (shape[0], shape[1]);
    let x = logits.to_f64_vec();
    let mut out = vec![0.0f64; rows * cols];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (j, &v) in row.iter().enumerate() {
            let e = (v - m).exp();
            out[r * cols + j] = e;
            sum += e;
        }
        for j in 0..cols {
            out[r * cols + j] /= sum;
        }
    }
    Tensor::from_f64(shape, out).expect("shape matches")
}

/// Ensemble class probabilities: the mean over `m_eval` independent noise
/// draws. Rows sum to one; the row-wise argmax is the predicted label.
pub fn predict_ensemble(
    model: &StochasticModel,
    x: &Tensor,
    m_eval: usize,
    rng: &mut SeededRng,
) -> Result<Tensor, ModelError> {
    predict_ensemble_mode(model, x, m_eval, EnsembleMode::AverageProbs, rng)
}

pub fn predict_ensemble_mode(
    model: &StochasticModel,
    x: &Tensor,
    m_eval: usize,
    mode: EnsembleMode,
    rng: &mut SeededRng,
) -> Result<Tensor, ModelError> {
    assert!(m_eval >= 1, "predict_ensemble needs m_eval >= 1");
    if !model.is_stochastic() {
        // Every member is identical; one forward is the exact average.
        let logits = model.forward(x, &NoiseVector::empty())?;
        return Ok(softmax_probs_f64(&logits));
    }
    let rows = x.shape()[0];
    let cols = model.classes;
    let mut acc = vec![0.0f64; rows * cols];
    for _ in 0..m_eval {
        let eps = sample_noise(model, rng);
        let logits = model.forward(x, &eps)?;
        let member = match mode {
            EnsembleMode::AverageProbs => softmax_probs_f64(&logits).to_f64_vec(),
            EnsembleMode::AverageLogits => logits.to_f64_vec(),
        };
        for (a, v) in acc.iter_mut().zip(member) {
            *a += v;
        }
    }
    for a in acc.iter_mut() {
        *a /= m_eval as f64;
    }
    let combined = Tensor::from_f64(vec![rows, cols], acc)?;
    Ok(match mode {
        EnsembleMode::AverageProbs => combined,
        EnsembleMode::AverageLogits => softmax_probs_f64(&combined),
    })
}

/// Row-wise argmax; ties resolve to the lowest index.
pub fn argmax_rows(probs: &Tensor) -> Vec<usize> {
    let shape = probs.shape();
    assert_eq!(shape.len(), 2, "argmax_rows expects [rows, classes]");
    let (rows, cols) = (shape[0], shape[1]);
    let v = probs.to_f64_vec();
    (0..rows)
        .map(|r| {
            let row = &v[r * cols..(r + 1) * cols];
            let mut best = 0;
            for (j, &p) in row.iter().enumerate() {
                if p > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests;
