//! Explicit noise inputs for stochastic models.
//!
//! A stochastic forward pass is a pure function of `(x, parameters, eps)`;
//! all randomness is materialized up front as a [`NoiseVector`] so the same
//! draw can be replayed, differentiated through, or shared between loss
//! evaluations.

use crate::rng::{standard_normal, SeededRng};
use crate::tensor::Tensor;

use super::{Layer, StochasticModel};

/// Which parameter tensor of a layer an entry perturbs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
}

impl ParamKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ParamKind::Weight => "weight",
            ParamKind::Bias => "bias",
        }
    }
}

#[derive(Clone, Debug)]
pub struct NoiseEntry {
    pub layer: usize,
    pub kind: ParamKind,
    pub values: Tensor,
}

impl NoiseEntry {
    pub fn name(&self) -> String {
        format!("layer{}.{}", self.layer, self.kind.as_str())
    }
}

/// One standard-normal tensor per stochastic parameter tensor, in layer
/// order with weights before biases.
#[derive(Clone, Debug, Default)]
pub struct NoiseVector {
    entries: Vec<NoiseEntry>,
}

impl NoiseVector {
    pub fn empty() -> NoiseVector {
        NoiseVector {
            entries: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn entries(&self) -> &[NoiseEntry] {
        &self.entries
    }

    pub fn get(&self, layer: usize, kind: ParamKind) -> Option<&Tensor> {
        self.entries
            .iter()
            .find(|e| e.layer == layer && e.kind == kind)
            .map(|e| &e.values)
    }

    pub fn push(&mut self, layer: usize, kind: ParamKind, values: Tensor) {
        self.entries.push(NoiseEntry {
            layer,
            kind,
            values,
        });
    }

    /// All-zero noise matching the model's stochastic parameters; with this
    /// vector a forward pass runs at the posterior means.
    pub fn zeros_like(model: &StochasticModel) -> NoiseVector {
        let mut nv = NoiseVector::empty();
        for (i, layer) in model.layers().iter().enumerate() {
            if let Layer::Variational(v) = layer {
                nv.push(
                    i,
                    ParamKind::Weight,
                    Tensor::zeros(v.mu_w.shape().to_vec(), v.mu_w.dtype()),
                );
                nv.push(
                    i,
                    ParamKind::Bias,
                    Tensor::zeros(v.mu_b.shape().to_vec(), v.mu_b.dtype()),
                );
            }
        }
        nv
    }
}

/// Draws a fresh `eps ~ N(0, I)` for every stochastic parameter tensor.
/// Advancing `rng` is the only side effect; deterministic models yield an
/// empty vector without touching the generator.
pub fn sample_noise(model: &StochasticModel, rng: &mut SeededRng) -> NoiseVector {
    let mut nv = NoiseVector::empty();
    for (i, layer) in model.layers().iter().enumerate() {
        if let Layer::Variational(v) = layer {
            for (kind, reference) in [(ParamKind::Weight, &v.mu_w), (ParamKind::Bias, &v.mu_b)] {
                let draws: Vec<f64> = (0..reference.numel())
                    .map(|_| standard_normal(rng))
                    .collect();
                let t = Tensor::from_f64_values(
                    reference.shape().to_vec(),
                    &draws,
                    reference.dtype(),
                )
                .expect("noise shape matches parameter shape");
                nv.push(i, kind, t);
            }
        }
    }
    nv
}
