//! The three defenses: adversarial training of a deterministic net, and the
//! variational net trained on naive-PGD or averaged-PGD examples.
//!
//! Every minibatch is first attacked with the defense's inner attack, then
//! one optimizer step is taken on the loss at the crafted inputs: plain
//! cross-entropy for the deterministic defense, the variational loss with a
//! fresh noise draw for the stochastic ones.

mod optim;

pub use optim::{optimizer_step, OptimState, OptimizerKind};

use rand::seq::SliceRandom;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attack::{perturb_batch, success_flags, AttackConfig, AttackError, DEFAULT_ENSEMBLE_SIZE};
use crate::data::Dataset;
use crate::net::{
    argmax_rows, predict_ensemble, sample_noise, variational_loss_on, ModelError, StochasticModel,
};
use crate::rng::{derive_rng, SeededRng};
use crate::tensor::{Tensor, TensorError, Trace};

const PROBE_EVAL_STREAM: u64 = 0x9B0;
const PROBE_ROBUST_STREAM: u64 = 0x9B1;

#[derive(Error, Debug)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("defense {defense:?} requires a {required} model")]
    DefenseModelMismatch {
        defense: DefenseKind,
        required: &'static str,
    },
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
}

/// Which defense is being trained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefenseKind {
    /// Madry-style adversarial training of a deterministic net.
    AdvTraining,
    /// Variational net trained on naive-PGD examples.
    AdvBnnNaive,
    /// Variational net trained on averaged-PGD examples.
    AdvBnnApgd,
}

impl std::fmt::Display for DefenseKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            DefenseKind::AdvTraining => "adv_training",
            DefenseKind::AdvBnnNaive => "adv_bnn_naive",
            DefenseKind::AdvBnnApgd => "adv_bnn_apgd",
        };
        write!(f, "{s}")
    }
}

impl std::str::FromStr for DefenseKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "adv_training" => Ok(DefenseKind::AdvTraining),
            "adv_bnn_naive" => Ok(DefenseKind::AdvBnnNaive),
            "adv_bnn_apgd" => Ok(DefenseKind::AdvBnnApgd),
            other => Err(format!("unknown defense kind '{other}'")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    /// Weight on the KL term of the variational loss (ignored for
    /// deterministic models).
    pub kl_weight: f64,
    pub inner_attack: AttackConfig,
    pub defense_kind: DefenseKind,
    pub seed: u64,
}

impl TrainConfig {
    /// Standard settings per defense: Adam at 1e-3 for the variational nets,
    /// SGD with momentum 0.9 for the deterministic baseline, a 10-step
    /// inner attack, and the full KL weight.
    pub fn defaults_for(defense_kind: DefenseKind, gamma: f64, seed: u64) -> TrainConfig {
        let (optimizer, learning_rate) = match defense_kind {
            DefenseKind::AdvTraining => (OptimizerKind::sgd_default(), 0.05),
            _ => (OptimizerKind::adam_default(), 1e-3),
        };
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            learning_rate,
            optimizer,
            kl_weight: 1.0,
            inner_attack: AttackConfig::new(gamma, 10, 10, seed),
            defense_kind,
            seed,
        }
    }

    fn validate(&self, model: &StochasticModel) -> Result<(), TrainError> {
        if self.epochs < 1 {
            return Err(TrainError::InvalidConfig("epochs must be at least 1".into()));
        }
        if self.batch_size < 1 {
            return Err(TrainError::InvalidConfig(
                "batch_size must be at least 1".into(),
            ));
        }
        if self.learning_rate <= 0.0 || self.learning_rate.is_nan() {
            return Err(TrainError::InvalidConfig(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.kl_weight < 0.0 {
            return Err(TrainError::InvalidConfig(format!(
                "kl_weight must be non-negative, got {}",
                self.kl_weight
            )));
        }
        self.inner_attack.validate()?;
        match self.defense_kind {
            DefenseKind::AdvTraining if model.is_stochastic() => {
                Err(TrainError::DefenseModelMismatch {
                    defense: self.defense_kind,
                    required: "deterministic",
                })
            }
            DefenseKind::AdvBnnNaive | DefenseKind::AdvBnnApgd if !model.is_stochastic() => {
                Err(TrainError::DefenseModelMismatch {
                    defense: self.defense_kind,
                    required: "stochastic",
                })
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    /// Clean accuracy on the held-out probe batch.
    pub clean_accuracy: f64,
    /// Accuracy on the probe batch under the inner attack.
    pub robust_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochMetrics>,
    /// Attacks crafted for training batches (probe measurement excluded).
    pub attack_invocations: usize,
    pub optimizer_steps: usize,
}

/// Trains `model` in place and reports per-epoch metrics.
///
/// The last `batch_size` examples are held out as the probe batch; when the
/// dataset is no larger than one batch the probe overlaps the training data.
/// Identical `(config, rng state)` reproduce identical final parameters.
pub fn train_defense(
    model: &mut StochasticModel,
    data: &Dataset,
    cfg: &TrainConfig,
    rng: &mut SeededRng,
) -> Result<TrainReport, TrainError> {
    cfg.validate(model)?;
    if data.features() != model.input_dim() {
        return Err(TrainError::Model(ModelError::InputDimMismatch {
            expected: model.input_dim(),
            got: data.features(),
        }));
    }

    let (train_set, probe) = if data.len() > cfg.batch_size {
        data.split_tail(cfg.batch_size)
    } else {
        (data.clone(), data.clone())
    };
    let n_train = train_set.len();

    let param_sizes: Vec<usize> = model
        .param_specs()
        .iter()
        .map(|&(l, r)| model.param(l, r).numel())
        .collect();
    let mut optim = OptimState::new(cfg.optimizer, &param_sizes);

    let m_grad_train = match cfg.defense_kind {
        DefenseKind::AdvBnnApgd => cfg.inner_attack.m_grad,
        _ => 1,
    };

    let mut report = TrainReport {
        epochs: Vec::with_capacity(cfg.epochs),
        attack_invocations: 0,
        optimizer_steps: 0,
    };

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n_train).collect();
        order.shuffle(rng);

        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = train_set.subset(chunk);
            let attack_cfg = AttackConfig {
                seed: rng.next_u64(),
                ..cfg.inner_attack.clone()
            };
            let (adv_inputs, _) = perturb_batch(
                model,
                batch.inputs(),
                batch.labels(),
                &attack_cfg,
                m_grad_train,
            )?;
            report.attack_invocations += 1;

            let eps = sample_noise(model, rng);
            let mut trace = Trace::new();
            let x_id = trace.constant(adv_inputs);
            let bound = model.bind(&mut trace, true);
            let loss_id = variational_loss_on(
                &mut trace,
                model,
                &bound,
                x_id,
                batch.labels(),
                &eps,
                cfg.kl_weight,
                n_train,
            )?;
            let loss_val = trace.value(loss_id).scalar_value()?;
            if !loss_val.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                });
            }
            trace.backward(loss_id)?;

            let grads: Vec<Tensor> = bound
                .params()
                .iter()
                .map(|&(_, _, id)| trace.grad(id).expect("marked parameter"))
                .collect();
            let mut params = model.param_tensors_mut();
            optimizer_step(&mut params, &grads, &mut optim, cfg.learning_rate)?;
            report.optimizer_steps += 1;

            loss_sum += loss_val;
            batches += 1;
        }

        // Probe metrics on the held-out batch.
        let probe_eval_base = rng.next_u64();
        let clean_accuracy = probe_clean_accuracy(model, &probe, probe_eval_base)?;
        let probe_attack_cfg = AttackConfig {
            seed: rng.next_u64(),
            ..cfg.inner_attack.clone()
        };
        let (probe_adv, _) = perturb_batch(
            model,
            probe.inputs(),
            probe.labels(),
            &probe_attack_cfg,
            m_grad_train,
        )?;
        let mut probe_eval_rng = derive_rng(probe_eval_base, 0, PROBE_ROBUST_STREAM);
        let flags = success_flags(
            model,
            &probe_adv,
            probe.labels(),
            DEFAULT_ENSEMBLE_SIZE,
            &mut probe_eval_rng,
        )?;
        let robust_accuracy =
            1.0 - flags.iter().filter(|&&s| s).count() as f64 / flags.len() as f64;

        report.epochs.push(EpochMetrics {
            epoch,
            train_loss: loss_sum / batches.max(1) as f64,
            clean_accuracy,
            robust_accuracy,
        });
    }
    Ok(report)
}

fn probe_clean_accuracy(
    model: &StochasticModel,
    probe: &Dataset,
    eval_base: u64,
) -> Result<f64, TrainError> {
    let mut correct = 0usize;
    for i in 0..probe.len() {
        let mut rng = derive_rng(eval_base, i as u64, PROBE_EVAL_STREAM);
        let probs = predict_ensemble(model, &probe.input_row(i), DEFAULT_ENSEMBLE_SIZE, &mut rng)?;
        if argmax_rows(&probs)[0] == probe.labels()[i] {
            correct += 1;
        }
    }
    Ok(correct as f64 / probe.len() as f64)
}
