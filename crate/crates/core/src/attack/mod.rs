//! l-infinity bounded gradient attacks on (stochastic) classifiers.
//!
//! Both attacks iterate `x_{t+1} = project(x_t + eta * step(g_t))` where the
//! projection clamps into the gamma-ball around the clean input intersected
//! with the data range. They differ only in the gradient estimate `g_t`:
//!
//! * naive PGD draws one fresh noise vector per step and follows that
//!   single-sample gradient;
//! * averaged PGD follows the Monte-Carlo mean of the gradient over
//!   `m_grad` independent noise draws, estimating the expected gradient of
//!   the stochastic network.
//!
//! With `m_grad = 1` the two coincide exactly: under a shared seed the
//! trajectories are bit-identical.
//!
//! Attacks treat the model as read-only and run examples in parallel; each
//! example derives its own noise stream from `(seed, example index)`, so
//! parallel and serial runs produce identical results.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::net::{
    argmax_rows, predict_ensemble, sample_noise, ModelError, StochasticModel,
};
use crate::rng::{derive_rng, uniform_symmetric, SeededRng};
use crate::tensor::{Buffer, Scalar, Tensor, TensorError, TensorId, Trace};

/// Ensemble size used when an attack evaluates its own success flags.
pub const DEFAULT_ENSEMBLE_SIZE: usize = 40;

const ATTACK_STREAM: u64 = 0xA77;
const SUCCESS_STREAM: u64 = 0x5CC;
const EVAL_STREAM: u64 = 0xE7A;

#[derive(Error, Debug)]
pub enum AttackError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid attack config: {0}")]
    InvalidConfig(String),
}

/// Gradient step shaping.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepRule {
    /// Move by `eta * sign(gradient)` (the usual l-infinity PGD step).
    Sign,
    /// Move by `eta * gradient`.
    Raw,
}

impl std::fmt::Display for StepRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StepRule::Sign => write!(f, "sign"),
            StepRule::Raw => write!(f, "raw"),
        }
    }
}

impl std::str::FromStr for StepRule {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sign" => Ok(StepRule::Sign),
            "raw" => Ok(StepRule::Raw),
            other => Err(format!("unknown step rule '{other}'")),
        }
    }
}

/// Attack budget and iteration parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// l-infinity radius in normalized pixel units.
    pub gamma: f64,
    /// Step size per iteration.
    pub eta: f64,
    /// Iteration count.
    pub steps: usize,
    /// Noise samples per gradient estimate (averaged PGD only).
    pub m_grad: usize,
    /// Start from a uniform point in the ball instead of the clean input.
    pub random_start: bool,
    pub step_rule: StepRule,
    /// Valid input interval, e.g. `(0, 1)` for image data.
    pub data_range: (f64, f64),
    pub seed: u64,
}

impl AttackConfig {
    /// Budget-covering default step size: `2.5 * gamma / steps`.
    pub fn default_eta(gamma: f64, steps: usize) -> f64 {
        if gamma > 0.0 {
            2.5 * gamma / steps.max(1) as f64
        } else {
            1e-3
        }
    }

    /// Sign-step config with the default step size, random start, and a
    /// `[0, 1]` data range.
    pub fn new(gamma: f64, steps: usize, m_grad: usize, seed: u64) -> AttackConfig {
        AttackConfig {
            gamma,
            eta: Self::default_eta(gamma, steps),
            steps,
            m_grad,
            random_start: true,
            step_rule: StepRule::Sign,
            data_range: (0.0, 1.0),
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), AttackError> {
        if !self.gamma.is_finite() || self.gamma < 0.0 {
            return Err(AttackError::InvalidConfig(format!(
                "gamma must be finite and non-negative, got {}",
                self.gamma
            )));
        }
        if !self.eta.is_finite() || self.eta <= 0.0 {
            return Err(AttackError::InvalidConfig(format!(
                "eta must be positive, got {}",
                self.eta
            )));
        }
        if self.m_grad < 1 {
            return Err(AttackError::InvalidConfig("m_grad must be at least 1".into()));
        }
        if self.data_range.0 >= self.data_range.1 {
            return Err(AttackError::InvalidConfig(format!(
                "data range lower bound {} must be below upper bound {}",
                self.data_range.0, self.data_range.1
            )));
        }
        Ok(())
    }
}

/// Outcome of an attack over a batch of examples.
#[derive(Clone, Debug)]
pub struct AttackResult {
    /// Adversarial inputs, same shape as the clean batch.
    pub adversarial: Tensor,
    /// Per-example flag: ensemble prediction differs from the true label.
    pub success: Vec<bool>,
    /// Per-example, per-step mean loss of the gradient estimate.
    pub loss_trace: Vec<Vec<f64>>,
}

impl AttackResult {
    pub fn success_rate(&self) -> f64 {
        if self.success.is_empty() {
            return 0.0;
        }
        self.success.iter().filter(|&&s| s).count() as f64 / self.success.len() as f64
    }
}

/// Largest absolute coordinate difference between two equal-shape tensors.
pub fn linf_distance(a: &Tensor, b: &Tensor) -> Result<f64, AttackError> {
    Ok(a.max_abs_diff(b)?)
}

fn k_project<T: Scalar>(v: &[T], x: &[T], gamma: f64, lo: f64, hi: f64) -> Vec<T> {
    let gamma = T::from_f64(gamma);
    let lo = T::from_f64(lo);
    let hi = T::from_f64(hi);
    v.iter()
        .zip(x)
        .map(|(&vi, &xi)| {
            let lower = (xi - gamma).max(lo);
            let upper = (xi + gamma).min(hi);
            vi.max(lower).min(upper)
        })
        .collect()
}

/// Clamps `xhat` elementwise into `[x - gamma, x + gamma]` intersected with
/// the data range. Idempotent, and the identity on feasible points.
pub fn project_linf(
    xhat: &Tensor,
    x: &Tensor,
    cfg: &AttackConfig,
) -> Result<Tensor, AttackError> {
    if xhat.shape() != x.shape() {
        return Err(AttackError::Tensor(TensorError::ShapeMismatch {
            op: "project_linf",
            lhs: xhat.shape().to_vec(),
            rhs: x.shape().to_vec(),
        }));
    }
    let (lo, hi) = cfg.data_range;
    let data = match (&xhat.data, &x.data) {
        (Buffer::F32(v), Buffer::F32(c)) => Buffer::F32(k_project(v, c, cfg.gamma, lo, hi)),
        (Buffer::F64(v), Buffer::F64(c)) => Buffer::F64(k_project(v, c, cfg.gamma, lo, hi)),
        _ => {
            return Err(AttackError::Tensor(TensorError::DtypeMismatch {
                op: "project_linf",
                lhs: xhat.dtype(),
                rhs: x.dtype(),
            }))
        }
    };
    Ok(Tensor::from_buffer(xhat.shape().to_vec(), data))
}

fn k_step<T: Scalar>(x: &[T], g: &[T], eta: f64, rule: StepRule) -> Vec<T> {
    let eta = T::from_f64(eta);
    x.iter()
        .zip(g)
        .map(|(&xi, &gi)| match rule {
            StepRule::Sign => {
                let s = if gi > T::zero() {
                    T::one()
                } else if gi < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                };
                xi + eta * s
            }
            StepRule::Raw => xi + eta * gi,
        })
        .collect()
}

fn ascend(current: &Tensor, grad: &Tensor, cfg: &AttackConfig) -> Tensor {
    let data = match (&current.data, &grad.data) {
        (Buffer::F32(x), Buffer::F32(g)) => Buffer::F32(k_step(x, g, cfg.eta, cfg.step_rule)),
        (Buffer::F64(x), Buffer::F64(g)) => Buffer::F64(k_step(x, g, cfg.eta, cfg.step_rule)),
        _ => unreachable!("gradient dtype always matches the iterate"),
    };
    Tensor::from_buffer(current.shape().to_vec(), data)
}

fn add_f64_delta(x: &Tensor, delta: &[f64]) -> Tensor {
    let data = match &x.data {
        Buffer::F32(v) => Buffer::F32(
            v.iter()
                .zip(delta)
                .map(|(&xi, &d)| xi + d as f32)
                .collect(),
        ),
        Buffer::F64(v) => Buffer::F64(v.iter().zip(delta).map(|(&xi, &d)| xi + d).collect()),
    };
    Tensor::from_buffer(x.shape().to_vec(), data)
}

/// Monte-Carlo averaged input gradient of a caller-supplied scalar
/// objective. Each of the `m` samples builds a fresh trace with `x` as the
/// marked leaf; the objective draws its own noise from `rng`. Returns the
/// averaged gradient (in `x`'s dtype) and the mean objective value.
pub(crate) fn mc_input_grad<F>(
    x: &Tensor,
    m: usize,
    rng: &mut SeededRng,
    mut objective: F,
) -> Result<(Tensor, f64), AttackError>
where
    F: FnMut(&mut Trace, TensorId, &mut SeededRng) -> Result<TensorId, AttackError>,
{
    assert!(m >= 1, "gradient estimate needs at least one sample");
    let mut grad_acc = vec![0.0f64; x.numel()];
    let mut loss_acc = 0.0f64;
    for _ in 0..m {
        let mut trace = Trace::new();
        let x_id = trace.leaf(x.clone(), true);
        let loss = objective(&mut trace, x_id, rng)?;
        loss_acc += trace.value(loss).scalar_value().map_err(AttackError::Tensor)?;
        trace.backward(loss).map_err(AttackError::Tensor)?;
        let g = trace.grad(x_id).expect("marked leaf has a gradient");
        for (acc, v) in grad_acc.iter_mut().zip(g.to_f64_vec()) {
            *acc += v;
        }
    }
    let inv = 1.0 / m as f64;
    for acc in grad_acc.iter_mut() {
        *acc *= inv;
    }
    let grad = Tensor::from_f64_values(x.shape().to_vec(), &grad_acc, x.dtype())?;
    Ok((grad, loss_acc * inv))
}

fn ce_objective<'a>(
    model: &'a StochasticModel,
    labels: &'a [usize],
) -> impl FnMut(&mut Trace, TensorId, &mut SeededRng) -> Result<TensorId, AttackError> + 'a {
    move |trace, x_id, rng| {
        let eps = sample_noise(model, rng);
        let bound = model.bind(trace, false);
        let logits = model.logits_on(trace, &bound, x_id, &eps)?;
        let ce = trace.cross_entropy_logits(logits, labels)?;
        // Per-example losses are summed so each row's gradient is its own.
        Ok(trace.sum(ce)?)
    }
}

/// `(1/m_grad) * sum_i grad_x L(f(x; w, eps_i), y)` with fresh noise per
/// sample. For a batch, each row's gradient is the gradient of that row's
/// own cross-entropy. Deterministic models need only one sample, so the
/// average collapses to the plain input gradient for any `m_grad`.
pub fn avg_input_grad(
    model: &StochasticModel,
    x: &Tensor,
    labels: &[usize],
    m_grad: usize,
    rng: &mut SeededRng,
) -> Result<Tensor, AttackError> {
    let m = if model.is_stochastic() { m_grad } else { 1 };
    let (grad, _) = mc_input_grad(x, m, rng, ce_objective(model, labels))?;
    Ok(grad)
}

/// One PGD trajectory for a single `[1, d]` example.
fn attack_row(
    model: &StochasticModel,
    x_row: &Tensor,
    label: usize,
    cfg: &AttackConfig,
    m_grad: usize,
    rng: &mut SeededRng,
) -> Result<(Tensor, Vec<f64>), AttackError> {
    let mut current = if cfg.random_start {
        let delta: Vec<f64> = (0..x_row.numel())
            .map(|_| uniform_symmetric(rng, cfg.gamma))
            .collect();
        project_linf(&add_f64_delta(x_row, &delta), x_row, cfg)?
    } else {
        x_row.clone()
    };
    let mut losses = Vec::with_capacity(cfg.steps);
    let labels = [label];
    let mut objective = ce_objective(model, &labels);
    for _ in 0..cfg.steps {
        let (grad, mean_loss) = mc_input_grad(&current, m_grad, rng, &mut objective)?;
        current = project_linf(&ascend(&current, &grad, cfg), x_row, cfg)?;
        losses.push(mean_loss);
    }
    Ok((current, losses))
}

/// Crafts adversarial inputs without evaluating success flags. Used by the
/// public attack entry points, the training loop, and the eval harness.
pub(crate) fn perturb_batch(
    model: &StochasticModel,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    m_grad: usize,
) -> Result<(Tensor, Vec<Vec<f64>>), AttackError> {
    cfg.validate()?;
    if x.shape().len() != 2 {
        return Err(AttackError::Tensor(TensorError::BadRank {
            op: "attack",
            shape: x.shape().to_vec(),
        }));
    }
    let n = x.shape()[0];
    if labels.len() != n {
        return Err(AttackError::Tensor(TensorError::LabelCountMismatch {
            rows: n,
            labels: labels.len(),
        }));
    }
    // Deterministic models make every sample identical; skip the redundant ones.
    let m = if model.is_stochastic() { m_grad } else { 1 };
    let per_row: Vec<(Tensor, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = derive_rng(cfg.seed, i as u64, ATTACK_STREAM);
            let row = x.row(i)?;
            attack_row(model, &row, labels[i], cfg, m, &mut rng)
        })
        .collect::<Result<_, AttackError>>()?;
    let rows: Vec<Tensor> = per_row.iter().map(|(t, _)| t.clone()).collect();
    let traces: Vec<Vec<f64>> = per_row.into_iter().map(|(_, l)| l).collect();
    Ok((Tensor::from_rows(&rows)?, traces))
}

/// Success flags for already-crafted adversarial inputs.
pub(crate) fn success_flags(
    model: &StochasticModel,
    adversarial: &Tensor,
    labels: &[usize],
    m_eval: usize,
    rng: &mut SeededRng,
) -> Result<Vec<bool>, AttackError> {
    use rand::RngCore;
    assert!(m_eval >= 1, "success evaluation needs m_eval >= 1");
    let base = rng.next_u64();
    let n = adversarial.shape()[0];
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut eval_rng = derive_rng(base, i as u64, EVAL_STREAM);
            let row = adversarial.row(i)?;
            let probs = predict_ensemble(model, &row, m_eval, &mut eval_rng)?;
            Ok(argmax_rows(&probs)[0] != labels[i])
        })
        .collect()
}

/// Flags each example whose ensemble prediction at the adversarial input
/// differs from its true label.
pub fn evaluate_attack_success(
    model: &StochasticModel,
    result: &AttackResult,
    labels: &[usize],
    m_eval: usize,
    rng: &mut SeededRng,
) -> Result<Vec<bool>, AttackError> {
    success_flags(model, &result.adversarial, labels, m_eval, rng)
}

fn run_attack(
    model: &StochasticModel,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    m_grad: usize,
) -> Result<AttackResult, AttackError> {
    let (adversarial, loss_trace) = perturb_batch(model, x, labels, cfg, m_grad)?;
    let mut eval_rng = derive_rng(cfg.seed, 0, SUCCESS_STREAM);
    let success = success_flags(
        model,
        &adversarial,
        labels,
        DEFAULT_ENSEMBLE_SIZE,
        &mut eval_rng,
    )?;
    Ok(AttackResult {
        adversarial,
        success,
        loss_trace,
    })
}

/// PGD following one fresh single-sample gradient per step. `cfg.m_grad`
/// is ignored (implicitly 1).
pub fn naive_pgd(
    model: &StochasticModel,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
) -> Result<AttackResult, AttackError> {
    run_attack(model, x, labels, cfg, 1)
}

/// PGD following the `m_grad`-sample averaged gradient per step. With
/// `m_grad = 1` the trajectory is bit-identical to [`naive_pgd`] under the
/// same seed.
pub fn averaged_pgd(
    model: &StochasticModel,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
) -> Result<AttackResult, AttackError> {
    run_attack(model, x, labels, cfg, cfg.m_grad)
}
