//! Robust-accuracy measurement: clean and attacked accuracy, step-count
//! convergence sweeps, and gradient-variance diagnostics.
//!
//! Evaluation noise is kept independent of attack noise: the attack derives
//! its streams from the attack config's seed, while prediction ensembles
//! derive theirs from the rng handed to each measurement. Examples are
//! evaluated in parallel with per-example sub-streams, so results do not
//! depend on thread scheduling.

mod report;

pub use report::{build_report, AttackKind, ReportRow, RobustnessReport};

use thiserror::Error;

use crate::attack::{
    avg_input_grad, perturb_batch, success_flags, AttackConfig, AttackError, AttackResult,
    DEFAULT_ENSEMBLE_SIZE,
};
use crate::data::Dataset;
use crate::net::{ModelError, StochasticModel};
use crate::rng::{derive_rng, SeededRng};
use crate::tensor::Tensor;

const SWEEP_EVAL_STREAM: u64 = 0x57E;

#[derive(Error, Debug)]
pub enum EvalError {
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("report has no rows")]
    EmptyReport,
    #[error("report row {index}: {message}")]
    InvalidRow { index: usize, message: String },
    #[error("step grid must be non-empty and strictly ascending")]
    BadStepGrid,
    #[error("m_grad grid must be non-empty with distinct positive values")]
    BadSampleGrid,
    #[error("variance probe needs at least 2 repetitions, got {0}")]
    BadRepetitions(usize),
    #[error("variance probe expects a single `[1, d]` example, got shape {shape:?}")]
    BadProbeInput { shape: Vec<usize> },
}

/// Fraction of examples whose ensemble prediction matches the label.
///
/// Consumes one draw from `rng` to derive per-example evaluation streams;
/// [`robust_accuracy`] consumes its rng identically, so at `gamma = 0` the
/// two agree exactly under a shared seed.
pub fn clean_accuracy(
    model: &StochasticModel,
    data: &Dataset,
    m_eval: usize,
    rng: &mut SeededRng,
) -> Result<f64, EvalError> {
    let flags = success_flags(model, data.inputs(), data.labels(), m_eval, rng)?;
    Ok(1.0 - flags.iter().filter(|&&s| s).count() as f64 / flags.len() as f64)
}

/// Robust accuracy plus the attack artifacts behind it.
#[derive(Clone, Debug)]
pub struct RobustEval {
    pub accuracy: f64,
    pub result: AttackResult,
}

/// Accuracy of the ensemble prediction on attacked inputs. The attack's
/// noise comes from `cfg.seed`; the evaluation ensembles come from `rng`.
pub fn robust_accuracy(
    model: &StochasticModel,
    data: &Dataset,
    attack_kind: AttackKind,
    cfg: &AttackConfig,
    m_eval: usize,
    rng: &mut SeededRng,
) -> Result<RobustEval, EvalError> {
    cfg.validate()?;
    let m_grad = match attack_kind {
        AttackKind::Naive => 1,
        AttackKind::Averaged => cfg.m_grad,
    };
    let (adversarial, loss_trace) =
        perturb_batch(model, data.inputs(), data.labels(), cfg, m_grad)?;
    let success = success_flags(model, &adversarial, data.labels(), m_eval, rng)?;
    let accuracy = 1.0 - success.iter().filter(|&&s| s).count() as f64 / success.len() as f64;
    Ok(RobustEval {
        accuracy,
        result: AttackResult {
            adversarial,
            success,
            loss_trace,
        },
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepPoint {
    pub steps: usize,
    pub success_rate: f64,
}

/// Attack success rate per step count, with identical noise streams across
/// grid points (the step size stays fixed; only the iteration count grows).
pub fn steps_sweep(
    model: &StochasticModel,
    data: &Dataset,
    attack_kind: AttackKind,
    cfg: &AttackConfig,
    step_grid: &[usize],
) -> Result<Vec<SweepPoint>, EvalError> {
    if step_grid.is_empty() || step_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(EvalError::BadStepGrid);
    }
    cfg.validate()?;
    let m_grad = match attack_kind {
        AttackKind::Naive => 1,
        AttackKind::Averaged => cfg.m_grad,
    };
    let mut points = Vec::with_capacity(step_grid.len());
    for &steps in step_grid {
        let cfg_t = AttackConfig {
            steps,
            ..cfg.clone()
        };
        let (adversarial, _) = perturb_batch(model, data.inputs(), data.labels(), &cfg_t, m_grad)?;
        let mut eval_rng = derive_rng(cfg.seed, 0, SWEEP_EVAL_STREAM);
        let flags = success_flags(
            model,
            &adversarial,
            data.labels(),
            DEFAULT_ENSEMBLE_SIZE,
            &mut eval_rng,
        )?;
        points.push(SweepPoint {
            steps,
            success_rate: flags.iter().filter(|&&s| s).count() as f64 / flags.len() as f64,
        });
    }
    Ok(points)
}

/// Empirical variance of the averaged input-gradient estimator.
#[derive(Clone, Debug)]
pub struct VariancePoint {
    pub m_grad: usize,
    /// Per-coordinate variance across repetitions.
    pub per_coordinate: Vec<f64>,
    /// Mean of the per-coordinate variances.
    pub mean_variance: f64,
}

/// Repeatedly estimates the input gradient at a fixed `[1, d]` example and
/// reports its per-coordinate variance for each `m_grad` in the grid.
pub fn grad_variance_probe(
    model: &StochasticModel,
    x: &Tensor,
    label: usize,
    m_grid: &[usize],
    repetitions: usize,
    rng: &mut SeededRng,
) -> Result<Vec<VariancePoint>, EvalError> {
    if x.shape().len() != 2 || x.shape()[0] != 1 {
        return Err(EvalError::BadProbeInput {
            shape: x.shape().to_vec(),
        });
    }
    if m_grid.is_empty()
        || m_grid.contains(&0)
        || (1..m_grid.len()).any(|i| m_grid[..i].contains(&m_grid[i]))
    {
        return Err(EvalError::BadSampleGrid);
    }
    if repetitions < 2 {
        return Err(EvalError::BadRepetitions(repetitions));
    }
    let labels = [label];
    let dims = x.numel();
    let mut points = Vec::with_capacity(m_grid.len());
    for &m in m_grid {
        let samples: Vec<Vec<f64>> = (0..repetitions)
            .map(|_| Ok(avg_input_grad(model, x, &labels, m, rng)?.to_f64_vec()))
            .collect::<Result<_, EvalError>>()?;
        let mut per_coordinate = vec![0.0f64; dims];
        for (j, slot) in per_coordinate.iter_mut().enumerate() {
            let mean: f64 = samples.iter().map(|s| s[j]).sum::<f64>() / repetitions as f64;
            *slot = samples
                .iter()
                .map(|s| (s[j] - mean) * (s[j] - mean))
                .sum::<f64>()
                / (repetitions - 1) as f64;
        }
        let mean_variance = per_coordinate.iter().sum::<f64>() / dims as f64;
        points.push(VariancePoint {
            m_grad: m,
            per_coordinate,
            mean_variance,
        });
    }
    Ok(points)
}
