//! SGD-with-momentum and Adam parameter updates.
//!
//! Optimizer state and update arithmetic run in f64 regardless of the
//! parameter dtype; the result is cast back into the parameter tensor.

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

use super::TrainError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum { momentum: f64 },
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
}

impl OptimizerKind {
    pub fn adam_default() -> OptimizerKind {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn sgd_default() -> OptimizerKind {
        OptimizerKind::SgdMomentum { momentum: 0.9 }
    }
}

enum Slot {
    Sgd { velocity: Vec<f64> },
    Adam { m: Vec<f64>, v: Vec<f64> },
}

/// Per-parameter optimizer state. Slot order is fixed at construction and
/// must match the parameter order passed to every step.
pub struct OptimState {
    kind: OptimizerKind,
    slots: Vec<Slot>,
    t: u64,
}

impl OptimState {
    pub fn new(kind: OptimizerKind, param_sizes: &[usize]) -> OptimState {
        let slots = param_sizes
            .iter()
            .map(|&n| match kind {
                OptimizerKind::SgdMomentum { .. } => Slot::Sgd {
                    velocity: vec![0.0; n],
                },
                OptimizerKind::Adam { .. } => Slot::Adam {
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                },
            })
            .collect();
        OptimState { kind, slots, t: 0 }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }
}

/// Applies one update to every parameter in place, per the standard
/// formulas. Deterministic given the state.
pub fn optimizer_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut OptimState,
    learning_rate: f64,
) -> Result<(), TrainError> {
    if params.len() != grads.len() || params.len() != state.slots.len() {
        return Err(TrainError::InvalidConfig(format!(
            "optimizer got {} params, {} grads, {} state slots",
            params.len(),
            grads.len(),
            state.slots.len()
        )));
    }
    state.t += 1;
    let t = state.t;
    for ((param, grad), slot) in params.iter_mut().zip(grads).zip(&mut state.slots) {
        if param.shape() != grad.shape() {
            return Err(TrainError::InvalidConfig(format!(
                "parameter shape {:?} does not match gradient shape {:?}",
                param.shape(),
                grad.shape()
            )));
        }
        let mut values = param.to_f64_vec();
        let g = grad.to_f64_vec();
        match (&state.kind, slot) {
            (OptimizerKind::SgdMomentum { momentum }, Slot::Sgd { velocity }) => {
                for i in 0..values.len() {
                    velocity[i] = momentum * velocity[i] + g[i];
                    values[i] -= learning_rate * velocity[i];
                }
            }
            (
                OptimizerKind::Adam {
                    beta1,
                    beta2,
                    epsilon,
                },
                Slot::Adam { m, v },
            ) => {
                let bc1 = 1.0 - beta1.powi(t as i32);
                let bc2 = 1.0 - beta2.powi(t as i32);
                for i in 0..values.len() {
                    m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                    v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                    let m_hat = m[i] / bc1;
                    let v_hat = v[i] / bc2;
                    values[i] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
                }
            }
            _ => unreachable!("slot kind fixed at construction"),
        }
        **param = Tensor::from_f64_values(param.shape().to_vec(), &values, param.dtype())
            .expect("shape is unchanged");
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::DType;

    fn t64(data: Vec<f64>) -> Tensor {
        let n = data.len();
        Tensor::from_f64(vec![n], data).unwrap()
    }

    #[test]
    fn plain_sgd_subtracts_the_scaled_gradient() {
        let mut p = t64(vec![1.0, -2.0]);
        let g = t64(vec![0.5, 0.25]);
        let mut state = OptimState::new(OptimizerKind::SgdMomentum { momentum: 0.0 }, &[2]);
        optimizer_step(&mut [&mut p], &[g], &mut state, 0.1).unwrap();
        assert_eq!(p.to_f64_vec(), vec![1.0 - 0.05, -2.0 - 0.025]);
    }

    #[test]
    fn momentum_accumulates_velocity() {
        let mut p = t64(vec![0.0]);
        let g = t64(vec![1.0]);
        let mut state = OptimState::new(OptimizerKind::SgdMomentum { momentum: 0.5 }, &[1]);
        optimizer_step(&mut [&mut p], std::slice::from_ref(&g), &mut state, 1.0).unwrap();
        assert_eq!(p.to_f64_vec(), vec![-1.0]); // v = 1
        optimizer_step(&mut [&mut p], &[g], &mut state, 1.0).unwrap();
        assert_eq!(p.to_f64_vec(), vec![-2.5]); // v = 1.5
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        for kind in [
            OptimizerKind::SgdMomentum { momentum: 0.9 },
            OptimizerKind::adam_default(),
        ] {
            let mut p = t64(vec![3.0, -1.5]);
            let g = t64(vec![0.0, 0.0]);
            let mut state = OptimState::new(kind, &[2]);
            optimizer_step(&mut [&mut p], &[g], &mut state, 0.1).unwrap();
            assert_eq!(p.to_f64_vec(), vec![3.0, -1.5], "{kind:?}");
        }
    }

    #[test]
    fn adam_single_step_matches_a_hand_computed_update() {
        let mut p = t64(vec![1.0, -2.0]);
        let g = t64(vec![0.5, -1.0]);
        let (lr, b1, b2, eps) = (0.1, 0.9, 0.999, 1e-8);
        let mut state = OptimState::new(
            OptimizerKind::Adam {
                beta1: b1,
                beta2: b2,
                epsilon: eps,
            },
            &[2],
        );
        optimizer_step(&mut [&mut p], &[g], &mut state, lr).unwrap();

        // Worked by hand for t = 1:
        //   m_hat = g, v_hat = g^2, update = lr * g / (|g| + eps)
        let expect0 = 1.0 - lr * 0.5 / ((0.25f64).sqrt() + eps);
        let expect1 = -2.0 + lr / ((1.0f64).sqrt() + eps);
        let got = p.to_f64_vec();
        assert!((got[0] - expect0).abs() < 1e-15, "{} vs {expect0}", got[0]);
        assert!((got[1] - expect1).abs() < 1e-15, "{} vs {expect1}", got[1]);
    }

    #[test]
    fn mismatched_lengths_are_rejected() {
        let mut p = t64(vec![1.0]);
        let g = t64(vec![1.0]);
        let mut state = OptimState::new(OptimizerKind::sgd_default(), &[1, 1]);
        let err = optimizer_step(&mut [&mut p], &[g], &mut state, 0.1).unwrap_err();
        assert!(matches!(err, TrainError::InvalidConfig(_)));
    }

    #[test]
    fn f32_parameters_round_trip_through_the_update() {
        let mut p = Tensor::from_f32(vec![2], vec![1.0, 2.0]).unwrap();
        let g = Tensor::from_f32(vec![2], vec![0.5, 0.5]).unwrap();
        let mut state = OptimState::new(OptimizerKind::SgdMomentum { momentum: 0.0 }, &[2]);
        optimizer_step(&mut [&mut p], &[g], &mut state, 0.1).unwrap();
        assert_eq!(p.dtype(), DType::F32);
        let got = p.to_f64_vec();
        assert!((got[0] - 0.95).abs() < 1e-6);
        assert!((got[1] - 1.95).abs() < 1e-6);
    }
}
