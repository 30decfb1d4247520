//! Central finite-difference gradients, used as an independent oracle for
//! the reverse pass.

use super::{Tensor, TensorError};

/// Central-difference estimate of d f / d x, one coordinate at a time.
///
/// `f` must be deterministic and `step` positive. The perturbation and the
/// quotient are computed in f64; run the check on f64 tensors, where the
/// usual 1e-4 relative tolerance is attainable.
pub fn finite_diff_grad<E, F>(mut f: F, at: &Tensor, step: f64) -> Result<Tensor, E>
where
    E: From<TensorError>,
    F: FnMut(&Tensor) -> Result<f64, E>,
{
    assert!(step > 0.0, "finite_diff_grad: step must be positive");
    let base = at.to_f64_vec();
    let mut grad = vec![0.0f64; base.len()];
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += step;
        let mut minus = base.clone();
        minus[i] -= step;
        let t_plus = Tensor::from_f64_values(at.shape().to_vec(), &plus, at.dtype())?;
        let t_minus = Tensor::from_f64_values(at.shape().to_vec(), &minus, at.dtype())?;
        grad[i] = (f(&t_plus)? - f(&t_minus)?) / (2.0 * step);
    }
    Ok(Tensor::from_f64_values(
        at.shape().to_vec(),
        &grad,
        at.dtype(),
    )?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{DType, Trace};

    #[test]
    fn square_at_three_gives_six() {
        let at = Tensor::from_f64(vec![1], vec![3.0]).unwrap();
        let g = finite_diff_grad::<TensorError, _>(
            |x| Ok(x.value_at(0) * x.value_at(0)),
            &at,
            1e-5,
        )
        .unwrap();
        assert!((g.value_at(0) - 6.0).abs() < 1e-6);
    }

    #[test]
    fn sum_gives_all_ones() {
        let at = Tensor::from_f64(vec![2, 2], vec![0.3, -1.0, 2.0, 5.5]).unwrap();
        let g = finite_diff_grad::<TensorError, _>(
            |x| Ok(x.to_f64_vec().iter().sum()),
            &at,
            1e-4,
        )
        .unwrap();
        for v in g.to_f64_vec() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn agrees_with_backward_on_a_softplus_chain() {
        let at = Tensor::from_f64(vec![3], vec![0.4, -0.9, 1.3]).unwrap();
        let eval = |x: &Tensor| -> Result<f64, TensorError> {
            let mut tr = Trace::new();
            let id = tr.constant(x.clone());
            let s = tr.softplus(id)?;
            let e = tr.exp(s)?;
            let out = tr.sum(e)?;
            tr.value(out).scalar_value()
        };
        let numeric = finite_diff_grad::<TensorError, _>(eval, &at, 1e-6).unwrap();

        let mut tr = Trace::new();
        let id = tr.leaf(at.clone(), true);
        let s = tr.softplus(id).unwrap();
        let e = tr.exp(s).unwrap();
        let out = tr.sum(e).unwrap();
        tr.backward(out).unwrap();
        let exact = tr.grad(id).unwrap();

        assert_eq!(exact.dtype(), DType::F64);
        for (n, x) in numeric.to_f64_vec().iter().zip(exact.to_f64_vec()) {
            let rel = (n - x).abs() / x.abs().max(1e-12);
            assert!(rel < 1e-7, "numeric {n} vs exact {x}");
        }
    }
}
