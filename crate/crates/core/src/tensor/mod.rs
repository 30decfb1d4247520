//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! The engine is deliberately small: enough primitives to express
//! feed-forward classifiers and differentiate their losses with respect to
//! inputs and parameters. Operations are recorded on a [`Trace`]; calling
//! [`Trace::backward`] propagates gradients to every leaf that was marked
//! differentiable.
//!
//! Broadcasting is restricted to a trailing-axis bias add; every other
//! binary primitive requires exactly matching shapes so that shape bugs
//! fail loudly at the call site.

mod check;
mod tape;

pub use check::finite_diff_grad;
pub use tape::{BackwardStats, TensorId, Trace};

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Element type of a tensor buffer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DType::F32 => write!(f, "f32"),
            DType::F64 => write!(f, "f64"),
        }
    }
}

#[derive(Error, Debug)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: dtype mismatch between {lhs} and {rhs}")]
    DtypeMismatch {
        op: &'static str,
        lhs: DType,
        rhs: DType,
    },
    #[error("{op}: shape {shape:?} implies {expected} elements, got {got}")]
    ShapeDataMismatch {
        op: &'static str,
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("{op}: dimensions must be positive, got shape {shape:?}")]
    ZeroDimension { op: &'static str, shape: Vec<usize> },
    #[error("{op}: unsupported rank for shape {shape:?}")]
    BadRank { op: &'static str, shape: Vec<usize> },
    #[error("cross_entropy_logits: row {row} has label {label}, but logits carry {classes} classes")]
    LabelOutOfRange {
        row: usize,
        label: usize,
        classes: usize,
    },
    #[error("cross_entropy_logits: {rows} logit rows but {labels} labels")]
    LabelCountMismatch { rows: usize, labels: usize },
    #[error("backward: loss must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("backward: this trace was already consumed by a backward pass")]
    TraceConsumed,
    #[error("tensor id {0} does not belong to this trace")]
    UnknownId(usize),
}

/// Element trait for dtype-generic kernels.
pub(crate) trait Scalar:
    num_traits::Float + Send + Sync + std::fmt::Debug + 'static
{
    fn from_f64(v: f64) -> Self;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> f32 {
        v as f32
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> f64 {
        v
    }
}

/// Internal element storage. Kernels dispatch on the variant so f32 and f64
/// tensors never mix silently.
#[derive(Clone, Debug, PartialEq)]
pub(crate) enum Buffer {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl Buffer {
    pub(crate) fn len(&self) -> usize {
        match self {
            Buffer::F32(v) => v.len(),
            Buffer::F64(v) => v.len(),
        }
    }

    pub(crate) fn dtype(&self) -> DType {
        match self {
            Buffer::F32(_) => DType::F32,
            Buffer::F64(_) => DType::F64,
        }
    }

    pub(crate) fn zeros(dtype: DType, n: usize) -> Buffer {
        match dtype {
            DType::F32 => Buffer::F32(vec![0.0; n]),
            DType::F64 => Buffer::F64(vec![0.0; n]),
        }
    }

    pub(crate) fn from_f64_values(dtype: DType, values: &[f64]) -> Buffer {
        match dtype {
            DType::F32 => Buffer::F32(values.iter().map(|&v| v as f32).collect()),
            DType::F64 => Buffer::F64(values.to_vec()),
        }
    }

    pub(crate) fn to_f64_vec(&self) -> Vec<f64> {
        match self {
            Buffer::F32(v) => v.iter().map(|&x| f64::from(x)).collect(),
            Buffer::F64(v) => v.clone(),
        }
    }

    pub(crate) fn bits_eq(&self, other: &Buffer) -> bool {
        match (self, other) {
            (Buffer::F32(a), Buffer::F32(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (Buffer::F64(a), Buffer::F64(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            _ => false,
        }
    }

    pub(crate) fn is_finite(&self) -> bool {
        match self {
            Buffer::F32(v) => v.iter().all(|x| x.is_finite()),
            Buffer::F64(v) => v.iter().all(|x| x.is_finite()),
        }
    }
}

/// Dense row-major numeric array with an optional gradient slot.
///
/// The gradient slot is written only by [`Trace::backward`], and only for
/// tensors that were marked differentiable when registered as leaves.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    pub(crate) data: Buffer,
    pub(crate) grad: Option<Buffer>,
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn validate(op: &'static str, shape: &[usize], len: usize) -> Result<(), TensorError> {
        if shape.contains(&0) {
            return Err(TensorError::ZeroDimension {
                op,
                shape: shape.to_vec(),
            });
        }
        let expected = numel_of(shape);
        if expected != len {
            return Err(TensorError::ShapeDataMismatch {
                op,
                shape: shape.to_vec(),
                expected,
                got: len,
            });
        }
        Ok(())
    }

    pub fn from_f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Tensor, TensorError> {
        Self::validate("from_f32", &shape, data.len())?;
        Ok(Tensor {
            shape,
            data: Buffer::F32(data),
            grad: None,
        })
    }

    pub fn from_f64(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor, TensorError> {
        Self::validate("from_f64", &shape, data.len())?;
        Ok(Tensor {
            shape,
            data: Buffer::F64(data),
            grad: None,
        })
    }

    /// Tensor of the given dtype built from f64 values (f32 tensors round).
    pub fn from_f64_values(
        shape: Vec<usize>,
        values: &[f64],
        dtype: DType,
    ) -> Result<Tensor, TensorError> {
        Self::validate("from_values", &shape, values.len())?;
        Ok(Tensor {
            shape,
            data: Buffer::from_f64_values(dtype, values),
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>, dtype: DType) -> Tensor {
        let n = numel_of(&shape);
        Tensor {
            shape,
            data: Buffer::zeros(dtype, n),
            grad: None,
        }
    }

    /// Rank-0 tensor holding one value.
    pub fn scalar(value: f64, dtype: DType) -> Tensor {
        Tensor {
            shape: vec![],
            data: Buffer::from_f64_values(dtype, &[value]),
            grad: None,
        }
    }

    pub(crate) fn from_buffer(shape: Vec<usize>, data: Buffer) -> Tensor {
        debug_assert_eq!(numel_of(&shape), data.len());
        Tensor {
            shape,
            data,
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    pub fn scalar_value(&self) -> Result<f64, TensorError> {
        if !self.is_scalar() {
            return Err(TensorError::NonScalarLoss {
                shape: self.shape.clone(),
            });
        }
        Ok(self.value_at(0))
    }

    /// Value at a linear (row-major) index, widened to f64.
    pub fn value_at(&self, i: usize) -> f64 {
        match &self.data {
            Buffer::F32(v) => f64::from(v[i]),
            Buffer::F64(v) => v[i],
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.to_f64_vec()
    }

    /// The gradient written by the last backward pass, if any.
    pub fn grad(&self) -> Option<Tensor> {
        self.grad
            .as_ref()
            .map(|g| Tensor::from_buffer(self.shape.clone(), g.clone()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.is_finite()
    }

    /// Same values under a different dtype (f64 -> f32 rounds).
    pub fn cast(&self, dtype: DType) -> Tensor {
        if dtype == self.dtype() {
            let mut t = self.clone();
            t.grad = None;
            return t;
        }
        Tensor::from_buffer(
            self.shape.clone(),
            Buffer::from_f64_values(dtype, &self.to_f64_vec()),
        )
    }

    /// Row `i` of a rank-2 tensor as a `[1, cols]` tensor.
    pub fn row(&self, i: usize) -> Result<Tensor, TensorError> {
        if self.shape.len() != 2 {
            return Err(TensorError::BadRank {
                op: "row",
                shape: self.shape.clone(),
            });
        }
        let cols = self.shape[1];
        let data = match &self.data {
            Buffer::F32(v) => Buffer::F32(v[i * cols..(i + 1) * cols].to_vec()),
            Buffer::F64(v) => Buffer::F64(v[i * cols..(i + 1) * cols].to_vec()),
        };
        Ok(Tensor::from_buffer(vec![1, cols], data))
    }

    /// Stacks `[1, cols]` rows back into an `[n, cols]` tensor.
    pub fn from_rows(rows: &[Tensor]) -> Result<Tensor, TensorError> {
        assert!(!rows.is_empty(), "from_rows: no rows");
        let cols = rows[0].numel();
        let dtype = rows[0].dtype();
        for r in rows {
            if r.numel() != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "from_rows",
                    lhs: rows[0].shape().to_vec(),
                    rhs: r.shape().to_vec(),
                });
            }
            if r.dtype() != dtype {
                return Err(TensorError::DtypeMismatch {
                    op: "from_rows",
                    lhs: dtype,
                    rhs: r.dtype(),
                });
            }
        }
        let data = match dtype {
            DType::F32 => {
                let mut out = Vec::with_capacity(rows.len() * cols);
                for r in rows {
                    if let Buffer::F32(v) = &r.data {
                        out.extend_from_slice(v);
                    }
                }
                Buffer::F32(out)
            }
            DType::F64 => {
                let mut out = Vec::with_capacity(rows.len() * cols);
                for r in rows {
                    if let Buffer::F64(v) = &r.data {
                        out.extend_from_slice(v);
                    }
                }
                Buffer::F64(out)
            }
        };
        Ok(Tensor::from_buffer(vec![rows.len(), cols], data))
    }

    /// Largest absolute elementwise difference, in f64.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64, TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op: "max_abs_diff",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let a = self.to_f64_vec();
        let b = other.to_f64_vec();
        Ok(a.iter()
            .zip(&b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max))
    }

    /// Bitwise equality of the value buffers (gradient slots ignored).
    pub fn bits_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape && self.data.bits_eq(&other.data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_data_mismatch_is_rejected() {
        let err = Tensor::from_f32(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, TensorError::ShapeDataMismatch { .. }));
    }

    #[test]
    fn zero_dimension_is_rejected() {
        let err = Tensor::from_f64(vec![2, 0], vec![]).unwrap_err();
        assert!(matches!(err, TensorError::ZeroDimension { .. }));
    }

    #[test]
    fn scalar_has_rank_zero_and_one_element() {
        let s = Tensor::scalar(2.5, DType::F64);
        assert!(s.shape().is_empty());
        assert!(s.is_scalar());
        assert_eq!(s.scalar_value().unwrap(), 2.5);
    }

    #[test]
    fn cast_round_trips_f32_exactly() {
        let t = Tensor::from_f32(vec![3], vec![0.1, -2.0, 7.5]).unwrap();
        let back = t.cast(DType::F64).cast(DType::F32);
        assert!(t.bits_eq(&back));
    }

    #[test]
    fn rows_split_and_rejoin() {
        let t = Tensor::from_f64(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let rows: Vec<Tensor> = (0..2).map(|i| t.row(i).unwrap()).collect();
        assert_eq!(rows[1].to_f64_vec(), vec![4.0, 5.0, 6.0]);
        let joined = Tensor::from_rows(&rows).unwrap();
        assert!(t.bits_eq(&joined));
    }
}
