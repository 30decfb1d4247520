//! Labeled classification datasets as dense input matrices.

use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

#[derive(Error, Debug)]
pub enum DataError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("dataset has {rows} input rows but {labels} labels")]
    CountMismatch { rows: usize, labels: usize },
    #[error("dataset inputs must be rank 2, got shape {shape:?}")]
    BadRank { shape: Vec<usize> },
}

/// Inputs `[n, features]` paired with integer class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    inputs: Tensor,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>) -> Result<Dataset, DataError> {
        if inputs.shape().len() != 2 {
            return Err(DataError::BadRank {
                shape: inputs.shape().to_vec(),
            });
        }
        if inputs.shape()[0] != labels.len() {
            return Err(DataError::CountMismatch {
                rows: inputs.shape()[0],
                labels: labels.len(),
            });
        }
        Ok(Dataset { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> usize {
        self.inputs.shape()[1]
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn input_row(&self, i: usize) -> Tensor {
        self.inputs.row(i).expect("dataset inputs are rank 2")
    }

    /// Subset in the given index order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let rows: Vec<Tensor> = indices.iter().map(|&i| self.input_row(i)).collect();
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Dataset {
            inputs: Tensor::from_rows(&rows).expect("rows share shape and dtype"),
            labels,
        }
    }

    /// Splits off the last `n` examples: `(front, back)`.
    pub fn split_tail(&self, n: usize) -> (Dataset, Dataset) {
        let n = n.min(self.len());
        let cut = self.len() - n;
        let front: Vec<usize> = (0..cut).collect();
        let back: Vec<usize> = (cut..self.len()).collect();
        (self.subset(&front), self.subset(&back))
    }
}
