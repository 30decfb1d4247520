//! Gaussian-blob classification datasets, the desk-scale stand-in for image
//! data. Deterministic given a seed.

use thiserror::Error;

use abnn_core::data::{DataError, Dataset};
use abnn_core::rng::{derive_rng, shuffle, standard_normal, uniform_in};
use abnn_core::tensor::{DType, Tensor};

use crate::config::SyntheticSpec;

const MEANS_STREAM: u64 = 0x3EA0;
const POINTS_STREAM: u64 = 0x3EA1;
const SHUFFLE_STREAM: u64 = 0x3EA2;

#[derive(Error, Debug)]
pub enum SyntheticError {
    #[error("class mean separation must be positive, got {0}")]
    BadSeparation(f64),
    #[error("within-class sigma must be positive, got {0}")]
    BadSigma(f64),
    #[error("need at least 2 classes, dim >= 1 and per_class >= 1")]
    BadShape,
    #[error(
        "could not place {classes} class means at separation {separation} within {attempts} draws"
    )]
    Placement {
        classes: usize,
        separation: f64,
        attempts: usize,
    },
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Draws `classes * per_class` points: class means are rejection-sampled in
/// `[0.25, 0.75]^dim` at pairwise distance >= `separation`, then points are
/// drawn as `mean + sigma * N(0, I)` and clamped to `[0, 1]`.
pub fn gen_synthetic(
    spec: &SyntheticSpec,
    seed: u64,
    dtype: DType,
) -> Result<Dataset, SyntheticError> {
    gen_synthetic_with(spec, seed, seed, dtype)
}

/// Like [`gen_synthetic`], but with the class means tied to
/// `distribution_seed` and the point noise to `draw_seed`. Two datasets with
/// the same distribution seed describe the same classification task; fresh
/// draw seeds give disjoint samples from it (train / evaluation splits).
pub fn gen_synthetic_with(
    spec: &SyntheticSpec,
    distribution_seed: u64,
    draw_seed: u64,
    dtype: DType,
) -> Result<Dataset, SyntheticError> {
    if spec.separation <= 0.0 {
        return Err(SyntheticError::BadSeparation(spec.separation));
    }
    if spec.sigma <= 0.0 {
        return Err(SyntheticError::BadSigma(spec.sigma));
    }
    if spec.classes < 2 || spec.dim == 0 || spec.per_class == 0 {
        return Err(SyntheticError::BadShape);
    }

    let mut mean_rng = derive_rng(distribution_seed, 0, MEANS_STREAM);
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(spec.classes);
    let max_attempts = 10_000;
    let mut attempts = 0;
    while means.len() < spec.classes {
        if attempts >= max_attempts {
            return Err(SyntheticError::Placement {
                classes: spec.classes,
                separation: spec.separation,
                attempts,
            });
        }
        attempts += 1;
        let candidate: Vec<f64> = (0..spec.dim)
            .map(|_| uniform_in(&mut mean_rng, 0.25, 0.75))
            .collect();
        let far_enough = means.iter().all(|m| {
            let d2: f64 = m
                .iter()
                .zip(&candidate)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            d2.sqrt() >= spec.separation
        });
        if far_enough {
            means.push(candidate);
        }
    }

    let mut point_rng = derive_rng(draw_seed, 0, POINTS_STREAM);
    let n = spec.classes * spec.per_class;
    let mut values = Vec::with_capacity(n * spec.dim);
    let mut labels = Vec::with_capacity(n);
    for (class, mean) in means.iter().enumerate() {
        for _ in 0..spec.per_class {
            for &m in mean {
                let v = m + spec.sigma * standard_normal(&mut point_rng);
                values.push(v.clamp(0.0, 1.0));
            }
            labels.push(class);
        }
    }

    // Interleave classes so contiguous slices stay balanced.
    let mut order: Vec<usize> = (0..n).collect();
    let mut shuffle_rng = derive_rng(draw_seed, 0, SHUFFLE_STREAM);
    shuffle(&mut shuffle_rng, &mut order);
    let mut shuffled_values = Vec::with_capacity(n * spec.dim);
    let mut shuffled_labels = Vec::with_capacity(n);
    for &i in &order {
        shuffled_values.extend_from_slice(&values[i * spec.dim..(i + 1) * spec.dim]);
        shuffled_labels.push(labels[i]);
    }

    let inputs = Tensor::from_f64_values(vec![n, spec.dim], &shuffled_values, dtype)
        .expect("shape matches value count");
    Ok(Dataset::new(inputs, shuffled_labels)?)
}
