//! Training and evaluation of stochastic (Gaussian-variational) feed-forward
//! classifiers under l-infinity projected-gradient attacks.
//!
//! The crate is organized around a small reverse-mode tensor engine
//! ([`tensor`]), variational models whose randomness enters through an
//! explicit noise vector ([`net`]), single-sample and averaged-gradient PGD
//! attacks ([`attack`]), the three adversarial-training defenses ([`train`]),
//! and a measurement harness that assembles robust-accuracy reports
//! ([`eval`]).

pub mod data;
pub mod net;
pub mod attack;
pub mod eval;
pub mod train;
pub mod rng;
pub mod tensor;

pub use data::Dataset;
pub use tensor::{DType, Tensor, TensorError, Trace};
