//! Universal semi-supervised classification on synthetic data.
//!
//! Unlabeled samples may come from classes or domains absent from the
//! labeled set. Unknown-class samples are scored by combining prototype
//! distances with the disagreement between predictions on two augmented
//! views; unknown-domain samples are scored by the reconstruction error of a
//! VAE trained on labeled data, passed through a two-component Gaussian
//! mixture. Both scores re-weight a consistency regularizer and an
//! adversarial domain-alignment term during training.

pub mod acceptance;
pub mod cds;
pub mod cli;
pub mod config;
pub mod doe;
pub mod error;
pub mod eval;
pub mod models;
pub mod numerics;
pub mod rng;
pub mod synthdata;
pub mod training;

pub use error::{Error, Result};
pub use numerics::{Matrix, ParameterStore, Tape, Var};
