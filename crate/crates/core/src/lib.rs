//! Faithful counterfactual explanations for small differentiable classifiers.
//!
//! The crate bundles a reverse-mode autodiff tape, dataset utilities,
//! MLP / deep-ensemble / joint-energy classifiers, an SGLD sampler, split
//! conformal calibration, the ECCCo family of counterfactual generators with
//! the usual baselines, and the benchmark metrics.

pub mod autodiff;
pub mod conformal;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod generators;
pub mod models;
pub mod rng;
pub mod sampler;

pub use autodiff::{Tape, Tensor, Var};
pub use error::{Error, Result};
