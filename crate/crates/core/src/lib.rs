//! Bayesian generative modeling for causal effect estimation.
//!
//! Treatment `X`, outcome `Y` and covariates `V` are modeled through a
//! low-dimensional latent vector `Z = (z0, z1, z2, z3)`. Training alternates
//! per-individual latent updates with variational updates of three Bayesian
//! networks; effects are then estimated from posterior samples of `Z`.

pub mod bnn;
pub mod data;
pub mod dimsel;
pub mod effects;
pub mod egm;
pub mod error;
pub mod latent;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
