//! Hyperspectral pixel unmixing with a spatial-attention CNN encoder and a
//! latent Dirichlet variational autoencoder, together with VCA/FCLS
//! baselines, a synthetic scene generator and RMSE/SAD evaluation.

pub mod baselines;
mod binio;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod stats;
pub mod tensor;
pub mod training;

pub use binio::write_atomic;
pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
