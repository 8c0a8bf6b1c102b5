//! Weight-compander training workbench.
//!
//! Every weight of a network is expressed through a latent value `v` as
//! `w = a * atan(v / b)`. The crate covers the scalar reparameterization math,
//! a small reverse-mode autodiff engine with the layers needed for MLP and
//! small CNN experiments, SGD/Adam and the modified adaptive optimizer, the
//! model binding that stores latent weights and routes gradients, weight
//! distribution analysis, and the experiment harness behind the `wcomp` CLI.

pub mod analysis;
pub mod compander;
pub mod error;
pub mod harness;
pub mod nn;
pub mod optim;
pub mod reparam;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Dtype, Real, Tensor};
