#![allow(clippy::neg_cmp_op_on_partial_ord)]
//! Differentially private training by reparametrized gradient perturbation.
//!
//! Each weight matrix `W` is observed through two low-rank orthonormal
//! gradient carriers `L` (p×r) and `R` (r×d) plus a gradient-free residual
//! `W − LR`. Per-sample gradients live in the `r(p+d)`-dimensional carrier
//! space, where they are clipped and perturbed before being reconstructed
//! into a projected update for `W`.

pub mod analysis;
pub mod carriers;
pub mod data;
pub mod error;
pub mod experiment;
pub mod matrix;
pub mod net;
pub mod optimizer;
pub mod privacy;
pub mod rng;

pub use error::{Error, Result};
pub use matrix::Matrix;
