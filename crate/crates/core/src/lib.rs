//! Joint inversion of per-component generative models for intrinsic image
//! decomposition.

pub mod autodiff;
pub mod datasets;
pub mod error;
pub mod forward_models;
pub mod generators;
pub mod image;
pub mod inversion;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod priors;

pub use error::{Error, Result};
