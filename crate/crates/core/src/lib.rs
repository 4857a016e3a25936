//! Compressive-sensing image codec with a Laplacian-pyramid stack of
//! reconstructive adversarial networks.

pub mod config;
pub mod error;
pub mod losses;
pub mod models;
pub mod mrcs;
pub mod metrics;
pub mod pyramid_data;
pub mod reconstructor;
pub mod sensing;
pub mod store;
pub mod trainer;

pub use error::{Error, Result};
