//! Numerical laboratory for monomial potentials of mean-field networks:
//! the Abelian-group reasoning network and its potential decomposition,
//! particle Wasserstein gradient flows with decoupling and spectral
//! diagnostics, the semi-ring algebra of measures, and maximum-entropy
//! realizations of potential constraints.

pub mod abelian_task;
pub mod acceptance;
pub mod dynamics;
pub mod error;
pub mod experiments;
pub mod group_fourier;
pub mod hermite;
pub mod maxent;
pub mod measure_algebra;
pub mod potentials;
pub mod quadrature;
pub mod rng;
pub mod spectrum;

pub use error::{Error, Result};
