//! Numeric utilities: normal distribution functions, Gaussian quadrature
//! and deterministic RNG streams.

pub mod normal;
pub mod quadrature;
pub mod rng;
