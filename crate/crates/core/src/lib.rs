//! Monte Carlo fractional physics-informed networks for recovering the source
//! term of the fractional Poisson equation `(-Δ)^{α/2} u = f` on the unit
//! ball from noisy interior observations of `u`.
pub mod benchmark;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod field;
pub mod fractional;
pub mod loss;
pub mod nn;
pub mod sampling;
pub mod theory;
pub mod training;
