//! Numerical lab for random walks in perturbed random environments on Z^d.
//!
//! The crate is organized around a few layers:
//!
//! * [`env_model`]: environment laws, their moments and the K-conditions,
//!   and deterministic lazily sampled environments.
//! * [`lattice`]: finite regions (boxes, slabs, half-space truncations,
//!   arbitrary site sets) and their boundaries.
//! * [`exact_solver`]: Green's functions, hitting probabilities and exit
//!   laws of the walk killed on leaving a region, for a fixed environment.
//! * [`monte_carlo`]: quenched and annealed walk simulation.
//! * [`kalikow`]: Kalikow's auxiliary drift and its perturbative expansion.
//! * [`ballisticity`]: checks of the ballisticity condition and related
//!   fluctuation estimates.

pub mod ballisticity;
mod banded;
pub mod env_model;
pub mod error;
pub mod exact_solver;
pub mod kalikow;
pub mod lattice;
pub mod monte_carlo;
pub mod rng;
pub mod stats;

pub use error::{Error, Result};
