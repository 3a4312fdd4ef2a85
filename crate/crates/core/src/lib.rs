//! Neural second-order dynamics for protein–ligand binding trajectories.

pub mod dynamics;
pub mod error;
pub mod baselines;
pub mod bindingnet;
pub mod data;
pub mod geometry;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
