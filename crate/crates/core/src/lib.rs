//! Constraint-aligned conditional diffusion for trajectory optimization.
//!
//! The pipeline: [`problems`] defines two benchmark NLP families,
//! [`solver`] and [`dataset`] produce locally optimal training data with an
//! augmented-Lagrangian solver, [`diffusion`] and [`denoiser`] implement a
//! classifier-free-guided DDPM over decision vectors, [`align`] adds the
//! re-weighted constraint-violation loss, and [`evaluation`] measures
//! feasibility and warm-start quality of generated samples.

pub mod align;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod evaluation;
pub mod persist;
pub mod problems;
pub mod rng;
pub mod solver;

pub use error::{Error, Result};
