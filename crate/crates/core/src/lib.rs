//! Image-side training against frozen, precomputed caption embeddings.

pub mod cache;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod flops;
pub mod loss;
pub mod real;
pub mod train;
mod util;
pub mod vit;

pub use error::{LiftError, Result};
