//! Error-optimized feature caching for diffusion transformers.
//!
//! The crate bundles a small deterministic diffusion-transformer
//! ([`model::ToyDit`]), a DDIM sampler with block hooks ([`sampler`]), a
//! schedule-driven feature cache with trend correction ([`cache`]), prior
//! knowledge extraction and correction planning ([`prior`]), and an
//! evaluation harness that measures caching error against uncached runs
//! ([`eval`]).

pub mod cache;
pub mod config;
pub mod error;
pub mod eval;
pub mod model;
pub mod numerics;
pub mod prior;
pub mod sampler;

pub use error::{Error, ErrorKind, Result};
