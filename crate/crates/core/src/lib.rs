//! Commutative vector quantization for transformer KV caches.

pub mod attn;
pub mod baselines;
pub mod cache;
pub mod error;
pub mod io;
pub mod keyquant;
pub mod linalg;
pub mod rope;
pub mod synth;
pub mod valquant;

pub use error::{Error, Result};
