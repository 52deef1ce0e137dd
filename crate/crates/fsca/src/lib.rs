//! Desk-scale laboratory for feature-separated cross-attention crowd
//! counting: a small reverse-mode tensor engine, synthetic multi-domain scene
//! generation, the separation/fusion network, InfoNCE and CLUB mutual
//! information bounds, an alternating-optimization trainer, and the
//! evaluation protocols that exercise all of it.

pub mod error;
pub mod rng;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
