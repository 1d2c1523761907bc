//! Core algorithms for a desk-scale single-stage text-to-song model:
//! a minimal reverse-mode autodiff substrate, a toy residual-vector-quantization
//! audio codec, the token-pattern algebra for mixed and dual-track layouts,
//! condition encoders, the autoregressive decoder, the staged training scheme,
//! and the synthetic-corpus preprocessing pipeline.
//!
//! The crate is `no_std` (with `alloc`); all file formats are defined against
//! in-memory byte/string buffers so the IO layer can live in a companion crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod codec;
pub mod conditioning;
pub mod model;
pub mod numerics;
pub mod patterns;
pub mod pipeline;
pub mod rng;
pub mod trainer;
