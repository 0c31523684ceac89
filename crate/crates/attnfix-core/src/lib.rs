//! Runtime hot-fixing of over-attention in small transformer encoders.
//!
//! The crate is `no_std` (alloc required) and contains the full compute
//! path: a dense f64 tensor kernel with reverse-mode autodiff, victim
//! transformer encoders whose attention maps can be recorded and
//! overridden mid-inference, synthetic dataset / poisoning utilities,
//! gradient-based trigger inversion, a contrastively trained per-column
//! anomaly detector, and the replace-and-rescale attention patch
//! operator. IO, file formats, and the CLI live in the companion
//! `attnfix-cli` crate.

#![cfg_attr(not(any(test, feature = "std")), no_std)]
// index loops in the numeric kernels mirror the written-out math; iterator
// rewrites would obscure the correspondence
#![allow(clippy::needless_range_loop)]

extern crate alloc;

pub mod data;
pub mod detector;
pub mod error;
pub mod hotpatch;
pub mod inversion;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
