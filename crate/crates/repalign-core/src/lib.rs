//! Core library for flow-matching generative training with representation
//! alignment. `no_std` + `alloc`: everything here is pure computation on
//! `f32` buffers; file and terminal concerns live in the companion crate.
//!
//! Layout mirrors the pipeline:
//! - [`numerics`]: tensors, tape autodiff, AdamW/EMA, counter RNG, grad checks
//! - [`process`]: interpolants, corruption, velocity/score identities
//! - [`model`]: patch transformer denoiser, projection head, teachers
//! - [`repa`]: alignment objectives and the combined loss
//! - [`sampling`]: ODE/SDE/ancestral samplers with interval guidance
//! - [`metrics`]: CKNNA/CKA, linear probe, Fréchet distance

#![cfg_attr(not(any(test, feature = "std")), no_std)]

extern crate alloc;

pub mod error;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod process;
pub mod repa;
pub mod sampling;

pub use error::{Error, Result};
