//! Latent action diffusion for visuomotor control: models, data pipeline and simulator.
//!
//! Builds without `std`; enable the `std` feature for faster float math and `std::error::Error`.

#![no_std]

extern crate alloc;
#[cfg(feature = "std")]
extern crate std;

pub mod ata;
pub mod autograd;
pub mod config;
pub mod datapipe;
pub mod diffusion;
pub mod encoders;
pub mod envsuite;
pub mod lpg;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod policy;
pub mod rng;
pub mod tensor;
pub mod types;
