//! Language-guided affordance masks on 3D Gaussian splats.
//!
//! The crate is `no_std` and only needs an allocator. File formats, the CLI
//! and experiment orchestration live in the `affordsplat` crate.

#![no_std]

extern crate alloc;

pub mod affordnet;
pub mod autograd;
pub mod cmsa;
pub mod datagen;
pub mod error;
pub mod evalkit;
pub mod gscore;
pub mod nn;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod textmod;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
