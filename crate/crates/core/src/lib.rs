//! Core of flowsplat: a physics-informed neural velocity field for fluid
//! regions of a single image, fitted to scene flow under simplified
//! incompressible Navier-Stokes constraints, plus the Gaussian splatting
//! pipeline that animates and renders the result.
//!
//! The crate is `no_std` (with `alloc`). File formats, the command line and
//! thread pools live in the companion `flowsplat` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod animation;
pub mod diffengine;
pub mod error;
pub mod gradcheck;
pub mod grid;
pub mod math;
pub mod metrics;
pub mod neuralfield;
pub mod physics;
pub mod renderer;
pub mod scene;
pub mod synthlab;
pub mod training;

pub use error::{Error, Result};
pub use nalgebra;
