//! Core of a desk-scale multi-view face avatar stack.
//!
//! Everything in this crate is pure computation over in-memory data and only
//! needs `alloc`: capture domain types, camera geometry, texture-space
//! unwrapping and warping, a z-buffered differentiable rasterizer, a small
//! reverse-mode autodiff with the layers of a conditional VAE, the appearance
//! model itself, the masked three-term training objective, the camera-split
//! evaluation protocol, and a synthetic capture generator.
//!
//! File formats, directory layouts and the command line live in the
//! `multiface` companion crate.
#![no_std]
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod autodiff;
pub mod capture;
pub mod error;
pub mod geometry;
pub mod model;
pub mod protocol;
pub mod raster;
pub mod synth;
pub mod texture;
pub mod train;

pub use error::{Error, Result};
