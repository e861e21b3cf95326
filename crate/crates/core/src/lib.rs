//! Finite element approximation of semilinear parabolic SPDEs driven by
//! spatially correlated noise that is sampled on a square grid by circulant
//! embedding and interpolated piecewise linearly onto the finite element mesh.

pub mod error;
pub mod fem;
pub mod geometry;
pub mod harness;
pub mod kernels;
pub mod noise;
pub mod sobolev;
pub mod stepper;

pub use error::{Error, Result};
