//! Propagators and effective potentials on tube geometries
//! `ds^2 = dx^2 + b(x)^2 dphi^2` with the circle fibre integrated out.

pub mod error;
pub mod experiments;
pub mod geometry;
pub mod history;
pub mod kernels;
pub mod pde;
pub mod quadrature;
pub mod sliced;
pub mod spectral;

pub use error::{Error, Result};
