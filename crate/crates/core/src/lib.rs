//! Core algorithms for tetraforge: differentiable iso-surface extraction from
//! implicit density/radiance fields and back-propagation of mesh edits into
//! the field parameters.
//!
//! The crate is `no_std`-compatible (requires `alloc`); the `std` feature
//! (default) only toggles the standard library for dependents, every
//! algorithm below is identical under both configurations. All transcendental
//! math goes through `libm` so results are bit-identical regardless of the
//! feature set.
//!
//! Module map:
//! - [`tape`]: scalar reverse-mode autodiff (the gradient engine)
//! - [`net`]: small MLPs, positional encoding, Adam, checkpoint bytes
//! - [`field`]: implicit fields (analytic SDFs and MLP-backed), ray quadrature
//! - [`grid`] / [`march`]: regular lattice, five-tet split, marching tetrahedra
//! - [`octree`]: seed-adaptive octree and irregular-grid extraction
//! - [`color`]: visibility-aware vertex-color extraction
//! - [`edit`]: Chamfer/Eikonal geometry fitting and L2 color fitting
//! - [`render`]: image synthesis and warp-field motion rendering

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod color;
pub mod edit;
pub mod field;
pub mod grid;
pub mod kdtree;
pub mod march;
pub mod net;
pub mod octree;
pub mod render;
pub mod tape;
pub mod vec3;

mod error;

pub use error::Error;

pub type Result<T> = core::result::Result<T, Error>;
