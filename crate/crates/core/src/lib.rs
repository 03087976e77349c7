//! Single-pass 3D boundary segmentation for retinal OCT volumes.
//!
//! Each boundary (RPE, IS/OS, ILM) is located by one pass of:
//!
//! 1. an axial derivative filter with lateral box averaging (`D`),
//! 2. a 3D box smoothing of the raw volume (`S`),
//! 3. a depth-weighted combination `I = w(k) * (D + S)` that encodes where
//!    the boundary sits along the A-scan,
//! 4. a per-A-scan argmax over `I`,
//! 5. median-based outlier rejection, inpainting and surface smoothing.
//!
//! The three boundaries are found as a cascade: RPE on the full volume, then
//! IS/OS above it, then ILM above IS/OS. Supporting modules provide raw volume
//! I/O, thickness maps, mesh export, B-scan rendering and a synthetic phantom
//! generator with ground truth.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod cli;
pub mod enhance;
pub mod error;
pub mod filter;
pub mod io;
pub mod phantom;
pub mod render;
pub mod segment;
pub mod surface;
pub mod volume;

pub use error::{Error, Result};
pub use volume::Volume;
