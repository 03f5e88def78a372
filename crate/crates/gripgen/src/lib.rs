//! Desk-scale hand-object manipulation synthesis toolkit.
//!
//! The pipeline generates bimanual hand pose sequences from a 3D object
//! trajectory alone. It is built from:
//!
//! - a rigged parametric hand with linear blend skinning ([`hand`]),
//! - mesh utilities: geodesics, basis point sets, signed distance,
//!   voxel intersection ([`mesh`]),
//! - a continuous correspondence embedding over hand vertices, optimized
//!   so embedding distance mirrors geodesic distance ([`embedding`]),
//! - object-centric motion canonicalization ([`motion`]),
//! - contact probability / correspondence maps on object surface points
//!   ([`contact`]) and per-vertex residual guidance ([`residual`]),
//! - a two-stage conditional DDPM with a small self-attention denoiser
//!   ([`diffusion`]) trained with geometric losses ([`losses`]),
//! - evaluation metrics ([`metrics`]), a synthetic scene generator
//!   ([`synth`]) and the end-to-end pipeline ([`pipeline`]).
//!
//! Everything is deterministic given a seed and runs on a single CPU core.

pub mod contact;
pub mod diffusion;
pub mod embedding;
pub mod error;
pub mod hand;
pub mod io;
pub mod losses;
pub mod mesh;
pub mod motion;
pub mod nn;
pub mod residual;

pub use error::{Error, Result};
