//! Trajectory and instance-mask trimming for splat-grid diffusion.
//!
//! This crate is `no_std` (with `alloc`) and carries every algorithm of the
//! pipeline: latent grids and the flow-matching Euler sampler, a toy
//! token-sequence transformer denoiser, the splat decoder and orthographic
//! rasterizer, the procedural prompt set and image-space evaluator, pairwise
//! dataset construction, the pairwise latent selector with hand-written
//! backpropagation, the trajectory-reduction tournament, corner-reference
//! instance masking, and the FLOPs and diversity accounting.
//!
//! File formats, the CLI and wall-clock benchmarks live in the `trim` crate.
#![no_std]
// Validation uses `!(x > 0.0)` style checks so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod chamfer;
pub mod cost;
pub mod dataset;
pub mod decode;
pub mod denoiser;
pub mod error;
pub mod latent;
pub mod mask;
pub mod math;
pub mod reduction;
pub mod render;
pub mod rng;
pub mod sampler;
pub mod scene;
pub mod selector;
pub mod synth;

pub use error::{Error, Result};
pub use latent::{GridShape, LatentGrid, TokenPos, TokenSequence};
