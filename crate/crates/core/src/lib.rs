//! Autoregressive triangle-mesh generation with an interleaved full/linear
//! attention hourglass transformer.
//!
//! The crate is organised bottom-up:
//!
//! - [`mesh_codec`]: OBJ I/O, normalization, canonical ordering, quantization
//!   and the `[S] coords… [E] [P]*` token grammar.
//! - [`nn`]: RMSNorm, SwiGLU, rotary embeddings, softmax and cross-entropy.
//! - [`attention`]: causal softmax attention and (simplified or gated) linear
//!   attention, each as a whole-sequence kernel and as a single decoding step.
//! - [`iblock`]: pre-norm transformer layers interleaving three linear layers
//!   with one full-attention layer.
//! - [`hourglass`]: the five-stage, three-scale model and its whole-sequence
//!   forward pass.
//! - [`inference`]: the cache-efficient token-by-token engine, nucleus
//!   sampling, generation and completion, and cache accounting.
//! - [`training`]: a small trainer with teacher-forced metrics.
//! - [`bench`]: the decode benchmark harness over the ablation variants.

pub mod attention;
pub mod autodiff;
pub mod bench;
pub mod checkpoint;
pub mod config;
mod error;
pub mod hourglass;
pub mod iblock;
pub mod inference;
pub mod mesh_codec;
pub mod nn;
pub mod params;
mod real;
pub mod training;

pub use error::{Error, Result};
pub use real::Real;

/// Worker threads for data-parallel work: `IFLAME_THREADS` if set to a
/// positive integer, otherwise the available parallelism.
pub fn worker_threads() -> usize {
    std::env::var("IFLAME_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}
