//! Less-attention vision transformer at desk scale.
//!
//! Vanilla-attention layers compute scores from queries and keys; the
//! less-attention layers that follow them in a stage re-parameterize the
//! stored scores of the previous layer through two `N x N` linear maps with
//! a transposition in between. Between stages the last attention scores are
//! downsampled and added, with a per-head LayerScale, to the next stage's
//! first scores. A diagonality-preserving loss keeps transformed scores
//! close to symmetric.
//!
//! Everything runs in `f64` on the CPU with deterministic seeding, and all
//! gradients flow through the reverse-mode [`tape`].

pub mod attention;
pub mod checkpoint;
pub mod complexity;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod meter;
pub mod model;
pub mod ops;
pub mod params;
pub mod residual;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;

pub use config::{ModelConfig, StageConfig};
pub use error::{Error, Result};
pub use model::LaViTModel;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
