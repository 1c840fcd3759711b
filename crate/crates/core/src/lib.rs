//! Multi-modal product embeddings: hashed text features and image
//! embeddings fused by a small transformer, trained against multiple
//! engagement objectives with sampled softmax, and served through exact or
//! graph-based nearest-neighbor indexes.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod hash_embed;
pub mod index;
pub mod losses;
mod hashing;
pub mod par;
pub mod sketch;
pub mod synth;
pub mod tensor;
pub mod text;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
