//! Context-adaptive multi-prompt embeddings (CAMP).
//!
//! A small, self-contained vision-language contrastive learner. A decoder-only
//! text encoder reads a caption followed by K prompt segments and produces K
//! embeddings in a single forward pass, using an attention mask that lets each
//! segment see the caption but not its sibling segments. A tiny vision
//! transformer with multi-head attention pooling embeds images (or short
//! videos) into the same joint space. Training minimizes a symmetric InfoNCE
//! loss plus a diversity penalty across prompt segments and an optional
//! negation-aware contrastive term, all on a procedurally generated corpus of
//! colored shapes, so every experiment is deterministic end to end.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod prompt;
pub mod rng;
pub mod tensor;
pub mod text_encoder;
pub mod trainer;
pub mod verify;
pub mod vision_encoder;

pub use error::{Error, Result};
