//! Reasoning-aware multimodal product embeddings at desk scale.
//!
//! A toy vision encoder and a small causal decoder read a product's patch
//! grid and title, write a structured attribute rationale, and expose the
//! hidden state of a closing `<|emb|>` token. A gated multi-head fusion
//! module mixes that state with pooled image and text states into the final
//! embedding. Training runs a contrastive + next-token stage followed by a
//! group-relative policy optimization stage with composite rewards.

pub mod attr;
pub mod error;
pub mod eval;
pub mod fire;
pub mod fusion;
pub mod losses;
pub mod model;
pub mod numeric;
pub mod rl;
pub mod train;

pub use attr::{AttributeMap, Dataset, ProductRecord, Schema, Selector, Triplet};
pub use error::{Error, Result};
pub use model::{TokenId, Vocab};
pub use numeric::{ParamSet, Rng, Tensor};
