//! Dense decoder-only language model: SwiGLU feed-forward blocks, causal
//! multi-head attention, RMS normalization and the cross-entropy objective.

mod attention;
mod ffn;
mod model;
mod norm;

pub use attention::{AttentionBlock, AttentionCache};
pub use ffn::{DenseFfn, FfnCache};
pub use model::{
    cross_entropy, lm_loss, Block, BlockCache, FeedForward, FfnCacheKind, Model, ModelCache,
    ModelConfig,
};
pub use norm::{RmsNorm, RmsNormCache};
