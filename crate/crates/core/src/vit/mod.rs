//! Miniature vision transformer.
//!
//! Layout is the common pre-norm variant: `x + MHSA(LN(x))` followed by
//! `x + MLP(LN(x))`, with biases on every projection, learned positional
//! embeddings, a single CLS token and a final layer norm applied to the CLS
//! row. Attention logits are scaled by `1/sqrt(head_dim)`.

mod config;
mod model;

pub use config::ViTConfig;
pub use model::{Block, ForwardTrace, Injection, ModelVars, ViTModel, LN_EPS, PIXEL_MEAN, PIXEL_STD};
