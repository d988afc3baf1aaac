//! Neural building blocks on top of [`crate::diffcore`].

mod attention;
mod linear;
mod lora;
mod xblock;

pub use attention::{mha, mha_segments, MhaParams, Segment};
pub use linear::{Ffn, LayerNorm, Linear, WeightInit};
pub use lora::{lora_apply, AdaptedLinear, LoraAdapter, LORA_ALPHA};
pub use xblock::{xblock, Tokens, XBlockParams, FFN_EXPAND};

/// Attention heads used throughout.
pub const HEAD_COUNT: usize = 4;
