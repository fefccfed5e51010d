//! Focus-guided decoder structure: hybrid embedding, focus blocks, guided
//! decoders, classification head, and the variant registry.

pub mod attention;
pub mod decoder;
pub mod embed;
pub mod mha;
pub mod model;

pub use attention::{simam, AttentionRegistry, Cbam, FocusAttention, SimAm, SqueezeExcite};
pub use decoder::{EncoderBlock, FeedForward, FgdDecoder};
pub use embed::{FocusBlock, GuidancePair, HybridEmbed, SharedEmbeddings};
pub use mha::{Attended, Mhga, Mhsa, MultiHeadAttention, Scaling};
pub use model::{
    build_variant, msht_forward, EncoderHead, FgdHead, ForwardTrace, Model, TokenHead, VariantDef,
    VariantRegistry, VARIANT_NAMES,
};
