use candle_core::Tensor;

use crate::config::ModelConfig;
use crate::error::Result;
use crate::fgd::embed::GuidancePair;
use crate::fgd::mha::{Mhga, Mhsa, MultiHeadAttention, Scaling};
use crate::nn::{Ctx, LayerNorm, Linear};
use crate::params::ParamStore;

/// Two-layer MLP with GELU.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
    dropout: f64,
}

impl FeedForward {
    pub fn new(store: &ParamStore, prefix: &str, dim: usize, hidden: usize, dropout: f64) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, &format!("{prefix}.fc1"), dim, hidden)?,
            fc2: Linear::new(store, &format!("{prefix}.fc2"), hidden, dim)?,
            dropout,
        })
    }

    pub fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let h = self.fc1.forward(x, ctx)?.gelu_erf()?;
        let h = ctx.dropout(&h, self.dropout)?;
        let y = self.fc2.forward(&h, ctx)?;
        ctx.dropout(&y, self.dropout)
    }
}

fn attention(store: &ParamStore, prefix: &str, cfg: &ModelConfig) -> Result<MultiHeadAttention> {
    MultiHeadAttention::new(
        store,
        prefix,
        cfg.fgd.token_dim,
        cfg.fgd.heads,
        Scaling::from_flag(cfg.fgd.paper_literal_scaling),
        cfg.fgd.dropout,
    )
}

/// Pre-norm decoder: MHSA, FFN, MHGA, FFN, each with a residual connection.
#[derive(Debug, Clone)]
pub struct FgdDecoder {
    pub norm_sa: LayerNorm,
    pub mhsa: Mhsa,
    pub norm_ff1: LayerNorm,
    pub ffn1: FeedForward,
    pub norm_ga: LayerNorm,
    pub mhga: Mhga,
    pub norm_ff2: LayerNorm,
    pub ffn2: FeedForward,
}

impl FgdDecoder {
    pub fn new(store: &ParamStore, prefix: &str, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.fgd.token_dim;
        let (h, p) = (cfg.fgd.ffn_hidden, cfg.fgd.dropout);
        Ok(Self {
            norm_sa: LayerNorm::new(store, &format!("{prefix}.norm_sa"), d)?,
            mhsa: Mhsa(attention(store, &format!("{prefix}.mhsa"), cfg)?),
            norm_ff1: LayerNorm::new(store, &format!("{prefix}.norm_ff1"), d)?,
            ffn1: FeedForward::new(store, &format!("{prefix}.ffn1"), d, h, p)?,
            norm_ga: LayerNorm::new(store, &format!("{prefix}.norm_ga"), d)?,
            mhga: Mhga(attention(store, &format!("{prefix}.mhga"), cfg)?),
            norm_ff2: LayerNorm::new(store, &format!("{prefix}.norm_ff2"), d)?,
            ffn2: FeedForward::new(store, &format!("{prefix}.ffn2"), d, h, p)?,
        })
    }

    pub fn forward(&self, z: &Tensor, guidance: &GuidancePair, ctx: &Ctx) -> Result<Tensor> {
        let z1 = (self.mhsa.forward(&self.norm_sa.forward(z, ctx)?, ctx)? + z)?;
        let z2 = (self.ffn1.forward(&self.norm_ff1.forward(&z1, ctx)?, ctx)? + &z1)?;
        let z3 = (self.mhga.forward(&self.norm_ga.forward(&z2, ctx)?, guidance, ctx)? + &z2)?;
        Ok((self.ffn2.forward(&self.norm_ff2.forward(&z3, ctx)?, ctx)? + &z3)?)
    }
}

/// Pre-norm encoder block (MHSA + FFN) used by the Hybrid1 variant.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub norm_sa: LayerNorm,
    pub mhsa: Mhsa,
    pub norm_ff: LayerNorm,
    pub ffn: FeedForward,
}

impl EncoderBlock {
    pub fn new(store: &ParamStore, prefix: &str, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.fgd.token_dim;
        Ok(Self {
            norm_sa: LayerNorm::new(store, &format!("{prefix}.norm_sa"), d)?,
            mhsa: Mhsa(attention(store, &format!("{prefix}.mhsa"), cfg)?),
            norm_ff: LayerNorm::new(store, &format!("{prefix}.norm_ff"), d)?,
            ffn: FeedForward::new(store, &format!("{prefix}.ffn"), d, cfg.fgd.ffn_hidden, cfg.fgd.dropout)?,
        })
    }

    pub fn forward(&self, z: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let z1 = (self.mhsa.forward(&self.norm_sa.forward(z, ctx)?, ctx)? + z)?;
        Ok((self.ffn.forward(&self.norm_ff.forward(&z1, ctx)?, ctx)? + &z1)?)
    }
}
