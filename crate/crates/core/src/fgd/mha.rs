//! Multi-head self-attention and multi-head guided attention.

use candle_core::{Tensor, D};

use crate::error::{Error, Result};
use crate::fgd::embed::GuidancePair;
use crate::nn::{softmax, Ctx, Linear};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Scaling {
    /// Logits scaled by `1/sqrt(D/h)`.
    PerHead,
    /// q, k and v each scaled by `1/sqrt(D)`, logits left unscaled.
    Literal,
}

impl Scaling {
    pub fn from_flag(paper_literal: bool) -> Self {
        if paper_literal {
            Scaling::Literal
        } else {
            Scaling::PerHead
        }
    }
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    pub scaling: Scaling,
    dropout: f64,
}

/// Attention output plus the per-head weight matrices (`B x h x T x T`).
pub struct Attended {
    pub output: Tensor,
    pub weights: Tensor,
}

fn ensure_finite(x: &Tensor, what: &str) -> Result<()> {
    let probe = x.detach();
    let s = (probe.zeros_like()? * &probe)?.sum_all()?.to_dtype(candle_core::DType::F64)?;
    if s.to_scalar::<f64>()? == 0.0 {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

impl MultiHeadAttention {
    pub fn new(
        store: &ParamStore,
        prefix: &str,
        dim: usize,
        heads: usize,
        scaling: Scaling,
        dropout: f64,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("dim {dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            q: Linear::new(store, &format!("{prefix}.q"), dim, dim)?,
            k: Linear::new(store, &format!("{prefix}.k"), dim, dim)?,
            v: Linear::new(store, &format!("{prefix}.v"), dim, dim)?,
            out: Linear::new(store, &format!("{prefix}.out"), dim, dim)?,
            heads,
            scaling,
            dropout,
        })
    }

    fn split(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, d) = x.dims3()?;
        Ok(x.reshape((b, t, self.heads, d / self.heads))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    /// Queries from `q_src`, keys from `k_src`, values from `v_src`.
    pub fn attend(&self, q_src: &Tensor, k_src: &Tensor, v_src: &Tensor, ctx: &Ctx) -> Result<Attended> {
        let (b, t, d) = v_src.dims3()?;
        if d % self.heads != 0 {
            return Err(Error::Config(format!("dim {d} not divisible by {} heads", self.heads)));
        }
        let mut q = self.q.forward(q_src, ctx)?;
        let mut k = self.k.forward(k_src, ctx)?;
        let mut v = self.v.forward(v_src, ctx)?;
        let logit_scale = match self.scaling {
            Scaling::PerHead => 1.0 / ((d / self.heads) as f64).sqrt(),
            Scaling::Literal => {
                let s = 1.0 / (d as f64).sqrt();
                q = (q * s)?;
                k = (k * s)?;
                v = (v * s)?;
                1.0
            }
        };
        let (q, k, v) = (self.split(&q)?, self.split(&k)?, self.split(&v)?);
        let logits = (q.matmul(&k.transpose(2, 3)?.contiguous()?)? * logit_scale)?;
        let weights = softmax(&logits, D::Minus1)?;
        let mixed = ctx.dropout(&weights, self.dropout)?.matmul(&v)?;
        let merged = mixed.transpose(1, 2)?.contiguous()?.reshape((b, t, d))?;
        Ok(Attended {
            output: self.out.forward(&merged, ctx)?,
            weights,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Mhsa(pub MultiHeadAttention);

impl Mhsa {
    pub fn forward_with_weights(&self, x: &Tensor, ctx: &Ctx) -> Result<Attended> {
        ensure_finite(x, "self-attention input")?;
        self.0.attend(x, x, x, ctx)
    }

    pub fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        Ok(self.forward_with_weights(x, ctx)?.output)
    }
}

/// Guided attention: queries and keys come from a focus block, values from
/// the decoder stream. All three projections are independent.
#[derive(Debug, Clone)]
pub struct Mhga(pub MultiHeadAttention);

impl Mhga {
    pub fn forward_with_weights(&self, stream: &Tensor, guidance: &GuidancePair, ctx: &Ctx) -> Result<Attended> {
        if guidance.q.dims() != stream.dims() || guidance.k.dims() != stream.dims() {
            return Err(Error::Shape {
                context: format!("guidance from stage {} vs decoder stream", guidance.stage + 1),
                expected: stream.dims().to_vec(),
                actual: if guidance.q.dims() != stream.dims() {
                    guidance.q.dims().to_vec()
                } else {
                    guidance.k.dims().to_vec()
                },
            });
        }
        self.0.attend(&guidance.q, &guidance.k, stream, ctx)
    }

    pub fn forward(&self, stream: &Tensor, guidance: &GuidancePair, ctx: &Ctx) -> Result<Tensor> {
        Ok(self.forward_with_weights(stream, guidance, ctx)?.output)
    }
}
