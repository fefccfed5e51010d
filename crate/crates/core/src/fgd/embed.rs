//! Hybrid embedding of the deepest stage map and the per-stage focus blocks
//! that turn earlier maps into guidance sequences. All five embedding sites
//! use the same class token and positional encoding tensors.

use candle_core::Tensor;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::fgd::attention::{AttentionRegistry, FocusAttention};
use crate::nn::{max_pool_window, Conv2d, Ctx};
use crate::params::{Init, ParamStore};

pub const CLASS_TOKEN: &str = "fgd.class_token";
pub const POS_EMBED: &str = "fgd.pos_embed";

/// Class token (zero-initialized, `1 x D`) and learnable positional
/// encoding (`seq_len x D`). Cloning shares the underlying storage.
#[derive(Debug, Clone)]
pub struct SharedEmbeddings {
    pub class_token: Option<Tensor>,
    pub pos_embed: Option<Tensor>,
}

impl SharedEmbeddings {
    pub fn new(store: &ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.fgd.token_dim;
        let class_token = if cfg.fgd.use_class_token {
            Some(store.get_or_init(CLASS_TOKEN, (1, d), Init::Zeros)?)
        } else {
            None
        };
        let pos_embed = if cfg.fgd.use_positional_encoding {
            Some(store.get_or_init(POS_EMBED, (cfg.seq_len(), d), Init::Normal { std: 0.02 })?)
        } else {
            None
        };
        Ok(Self {
            class_token,
            pos_embed,
        })
    }

    /// `[x_class; tokens] + E_pos` for a `B x N x D` token batch.
    pub fn embed(&self, tokens: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let (b, _, d) = tokens.dims3()?;
        let z = match &self.class_token {
            Some(cls) => {
                let cls = ctx.p(cls).unsqueeze(0)?.broadcast_as((b, 1, d))?;
                Tensor::cat(&[&cls, tokens], 1)?
            }
            None => tokens.clone(),
        };
        match &self.pos_embed {
            Some(pos) => {
                let pos = ctx.p(pos);
                if pos.dim(0)? != z.dim(1)? {
                    return Err(Error::shape("positional encoding", &[z.dim(1)?, d], pos.dims()));
                }
                Ok(z.broadcast_add(&pos.unsqueeze(0)?)?)
            }
            None => Ok(z),
        }
    }
}

/// `B x C x H x W` -> `B x (H*W) x C`.
fn to_tokens(x: &Tensor) -> Result<Tensor> {
    Ok(x.flatten_from(2)?.transpose(1, 2)?.contiguous()?)
}

/// Patch projection (kernel = stride = patch size) followed by embedding.
#[derive(Debug, Clone)]
pub struct HybridEmbed {
    pub proj: Conv2d,
    patch: usize,
}

impl HybridEmbed {
    pub fn new(store: &ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let c = cfg.backbone.stage_channels[cfg.fgd.stage_count - 1];
        let p = cfg.fgd.patch_size;
        Ok(Self {
            proj: Conv2d::new(store, "fgd.embed.proj", c, cfg.fgd.token_dim, p, p, 0, true)?,
            patch: p,
        })
    }

    pub fn forward(&self, map: &Tensor, shared: &SharedEmbeddings, ctx: &Ctx) -> Result<Tensor> {
        let (_, _, h, w) = map.dims4()?;
        if h % self.patch != 0 || w % self.patch != 0 {
            return Err(Error::Config(format!(
                "map edge {h}x{w} not divisible by patch size {}",
                self.patch
            )));
        }
        let tokens = to_tokens(&self.proj.forward(map, ctx)?)?;
        shared.embed(&tokens, ctx)
    }
}

/// Guidance sequences from one focus block; `q` drives MHGA queries (max-pool
/// path) and `k` its keys (avg-pool path).
#[derive(Debug, Clone)]
pub struct GuidancePair {
    pub q: Tensor,
    pub k: Tensor,
    pub stage: usize,
}

#[derive(Debug)]
pub struct FocusBlock {
    pub stage: usize,
    pub attention: Box<dyn FocusAttention>,
    pub q_proj: Conv2d,
    pub k_proj: Conv2d,
    window: usize,
    grid: usize,
}

impl FocusBlock {
    /// `stage` is 0-based.
    pub fn new(
        store: &ParamStore,
        registry: &AttentionRegistry,
        cfg: &ModelConfig,
        stage: usize,
    ) -> Result<Self> {
        let c = cfg.backbone.stage_channels[stage];
        let d = cfg.fgd.token_dim;
        let prefix = format!("fgd.focus{}", stage + 1);
        Ok(Self {
            stage,
            attention: registry.build(&cfg.fgd.attention, store, &format!("{prefix}.att"), c, &cfg.fgd)?,
            q_proj: Conv2d::new(store, &format!("{prefix}.max_proj"), c, d, 1, 1, 0, true)?,
            k_proj: Conv2d::new(store, &format!("{prefix}.avg_proj"), c, d, 1, 1, 0, true)?,
            window: cfg.fgd.pool_windows[stage],
            grid: cfg.last_edge() / cfg.fgd.patch_size,
        })
    }

    pub fn forward(&self, map: &Tensor, shared: &SharedEmbeddings, ctx: &Ctx) -> Result<GuidancePair> {
        let (_, _, h, w) = map.dims4()?;
        let p = self.window;
        if h % p != 0 || w % p != 0 || h / p != self.grid || w / p != self.grid {
            return Err(Error::Config(format!(
                "stage {}: {h}x{w} map pooled by {p} does not give the {g}x{g} token grid",
                self.stage + 1,
                g = self.grid
            )));
        }
        let att = self.attention.forward(map, ctx)?;
        let (max, avg) = if p == 1 {
            (att.clone(), att)
        } else {
            (max_pool_window(&att, p)?, att.avg_pool2d(p)?)
        };
        let q = to_tokens(&self.q_proj.forward(&max, ctx)?)?;
        let k = to_tokens(&self.k_proj.forward(&avg, ctx)?)?;
        Ok(GuidancePair {
            q: shared.embed(&q, ctx)?,
            k: shared.embed(&k, ctx)?,
            stage: self.stage,
        })
    }
}
