//! Classification heads over backbone stage maps, and the registry of model
//! variants (the full model plus its ablations) selectable by name.

use std::collections::BTreeMap;
use std::fmt::Debug;

use candle_core::{DType, IndexOp, Tensor, Var, D};

use crate::archive::ParameterArchive;
use crate::backbone::{Backbone, StageFeatures};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::fgd::attention::AttentionRegistry;
use crate::fgd::decoder::{EncoderBlock, FgdDecoder};
use crate::fgd::embed::{FocusBlock, GuidancePair, HybridEmbed, SharedEmbeddings};
use crate::nn::{softmax, Ctx, LayerNorm, Linear};
use crate::params::ParamStore;

/// Intermediate tensors of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub embedded: Tensor,
    pub guidance: Vec<GuidancePair>,
    pub blocks: Vec<Tensor>,
    pub logits: Tensor,
}

pub trait TokenHead: Debug + Send + Sync {
    /// Backbone stages this head consumes (the deepest one is tokenized).
    fn stages_used(&self) -> usize;
    fn trace(&self, stages: &StageFeatures, ctx: &Ctx) -> Result<ForwardTrace>;
}

/// Token 0 when a class token is present, otherwise the token mean.
fn readout(z: &Tensor, use_class_token: bool) -> Result<Tensor> {
    if use_class_token {
        Ok(z.i((.., 0, ..))?)
    } else {
        Ok(z.mean(1)?)
    }
}

#[derive(Debug, Clone)]
pub struct ClassifierHead {
    pub norm: LayerNorm,
    pub fc: Linear,
}

impl ClassifierHead {
    fn new(store: &ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.fgd.token_dim;
        Ok(Self {
            norm: LayerNorm::new(store, "head.norm", d)?,
            fc: Linear::new(store, "head.fc", d, cfg.fgd.num_classes)?,
        })
    }

    fn forward(&self, pooled: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        self.fc.forward(&self.norm.forward(pooled, ctx)?, ctx)
    }
}

/// Focus-guided decoder stack: one focus block and one decoder per stage.
#[derive(Debug)]
pub struct FgdHead {
    pub shared: SharedEmbeddings,
    pub embed: HybridEmbed,
    pub focus: Vec<FocusBlock>,
    pub decoders: Vec<FgdDecoder>,
    pub classifier: ClassifierHead,
    use_class_token: bool,
}

impl FgdHead {
    pub fn new(store: &ParamStore, cfg: &ModelConfig, registry: &AttentionRegistry) -> Result<Self> {
        let stages = cfg.fgd.stage_count;
        Ok(Self {
            shared: SharedEmbeddings::new(store, cfg)?,
            embed: HybridEmbed::new(store, cfg)?,
            focus: (0..stages)
                .map(|l| FocusBlock::new(store, registry, cfg, l))
                .collect::<Result<_>>()?,
            decoders: (0..stages)
                .map(|l| FgdDecoder::new(store, &format!("fgd.decoder{}", l + 1), cfg))
                .collect::<Result<_>>()?,
            classifier: ClassifierHead::new(store, cfg)?,
            use_class_token: cfg.fgd.use_class_token,
        })
    }
}

impl TokenHead for FgdHead {
    fn stages_used(&self) -> usize {
        self.focus.len()
    }

    fn trace(&self, stages: &StageFeatures, ctx: &Ctx) -> Result<ForwardTrace> {
        let embedded = self.embed.forward(stages.last(), &self.shared, ctx)?;
        let mut z = embedded.clone();
        let mut guidance = Vec::with_capacity(self.focus.len());
        let mut blocks = Vec::with_capacity(self.focus.len());
        for ((focus, decoder), map) in self.focus.iter().zip(&self.decoders).zip(&stages.maps) {
            let g = focus.forward(map, &self.shared, ctx)?;
            z = decoder.forward(&z, &g, ctx)?;
            guidance.push(g);
            blocks.push(z.clone());
        }
        let logits = self.classifier.forward(&readout(&z, self.use_class_token)?, ctx)?;
        Ok(ForwardTrace {
            embedded,
            guidance,
            blocks,
            logits,
        })
    }
}

/// Hybrid embedding followed by a plain self-attention encoder stack.
#[derive(Debug)]
pub struct EncoderHead {
    pub shared: SharedEmbeddings,
    pub embed: HybridEmbed,
    pub blocks: Vec<EncoderBlock>,
    pub classifier: ClassifierHead,
    stages: usize,
    use_class_token: bool,
}

impl EncoderHead {
    pub fn new(store: &ParamStore, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            shared: SharedEmbeddings::new(store, cfg)?,
            embed: HybridEmbed::new(store, cfg)?,
            blocks: (0..cfg.fgd.encoder_blocks)
                .map(|i| EncoderBlock::new(store, &format!("encoder.block{}", i + 1), cfg))
                .collect::<Result<_>>()?,
            classifier: ClassifierHead::new(store, cfg)?,
            stages: cfg.fgd.stage_count,
            use_class_token: cfg.fgd.use_class_token,
        })
    }
}

impl TokenHead for EncoderHead {
    fn stages_used(&self) -> usize {
        self.stages
    }

    fn trace(&self, stages: &StageFeatures, ctx: &Ctx) -> Result<ForwardTrace> {
        let embedded = self.embed.forward(stages.last(), &self.shared, ctx)?;
        let mut z = embedded.clone();
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            z = b.forward(&z, ctx)?;
            blocks.push(z.clone());
        }
        let logits = self.classifier.forward(&readout(&z, self.use_class_token)?, ctx)?;
        Ok(ForwardTrace {
            embedded,
            guidance: Vec::new(),
            blocks,
            logits,
        })
    }
}

type HeadCtor = fn(&ParamStore, &ModelConfig, &AttentionRegistry) -> Result<Box<dyn TokenHead>>;

/// A named model variant: a config rewrite plus a head constructor.
#[derive(Clone, Copy)]
pub struct VariantDef {
    pub name: &'static str,
    pub adapt: fn(&mut ModelConfig),
    pub head: HeadCtor,
}

fn fgd_head(s: &ParamStore, c: &ModelConfig, r: &AttentionRegistry) -> Result<Box<dyn TokenHead>> {
    Ok(Box::new(FgdHead::new(s, c, r)?))
}

fn encoder_head(s: &ParamStore, c: &ModelConfig, _: &AttentionRegistry) -> Result<Box<dyn TokenHead>> {
    Ok(Box::new(EncoderHead::new(s, c)?))
}

pub const VARIANT_NAMES: [&str; 8] = [
    "MSHT",
    "Hybrid1",
    "Hybrid3",
    "No_CLS_Token",
    "No_Pos_emb",
    "No_ATT",
    "SE_ATT",
    "CBAM_ATT",
];

pub struct VariantRegistry {
    defs: BTreeMap<&'static str, VariantDef>,
    attention: AttentionRegistry,
}

impl VariantRegistry {
    pub fn builtin() -> Self {
        let mut r = Self {
            defs: BTreeMap::new(),
            attention: AttentionRegistry::builtin(),
        };
        r.register(VariantDef { name: "MSHT", adapt: |_| {}, head: fgd_head });
        r.register(VariantDef {
            name: "Hybrid1",
            adapt: |c| {
                c.fgd.stage_count = 4;
                c.fgd.pool_windows = c.derived_pool_windows();
            },
            head: encoder_head,
        });
        r.register(VariantDef {
            name: "Hybrid3",
            adapt: |c| {
                c.fgd.stage_count = 3;
                c.fgd.pool_windows = c.derived_pool_windows();
            },
            head: fgd_head,
        });
        r.register(VariantDef {
            name: "No_CLS_Token",
            adapt: |c| c.fgd.use_class_token = false,
            head: fgd_head,
        });
        r.register(VariantDef {
            name: "No_Pos_emb",
            adapt: |c| c.fgd.use_positional_encoding = false,
            head: fgd_head,
        });
        r.register(VariantDef { name: "No_ATT", adapt: |c| c.fgd.attention = "none".into(), head: fgd_head });
        r.register(VariantDef { name: "SE_ATT", adapt: |c| c.fgd.attention = "se".into(), head: fgd_head });
        r.register(VariantDef { name: "CBAM_ATT", adapt: |c| c.fgd.attention = "cbam".into(), head: fgd_head });
        r
    }

    pub fn register(&mut self, def: VariantDef) {
        self.defs.insert(def.name, def);
    }

    pub fn attention_mut(&mut self) -> &mut AttentionRegistry {
        &mut self.attention
    }

    pub fn names(&self) -> Vec<String> {
        self.defs.keys().map(|s| s.to_string()).collect()
    }

    pub fn get(&self, name: &str) -> Result<&VariantDef> {
        self.defs.get(name).ok_or_else(|| Error::UnknownName {
            kind: "variant",
            name: name.to_string(),
            valid: self.names(),
        })
    }

    /// Config the named variant would be built with.
    pub fn resolve(&self, name: &str, cfg: &ModelConfig) -> Result<ModelConfig> {
        let def = self.get(name)?;
        let mut cfg = cfg.clone();
        (def.adapt)(&mut cfg);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn build(&self, name: &str, cfg: &ModelConfig, seed: u64, dtype: DType) -> Result<Model> {
        let def = self.get(name)?;
        let cfg = self.resolve(name, cfg)?;
        let store = ParamStore::new(seed, dtype);
        let backbone = Backbone::with_stages(&store, cfg.backbone.clone(), cfg.fgd.stage_count)?;
        let head = (def.head)(&store, &cfg, &self.attention)?;
        Ok(Model {
            variant: def.name.to_string(),
            config: cfg,
            store,
            backbone,
            head,
        })
    }
}

impl Default for VariantRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}

/// Builds a registered variant with `f32` parameters.
pub fn build_variant(name: &str, cfg: &ModelConfig, seed: u64) -> Result<Model> {
    VariantRegistry::builtin().build(name, cfg, seed, DType::F32)
}

#[derive(Debug)]
pub struct Model {
    variant: String,
    config: ModelConfig,
    store: ParamStore,
    backbone: Backbone,
    head: Box<dyn TokenHead>,
}

const META_VARIANT: &str = "variant";
const META_CONFIG: &str = "model_config";

impl Model {
    pub fn variant(&self) -> &str {
        &self.variant
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn head(&self) -> &dyn TokenHead {
        self.head.as_ref()
    }

    /// Trainable parameters only; running statistics are excluded.
    pub fn parameter_count(&self) -> usize {
        self.store.parameter_count()
    }

    fn prepare(&self, images: &Tensor) -> Result<Tensor> {
        Ok(images.to_dtype(self.store.dtype())?)
    }

    pub fn trace(&self, images: &Tensor, ctx: &Ctx) -> Result<(StageFeatures, ForwardTrace)> {
        let stages = self.backbone.forward(&self.prepare(images)?, ctx)?;
        let trace = self.head.trace(&stages, ctx)?;
        Ok((stages, trace))
    }

    pub fn logits(&self, images: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let stages = self.backbone.forward(&self.prepare(images)?, ctx)?;
        Ok(self.head.trace(&stages, ctx)?.logits)
    }

    /// Class confidences (softmax over logits), `B x num_classes`.
    pub fn forward(&self, images: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        softmax(&self.logits(images, ctx)?, D::Minus1)
    }

    /// Logits computed with stage `tap` (0-based) re-rooted as a variable.
    pub fn logits_with_tap(&self, images: &Tensor, tap: usize, ctx: &Ctx) -> Result<(Var, Tensor)> {
        let (var, stages) = self.backbone.forward_with_tap(&self.prepare(images)?, tap, ctx)?;
        Ok((var, self.head.trace(&stages, ctx)?.logits))
    }

    pub fn checkpoint(&self) -> Result<ParameterArchive> {
        Ok(ParameterArchive::from_store(&self.store)?
            .with_metadata(META_VARIANT, self.variant.clone())
            .with_metadata(META_CONFIG, serde_json::to_string(&self.config)?))
    }

    /// Restores parameters after checking the archive was written by a model
    /// with the same variant and config.
    pub fn load_checkpoint(&self, archive: &ParameterArchive) -> Result<()> {
        let variant = archive.metadata.get(META_VARIANT).map(String::as_str);
        if variant != Some(self.variant.as_str()) {
            return Err(Error::Config(format!(
                "checkpoint variant {variant:?} does not match model variant {}",
                self.variant
            )));
        }
        let cfg: ModelConfig = match archive.metadata.get(META_CONFIG) {
            Some(s) => serde_json::from_str(s)?,
            None => return Err(Error::Archive("checkpoint has no model config".into())),
        };
        if cfg != self.config {
            return Err(Error::Config("checkpoint config differs from model config".into()));
        }
        let report = archive.apply_to(&self.store, "")?;
        if !report.missing.is_empty() {
            return Err(Error::Archive(format!(
                "checkpoint lacks parameters: {}",
                report.missing.join(", ")
            )));
        }
        Ok(())
    }

    /// Rebuilds the model described by a checkpoint and loads its parameters.
    pub fn from_checkpoint(archive: &ParameterArchive, dtype: DType) -> Result<Model> {
        let variant = archive
            .metadata
            .get(META_VARIANT)
            .ok_or_else(|| Error::Archive("checkpoint has no variant tag".into()))?;
        let cfg: ModelConfig = serde_json::from_str(
            archive
                .metadata
                .get(META_CONFIG)
                .ok_or_else(|| Error::Archive("checkpoint has no model config".into()))?,
        )?;
        let model = VariantRegistry::builtin().build(variant, &cfg, 0, dtype)?;
        model.load_checkpoint(archive)?;
        Ok(model)
    }
}

/// Inference forward: class confidences for a batch of images.
pub fn msht_forward(images: &Tensor, model: &Model) -> Result<Tensor> {
    model.forward(images, &Ctx::eval())
}
