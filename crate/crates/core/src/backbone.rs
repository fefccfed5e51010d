//! ResNet-style bottleneck backbone that exposes the output of every stage.
//!
//! The stem (7x7/2 conv, BN, ReLU, 3x3/2 max-pool) divides the input edge by
//! 4 and every later stage halves it again, so stage `l` has edge
//! `input_edge / (4 * 2^(l-1))`.

use candle_core::{DType, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::archive::{LoadReport, ParameterArchive};
use crate::error::{Error, Result};
use crate::nn::{max_pool_3x3_s2, BatchNorm2d, Conv2d, Ctx};
use crate::params::ParamStore;

pub const STAGES: usize = 4;
pub const PREFIX: &str = "backbone.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub input_edge: usize,
    pub stage_channels: Vec<usize>,
    pub block_counts: Vec<usize>,
}

impl BackboneConfig {
    /// ResNet50 widths at a 384x384 input.
    pub fn full() -> Self {
        Self {
            in_channels: 3,
            input_edge: 384,
            stage_channels: vec![256, 512, 1024, 2048],
            block_counts: vec![3, 4, 6, 3],
        }
    }

    pub fn tiny() -> Self {
        Self {
            in_channels: 3,
            input_edge: 64,
            stage_channels: vec![16, 32, 64, 128],
            block_counts: vec![1, 1, 1, 1],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.len() != STAGES || self.block_counts.len() != STAGES {
            return Err(Error::Config(format!(
                "backbone needs exactly {STAGES} stages, got {} channel entries and {} block counts",
                self.stage_channels.len(),
                self.block_counts.len()
            )));
        }
        if self.input_edge == 0 || !self.input_edge.is_multiple_of(32) {
            return Err(Error::Config(format!(
                "input edge {} is not a positive multiple of 32",
                self.input_edge
            )));
        }
        if self.in_channels == 0 {
            return Err(Error::Config("in_channels must be positive".into()));
        }
        if let Some(c) = self.stage_channels.iter().find(|&&c| c == 0 || c % 4 != 0) {
            return Err(Error::Config(format!(
                "stage channel count {c} must be a positive multiple of 4"
            )));
        }
        if self.block_counts.contains(&0) {
            return Err(Error::Config("every stage needs at least one block".into()));
        }
        Ok(())
    }

    pub fn stem_channels(&self) -> usize {
        self.stage_channels[0] / 4
    }

    pub fn stage_edge(&self, stage: usize) -> usize {
        self.input_edge / (4 << stage)
    }

    pub fn stage_edges(&self) -> Vec<usize> {
        (0..STAGES).map(|l| self.stage_edge(l)).collect()
    }
}

/// Per-stage output maps, stage 1 first. Each map is `B x C_l x E_l x E_l`.
#[derive(Debug, Clone)]
pub struct StageFeatures {
    pub maps: Vec<Tensor>,
}

impl StageFeatures {
    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.maps.iter().map(|m| m.dims().to_vec()).collect()
    }

    pub fn last(&self) -> &Tensor {
        self.maps.last().expect("at least one stage")
    }

    pub fn check(&self, cfg: &BackboneConfig, batch: usize) -> Result<()> {
        for (l, m) in self.maps.iter().enumerate() {
            let e = cfg.stage_edge(l);
            let want = [batch, cfg.stage_channels[l], e, e];
            if m.dims() != want {
                return Err(Error::shape(format!("stage {}", l + 1), &want, m.dims()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Bottleneck {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    conv3: Conv2d,
    bn3: BatchNorm2d,
    shortcut: Option<(Conv2d, BatchNorm2d)>,
}

impl Bottleneck {
    fn new(store: &ParamStore, name: &str, in_c: usize, out_c: usize, stride: usize) -> Result<Self> {
        let mid = out_c / 4;
        let shortcut = if stride != 1 || in_c != out_c {
            Some((
                Conv2d::new(store, &format!("{name}.down.conv"), in_c, out_c, 1, stride, 0, false)?,
                BatchNorm2d::new(store, &format!("{name}.down.bn"), out_c)?,
            ))
        } else {
            None
        };
        Ok(Self {
            conv1: Conv2d::new(store, &format!("{name}.conv1"), in_c, mid, 1, 1, 0, false)?,
            bn1: BatchNorm2d::new(store, &format!("{name}.bn1"), mid)?,
            conv2: Conv2d::new(store, &format!("{name}.conv2"), mid, mid, 3, stride, 1, false)?,
            bn2: BatchNorm2d::new(store, &format!("{name}.bn2"), mid)?,
            conv3: Conv2d::new(store, &format!("{name}.conv3"), mid, out_c, 1, 1, 0, false)?,
            bn3: BatchNorm2d::new(store, &format!("{name}.bn3"), out_c)?,
            shortcut,
        })
    }

    fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let y = self.bn1.forward(&self.conv1.forward(x, ctx)?, ctx)?.relu()?;
        let y = self.bn2.forward(&self.conv2.forward(&y, ctx)?, ctx)?.relu()?;
        let y = self.bn3.forward(&self.conv3.forward(&y, ctx)?, ctx)?;
        let skip = match &self.shortcut {
            Some((conv, bn)) => bn.forward(&conv.forward(x, ctx)?, ctx)?,
            None => x.clone(),
        };
        Ok((y + skip)?.relu()?)
    }
}

#[derive(Debug, Clone)]
pub struct Backbone {
    config: BackboneConfig,
    store: ParamStore,
    stem_conv: Conv2d,
    stem_bn: BatchNorm2d,
    stages: Vec<Vec<Bottleneck>>,
}

/// Standalone backbone with its own seeded parameter store.
pub fn build_backbone(config: BackboneConfig, init_seed: u64) -> Result<Backbone> {
    Backbone::new(&ParamStore::new(init_seed, DType::F32), config)
}

impl Backbone {
    pub fn new(store: &ParamStore, config: BackboneConfig) -> Result<Self> {
        Self::with_stages(store, config, STAGES)
    }

    /// Builds only the first `stages` stages (used by the three-stage variant).
    pub fn with_stages(store: &ParamStore, config: BackboneConfig, stages: usize) -> Result<Self> {
        config.validate()?;
        if stages == 0 || stages > STAGES {
            return Err(Error::Config(format!("cannot build {stages} backbone stages")));
        }
        let stem = config.stem_channels();
        let stem_conv = Conv2d::new(store, "backbone.stem.conv", config.in_channels, stem, 7, 2, 3, false)?;
        let stem_bn = BatchNorm2d::new(store, "backbone.stem.bn", stem)?;
        let mut built = Vec::with_capacity(stages);
        let mut in_c = stem;
        for l in 0..stages {
            let out_c = config.stage_channels[l];
            let blocks = (0..config.block_counts[l])
                .map(|b| {
                    let stride = if b == 0 && l > 0 { 2 } else { 1 };
                    let cin = if b == 0 { in_c } else { out_c };
                    Bottleneck::new(store, &format!("backbone.stage{}.block{b}", l + 1), cin, out_c, stride)
                })
                .collect::<Result<Vec<_>>>()?;
            built.push(blocks);
            in_c = out_c;
        }
        Ok(Self {
            config,
            store: store.clone(),
            stem_conv,
            stem_bn,
            stages: built,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    fn check_input(&self, images: &Tensor) -> Result<usize> {
        let e = self.config.input_edge;
        let dims = images.dims();
        if dims.len() != 4 || dims[1] != self.config.in_channels || dims[2] != e || dims[3] != e {
            let b = dims.first().copied().unwrap_or(0);
            return Err(Error::shape("backbone input", &[b, self.config.in_channels, e, e], dims));
        }
        Ok(dims[0])
    }

    fn stem(&self, images: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let x = self.stem_bn.forward(&self.stem_conv.forward(images, ctx)?, ctx)?.relu()?;
        // zero padding is exact for max-pooling non-negative activations
        let x = x.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?;
        max_pool_3x3_s2(&x)
    }

    fn stage(&self, l: usize, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let mut x = x.clone();
        for block in &self.stages[l] {
            x = block.forward(&x, ctx)?;
        }
        Ok(x)
    }

    pub fn forward(&self, images: &Tensor, ctx: &Ctx) -> Result<StageFeatures> {
        let batch = self.check_input(images)?;
        let mut x = self.stem(images, ctx)?;
        let mut maps = Vec::with_capacity(self.stages.len());
        for l in 0..self.stages.len() {
            x = self.stage(l, &x, ctx)?;
            maps.push(x.clone());
        }
        let out = StageFeatures { maps };
        out.check(&self.config, batch)?;
        Ok(out)
    }

    /// Forward in which stage `tap` (0-based) is re-rooted as a fresh
    /// variable: later stages are recomputed from it, so gradients w.r.t.
    /// that map can be read from the returned var.
    pub fn forward_with_tap(&self, images: &Tensor, tap: usize, ctx: &Ctx) -> Result<(Var, StageFeatures)> {
        if tap >= self.stages.len() {
            return Err(Error::Config(format!(
                "stage {} is not part of this backbone ({} stages)",
                tap + 1,
                self.stages.len()
            )));
        }
        self.check_input(images)?;
        let mut x = self.stem(images, ctx)?;
        let mut maps = Vec::with_capacity(self.stages.len());
        for l in 0..=tap {
            x = self.stage(l, &x, ctx)?;
            maps.push(x.detach());
        }
        let var = Var::from_tensor(&x.detach())?;
        *maps.last_mut().unwrap() = var.as_tensor().clone();
        let mut x = var.as_tensor().clone();
        for l in tap + 1..self.stages.len() {
            x = self.stage(l, &x, ctx)?;
            maps.push(x.clone());
        }
        Ok((var, StageFeatures { maps }))
    }
}

/// Copies backbone parameters from a checkpoint (e.g. ImageNet-pretrained).
/// Missing names are reported and left untouched; any shape conflict is an
/// error and nothing is written.
pub fn load_pretrained_stem(backbone: &Backbone, checkpoint: &ParameterArchive) -> Result<LoadReport> {
    let report = checkpoint.apply_to(&backbone.store, PREFIX)?;
    if !report.missing.is_empty() {
        log::warn!(
            "{} backbone parameters not found in checkpoint",
            report.missing.len()
        );
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn tiny_stage_edges() {
        assert_eq!(BackboneConfig::tiny().stage_edges(), vec![16, 8, 4, 2]);
        assert_eq!(BackboneConfig::full().stage_edges(), vec![96, 48, 24, 12]);
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = BackboneConfig::tiny();
        c.input_edge = 100;
        assert!(build_backbone(c, 0).is_err());
        let mut c = BackboneConfig::tiny();
        c.stage_channels.pop();
        assert!(matches!(build_backbone(c, 0), Err(Error::Config(_))));
    }

    #[test]
    fn tiny_forward_shapes() {
        let bb = build_backbone(BackboneConfig::tiny(), 0).unwrap();
        let x = Tensor::zeros((1, 3, 64, 64), DType::F32, &Device::Cpu).unwrap();
        let f = bb.forward(&x, &Ctx::eval()).unwrap();
        assert_eq!(
            f.shapes(),
            vec![vec![1, 16, 16, 16], vec![1, 32, 8, 8], vec![1, 64, 4, 4], vec![1, 128, 2, 2]]
        );
    }

    #[test]
    fn wrong_input_size_names_shapes() {
        let bb = build_backbone(BackboneConfig::tiny(), 0).unwrap();
        let x = Tensor::zeros((1, 3, 32, 32), DType::F32, &Device::Cpu).unwrap();
        let err = bb.forward(&x, &Ctx::eval()).unwrap_err().to_string();
        assert!(err.contains("[1, 3, 64, 64]") && err.contains("[1, 3, 32, 32]"), "{err}");
    }
}
