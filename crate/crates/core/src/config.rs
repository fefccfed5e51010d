use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};

/// Token-side hyperparameters of the focus-guided decoder structure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FgdConfig {
    pub token_dim: usize,
    pub heads: usize,
    pub patch_size: usize,
    /// Focus-block pooling window per active stage, stage 1 first.
    pub pool_windows: Vec<usize>,
    pub ffn_hidden: usize,
    pub num_classes: usize,
    /// Name of a registered focus attention module (`simam`, `se`, `cbam`, `none`).
    pub attention: String,
    pub simam_lambda: f64,
    pub se_reduction: usize,
    pub use_class_token: bool,
    pub use_positional_encoding: bool,
    pub stage_count: usize,
    /// Scale q, k and v by 1/sqrt(D) instead of scaling logits by 1/sqrt(D/h).
    pub paper_literal_scaling: bool,
    pub dropout: f64,
    /// Depth of the self-attention-only stack used by the Hybrid1 variant.
    pub encoder_blocks: usize,
}

impl FgdConfig {
    pub fn full() -> Self {
        Self {
            token_dim: 768,
            heads: 12,
            patch_size: 1,
            pool_windows: vec![8, 4, 2, 1],
            ffn_hidden: 4 * 768,
            num_classes: 2,
            attention: "simam".into(),
            simam_lambda: 1e-4,
            se_reduction: 16,
            use_class_token: true,
            use_positional_encoding: true,
            stage_count: 4,
            paper_literal_scaling: false,
            dropout: 0.0,
            encoder_blocks: 8,
        }
    }

    pub fn tiny() -> Self {
        Self {
            token_dim: 64,
            heads: 4,
            ffn_hidden: 4 * 64,
            ..Self::full()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub fgd: FgdConfig,
}

impl ModelConfig {
    pub fn full() -> Self {
        Self {
            backbone: BackboneConfig::full(),
            fgd: FgdConfig::full(),
        }
    }

    pub fn tiny() -> Self {
        Self {
            backbone: BackboneConfig::tiny(),
            fgd: FgdConfig::tiny(),
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::full()),
            "tiny" => Ok(Self::tiny()),
            other => Err(Error::UnknownName {
                kind: "preset",
                name: other.to_string(),
                valid: vec!["full".into(), "tiny".into()],
            }),
        }
    }

    pub fn input_edge(&self) -> usize {
        self.backbone.input_edge
    }

    /// Edge of the deepest active stage, which the hybrid embedding tokenizes.
    pub fn last_edge(&self) -> usize {
        self.backbone.stage_edge(self.fgd.stage_count - 1)
    }

    /// Patch tokens per sequence, excluding the class token.
    pub fn patch_tokens(&self) -> usize {
        let side = self.last_edge() / self.fgd.patch_size;
        side * side
    }

    pub fn seq_len(&self) -> usize {
        self.patch_tokens() + usize::from(self.fgd.use_class_token)
    }

    /// Pooling windows that bring every active stage down to the token grid.
    pub fn derived_pool_windows(&self) -> Vec<usize> {
        let side = self.last_edge() / self.fgd.patch_size.max(1);
        (0..self.fgd.stage_count)
            .map(|l| self.backbone.stage_edge(l) / side.max(1))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        let f = &self.fgd;
        if !(3..=4).contains(&f.stage_count) {
            return Err(Error::Config(format!("stage_count must be 3 or 4, got {}", f.stage_count)));
        }
        if f.token_dim == 0 || f.heads == 0 || !f.token_dim.is_multiple_of(f.heads) {
            return Err(Error::Config(format!(
                "token_dim {} must be divisible by heads {}",
                f.token_dim, f.heads
            )));
        }
        if f.num_classes < 2 || f.ffn_hidden == 0 {
            return Err(Error::Config("need num_classes >= 2 and ffn_hidden > 0".into()));
        }
        if !(f.simam_lambda > 0.0) {
            return Err(Error::Config("simam_lambda must be positive".into()));
        }
        if !(0.0..1.0).contains(&f.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", f.dropout)));
        }
        let last = self.last_edge();
        if f.patch_size == 0 || !last.is_multiple_of(f.patch_size) {
            return Err(Error::Config(format!(
                "last-stage edge {last} not divisible by patch size {}",
                f.patch_size
            )));
        }
        if f.pool_windows.len() != f.stage_count {
            return Err(Error::Config(format!(
                "{} pool windows for {} stages",
                f.pool_windows.len(),
                f.stage_count
            )));
        }
        let side = last / f.patch_size;
        for (l, &p) in f.pool_windows.iter().enumerate() {
            let e = self.backbone.stage_edge(l);
            if p == 0 || !e.is_multiple_of(p) || e / p != side {
                return Err(Error::Config(format!(
                    "stage {} edge {e} with pool window {p} does not reach the {side}x{side} token grid",
                    l + 1
                )));
            }
        }
        Ok(())
    }
}
