//! Multi-stage hybrid CNN/Transformer image classifier.
//!
//! A bottleneck CNN backbone exposes all four stage maps. The deepest map is
//! tokenized into a sequence that flows through a stack of decoders; every
//! decoder additionally attends with queries and keys derived from one of the
//! earlier stage maps by a focus block. Around the model sit the data
//! pipeline, the k-fold training harness and Grad-CAM.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod archive;
pub mod backbone;
pub mod config;
pub mod datapipe;
pub mod error;
pub mod explain;
pub mod fgd;
pub mod nn;
pub mod params;
pub mod trainer;

pub use archive::{LoadReport, ParameterArchive};
pub use backbone::{build_backbone, load_pretrained_stem, Backbone, BackboneConfig, StageFeatures};
pub use config::{FgdConfig, ModelConfig};
pub use error::{Error, Result};
pub use fgd::{build_variant, msht_forward, Model, VariantRegistry, VARIANT_NAMES};
pub use nn::Ctx;
pub use params::ParamStore;
