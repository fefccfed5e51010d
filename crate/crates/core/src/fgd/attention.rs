//! Shape-preserving attention modules applied to a stage map inside a focus
//! block, selected by name through [`AttentionRegistry`].

use std::collections::BTreeMap;
use std::fmt::Debug;

use candle_core::{Tensor, D};

use crate::config::FgdConfig;
use crate::error::{Error, Result};
use crate::nn::{sigmoid, Conv2d, Ctx, Linear};
use crate::params::ParamStore;

pub trait FocusAttention: Debug + Send + Sync {
    fn name(&self) -> &'static str;
    fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor>;
}

pub type AttentionCtor =
    fn(store: &ParamStore, prefix: &str, channels: usize, cfg: &FgdConfig) -> Result<Box<dyn FocusAttention>>;

#[derive(Clone)]
pub struct AttentionRegistry {
    ctors: BTreeMap<&'static str, AttentionCtor>,
}

impl AttentionRegistry {
    pub fn empty() -> Self {
        Self {
            ctors: BTreeMap::new(),
        }
    }

    pub fn builtin() -> Self {
        let mut r = Self::empty();
        r.register("simam", |_, _, _, cfg| Ok(Box::new(SimAm { lambda: cfg.simam_lambda })));
        r.register("se", |s, p, c, cfg| Ok(Box::new(SqueezeExcite::new(s, p, c, cfg.se_reduction)?)));
        r.register("cbam", |s, p, c, cfg| Ok(Box::new(Cbam::new(s, p, c, cfg.se_reduction)?)));
        r.register("none", |_, _, _, _| Ok(Box::new(Identity)));
        r
    }

    pub fn register(&mut self, name: &'static str, ctor: AttentionCtor) {
        self.ctors.insert(name, ctor);
    }

    pub fn names(&self) -> Vec<String> {
        self.ctors.keys().map(|s| s.to_string()).collect()
    }

    pub fn build(
        &self,
        name: &str,
        store: &ParamStore,
        prefix: &str,
        channels: usize,
        cfg: &FgdConfig,
    ) -> Result<Box<dyn FocusAttention>> {
        let ctor = self.ctors.get(name).ok_or_else(|| Error::UnknownName {
            kind: "attention module",
            name: name.to_string(),
            valid: self.names(),
        })?;
        ctor(store, prefix, channels, cfg)
    }
}

impl Default for AttentionRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}

/// Parameter-free energy attention.
///
/// Per channel slice: `d = (x - mean)^2`, `v = sum(d) / (H*W - 1)`,
/// `y = x * sigmoid(d / (4 (v + lambda)) + 0.5)`.
pub fn simam(x: &Tensor, lambda: f64) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let n = h * w;
    if n < 2 {
        return Err(Error::Config(format!(
            "simam needs at least 2 spatial positions, got {h}x{w}"
        )));
    }
    let mean = x.mean_keepdim(D::Minus1)?.mean_keepdim(D::Minus2)?;
    let d = x.broadcast_sub(&mean)?.sqr()?;
    let v = (d.sum_keepdim(D::Minus1)?.sum_keepdim(D::Minus2)? / (n - 1) as f64)?;
    let denom = ((v + lambda)? * 4.0)?;
    let e_inv = (d.broadcast_div(&denom)? + 0.5)?;
    Ok(x.mul(&sigmoid(&e_inv)?)?)
}

#[derive(Debug, Clone)]
pub struct SimAm {
    pub lambda: f64,
}

impl FocusAttention for SimAm {
    fn name(&self) -> &'static str {
        "simam"
    }
    fn forward(&self, x: &Tensor, _ctx: &Ctx) -> Result<Tensor> {
        simam(x, self.lambda)
    }
}

#[derive(Debug, Clone)]
pub struct Identity;

impl FocusAttention for Identity {
    fn name(&self) -> &'static str {
        "none"
    }
    fn forward(&self, x: &Tensor, _ctx: &Ctx) -> Result<Tensor> {
        Ok(x.clone())
    }
}

fn check_reduction(channels: usize, reduction: usize) -> Result<usize> {
    if reduction == 0 || channels < reduction {
        return Err(Error::Config(format!(
            "{channels} channels is below the reduction ratio {reduction}"
        )));
    }
    Ok(channels / reduction)
}

/// Squeeze-and-excitation channel gating.
#[derive(Debug, Clone)]
pub struct SqueezeExcite {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl SqueezeExcite {
    pub fn new(store: &ParamStore, prefix: &str, channels: usize, reduction: usize) -> Result<Self> {
        let hidden = check_reduction(channels, reduction)?;
        Ok(Self {
            fc1: Linear::new(store, &format!("{prefix}.fc1"), channels, hidden)?,
            fc2: Linear::new(store, &format!("{prefix}.fc2"), hidden, channels)?,
        })
    }
}

impl FocusAttention for SqueezeExcite {
    fn name(&self) -> &'static str {
        "se"
    }
    fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let (b, c, _, _) = x.dims4()?;
        let squeezed = x.mean(D::Minus1)?.mean(D::Minus1)?;
        let gate = self.fc1.forward(&squeezed, ctx)?.relu()?;
        let gate = sigmoid(&self.fc2.forward(&gate, ctx)?)?.reshape((b, c, 1, 1))?;
        Ok(x.broadcast_mul(&gate)?)
    }
}

/// Channel gating from a shared MLP over avg- and max-pooled descriptors,
/// followed by a 7x7 spatial gate over channel mean/max maps.
#[derive(Debug, Clone)]
pub struct Cbam {
    fc1: Linear,
    fc2: Linear,
    spatial: Conv2d,
}

impl Cbam {
    pub fn new(store: &ParamStore, prefix: &str, channels: usize, reduction: usize) -> Result<Self> {
        let hidden = check_reduction(channels, reduction)?;
        Ok(Self {
            fc1: Linear::new(store, &format!("{prefix}.fc1"), channels, hidden)?,
            fc2: Linear::new(store, &format!("{prefix}.fc2"), hidden, channels)?,
            spatial: Conv2d::new(store, &format!("{prefix}.spatial"), 2, 1, 7, 1, 3, false)?,
        })
    }

    fn mlp(&self, v: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let h = self.fc1.forward(v, ctx)?.relu()?;
        self.fc2.forward(&h, ctx)
    }
}

impl FocusAttention for Cbam {
    fn name(&self) -> &'static str {
        "cbam"
    }
    fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let (b, c, _, _) = x.dims4()?;
        let avg = x.mean(D::Minus1)?.mean(D::Minus1)?;
        let max = x.max(D::Minus1)?.max(D::Minus1)?;
        let gate = sigmoid(&(self.mlp(&avg, ctx)? + self.mlp(&max, ctx)?)?)?;
        let x = x.broadcast_mul(&gate.reshape((b, c, 1, 1))?)?;
        let desc = Tensor::cat(&[x.mean_keepdim(1)?, x.max_keepdim(1)?], 1)?;
        let spatial = sigmoid(&self.spatial.forward(&desc, ctx)?)?;
        Ok(x.broadcast_mul(&spatial)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn simam_constant_slice() {
        let x = (Tensor::ones((1, 1, 3, 3), DType::F64, &Device::Cpu).unwrap() * 2.5).unwrap();
        let y = simam(&x, 1e-4).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let s = 1.0 / (1.0 + (-0.5f64).exp());
        for v in y {
            assert!((v - 2.5 * s).abs() < 1e-12);
        }
    }

    #[test]
    fn simam_worked_example() {
        let x = Tensor::new(&[[[[0.0f64, 0.0], [0.0, 2.0]]]], &Device::Cpu).unwrap();
        let y = simam(&x, 0.0).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let want = 2.0 / (1.0 + (-1.0625f64).exp());
        assert!((y[3] - want).abs() < 1e-12);
        assert_eq!(&y[..3], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn simam_rejects_single_pixel() {
        let x = Tensor::ones((1, 4, 1, 1), DType::F32, &Device::Cpu).unwrap();
        assert!(simam(&x, 1e-4).is_err());
    }

    #[test]
    fn se_rejects_too_few_channels() {
        let s = ParamStore::new(0, DType::F32);
        assert!(SqueezeExcite::new(&s, "se", 8, 16).is_err());
    }

    #[test]
    fn se_zero_input_gives_zero() {
        let s = ParamStore::new(0, DType::F32);
        let se = SqueezeExcite::new(&s, "se", 16, 4).unwrap();
        let x = Tensor::zeros((2, 16, 4, 4), DType::F32, &Device::Cpu).unwrap();
        let y = se.forward(&x, &Ctx::eval()).unwrap();
        assert_eq!(y.abs().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap(), 0.0);
    }

    #[test]
    fn se_constant_input_with_neutral_gates_is_a_single_scale() {
        let s = ParamStore::new(0, DType::F64);
        let se = SqueezeExcite::new(&s, "se", 16, 4).unwrap();
        for n in ["se.fc2.weight", "se.fc2.bias"] {
            let v = s.var(n).unwrap();
            s.set(n, &v.zeros_like().unwrap()).unwrap();
        }
        let x = (Tensor::ones((1, 16, 3, 3), DType::F64, &Device::Cpu).unwrap() * 3.0).unwrap();
        let y = se.forward(&x, &Ctx::eval()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for v in y {
            assert!((v - 1.5).abs() < 1e-12);
        }
    }

    #[test]
    fn cbam_preserves_shape() {
        let s = ParamStore::new(0, DType::F32);
        let cbam = Cbam::new(&s, "cbam", 16, 16).unwrap();
        let x = Tensor::randn(0f32, 1.0, (2, 16, 12, 12), &Device::Cpu).unwrap();
        assert_eq!(cbam.forward(&x, &Ctx::eval()).unwrap().dims(), &[2, 16, 12, 12]);
    }

    #[test]
    fn registry_lists_names_on_unknown() {
        let r = AttentionRegistry::builtin();
        let s = ParamStore::new(0, DType::F32);
        let e = r.build("eca", &s, "x", 16, &FgdConfig::tiny()).unwrap_err().to_string();
        assert!(e.contains("cbam, none, se, simam"), "{e}");
    }
}
