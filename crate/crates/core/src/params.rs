//! Named, seeded parameter storage shared by every layer of a model.
//!
//! Each tensor is drawn from its own ChaCha stream keyed on the store seed and
//! the parameter name, so two models built from the same seed agree on every
//! parameter they have in common regardless of construction order.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex, MutexGuard};

use candle_core::{DType, Device, Shape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// He/Kaiming normal, `std = sqrt(2 / fan_in)`.
    HeNormal { fan_in: usize },
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, the usual linear/conv default.
    FanInUniform { fan_in: usize },
    Normal { std: f64 },
}

/// Trainable weights are handed to the optimizer; buffers (batch-norm running
/// statistics) are persisted in checkpoints but never optimized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Buffer,
}

#[derive(Clone)]
struct Entry {
    var: Var,
    kind: ParamKind,
}

#[derive(Clone)]
pub struct ParamStore {
    entries: Arc<Mutex<BTreeMap<String, Entry>>>,
    seed: u64,
    dtype: DType,
    device: Device,
}

/// FNV-1a, used only to key per-parameter RNG streams.
fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            entries: Arc::new(Mutex::new(BTreeMap::new())),
            seed,
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn lock(&self) -> MutexGuard<'_, BTreeMap<String, Entry>> {
        self.entries.lock().expect("parameter store poisoned")
    }

    /// Creates (or returns the already registered) parameter `name`.
    pub fn get_or_init<S: Into<Shape>>(&self, name: &str, shape: S, init: Init) -> Result<Tensor> {
        self.register(name, shape.into(), init, ParamKind::Weight)
    }

    pub fn buffer<S: Into<Shape>>(&self, name: &str, shape: S, init: Init) -> Result<Tensor> {
        self.register(name, shape.into(), init, ParamKind::Buffer)
    }

    fn register(&self, name: &str, shape: Shape, init: Init, kind: ParamKind) -> Result<Tensor> {
        let mut entries = self.lock();
        if let Some(e) = entries.get(name) {
            if e.var.dims() != shape.dims() {
                return Err(Error::shape(name, shape.dims(), e.var.dims()));
            }
            return Ok(e.var.as_tensor().clone());
        }
        let values = self.sample(name, shape.elem_count(), init);
        let tensor = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&tensor)?;
        let out = var.as_tensor().clone();
        entries.insert(name.to_string(), Entry { var, kind });
        Ok(out)
    }

    fn sample(&self, name: &str, n: usize, init: Init) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ name_hash(name));
        match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::HeNormal { fan_in } => {
                let d = Normal::new(0.0, (2.0 / fan_in.max(1) as f64).sqrt()).unwrap();
                (0..n).map(|_| d.sample(&mut rng)).collect()
            }
            Init::FanInUniform { fan_in } => {
                let b = 1.0 / (fan_in.max(1) as f64).sqrt();
                let d = Uniform::new_inclusive(-b, b);
                (0..n).map(|_| d.sample(&mut rng)).collect()
            }
            Init::Normal { std } => {
                let d = Normal::new(0.0, std).unwrap();
                (0..n).map(|_| d.sample(&mut rng)).collect()
            }
        }
    }

    pub fn var(&self, name: &str) -> Option<Var> {
        self.lock().get(name).map(|e| e.var.clone())
    }

    pub fn kind(&self, name: &str) -> Option<ParamKind> {
        self.lock().get(name).map(|e| e.kind)
    }

    pub fn names(&self) -> Vec<String> {
        self.lock().keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.lock().is_empty()
    }

    /// All named entries, sorted by name.
    pub fn entries(&self) -> Vec<(String, Var, ParamKind)> {
        self.lock()
            .iter()
            .map(|(n, e)| (n.clone(), e.var.clone(), e.kind))
            .collect()
    }

    pub fn trainable_vars(&self) -> Vec<Var> {
        self.lock()
            .values()
            .filter(|e| e.kind == ParamKind::Weight)
            .map(|e| e.var.clone())
            .collect()
    }

    /// Number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        self.lock()
            .values()
            .filter(|e| e.kind == ParamKind::Weight)
            .map(|e| e.var.elem_count())
            .sum()
    }

    /// Overwrites `name` in place; every layer holding the tensor observes it.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .var(name)
            .ok_or_else(|| Error::Config(format!("no parameter named `{name}`")))?;
        if var.dims() != value.dims() {
            return Err(Error::shape(name, var.dims(), value.dims()));
        }
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("seed", &self.seed)
            .field("dtype", &self.dtype)
            .field("len", &self.len())
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_values_independent_of_order() {
        let a = ParamStore::new(3, DType::F32);
        let b = ParamStore::new(3, DType::F32);
        let a1 = a.get_or_init("x", (4, 4), Init::HeNormal { fan_in: 4 }).unwrap();
        let _ = a.get_or_init("y", 8, Init::Normal { std: 1.0 }).unwrap();
        let _ = b.get_or_init("y", 8, Init::Normal { std: 1.0 }).unwrap();
        let b1 = b.get_or_init("x", (4, 4), Init::HeNormal { fan_in: 4 }).unwrap();
        let d = (a1 - b1).unwrap().abs().unwrap().sum_all().unwrap();
        assert_eq!(d.to_scalar::<f32>().unwrap(), 0.0);
    }

    #[test]
    fn set_is_visible_through_clones() {
        let s = ParamStore::new(0, DType::F64);
        let t = s.get_or_init("w", 3, Init::Zeros).unwrap();
        s.set("w", &Tensor::new(&[1.0f64, 2.0, 3.0], s.device()).unwrap())
            .unwrap();
        assert_eq!(t.to_vec1::<f64>().unwrap(), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn reregistering_with_other_shape_fails() {
        let s = ParamStore::new(0, DType::F32);
        s.get_or_init("w", 3, Init::Zeros).unwrap();
        assert!(s.get_or_init("w", 4, Init::Zeros).is_err());
    }

    #[test]
    fn buffers_are_not_trainable() {
        let s = ParamStore::new(0, DType::F32);
        s.get_or_init("w", 3, Init::Zeros).unwrap();
        s.buffer("running_mean", 3, Init::Zeros).unwrap();
        assert_eq!(s.trainable_vars().len(), 1);
        assert_eq!(s.parameter_count(), 3);
    }
}
