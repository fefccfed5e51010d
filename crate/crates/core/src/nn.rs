//! Forward context and the handful of layers the model is built from.
//!
//! Layers keep clones of their parameter tensors; those clones share storage
//! with the [`ParamStore`] vars, so in-place updates (optimizer steps,
//! checkpoint loads) are seen everywhere.

use std::cell::RefCell;

use candle_core::{DType, Tensor, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{Init, ParamStore};

/// Per-forward mode flags.
///
/// `train` selects batch statistics in batch-norm and enables dropout;
/// `grad` controls whether parameters are attached to the autodiff graph.
pub struct Ctx {
    pub train: bool,
    pub grad: bool,
    dropout_rng: Option<RefCell<ChaCha8Rng>>,
}

impl Ctx {
    /// Inference: running statistics, no graph.
    pub fn eval() -> Self {
        Self {
            train: false,
            grad: false,
            dropout_rng: None,
        }
    }

    /// Inference-mode layers with a live graph (gradient checks, Grad-CAM).
    pub fn eval_with_grad() -> Self {
        Self {
            train: false,
            grad: true,
            dropout_rng: None,
        }
    }

    pub fn train(dropout_seed: u64) -> Self {
        Self {
            train: true,
            grad: true,
            dropout_rng: Some(RefCell::new(ChaCha8Rng::seed_from_u64(dropout_seed))),
        }
    }

    /// Parameter as seen by this forward.
    pub fn p(&self, t: &Tensor) -> Tensor {
        if self.grad {
            t.clone()
        } else {
            t.detach()
        }
    }

    pub fn dropout(&self, x: &Tensor, prob: f64) -> Result<Tensor> {
        if !self.train || prob <= 0.0 {
            return Ok(x.clone());
        }
        let rng = match &self.dropout_rng {
            Some(r) => r,
            None => return Ok(x.clone()),
        };
        let keep = 1.0 - prob;
        let mask: Vec<f64> = {
            let mut rng = rng.borrow_mut();
            (0..x.elem_count())
                .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                .collect()
        };
        let mask = Tensor::from_vec(mask, x.shape(), x.device())?.to_dtype(x.dtype())?;
        Ok(x.mul(&mask)?)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &ParamStore,
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Result<Self> {
        let fan_in = in_c * kernel * kernel;
        let weight = store.get_or_init(
            &format!("{name}.weight"),
            (out_c, in_c, kernel, kernel),
            Init::HeNormal { fan_in },
        )?;
        let bias = if bias {
            Some(store.get_or_init(
                &format!("{name}.bias"),
                out_c,
                Init::FanInUniform { fan_in },
            )?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let y = x.conv2d(&ctx.p(&self.weight), self.padding, self.stride, 1, 1)?;
        match &self.bias {
            Some(b) => {
                let b = ctx.p(b).reshape((1, (), 1, 1))?;
                Ok(y.broadcast_add(&b)?)
            }
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    gamma: Tensor,
    beta: Tensor,
    running_mean: Tensor,
    running_var: Tensor,
    mean_name: String,
    var_name: String,
    store: ParamStore,
    momentum: f64,
    eps: f64,
}

impl BatchNorm2d {
    pub fn new(store: &ParamStore, name: &str, channels: usize) -> Result<Self> {
        let mean_name = format!("{name}.running_mean");
        let var_name = format!("{name}.running_var");
        Ok(Self {
            gamma: store.get_or_init(&format!("{name}.weight"), channels, Init::Ones)?,
            beta: store.get_or_init(&format!("{name}.bias"), channels, Init::Zeros)?,
            running_mean: store.buffer(&mean_name, channels, Init::Zeros)?,
            running_var: store.buffer(&var_name, channels, Init::Ones)?,
            mean_name,
            var_name,
            store: store.clone(),
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let (mean, var) = if ctx.train {
            // channel-major view: (C, B*H*W)
            let flat = x.transpose(0, 1)?.reshape((c, b * h * w))?;
            let mean = flat.mean_keepdim(1)?;
            let centered = flat.broadcast_sub(&mean)?;
            let var = centered.sqr()?.mean_keepdim(1)?;
            let n = (b * h * w) as f64;
            let unbiased = if n > 1.0 { (&var * (n / (n - 1.0)))? } else { var.clone() };
            let m = self.momentum;
            let new_mean = ((&self.running_mean * (1.0 - m))? + (mean.flatten_all()?.detach() * m)?)?;
            let new_var =
                ((&self.running_var * (1.0 - m))? + (unbiased.flatten_all()?.detach() * m)?)?;
            self.store.set(&self.mean_name, &new_mean)?;
            self.store.set(&self.var_name, &new_var)?;
            (mean.reshape((1, c, 1, 1))?, var.reshape((1, c, 1, 1))?)
        } else {
            (
                self.running_mean.detach().reshape((1, c, 1, 1))?,
                self.running_var.detach().reshape((1, c, 1, 1))?,
            )
        };
        let xhat = x
            .broadcast_sub(&mean)?
            .broadcast_div(&(var + self.eps)?.sqrt()?)?;
        let g = ctx.p(&self.gamma).reshape((1, c, 1, 1))?;
        let bt = ctx.p(&self.beta).reshape((1, c, 1, 1))?;
        Ok(xhat.broadcast_mul(&g)?.broadcast_add(&bt)?)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(store: &ParamStore, name: &str, in_f: usize, out_f: usize) -> Result<Self> {
        let init = Init::FanInUniform { fan_in: in_f };
        Ok(Self {
            weight: store.get_or_init(&format!("{name}.weight"), (out_f, in_f), init)?,
            bias: Some(store.get_or_init(&format!("{name}.bias"), out_f, init)?),
        })
    }

    pub fn no_bias(store: &ParamStore, name: &str, in_f: usize, out_f: usize) -> Result<Self> {
        let init = Init::FanInUniform { fan_in: in_f };
        Ok(Self {
            weight: store.get_or_init(&format!("{name}.weight"), (out_f, in_f), init)?,
            bias: None,
        })
    }

    /// Applies to the last dimension of a rank-2 or rank-3 input.
    pub fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let w = ctx.p(&self.weight);
        let out_f = w.dim(0)?;
        let y = match x.rank() {
            2 => x.matmul(&w.t()?)?,
            _ => {
                let dims = x.dims().to_vec();
                let in_f = *dims.last().unwrap();
                let rows: usize = dims[..dims.len() - 1].iter().product();
                let mut out_dims = dims.clone();
                *out_dims.last_mut().unwrap() = out_f;
                x.reshape((rows, in_f))?.matmul(&w.t()?)?.reshape(out_dims)?
            }
        };
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&ctx.p(b))?),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(store: &ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.get_or_init(&format!("{name}.weight"), dim, Init::Ones)?,
            beta: store.get_or_init(&format!("{name}.bias"), dim, Init::Zeros)?,
            eps: 1e-6,
        })
    }

    pub fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let xhat = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(xhat
            .broadcast_mul(&ctx.p(&self.gamma))?
            .broadcast_add(&ctx.p(&self.beta))?)
    }
}

/// Row softmax along `dim`, built from differentiable primitives.
pub fn softmax(x: &Tensor, dim: D) -> Result<Tensor> {
    let max = x.max_keepdim(dim)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(dim)?;
    Ok(e.broadcast_div(&s)?)
}

/// Max over windows of 3 with stride 2 along `dim`, built from slices so it
/// stays differentiable.
fn max3_stride2(x: &Tensor, dim: usize) -> Result<Tensor> {
    let n = x.dim(dim)?;
    let out = (n - 3) / 2 + 1;
    let x = if n < 2 * out + 2 { x.pad_with_zeros(dim, 0, 2 * out + 2 - n)? } else { x.narrow(dim, 0, 2 * out + 2)? };
    let mut shape = x.dims().to_vec();
    shape[dim] = out + 1;
    shape.insert(dim + 1, 2);
    let pairs = x.reshape(shape)?;
    let even = pairs.narrow(dim + 1, 0, 1)?.squeeze(dim + 1)?;
    let odd = pairs.narrow(dim + 1, 1, 1)?.squeeze(dim + 1)?;
    let m = even.narrow(dim, 0, out)?.maximum(&odd.narrow(dim, 0, out)?)?;
    Ok(m.maximum(&even.narrow(dim, 1, out)?)?)
}

/// 3x3 max-pool with stride 2 and no padding over an `N x C x H x W` map.
pub fn max_pool_3x3_s2(x: &Tensor) -> Result<Tensor> {
    max3_stride2(&max3_stride2(x, 2)?, 3)
}

/// Non-overlapping `p x p` max-pool; `H` and `W` must be multiples of `p`.
pub fn max_pool_window(x: &Tensor, p: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if h % p != 0 || w % p != 0 {
        return Err(Error::shape("max-pool input", &[n, c, h / p * p, w / p * p], x.dims()));
    }
    Ok(x.contiguous()?.reshape((n, c, h / p, p, w / p, p))?.max(5)?.max(3)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

pub fn dtype_eps(dtype: DType) -> f64 {
    match dtype {
        DType::F64 => 1e-12,
        _ => 1e-6,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0], [0.0, 0.0, 0.0]], &Device::Cpu).unwrap();
        let s = softmax(&x, D::Minus1).unwrap().sum(1).unwrap();
        for v in s.to_vec1::<f64>().unwrap() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_zero_mean_unit_var() {
        let store = ParamStore::new(0, DType::F64);
        let ln = LayerNorm::new(&store, "ln", 4).unwrap();
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0, 10.0]], &Device::Cpu).unwrap();
        let y = ln.forward(&x, &Ctx::eval()).unwrap().to_vec2::<f64>().unwrap();
        let m: f64 = y[0].iter().sum::<f64>() / 4.0;
        let v: f64 = y[0].iter().map(|a| (a - m).powi(2)).sum::<f64>() / 4.0;
        assert!(m.abs() < 1e-12);
        assert!((v - 1.0).abs() < 1e-5);
    }

    #[test]
    fn batch_norm_eval_uses_running_stats() {
        let store = ParamStore::new(0, DType::F64);
        let bn = BatchNorm2d::new(&store, "bn", 2).unwrap();
        let x = Tensor::ones((1, 2, 2, 2), DType::F64, &Device::Cpu).unwrap();
        let y = bn.forward(&x, &Ctx::eval()).unwrap();
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        for v in y.flatten_all().unwrap().to_vec1::<f64>().unwrap() {
            assert!((v - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_norm_train_updates_running_mean() {
        let store = ParamStore::new(0, DType::F64);
        let bn = BatchNorm2d::new(&store, "bn", 1).unwrap();
        let x = (Tensor::ones((2, 1, 2, 2), DType::F64, &Device::Cpu).unwrap() * 5.0).unwrap();
        bn.forward(&x, &Ctx::train(0)).unwrap();
        let m = store.var("bn.running_mean").unwrap().to_vec1::<f64>().unwrap();
        assert!((m[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn eval_ctx_detaches_parameters() {
        let store = ParamStore::new(0, DType::F64);
        let lin = Linear::new(&store, "l", 2, 2).unwrap();
        let x = Tensor::ones((1, 2), DType::F64, &Device::Cpu).unwrap();
        let y = lin.forward(&x, &Ctx::eval()).unwrap().sum_all().unwrap();
        let grads = y.backward().unwrap();
        assert!(grads.get(&lin.weight).is_none());
    }

    #[test]
    fn sliced_max_pool_matches_builtin() {
        for (h, w) in [(8, 8), (9, 7), (6, 11)] {
            let x = Tensor::randn(0f32, 1.0, (2, 3, h, w), &Device::Cpu).unwrap();
            let a = max_pool_3x3_s2(&x).unwrap();
            let b = x.max_pool2d_with_stride(3, 2).unwrap();
            assert_eq!(a.dims(), b.dims());
            let d = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
            assert_eq!(d, 0.0);
        }
    }

    #[test]
    fn sliced_max_pool_routes_gradient_to_maxima() {
        let x = candle_core::Var::from_tensor(&Tensor::arange(0f32, 25.0, &Device::Cpu).unwrap().reshape((1, 1, 5, 5)).unwrap()).unwrap();
        let g = max_pool_3x3_s2(x.as_tensor()).unwrap().sum_all().unwrap().backward().unwrap();
        let g = g.get(&x).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let mut want = vec![0f32; 25];
        for i in [12, 14, 22, 24] {
            want[i] = 1.0;
        }
        assert_eq!(g, want);
    }

    #[test]
    fn window_max_pool_matches_builtin_and_routes_gradient() {
        let x = Tensor::randn(0f32, 1.0, (2, 3, 8, 12), &Device::Cpu).unwrap();
        let a = max_pool_window(&x, 4).unwrap();
        let b = x.max_pool2d(4).unwrap();
        assert_eq!(a.dims(), b.dims());
        let d = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(d, 0.0);

        let x = candle_core::Var::from_tensor(&Tensor::arange(0f32, 16.0, &Device::Cpu).unwrap().reshape((1, 1, 4, 4)).unwrap()).unwrap();
        let g = max_pool_window(x.as_tensor(), 2).unwrap().sum_all().unwrap().backward().unwrap();
        let g = g.get(&x).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let mut want = vec![0f32; 16];
        for i in [5, 7, 13, 15] {
            want[i] = 1.0;
        }
        assert_eq!(g, want);
        assert!(max_pool_window(x.as_tensor(), 3).is_err());
    }
}
