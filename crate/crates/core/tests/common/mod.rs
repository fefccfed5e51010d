//! Independent reference implementations shared by the integration tests.
#![allow(dead_code, clippy::needless_range_loop)]

use candle_core::{DType, Device, Tensor};
use msht::fgd::MultiHeadAttention;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let normal = rand_distr::StandardNormal;
    (0..n).map(|_| rng.sample::<f64, _>(normal)).collect()
}

pub fn tensor(data: Vec<f64>, shape: &[usize]) -> Tensor {
    Tensor::from_vec(data, shape, &Device::Cpu).unwrap()
}

pub fn flat(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// max |a - b| / max |b|.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-300);
    max_abs_diff(a, b) / scale
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Scalar SimAM over a row-major `B x C x H x W` buffer, one neuron at a time.
pub fn simam_oracle(x: &[f64], shape: [usize; 4], lambda: f64) -> Vec<f64> {
    let [b, c, h, w] = shape;
    let n = h * w;
    let mut out = vec![0.0; x.len()];
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * n;
            let slice = &x[base..base + n];
            let mut mu = 0.0;
            for v in slice {
                mu += v;
            }
            mu /= n as f64;
            let mut var = 0.0;
            for v in slice {
                var += (v - mu) * (v - mu);
            }
            var /= (n - 1) as f64;
            for i in 0..n {
                let t = slice[i];
                let e_inv = (t - mu) * (t - mu) / (4.0 * (var + lambda)) + 0.5;
                out[base + i] = t * sigmoid(e_inv);
            }
        }
    }
    out
}

/// Dense weights of a linear layer: `w` is `out x in`.
pub struct DenseLinear {
    pub w: Vec<Vec<f64>>,
    pub b: Vec<f64>,
}

impl DenseLinear {
    pub fn from_layer(l: &msht::nn::Linear) -> Self {
        let w = l.weight.to_dtype(DType::F64).unwrap().to_vec2::<f64>().unwrap();
        let b = match &l.bias {
            Some(b) => flat(b),
            None => vec![0.0; w.len()],
        };
        Self { w, b }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.w
            .iter()
            .zip(&self.b)
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect()
    }
}

/// Naive multi-head attention for one sequence; token lists are `T x D`.
/// Returns the output tokens and the `h x T x T` weights.
pub fn mha_oracle(
    m: &MultiHeadAttention,
    q_src: &[Vec<f64>],
    k_src: &[Vec<f64>],
    v_src: &[Vec<f64>],
    literal: bool,
) -> (Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>) {
    let (lq, lk, lv, lo) = (
        DenseLinear::from_layer(&m.q),
        DenseLinear::from_layer(&m.k),
        DenseLinear::from_layer(&m.v),
        DenseLinear::from_layer(&m.out),
    );
    let t = v_src.len();
    let d = v_src[0].len();
    let h = m.heads;
    let dh = d / h;
    let pre = if literal { 1.0 / (d as f64).sqrt() } else { 1.0 };
    let logit_scale = if literal { 1.0 } else { 1.0 / (dh as f64).sqrt() };
    let scale = |v: Vec<f64>| v.into_iter().map(|x| x * pre).collect::<Vec<_>>();
    let q: Vec<Vec<f64>> = q_src.iter().map(|x| scale(lq.apply(x))).collect();
    let k: Vec<Vec<f64>> = k_src.iter().map(|x| scale(lk.apply(x))).collect();
    let v: Vec<Vec<f64>> = v_src.iter().map(|x| scale(lv.apply(x))).collect();
    let mut merged = vec![vec![0.0; d]; t];
    let mut weights = vec![vec![vec![0.0; t]; t]; h];
    for head in 0..h {
        let off = head * dh;
        for i in 0..t {
            let mut logits = vec![0.0; t];
            for j in 0..t {
                let mut s = 0.0;
                for c in 0..dh {
                    s += q[i][off + c] * k[j][off + c];
                }
                logits[j] = s * logit_scale;
            }
            let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z: f64 = exps.iter().sum();
            for j in 0..t {
                let a = exps[j] / z;
                weights[head][i][j] = a;
                for c in 0..dh {
                    merged[i][off + c] += a * v[j][off + c];
                }
            }
        }
    }
    (merged.iter().map(|x| lo.apply(x)).collect(), weights)
}

/// `B x T x D` tensor to nested token lists.
pub fn tokens(t: &Tensor) -> Vec<Vec<Vec<f64>>> {
    t.to_dtype(DType::F64).unwrap().to_vec3::<f64>().unwrap()
}
