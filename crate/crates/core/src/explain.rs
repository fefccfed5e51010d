//! Grad-CAM heatmaps and their colour-mapped overlays.

use std::path::Path;

use candle_core::{DType, IndexOp, Tensor};
use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::datapipe::augment::{preprocess_eval, AugmentConfig};
use crate::datapipe::image::LabeledImage;
use crate::error::{Error, Result};
use crate::fgd::Model;
use crate::nn::Ctx;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CamHeatmap {
    /// Row-major `height x width`, in `[0, 1]`.
    pub values: Vec<f32>,
    pub height: usize,
    pub width: usize,
    pub target_class: usize,
    pub target_layer_tag: String,
    pub source_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeatStatistics {
    pub min: f32,
    pub max: f32,
    pub mean: f32,
}

impl CamHeatmap {
    pub fn at(&self, y: usize, x: usize) -> f32 {
        self.values[y * self.width + x]
    }

    pub fn statistics(&self) -> HeatStatistics {
        let (mut min, mut max, mut sum) = (f32::INFINITY, f32::NEG_INFINITY, 0f64);
        for &v in &self.values {
            min = min.min(v);
            max = max.max(v);
            sum += v as f64;
        }
        HeatStatistics {
            min,
            max,
            mean: (sum / self.values.len().max(1) as f64) as f32,
        }
    }

    /// Mean heat where `mask` is set and where it is not.
    pub fn masked_means(&self, mask: &[bool]) -> Result<(f64, f64)> {
        if mask.len() != self.values.len() {
            return Err(Error::shape("heatmap mask", &[self.height * self.width], &[mask.len()]));
        }
        let (mut s_in, mut n_in, mut s_out, mut n_out) = (0.0, 0usize, 0.0, 0usize);
        for (&v, &m) in self.values.iter().zip(mask) {
            if m {
                s_in += v as f64;
                n_in += 1;
            } else {
                s_out += v as f64;
                n_out += 1;
            }
        }
        if n_in == 0 || n_out == 0 {
            return Err(Error::Data("mask must split the heatmap into two non-empty regions".into()));
        }
        Ok((s_in / n_in as f64, s_out / n_out as f64))
    }

    pub fn write_sidecar(&self, path: &Path) -> Result<()> {
        let json = serde_json::json!({
            "source_id": self.source_id,
            "target_class": self.target_class,
            "target_layer_tag": self.target_layer_tag,
            "heat_statistics": self.statistics(),
        });
        let text = serde_json::to_string_pretty(&json)? + "\n";
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CamOptions {
    /// 0-based backbone stage; `None` means the deepest stage the model uses.
    pub stage: Option<usize>,
    /// Positive factor applied to the target logit before differentiating.
    pub logit_scale: f64,
}

impl Default for CamOptions {
    fn default() -> Self {
        Self {
            stage: None,
            logit_scale: 1.0,
        }
    }
}

pub fn layer_tag(stage: usize) -> String {
    format!("stage{}", stage + 1)
}

/// Bilinear resize with half-pixel centres (`align_corners = false`).
pub fn upsample_bilinear(src: &[f32], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f32> {
    let coord = |o: usize, n_in: usize, n_out: usize| -> (usize, usize, f32) {
        let c = ((o as f32 + 0.5) * n_in as f32 / n_out as f32 - 0.5).max(0.0);
        let i0 = (c.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, c - i0 as f32)
    };
    let mut out = Vec::with_capacity(out_h * out_w);
    for oy in 0..out_h {
        let (y0, y1, fy) = coord(oy, h, out_h);
        for ox in 0..out_w {
            let (x0, x1, fx) = coord(ox, w, out_w);
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Min-max normalization; a constant map becomes all zeros.
pub fn normalize_min_max(values: &mut [f32]) {
    let min = values.iter().copied().fold(f32::INFINITY, f32::min);
    let max = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let range = max - min;
    if !(range > f32::EPSILON * max.abs().max(f32::MIN_POSITIVE)) {
        values.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    values.iter_mut().for_each(|v| *v = (*v - min) / range);
}

/// Rectified, gradient-weighted channel sum at the tapped stage, before
/// upsampling and normalization, as `(values, height, width)`.
pub fn grad_cam_raw(model: &Model, input: &Tensor, target_class: usize, opts: &CamOptions) -> Result<(Vec<f32>, usize, usize)> {
    let classes = model.config().fgd.num_classes;
    if target_class >= classes {
        return Err(Error::Config(format!("target class {target_class} out of range for {classes} classes")));
    }
    if !(opts.logit_scale > 0.0) {
        return Err(Error::Config("logit scale must be positive".into()));
    }
    let input = match input.rank() {
        3 => input.unsqueeze(0)?,
        4 if input.dim(0)? == 1 => input.clone(),
        _ => return Err(Error::shape("grad_cam input (1 x 3 x H x W)", &[1, 3], input.dims())),
    };
    let stage = opts.stage.unwrap_or(model.config().fgd.stage_count - 1);
    let (tap, logits) = model.logits_with_tap(&input, stage, &Ctx::eval())?;
    let score = (logits.i((0, target_class))? * opts.logit_scale)?;
    let grads = score.backward()?;
    let grad = grads.get(&tap).ok_or_else(|| {
        Error::MissingGradient(format!(
            "{} received no gradient; run grad_cam on a model whose forward pass uses that stage with gradients enabled",
            layer_tag(stage)
        ))
    })?;
    let act = tap.as_tensor().i(0)?.to_dtype(DType::F32)?;
    let grad = grad.i(0)?.to_dtype(DType::F32)?;
    let (c, h, w) = act.dims3()?;
    let weights = grad.reshape((c, h * w))?.mean(1)?;
    let cam = weights
        .reshape((1, c))?
        .matmul(&act.reshape((c, h * w))?)?
        .relu()?
        .flatten_all()?
        .to_vec1::<f32>()?;
    Ok((cam, h, w))
}

/// Heatmap at the input resolution for the logit of `target_class`.
pub fn grad_cam(model: &Model, input: &Tensor, target_class: usize, opts: &CamOptions) -> Result<CamHeatmap> {
    let (raw, h, w) = grad_cam_raw(model, input, target_class, opts)?;
    let dims = input.dims();
    let (out_h, out_w) = (dims[dims.len() - 2], dims[dims.len() - 1]);
    let mut values = upsample_bilinear(&raw, h, w, out_h, out_w);
    normalize_min_max(&mut values);
    Ok(CamHeatmap {
        values,
        height: out_h,
        width: out_w,
        target_class,
        target_layer_tag: layer_tag(opts.stage.unwrap_or(model.config().fgd.stage_count - 1)),
        source_id: String::new(),
    })
}

/// Grad-CAM of a labeled image through the evaluation transform.
pub fn grad_cam_image(
    model: &Model,
    image: &LabeledImage,
    aug: &AugmentConfig,
    target_class: usize,
    opts: &CamOptions,
) -> Result<CamHeatmap> {
    let x = preprocess_eval(&image.pixels, aug)?;
    let mut cam = grad_cam(model, &x, target_class, opts)?;
    cam.source_id = image.source_id.clone();
    Ok(cam)
}

/// Jet colour map of a value in `[0, 1]`.
pub fn jet(v: f32) -> [u8; 3] {
    let v = v.clamp(0.0, 1.0);
    let ch = |offset: f32| ((1.5 - (4.0 * v - offset).abs()).clamp(0.0, 1.0) * 255.0).round() as u8;
    [ch(3.0), ch(2.0), ch(1.0)]
}

/// Blends `jet(heat)` over `image` with per-pixel weight `alpha * heat`.
pub fn overlay(heatmap: &CamHeatmap, image: &RgbImage, alpha: f32) -> Result<RgbImage> {
    let (w, h) = image.dimensions();
    if (h as usize, w as usize) != (heatmap.height, heatmap.width) {
        return Err(Error::shape(
            "overlay image",
            &[heatmap.height, heatmap.width],
            &[h as usize, w as usize],
        ));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("overlay alpha {alpha} outside [0, 1]")));
    }
    Ok(RgbImage::from_fn(w, h, |x, y| {
        let heat = heatmap.at(y as usize, x as usize);
        let a = alpha * heat;
        let color = jet(heat);
        let px = image.get_pixel(x, y).0;
        let mut out = [0u8; 3];
        for c in 0..3 {
            out[c] = ((1.0 - a) * px[c] as f32 + a * color[c] as f32).round().clamp(0.0, 255.0) as u8;
        }
        Rgb(out)
    }))
}

pub fn save_png(image: &RgbImage, path: &Path) -> Result<()> {
    image.save_with_format(path, image::ImageFormat::Png).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}
