//! Training augmentation (rotation, center crop, flip, color jitter, resize)
//! and the deterministic evaluation transform (center crop, resize).

use candle_core::{Device, Tensor};
use image::imageops::FilterType;
use image::{Rgb, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Rotation angle is drawn from `[-max_rotation_deg, max_rotation_deg]`.
    pub max_rotation_deg: f64,
    pub crop_edge: u32,
    pub flip_prob: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub resize_edge: u32,
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl AugmentConfig {
    /// 700 px crop resized to the 384 px network input.
    pub fn full() -> Self {
        Self {
            max_rotation_deg: 180.0,
            crop_edge: 700,
            flip_prob: 0.5,
            brightness: 0.15,
            contrast: 0.3,
            saturation: 0.3,
            hue: 0.06,
            resize_edge: 384,
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }

    /// Whole-image "crop" at the synthetic edge, no resize.
    pub fn for_edge(edge: u32) -> Self {
        Self {
            crop_edge: edge,
            resize_edge: edge,
            ..Self::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let jitter = [self.brightness, self.contrast, self.saturation, self.hue];
        if jitter.iter().any(|v| !(*v >= 0.0)) || self.hue > 0.5 {
            return Err(Error::Config("jitter parameters must be non-negative, hue <= 0.5".into()));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) || self.crop_edge == 0 || self.resize_edge == 0 {
            return Err(Error::Config("invalid flip probability or edge".into()));
        }
        if self.std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Config("normalization std must be positive".into()));
        }
        Ok(())
    }
}

/// One realization of the random augmentation parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentDraws {
    pub angle_deg: f64,
    pub flip: bool,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
}

impl AugmentDraws {
    /// Every draw at the midpoint of its range, flip off.
    pub fn identity() -> Self {
        Self {
            angle_deg: 0.0,
            flip: false,
            brightness: 1.0,
            contrast: 1.0,
            saturation: 1.0,
            hue: 0.0,
        }
    }

    pub fn sample<R: Rng + ?Sized>(cfg: &AugmentConfig, rng: &mut R) -> Self {
        let mut sym = |r: f64| if r > 0.0 { rng.gen_range(-r..=r) } else { 0.0 };
        let angle_deg = sym(cfg.max_rotation_deg);
        let brightness = 1.0 + sym(cfg.brightness);
        let contrast = 1.0 + sym(cfg.contrast);
        let saturation = 1.0 + sym(cfg.saturation);
        let hue = sym(cfg.hue);
        Self {
            angle_deg,
            flip: rng.gen_bool(cfg.flip_prob),
            brightness: brightness.max(0.0),
            contrast: contrast.max(0.0),
            saturation: saturation.max(0.0),
            hue,
        }
    }
}

fn check_size(img: &RgbImage, crop: u32) -> Result<()> {
    let (w, h) = img.dimensions();
    if w < crop || h < crop {
        return Err(Error::Data(format!("{w}x{h} image is smaller than the {crop}x{crop} crop")));
    }
    Ok(())
}

fn center_crop(img: &RgbImage, crop: u32) -> RgbImage {
    let (w, h) = img.dimensions();
    image::imageops::crop_imm(img, (w - crop) / 2, (h - crop) / 2, crop, crop).to_image()
}

fn reflect(i: i64, n: i64) -> i64 {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    if m < n {
        m
    } else {
        period - m
    }
}

/// Rotates about the image center with reflect padding and returns the
/// central `crop x crop` window, bilinearly sampled.
fn rotate_crop(img: &RgbImage, angle_deg: f64, crop: u32) -> RgbImage {
    let (w, h) = img.dimensions();
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let (x0, y0) = ((w - crop) / 2, (h - crop) / 2);
    let (s, c) = angle_deg.to_radians().sin_cos();
    let px = |x: i64, y: i64| img.get_pixel(reflect(x, w as i64) as u32, reflect(y, h as i64) as u32).0;
    RgbImage::from_fn(crop, crop, |i, j| {
        let (dx, dy) = ((x0 + i) as f64 - cx, (y0 + j) as f64 - cy);
        // inverse rotation maps output pixel to source
        let sx = c * dx + s * dy + cx;
        let sy = -s * dx + c * dy + cy;
        let (fx, fy) = (sx.floor(), sy.floor());
        let (ax, ay) = (sx - fx, sy - fy);
        let (ix, iy) = (fx as i64, fy as i64);
        let (p00, p10, p01, p11) = (px(ix, iy), px(ix + 1, iy), px(ix, iy + 1), px(ix + 1, iy + 1));
        let mut out = [0u8; 3];
        for ch in 0..3 {
            let v = (1.0 - ax) * (1.0 - ay) * p00[ch] as f64
                + ax * (1.0 - ay) * p10[ch] as f64
                + (1.0 - ax) * ay * p01[ch] as f64
                + ax * ay * p11[ch] as f64;
            out[ch] = v.round().clamp(0.0, 255.0) as u8;
        }
        Rgb(out)
    })
}

fn gray(p: [f64; 3]) -> f64 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

fn rgb_to_hsv(p: [f64; 3]) -> [f64; 3] {
    let max = p[0].max(p[1]).max(p[2]);
    let min = p[0].min(p[1]).min(p[2]);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == p[0] {
        ((p[1] - p[2]) / d).rem_euclid(6.0)
    } else if max == p[1] {
        (p[2] - p[0]) / d + 2.0
    } else {
        (p[0] - p[1]) / d + 4.0
    } / 6.0;
    let s = if max == 0.0 { 0.0 } else { d / max };
    [h, s, max]
}

fn hsv_to_rgb([h, s, v]: [f64; 3]) -> [f64; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as i32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Brightness, contrast, saturation, hue, in that order; each step clamps
/// to `[0, 1]` and identity factors are skipped.
fn color_jitter(img: &mut RgbImage, d: &AugmentDraws) {
    let mut px: Vec<[f64; 3]> = img
        .pixels()
        .map(|p| [p[0] as f64 / 255.0, p[1] as f64 / 255.0, p[2] as f64 / 255.0])
        .collect();
    let clamp = |v: f64| v.clamp(0.0, 1.0);
    if d.brightness != 1.0 {
        px.iter_mut().for_each(|p| p.iter_mut().for_each(|v| *v = clamp(*v * d.brightness)));
    }
    if d.contrast != 1.0 {
        let m = px.iter().map(|p| gray(*p)).sum::<f64>() / px.len() as f64;
        px.iter_mut()
            .for_each(|p| p.iter_mut().for_each(|v| *v = clamp((*v - m) * d.contrast + m)));
    }
    if d.saturation != 1.0 {
        px.iter_mut().for_each(|p| {
            let g = gray(*p);
            p.iter_mut().for_each(|v| *v = clamp((*v - g) * d.saturation + g));
        });
    }
    if d.hue != 0.0 {
        px.iter_mut().for_each(|p| {
            let mut hsv = rgb_to_hsv(*p);
            hsv[0] += d.hue;
            *p = hsv_to_rgb(hsv).map(clamp);
        });
    }
    for (dst, p) in img.pixels_mut().zip(px) {
        *dst = Rgb(p.map(|v| (v * 255.0).round() as u8));
    }
}

fn resize(img: RgbImage, edge: u32) -> RgbImage {
    if img.dimensions() == (edge, edge) {
        img
    } else {
        image::imageops::resize(&img, edge, edge, FilterType::Triangle)
    }
}

/// `3 x E x E` float tensor: unit-range channels, then per-channel
/// `(v - mean) / std`.
pub fn to_tensor(img: &RgbImage, cfg: &AugmentConfig) -> Result<Tensor> {
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut data = vec![0f32; 3 * w * h];
    for (x, y, p) in img.enumerate_pixels() {
        for ch in 0..3 {
            let v = p[ch] as f32 / 255.0;
            data[ch * w * h + y as usize * w + x as usize] = (v - cfg.mean[ch]) / cfg.std[ch];
        }
    }
    Ok(Tensor::from_vec(data, (3, h, w), &Device::Cpu)?)
}

/// Applies a fixed set of draws; with [`AugmentDraws::identity`] this is
/// exactly [`preprocess_eval`].
pub fn augment_with(img: &RgbImage, cfg: &AugmentConfig, draws: &AugmentDraws) -> Result<Tensor> {
    check_size(img, cfg.crop_edge)?;
    let mut out = if draws.angle_deg == 0.0 {
        center_crop(img, cfg.crop_edge)
    } else {
        rotate_crop(img, draws.angle_deg, cfg.crop_edge)
    };
    if draws.flip {
        image::imageops::flip_horizontal_in_place(&mut out);
    }
    color_jitter(&mut out, draws);
    to_tensor(&resize(out, cfg.resize_edge), cfg)
}

pub fn augment_train<R: Rng + ?Sized>(img: &RgbImage, cfg: &AugmentConfig, rng: &mut R) -> Result<Tensor> {
    let draws = AugmentDraws::sample(cfg, rng);
    augment_with(img, cfg, &draws)
}

/// Center crop and resize, the pixel geometry seen by the network at
/// evaluation time.
pub fn eval_image(img: &RgbImage, cfg: &AugmentConfig) -> Result<RgbImage> {
    check_size(img, cfg.crop_edge)?;
    Ok(resize(center_crop(img, cfg.crop_edge), cfg.resize_edge))
}

pub fn preprocess_eval(img: &RgbImage, cfg: &AugmentConfig) -> Result<Tensor> {
    to_tensor(&eval_image(img, cfg)?, cfg)
}
