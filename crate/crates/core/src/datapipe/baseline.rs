//! Location-blind reference classifier: logistic regression on the global
//! gray-level histogram. On the synthetic arrangement task it should stay
//! near chance.

use image::RgbImage;

use crate::datapipe::image::{Label, LabeledImage};

pub fn intensity_histogram(img: &RgbImage, bins: usize) -> Vec<f64> {
    let mut h = vec![0.0; bins];
    for p in img.pixels() {
        let g = (p[0] as usize + p[1] as usize + p[2] as usize) / 3;
        h[(g * bins / 256).min(bins - 1)] += 1.0;
    }
    let n = (img.width() * img.height()) as f64;
    h.iter_mut().for_each(|v| *v /= n);
    h
}

#[derive(Debug, Clone)]
pub struct HistogramLogistic {
    bins: usize,
    mean: Vec<f64>,
    scale: Vec<f64>,
    weights: Vec<f64>,
    bias: f64,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl HistogramLogistic {
    /// Full-batch gradient descent on standardized histogram features,
    /// with a small L2 penalty.
    pub fn fit(train: &[LabeledImage], bins: usize, epochs: usize, lr: f64) -> Self {
        let xs: Vec<Vec<f64>> = train.iter().map(|i| intensity_histogram(&i.pixels, bins)).collect();
        let ys: Vec<f64> = train.iter().map(|i| (i.label == Label::Positive) as u8 as f64).collect();
        let n = xs.len().max(1) as f64;
        let mean: Vec<f64> = (0..bins).map(|j| xs.iter().map(|x| x[j]).sum::<f64>() / n).collect();
        let scale: Vec<f64> = (0..bins)
            .map(|j| {
                let v = xs.iter().map(|x| (x[j] - mean[j]).powi(2)).sum::<f64>() / n;
                if v > 0.0 { v.sqrt() } else { 1.0 }
            })
            .collect();
        let mut model = Self { bins, mean, scale, weights: vec![0.0; bins], bias: 0.0 };
        let zs: Vec<Vec<f64>> = xs.iter().map(|x| model.standardize(x)).collect();
        for _ in 0..epochs {
            let mut gw = vec![0.0; bins];
            let mut gb = 0.0;
            for (z, y) in zs.iter().zip(&ys) {
                let err = sigmoid(model.logit(z)) - y;
                gw.iter_mut().zip(z).for_each(|(g, v)| *g += err * v / n);
                gb += err / n;
            }
            for (w, g) in model.weights.iter_mut().zip(&gw) {
                *w -= lr * (g + 1e-3 * *w);
            }
            model.bias -= lr * gb;
        }
        model
    }

    fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| (v - m) / s).collect()
    }

    fn logit(&self, z: &[f64]) -> f64 {
        self.bias + self.weights.iter().zip(z).map(|(w, v)| w * v).sum::<f64>()
    }

    pub fn predict(&self, img: &RgbImage) -> Label {
        let z = self.standardize(&intensity_histogram(img, self.bins));
        if sigmoid(self.logit(&z)) > 0.5 { Label::Positive } else { Label::Negative }
    }

    pub fn accuracy(&self, data: &[LabeledImage]) -> f64 {
        let ok = data.iter().filter(|i| self.predict(&i.pixels) == i.label).count();
        ok as f64 / data.len().max(1) as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    #[test]
    fn separates_brightness_classes() {
        let data: Vec<LabeledImage> = (0..40)
            .map(|i| {
                let pos = i % 2 == 0;
                let v = if pos { 180 } else { 60 } + (i as u8 % 7);
                LabeledImage {
                    pixels: RgbImage::from_pixel(8, 8, Rgb([v, v, v])),
                    label: if pos { Label::Positive } else { Label::Negative },
                    source_id: i.to_string(),
                }
            })
            .collect();
        let m = HistogramLogistic::fit(&data, 16, 200, 0.5);
        assert_eq!(m.accuracy(&data), 1.0);
    }

    #[test]
    fn histogram_sums_to_one() {
        let img = RgbImage::from_fn(5, 5, |x, y| Rgb([(x * 50) as u8, (y * 50) as u8, 9]));
        let s: f64 = intensity_histogram(&img, 8).iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}
