//! Synthetic two-class images that differ only in the spatial arrangement of
//! identical blobs: positive images cluster their blobs inside a small disc,
//! negative images spread them over the frame. Blobs never overlap and never
//! touch the border, so every image carries exactly the same blob mass and
//! the global intensity histogram has the same distribution in both classes.

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datapipe::image::{Label, LabeledImage};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub edge: u32,
    pub per_class: usize,
    pub blobs: usize,
    pub blob_radius: f64,
    /// Radius of the disc holding the blob centers of a clustered image.
    pub cluster_radius: f64,
    /// Minimum center distance between blobs of a dispersed image.
    pub dispersed_min_dist: f64,
    /// Background noise amplitude (uniform, in 8-bit levels).
    pub noise: u8,
}

impl SynthSpec {
    pub fn new(edge: u32, per_class: usize, blobs: usize) -> Self {
        let e = edge as f64;
        Self {
            edge,
            per_class,
            blobs,
            blob_radius: (e / 21.0).max(1.5),
            cluster_radius: e * 0.19,
            dispersed_min_dist: e / 4.0,
            noise: 12,
        }
    }

    fn validate(&self) -> Result<()> {
        let blob_area = self.blobs as f64 * std::f64::consts::PI * self.blob_radius.powi(2);
        let image_area = (self.edge as f64).powi(2);
        if blob_area > image_area {
            return Err(Error::Config(format!(
                "{} blobs of radius {} cover {blob_area:.0} px, more than the {image_area:.0} px image",
                self.blobs, self.blob_radius
            )));
        }
        if self.blobs == 0 || self.per_class == 0 || self.blob_radius <= 0.0 {
            return Err(Error::Config("need at least one blob, one image per class and a positive radius".into()));
        }
        Ok(())
    }

    fn min_gap(&self) -> f64 {
        2.0 * self.blob_radius + 1.0
    }

    /// Valid range for blob centers along each axis.
    fn center_range(&self) -> (f64, f64) {
        let m = self.blob_radius.ceil() + 1.0;
        (m, self.edge as f64 - 1.0 - m)
    }
}

#[derive(Debug, Clone)]
pub struct SynthSample {
    pub image: LabeledImage,
    /// Blob centers as `(x, y)`.
    pub centers: Vec<(f64, f64)>,
}

const BACKGROUND: [f64; 3] = [28.0, 24.0, 36.0];
const BLOB_COLOR: [f64; 3] = [170.0, 110.0, 190.0];

/// Radial blob profile, 0 outside `radius`.
fn profile(d: f64, radius: f64) -> f64 {
    if d > radius {
        return 0.0;
    }
    let t = d / radius;
    (1.0 - t * t) * (0.7 + 0.3 * (std::f64::consts::PI * 2.0 * t).cos())
}

fn place<R: Rng>(
    rng: &mut R,
    n: usize,
    min_dist: f64,
    mut propose: impl FnMut(&mut R) -> (f64, f64),
) -> Option<Vec<(f64, f64)>> {
    for _attempt in 0..200 {
        let mut pts: Vec<(f64, f64)> = Vec::with_capacity(n);
        let mut tries = 0;
        while pts.len() < n && tries < 5000 {
            tries += 1;
            let p = propose(rng);
            if pts.iter().all(|q| ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt() >= min_dist) {
                pts.push(p);
            }
        }
        if pts.len() == n {
            return Some(pts);
        }
    }
    None
}

fn layout<R: Rng>(spec: &SynthSpec, label: Label, rng: &mut R) -> Result<Vec<(f64, f64)>> {
    let (lo, hi) = spec.center_range();
    let pts = match label {
        Label::Positive => {
            let r = spec.cluster_radius.min((hi - lo) / 2.0);
            let (clo, chi) = (lo + r, hi - r);
            let c = (rng.gen_range(clo..=chi), rng.gen_range(clo..=chi));
            place(rng, spec.blobs, spec.min_gap(), |rng| loop {
                let (dx, dy) = (rng.gen_range(-r..=r), rng.gen_range(-r..=r));
                if dx * dx + dy * dy <= r * r {
                    break (c.0 + dx, c.1 + dy);
                }
            })
        }
        Label::Negative => place(rng, spec.blobs, spec.dispersed_min_dist.max(spec.min_gap()), |rng| {
            (rng.gen_range(lo..=hi), rng.gen_range(lo..=hi))
        }),
    };
    pts.ok_or_else(|| Error::Config(format!("could not place {} blobs for {label}", spec.blobs)))
}

fn render<R: Rng>(spec: &SynthSpec, centers: &[(f64, f64)], rng: &mut R) -> RgbImage {
    let e = spec.edge;
    let mut acc = vec![[0f64; 3]; (e * e) as usize];
    let r = spec.blob_radius;
    for &(cx, cy) in centers {
        let (x0, x1) = ((cx - r).floor().max(0.0) as u32, ((cx + r).ceil() as u32).min(e - 1));
        let (y0, y1) = ((cy - r).floor().max(0.0) as u32, ((cy + r).ceil() as u32).min(e - 1));
        for y in y0..=y1 {
            for x in x0..=x1 {
                let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
                let w = profile(d, r);
                let px = &mut acc[(y * e + x) as usize];
                for ch in 0..3 {
                    px[ch] += w * BLOB_COLOR[ch];
                }
            }
        }
    }
    let n = spec.noise as i32;
    RgbImage::from_fn(e, e, |x, y| {
        let a = acc[(y * e + x) as usize];
        let mut out = [0u8; 3];
        for ch in 0..3 {
            let noise = if n > 0 { rng.gen_range(-n..=n) } else { 0 } as f64;
            out[ch] = (BACKGROUND[ch] + noise + a[ch]).round().clamp(0.0, 255.0) as u8;
        }
        Rgb(out)
    })
}

/// Generates `per_class` images of each label, alternating positive and
/// negative. Image `i` depends only on `(seed, i)`.
pub fn synth_generate_samples(spec: &SynthSpec, seed: u64) -> Result<Vec<SynthSample>> {
    spec.validate()?;
    (0..2 * spec.per_class)
        .map(|i| {
            let label = if i % 2 == 0 { Label::Positive } else { Label::Negative };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let centers = layout(spec, label, &mut rng)?;
            let pixels = render(spec, &centers, &mut rng);
            Ok(SynthSample {
                image: LabeledImage {
                    pixels,
                    label,
                    source_id: format!("synth_{i:05}"),
                },
                centers,
            })
        })
        .collect()
}

pub fn synth_generate(spec: &SynthSpec, seed: u64) -> Result<Vec<LabeledImage>> {
    Ok(synth_generate_samples(spec, seed)?
        .into_iter()
        .map(|s| s.image)
        .collect())
}

/// Row-major `edge x edge` mask of pixels covered by any blob.
pub fn blob_mask(spec: &SynthSpec, centers: &[(f64, f64)]) -> Vec<bool> {
    let e = spec.edge;
    let r = spec.blob_radius;
    (0..e * e)
        .map(|i| {
            let (x, y) = ((i % e) as f64, (i / e) as f64);
            centers.iter().any(|&(cx, cy)| (x - cx).powi(2) + (y - cy).powi(2) <= r * r)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_and_labels() {
        let imgs = synth_generate(&SynthSpec::new(64, 16, 8), 7).unwrap();
        assert_eq!(imgs.len(), 32);
        assert_eq!(imgs.iter().filter(|i| i.label == Label::Positive).count(), 16);
        assert!(imgs.iter().all(|i| i.pixels.dimensions() == (64, 64)));
    }

    #[test]
    fn deterministic() {
        let spec = SynthSpec::new(64, 4, 8);
        assert_eq!(synth_generate(&spec, 3).unwrap(), synth_generate(&spec, 3).unwrap());
        assert_ne!(synth_generate(&spec, 3).unwrap(), synth_generate(&spec, 4).unwrap());
    }

    #[test]
    fn oversized_blobs_rejected() {
        let mut spec = SynthSpec::new(16, 1, 8);
        spec.blob_radius = 5.0;
        assert!(synth_generate(&spec, 0).is_err());
    }

    #[test]
    fn blobs_do_not_overlap() {
        let spec = SynthSpec::new(64, 8, 8);
        for s in synth_generate_samples(&spec, 1).unwrap() {
            for (i, a) in s.centers.iter().enumerate() {
                for b in &s.centers[i + 1..] {
                    let d = ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
                    assert!(d >= spec.min_gap());
                }
            }
        }
    }

    #[test]
    fn clustered_blobs_stay_in_disc() {
        let spec = SynthSpec::new(64, 8, 8);
        for s in synth_generate_samples(&spec, 2).unwrap() {
            let n = s.centers.len() as f64;
            let (mx, my) = s.centers.iter().fold((0.0, 0.0), |a, c| (a.0 + c.0 / n, a.1 + c.1 / n));
            let spread = s.centers.iter().map(|c| ((c.0 - mx).powi(2) + (c.1 - my).powi(2)).sqrt()).fold(0.0, f64::max);
            if s.image.label == Label::Positive {
                assert!(spread <= 2.0 * spec.cluster_radius);
            }
        }
    }
}
