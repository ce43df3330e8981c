//! On-the-fly augmentation: scaling and rotation (shared by image and labels), then
//! Gaussian blur, brightness and contrast on the image only.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Interval;
use crate::error::{Error, Result};
use crate::rng::keyed_rng;
use crate::types::{Image, LabelMap, SegmentationSample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub scale_range: Interval,
    /// Degrees.
    pub rotation_range: Interval,
    /// Pixels.
    pub blur_sigma_range: Interval,
    pub brightness_range: Interval,
    pub contrast_range: Interval,
    pub scale_probability: f64,
    pub rotation_probability: f64,
    pub blur_probability: f64,
    pub brightness_probability: f64,
    pub contrast_probability: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            scale_range: Interval::new(0.85, 1.15),
            rotation_range: Interval::new(-15.0, 15.0),
            blur_sigma_range: Interval::new(0.0, 1.5),
            brightness_range: Interval::new(-0.1, 0.1),
            contrast_range: Interval::new(0.8, 1.2),
            scale_probability: 0.5,
            rotation_probability: 0.5,
            blur_probability: 0.5,
            brightness_probability: 0.5,
            contrast_probability: 0.5,
        }
    }
}

impl AugmentConfig {
    /// A configuration that never transforms anything.
    pub fn disabled() -> Self {
        Self {
            scale_probability: 0.0,
            rotation_probability: 0.0,
            blur_probability: 0.0,
            brightness_probability: 0.0,
            contrast_probability: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, r) in [
            ("scale_range", self.scale_range),
            ("rotation_range", self.rotation_range),
            ("blur_sigma_range", self.blur_sigma_range),
            ("brightness_range", self.brightness_range),
            ("contrast_range", self.contrast_range),
        ] {
            if !r.is_valid() {
                return Err(Error::Config(format!("augment {name} is not an interval")));
            }
        }
        if self.scale_range.min <= 0.0 || self.blur_sigma_range.min < 0.0 || self.contrast_range.min < 0.0 {
            return Err(Error::Config("augment scale must be positive, blur and contrast non-negative".into()));
        }
        for p in [
            self.scale_probability,
            self.rotation_probability,
            self.blur_probability,
            self.brightness_probability,
            self.contrast_probability,
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("augment probability {p} outside [0,1]")));
            }
        }
        Ok(())
    }
}

/// Rotate (degrees, counter-clockwise on screen) and scale about the image centre.
///
/// Bilinear resampling for the image, nearest neighbour for labels; pixels mapped from
/// outside the grid become 0.
pub fn rotate_scale(sample: &SegmentationSample, angle_deg: f64, scale: f64) -> SegmentationSample {
    let (h, w) = sample.image.dims();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    let mut image = Image::filled(h, w, 0.0);
    let mut labels = LabelMap::filled(h, w, 0);
    for r in 0..h {
        for c in 0..w {
            // inverse map: output pixel -> source position
            let x = c as f64 - cx;
            let y = r as f64 - cy;
            let sx = (cos * x - sin * y) / scale + cx;
            let sy = (sin * x + cos * y) / scale + cy;
            let (nr, nc) = (sy.round(), sx.round());
            if nr >= 0.0 && nc >= 0.0 && (nr as usize) < h && (nc as usize) < w {
                labels.set(r, c, sample.labels.get(nr as usize, nc as usize));
            }
            image.set(r, c, bilinear(&sample.image, sy, sx));
        }
    }
    SegmentationSample { image, labels, ..sample.clone() }
}

fn bilinear(img: &Image, y: f64, x: f64) -> f32 {
    let (h, w) = img.dims();
    let y0 = y.floor();
    let x0 = x.floor();
    let fy = (y - y0) as f32;
    let fx = (x - x0) as f32;
    let px = |r: f64, c: f64| -> f32 {
        if r < 0.0 || c < 0.0 || r as usize >= h || c as usize >= w {
            0.0
        } else {
            img.get(r as usize, c as usize)
        }
    };
    let top = px(y0, x0) * (1.0 - fx) + px(y0, x0 + 1.0) * fx;
    let bottom = px(y0 + 1.0, x0) * (1.0 - fx) + px(y0 + 1.0, x0 + 1.0) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Separable Gaussian blur with edge clamping.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    if sigma <= 0.0 {
        return img.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f32> = kernel.iter().map(|k| (k / norm) as f32).collect();
    let (h, w) = img.dims();
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = Image::filled(h, w, 0.0);
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (k, &kv) in kernel.iter().enumerate() {
                acc += kv * img.get(r, clampi(c as isize + k as isize - radius, w));
            }
            tmp.set(r, c, acc);
        }
    }
    let mut out = Image::filled(h, w, 0.0);
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (k, &kv) in kernel.iter().enumerate() {
                acc += kv * tmp.get(clampi(r as isize + k as isize - radius, h), c);
            }
            out.set(r, c, acc);
        }
    }
    out
}

/// Randomly augment a sample; deterministic in `seed`. Presence and ids are never touched.
pub fn augment(sample: &SegmentationSample, cfg: &AugmentConfig, seed: u64) -> SegmentationSample {
    let mut rng = keyed_rng(seed, &["augment".into()]);
    let mut draw = |p: f64, range: Interval| -> Option<f64> {
        // both draws always happen so one transform's gate never shifts another's value
        let gate: f64 = rng.random();
        let value = range.sample(&mut rng);
        (gate < p).then_some(value)
    };
    let scale = draw(cfg.scale_probability, cfg.scale_range);
    let angle = draw(cfg.rotation_probability, cfg.rotation_range);
    let blur = draw(cfg.blur_probability, cfg.blur_sigma_range);
    let brightness = draw(cfg.brightness_probability, cfg.brightness_range);
    let contrast = draw(cfg.contrast_probability, cfg.contrast_range);

    let mut out = if scale.is_some() || angle.is_some() {
        rotate_scale(sample, angle.unwrap_or(0.0), scale.unwrap_or(1.0))
    } else {
        sample.clone()
    };
    if let Some(sigma) = blur {
        out.image = gaussian_blur(&out.image, sigma);
    }
    if let Some(b) = brightness {
        for v in out.image.as_mut_slice() {
            *v += b as f32;
        }
    }
    if let Some(c) = contrast {
        let px = out.image.as_slice();
        let mean = px.iter().map(|&v| v as f64).sum::<f64>() / px.len() as f64;
        for v in out.image.as_mut_slice() {
            *v = (mean + c * (*v as f64 - mean)) as f32;
        }
    }
    if blur.is_some() || brightness.is_some() || contrast.is_some() || scale.is_some() || angle.is_some() {
        for v in out.image.as_mut_slice() {
            *v = v.clamp(0.0, 1.0);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_domain_dataset, DomainSpec};
    use crate::types::{validate_sample, ClassVocabulary};

    fn data() -> Vec<SegmentationSample> {
        let mut out = Vec::new();
        for name in crate::synth::PRESET_NAMES {
            out.extend(generate_domain_dataset(&DomainSpec::preset(name, 64).unwrap(), 4, 9).unwrap());
        }
        out
    }

    #[test]
    fn zero_probability_is_identity() {
        for s in data() {
            assert_eq!(augment(&s, &AugmentConfig::disabled(), 3), s);
        }
    }

    #[test]
    fn augmented_samples_stay_valid() {
        let cfg = AugmentConfig {
            scale_probability: 1.0,
            rotation_probability: 1.0,
            blur_probability: 1.0,
            brightness_probability: 1.0,
            contrast_probability: 1.0,
            ..Default::default()
        };
        let vocab = ClassVocabulary::default();
        for (i, s) in data().iter().enumerate() {
            let a = augment(s, &cfg, i as u64);
            assert_eq!(a.presence, s.presence);
            assert_eq!(a.domain_id, s.domain_id);
            assert!(validate_sample(&a, &vocab).is_empty());
            assert_eq!(a, augment(s, &cfg, i as u64));
        }
    }

    #[test]
    fn quarter_turn_roundtrip() {
        for s in data() {
            let back = rotate_scale(&rotate_scale(&s, 90.0, 1.0), -90.0, 1.0);
            let agree = back.labels.as_slice().iter().zip(s.labels.as_slice()).filter(|(a, b)| a == b).count();
            assert!(agree as f64 / s.labels.as_slice().len() as f64 >= 0.99);
            assert_eq!(back.presence, s.presence);
        }
    }

    #[test]
    fn blur_preserves_constant_image() {
        let img = Image::filled(8, 8, 0.4);
        let b = gaussian_blur(&img, 1.2);
        assert!(b.as_slice().iter().all(|v| (v - 0.4).abs() < 1e-6));
    }

    #[test]
    fn config_validation() {
        assert!(AugmentConfig::default().validate().is_ok());
        let bad = AugmentConfig { blur_probability: 1.5, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = AugmentConfig { scale_range: Interval::new(1.2, 0.8), ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
