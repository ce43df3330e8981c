//! Synthetic multi-domain cone images standing in for the three echo datasets.
//!
//! Each domain is a parametric recipe ([`DomainSpec`]): an ultrasound-like cone, a dark
//! LV-like cavity ellipse wrapped in a bright myocardium ring, a dark LA-like ellipse below
//! it, and domain-specific gain, contrast, depth inhomogeneity and noise. The generator
//! always draws all three structures; classes the domain does not annotate are erased
//! from the emitted label map afterwards, so the full ground truth is available to
//! evaluation through [`generate_full_sample`].

pub mod augment;
pub mod ingest;
pub mod split;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::keyed_rng;
use crate::types::{Image, LabelMap, PresenceVector, SegmentationSample};

pub use augment::{augment, rotate_scale, AugmentConfig};
pub use split::{split_dataset, SplitSpec};

/// Closed real interval, serialised as `[min, max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Interval {
    pub min: f64,
    pub max: f64,
}

impl Interval {
    pub const fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    pub const fn point(v: f64) -> Self {
        Self { min: v, max: v }
    }

    pub fn is_valid(&self) -> bool {
        self.min.is_finite() && self.max.is_finite() && self.min <= self.max
    }

    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.min == self.max {
            self.min
        } else {
            rng.random_range(self.min..=self.max)
        }
    }
}

impl From<[f64; 2]> for Interval {
    fn from(v: [f64; 2]) -> Self {
        Self::new(v[0], v[1])
    }
}

impl From<Interval> for [f64; 2] {
    fn from(i: Interval) -> Self {
        [i.min, i.max]
    }
}

/// Structure sizes as fractions of the image side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureSizes {
    /// LV cavity semi-axis across the cone.
    pub lv_half_width: Interval,
    /// LV cavity semi-axis along the cone axis.
    pub lv_half_height: Interval,
    pub lvm_thickness: Interval,
    pub la_half_width: Interval,
    pub la_half_height: Interval,
    /// Gap between the myocardium ring and the LA.
    pub la_gap: Interval,
    /// Tilt of the LV long axis, degrees.
    pub tilt: Interval,
}

impl Default for StructureSizes {
    fn default() -> Self {
        Self {
            lv_half_width: Interval::new(0.10, 0.13),
            lv_half_height: Interval::new(0.15, 0.19),
            lvm_thickness: Interval::new(0.045, 0.06),
            la_half_width: Interval::new(0.09, 0.12),
            la_half_height: Interval::new(0.07, 0.09),
            la_gap: Interval::new(0.015, 0.03),
            tilt: Interval::new(-8.0, 8.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntensityProfile {
    /// Mean tissue intensity inside the cone.
    pub background: f64,
    pub lv_offset: f64,
    pub lvm_offset: f64,
    pub la_offset: f64,
    /// Scale applied to the structure offsets.
    pub contrast: f64,
    /// Intensity change from cone apex to cone rim (inhomogeneity).
    pub depth_gradient: f64,
}

/// Parametric recipe for one synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub domain_id: String,
    /// Full opening angle of the cone, degrees.
    pub cone_angle_range: Interval,
    /// Cone radius as a fraction of the image side.
    pub cone_radius_range: Interval,
    /// Horizontal apex jitter as a fraction of the width.
    pub cone_apex_jitter: f64,
    pub structure_sizes: StructureSizes,
    pub intensity: IntensityProfile,
    pub noise_sigma: f64,
    pub speckle_strength: f64,
    pub labels_present: PresenceVector,
    pub image_size: usize,
}

pub const PRESET_NAMES: [&str; 3] = ["camus_like", "unity_like", "echonet_like"];

impl DomainSpec {
    /// Built-in presets mirroring the three public echo datasets' label coverage.
    pub fn preset(name: &str, image_size: usize) -> Result<Self> {
        let base = StructureSizes::default();
        let spec = match name {
            // all labels, wide-ish cone, high contrast
            "camus_like" => DomainSpec {
                domain_id: name.into(),
                cone_angle_range: Interval::new(70.0, 80.0),
                cone_radius_range: Interval::new(0.88, 0.95),
                cone_apex_jitter: 0.03,
                structure_sizes: base,
                intensity: IntensityProfile {
                    background: 0.22,
                    lv_offset: -0.18,
                    lvm_offset: 0.50,
                    la_offset: -0.16,
                    contrast: 1.0,
                    depth_gradient: -0.10,
                },
                noise_sigma: 0.03,
                speckle_strength: 0.15,
                labels_present: PresenceVector::all(3),
                image_size,
            },
            // all labels, narrow cone, brighter gain, little noise
            "unity_like" => DomainSpec {
                domain_id: name.into(),
                cone_angle_range: Interval::new(50.0, 58.0),
                cone_radius_range: Interval::new(0.84, 0.90),
                cone_apex_jitter: 0.02,
                structure_sizes: StructureSizes {
                    lv_half_width: Interval::new(0.09, 0.11),
                    la_half_width: Interval::new(0.08, 0.10),
                    ..base
                },
                intensity: IntensityProfile {
                    background: 0.32,
                    lv_offset: -0.20,
                    lvm_offset: 0.42,
                    la_offset: -0.18,
                    contrast: 1.0,
                    depth_gradient: -0.10,
                },
                noise_sigma: 0.01,
                speckle_strength: 0.06,
                labels_present: PresenceVector::all(3),
                image_size,
            },
            // LV only, very wide cone, low contrast, heavy speckle
            "echonet_like" => DomainSpec {
                domain_id: name.into(),
                cone_angle_range: Interval::new(88.0, 98.0),
                cone_radius_range: Interval::new(0.92, 0.97),
                cone_apex_jitter: 0.04,
                structure_sizes: StructureSizes {
                    lv_half_width: Interval::new(0.11, 0.14),
                    ..base
                },
                intensity: IntensityProfile {
                    background: 0.35,
                    lv_offset: -0.22,
                    lvm_offset: 0.25,
                    la_offset: -0.20,
                    contrast: 1.0,
                    depth_gradient: 0.0,
                },
                noise_sigma: 0.05,
                speckle_strength: 0.35,
                labels_present: PresenceVector::new(vec![true, false, false]),
                image_size,
            },
            other => {
                return Err(Error::Config(format!(
                    "unknown domain preset {other:?} (expected one of {PRESET_NAMES:?})"
                )))
            }
        };
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.structure_sizes;
        let ranges = [
            ("cone_angle_range", self.cone_angle_range),
            ("cone_radius_range", self.cone_radius_range),
            ("lv_half_width", s.lv_half_width),
            ("lv_half_height", s.lv_half_height),
            ("lvm_thickness", s.lvm_thickness),
            ("la_half_width", s.la_half_width),
            ("la_half_height", s.la_half_height),
            ("la_gap", s.la_gap),
            ("tilt", s.tilt),
        ];
        for (name, r) in ranges {
            if !r.is_valid() {
                return Err(Error::Config(format!("{}: {name} is not an interval", self.domain_id)));
            }
        }
        if s.la_gap.min < 0.0 || s.lvm_thickness.min <= 0.0 || s.lv_half_width.min <= 0.0 || s.la_half_width.min <= 0.0 {
            return Err(Error::Config(format!("{}: structure sizes must be positive", self.domain_id)));
        }
        if !(0.0..180.0).contains(&self.cone_angle_range.min) || self.cone_angle_range.max >= 180.0 {
            return Err(Error::Config(format!("{}: cone angle must lie in (0, 180)", self.domain_id)));
        }
        if !self.labels_present.any_present() {
            return Err(Error::Config(format!("{}: labels_present needs at least one class", self.domain_id)));
        }
        if self.labels_present.len() != 3 {
            return Err(Error::Config(format!(
                "{}: the generator draws LV/LVM/LA, labels_present needs 3 flags",
                self.domain_id
            )));
        }
        if self.image_size < 8 || !self.image_size.is_power_of_two() {
            return Err(Error::Config(format!("{}: image_size {} is not a power of two ≥ 8", self.domain_id, self.image_size)));
        }
        if self.noise_sigma < 0.0 || self.speckle_strength < 0.0 || self.cone_apex_jitter < 0.0 {
            return Err(Error::Config(format!("{}: noise levels must be non-negative", self.domain_id)));
        }
        Ok(())
    }
}

struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    /// Normalised radius: < 1 inside.
    fn rho(&self, x: f64, y: f64) -> f64 {
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        ((u / self.a).powi(2) + (v / self.b).powi(2)).sqrt()
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Draw a sample with every structure labelled, ignoring `labels_present`.
pub fn generate_full_sample(spec: &DomainSpec, seed: u64) -> Result<SegmentationSample> {
    spec.validate()?;
    let mut rng = keyed_rng(seed, &["sample".into(), spec.domain_id.as_str().into()]);
    let n = spec.image_size;
    let side = n as f64;
    let sz = &spec.structure_sizes;

    let apex_x = 0.5 + spec.cone_apex_jitter * rng.random_range(-1.0..=1.0);
    let apex_y = 0.03;
    let half_angle = spec.cone_angle_range.sample(&mut rng).to_radians() / 2.0;
    let radius = spec.cone_radius_range.sample(&mut rng);

    let tilt = sz.tilt.sample(&mut rng).to_radians();
    let (sin, cos) = tilt.sin_cos();
    let lv_a = sz.lv_half_width.sample(&mut rng);
    let lv_b = sz.lv_half_height.sample(&mut rng);
    let t = sz.lvm_thickness.sample(&mut rng);
    let la_a = sz.la_half_width.sample(&mut rng);
    let la_b = sz.la_half_height.sample(&mut rng);
    let gap = sz.la_gap.sample(&mut rng);
    let lv_cx = apex_x + 0.02 * rng.random_range(-1.0..=1.0);
    let lv_cy = 0.40 + 0.03 * rng.random_range(-1.0..=1.0);
    let lv = Ellipse { cx: lv_cx, cy: lv_cy, a: lv_a, b: lv_b, cos, sin };
    let lvm = Ellipse { cx: lv_cx, cy: lv_cy, a: lv_a + t, b: lv_b + t, cos, sin };
    // LA centre lies on the tilted long axis, below the ring
    let along = lv_b + t + gap + la_b;
    let la = Ellipse { cx: lv_cx - along * sin, cy: lv_cy + along * cos, a: la_a, b: la_b, cos, sin };

    let ip = &spec.intensity;
    let mut image = Image::filled(n, n, 0.0);
    let mut labels = LabelMap::filled(n, n, 0);
    for row in 0..n {
        for col in 0..n {
            let x = (col as f64 + 0.5) / side;
            let y = (row as f64 + 0.5) / side;
            let dx = x - apex_x;
            let dy = y - apex_y;
            let dist = (dx * dx + dy * dy).sqrt();
            let inside = dy > 0.0 && dist <= radius && dx.atan2(dy).abs() <= half_angle;
            if !inside {
                continue;
            }
            let (class, offset) = if lv.rho(x, y) < 1.0 {
                (1u8, ip.lv_offset)
            } else if lvm.rho(x, y) < 1.0 {
                (2, ip.lvm_offset)
            } else if la.rho(x, y) < 1.0 {
                (3, ip.la_offset)
            } else {
                (0, 0.0)
            };
            let depth = dist / radius;
            let clean = ip.background + ip.contrast * offset + ip.depth_gradient * (depth - 0.5);
            let speckle = 1.0 + spec.speckle_strength * normal(&mut rng);
            let v = clean * speckle + spec.noise_sigma * normal(&mut rng);
            image.set(row, col, v.clamp(0.0, 1.0) as f32);
            labels.set(row, col, class);
        }
    }
    Ok(SegmentationSample {
        image,
        labels,
        presence: PresenceVector::all(3),
        domain_id: spec.domain_id.clone(),
        sample_id: format!("{}-{seed:016x}", spec.domain_id),
    })
}

/// Apply the domain's label coverage: erase every class it does not annotate.
pub fn restrict_to_domain_labels(mut sample: SegmentationSample, labels_present: &PresenceVector) -> SegmentationSample {
    for c in labels_present.missing().collect::<Vec<_>>() {
        sample.erase_class(c);
    }
    sample
}

/// Deterministic sample for `(spec, seed)` with the domain's label coverage applied.
pub fn generate_sample(spec: &DomainSpec, seed: u64) -> Result<SegmentationSample> {
    Ok(restrict_to_domain_labels(generate_full_sample(spec, seed)?, &spec.labels_present))
}

fn sample_seed(master: u64, domain_id: &str, index: usize) -> u64 {
    crate::rng::derive_seed(master, &["dataset".into(), domain_id.into(), index.into()])
}

/// `n` fully labelled samples (the generator's ground truth before label coverage).
pub fn generate_full_dataset(spec: &DomainSpec, n: usize, seed: u64) -> Result<Vec<SegmentationSample>> {
    if n == 0 {
        return Err(Error::Config("dataset size must be at least 1".into()));
    }
    (0..n)
        .map(|i| {
            let mut s = generate_full_sample(spec, sample_seed(seed, &spec.domain_id, i))?;
            s.sample_id = format!("{}-{seed}-{i:05}", spec.domain_id);
            Ok(s)
        })
        .collect()
}

/// `n` samples with per-sample seeds derived from `seed`; ids are unique per `(domain, seed)`.
pub fn generate_domain_dataset(spec: &DomainSpec, n: usize, seed: u64) -> Result<Vec<SegmentationSample>> {
    Ok(generate_full_dataset(spec, n, seed)?
        .into_iter()
        .map(|s| restrict_to_domain_labels(s, &spec.labels_present))
        .collect())
}

/// Erase class `class_index` from a uniformly chosen `⌊fraction·n⌋` of the samples.
pub fn apply_label_removal(
    samples: &[SegmentationSample],
    class_index: usize,
    fraction: f64,
    seed: u64,
) -> Result<Vec<SegmentationSample>> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Config(format!("removal fraction {fraction} outside [0,1]")));
    }
    if let Some(s) = samples.iter().find(|s| class_index >= s.presence.len()) {
        return Err(Error::Config(format!("class index {class_index} outside sample {}'s vocabulary", s.sample_id)));
    }
    let count = (fraction * samples.len() as f64 + 1e-9).floor() as usize;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut keyed_rng(seed, &["label-removal".into(), class_index.into()]));
    let mut chosen = vec![false; samples.len()];
    for &i in &order[..count] {
        chosen[i] = true;
    }
    Ok(samples
        .iter()
        .zip(chosen)
        .map(|(s, pick)| {
            let mut s = s.clone();
            if pick {
                s.erase_class(class_index);
            }
            s
        })
        .collect())
}
