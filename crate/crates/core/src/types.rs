//! Shared domain types: the class vocabulary, pixel grids and the segmentation sample.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ordered foreground class names. Background is the implicit class 0.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassVocabulary {
    names: Vec<String>,
}

impl ClassVocabulary {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.is_empty() {
            return Err(Error::Config("class vocabulary needs at least one foreground class".into()));
        }
        for (i, n) in names.iter().enumerate() {
            if n.is_empty() {
                return Err(Error::Config(format!("class name {i} is empty")));
            }
            if names[..i].contains(n) {
                return Err(Error::Config(format!("duplicate class name {n:?}")));
            }
        }
        Ok(Self { names })
    }

    /// Number of foreground classes.
    pub fn k(&self) -> usize {
        self.names.len()
    }

    /// Channel count of a prediction: background plus foreground.
    pub fn num_channels(&self) -> usize {
        self.names.len() + 1
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Foreground index (0-based, so label value is `index + 1`) of a class name.
    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

impl Default for ClassVocabulary {
    fn default() -> Self {
        Self { names: vec!["LV".into(), "LVM".into(), "LA".into()] }
    }
}

/// Row-major `height × width` grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Copy> Grid<T> {
    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Self { height, width, data: vec![value; height * width] }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "grid {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> T {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: T) {
        self.data[row * self.width + col] = value;
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Grid<U> {
        Grid { height: self.height, width: self.width, data: self.data.iter().map(|&v| f(v)).collect() }
    }
}

pub type Image = Grid<f32>;
pub type LabelMap = Grid<u8>;

/// Which foreground classes a sample's ground truth annotates.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PresenceVector(Vec<bool>);

impl PresenceVector {
    pub fn new(flags: Vec<bool>) -> Self {
        Self(flags)
    }

    pub fn all(k: usize) -> Self {
        Self(vec![true; k])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_present(&self, class: usize) -> bool {
        self.0.get(class).copied().unwrap_or(false)
    }

    pub fn set(&mut self, class: usize, present: bool) {
        self.0[class] = present;
    }

    pub fn all_present(&self) -> bool {
        self.0.iter().all(|&p| p)
    }

    pub fn any_present(&self) -> bool {
        self.0.iter().any(|&p| p)
    }

    pub fn flags(&self) -> &[bool] {
        &self.0
    }

    /// Indices of the missing foreground classes.
    pub fn missing(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().enumerate().filter(|(_, &p)| !p).map(|(i, _)| i)
    }
}

/// One training unit: intensity image, label map, presence flags and provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationSample {
    pub image: Image,
    pub labels: LabelMap,
    pub presence: PresenceVector,
    pub domain_id: String,
    pub sample_id: String,
}

impl SegmentationSample {
    /// Erase foreground class `class` (0-based) to background and clear its presence flag.
    pub fn erase_class(&mut self, class: usize) {
        let value = (class + 1) as u8;
        for l in self.labels.as_mut_slice() {
            if *l == value {
                *l = 0;
            }
        }
        self.presence.set(class, false);
    }

    pub fn side(&self) -> usize {
        self.image.height()
    }
}

/// A single violated sample invariant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    ShapeMismatch { image: (usize, usize), labels: (usize, usize) },
    NotSquarePowerOfTwo { height: usize, width: usize },
    IntensityOutOfRange { count: usize },
    LabelOutOfRange { value: u8 },
    PresenceLength { expected: usize, actual: usize },
    LabelWithoutPresence { class: usize },
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::ShapeMismatch { image, labels } => write!(
                f,
                "shape mismatch: image {}x{}, labels {}x{}",
                image.0, image.1, labels.0, labels.1
            ),
            Violation::NotSquarePowerOfTwo { height, width } => {
                write!(f, "grid {height}x{width} is not a square power of two")
            }
            Violation::IntensityOutOfRange { count } => write!(f, "{count} intensities outside [0,1]"),
            Violation::LabelOutOfRange { value } => write!(f, "label value {value} outside vocabulary"),
            Violation::PresenceLength { expected, actual } => {
                write!(f, "presence vector has {actual} flags, expected {expected}")
            }
            Violation::LabelWithoutPresence { class } => {
                write!(f, "label present but presence flag false (class {})", class + 1)
            }
        }
    }
}

/// Check every sample invariant; an empty list means the sample is valid.
pub fn validate_sample(sample: &SegmentationSample, vocab: &ClassVocabulary) -> Vec<Violation> {
    let mut out = Vec::new();
    let (ih, iw) = sample.image.dims();
    let (lh, lw) = sample.labels.dims();
    if (ih, iw) != (lh, lw) {
        out.push(Violation::ShapeMismatch { image: (ih, iw), labels: (lh, lw) });
    }
    for (h, w) in [(ih, iw), (lh, lw)] {
        if h != w || !h.is_power_of_two() {
            out.push(Violation::NotSquarePowerOfTwo { height: h, width: w });
            break;
        }
    }
    let bad = sample.image.as_slice().iter().filter(|v| !(0.0..=1.0).contains(*v)).count();
    if bad > 0 {
        out.push(Violation::IntensityOutOfRange { count: bad });
    }
    let k = vocab.k();
    if sample.presence.len() != k {
        out.push(Violation::PresenceLength { expected: k, actual: sample.presence.len() });
    }
    let mut seen = vec![false; 256];
    for &l in sample.labels.as_slice() {
        seen[l as usize] = true;
    }
    for (value, _) in seen.iter().enumerate().filter(|(_, &s)| s) {
        if value > k {
            out.push(Violation::LabelOutOfRange { value: value as u8 });
        } else if value > 0 && !sample.presence.is_present(value - 1) {
            out.push(Violation::LabelWithoutPresence { class: value - 1 });
        }
    }
    out
}

/// [`validate_sample`] as a `Result`, for call sites that treat violations as fatal.
pub fn ensure_valid(sample: &SegmentationSample, vocab: &ClassVocabulary) -> Result<()> {
    let v = validate_sample(sample, vocab);
    if v.is_empty() {
        Ok(())
    } else {
        Err(Error::InvalidSample {
            id: sample.sample_id.clone(),
            violations: v.iter().map(ToString::to_string).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(side: usize) -> SegmentationSample {
        let mut labels = LabelMap::filled(side, side, 0);
        labels.set(0, 0, 1);
        labels.set(0, 1, 2);
        labels.set(1, 0, 3);
        SegmentationSample {
            image: Image::filled(side, side, 0.5),
            labels,
            presence: PresenceVector::all(3),
            domain_id: "d".into(),
            sample_id: "s".into(),
        }
    }

    #[test]
    fn fully_labelled_sample_is_valid() {
        assert!(validate_sample(&sample(8), &ClassVocabulary::default()).is_empty());
    }

    #[test]
    fn label_without_presence_flag() {
        let mut s = sample(8);
        s.presence.set(1, false);
        let v = validate_sample(&s, &ClassVocabulary::default());
        assert_eq!(v, vec![Violation::LabelWithoutPresence { class: 1 }]);
        assert!(v[0].to_string().contains("label present but presence flag false"));
    }

    #[test]
    fn shape_mismatch_reported() {
        let mut s = sample(64);
        s.labels = LabelMap::filled(32, 64, 0);
        let v = validate_sample(&s, &ClassVocabulary::default());
        assert!(v.iter().any(|x| matches!(x, Violation::ShapeMismatch { .. })));
        assert!(v[0].to_string().starts_with("shape mismatch"));
    }

    #[test]
    fn out_of_range_values() {
        let mut s = sample(8);
        s.labels.set(3, 3, 7);
        s.image.set(2, 2, 1.5);
        let v = validate_sample(&s, &ClassVocabulary::default());
        assert!(v.contains(&Violation::LabelOutOfRange { value: 7 }));
        assert!(v.contains(&Violation::IntensityOutOfRange { count: 1 }));
    }

    #[test]
    fn non_power_of_two_rejected() {
        let mut s = sample(8);
        s.image = Image::filled(12, 12, 0.0);
        s.labels = LabelMap::filled(12, 12, 0);
        let v = validate_sample(&s, &ClassVocabulary::default());
        assert!(v.contains(&Violation::NotSquarePowerOfTwo { height: 12, width: 12 }));
    }

    #[test]
    fn validation_is_pure() {
        let mut s = sample(8);
        s.presence.set(2, false);
        let vocab = ClassVocabulary::default();
        assert_eq!(validate_sample(&s, &vocab), validate_sample(&s, &vocab));
    }

    #[test]
    fn vocabulary_rules() {
        assert!(ClassVocabulary::new(Vec::<String>::new()).is_err());
        assert!(ClassVocabulary::new(["a", "a"]).is_err());
        assert!(ClassVocabulary::new(["a", ""]).is_err());
        let v = ClassVocabulary::default();
        assert_eq!(v.k(), 3);
        assert_eq!(v.index_of("LA"), Some(2));
    }

    #[test]
    fn erase_clears_pixels_and_flag() {
        let mut s = sample(8);
        s.erase_class(2);
        assert!(!s.labels.as_slice().contains(&3));
        assert!(!s.presence.is_present(2));
        assert!(validate_sample(&s, &ClassVocabulary::default()).is_empty());
    }
}
