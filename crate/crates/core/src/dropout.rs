//! Label dropout: with probability `p`, erase one of a sample's partially labelled classes
//! (chosen uniformly among those it still annotates) from its ground truth and clear the
//! class's presence flag, so the adaptive loss treats it as missing.
//!
//! The random draw is keyed by `(run seed, epoch, sample_id)`; the transform never mutates
//! its input, so every epoch starts again from the pristine sample.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::keyed_rng;
use crate::types::SegmentationSample;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DropoutConfig {
    /// Chance that a drop event happens for one sample presentation.
    pub probability: f64,
    /// Foreground class indices (0-based) that are partially labelled across the corpus.
    pub eligible_classes: BTreeSet<usize>,
}

impl DropoutConfig {
    pub fn new(probability: f64, eligible_classes: impl IntoIterator<Item = usize>) -> Self {
        Self { probability, eligible_classes: eligible_classes.into_iter().collect() }
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.probability) {
            return Err(Error::Config(format!("dropout probability {} outside [0,1]", self.probability)));
        }
        if let Some(&c) = self.eligible_classes.iter().find(|&&c| c >= k) {
            return Err(Error::Config(format!("eligible class {c} outside 0..{k}")));
        }
        Ok(())
    }
}

/// Classes missing from at least one sample's ground truth.
pub fn partially_labelled_classes(samples: &[SegmentationSample]) -> BTreeSet<usize> {
    samples.iter().flat_map(|s| s.presence.missing().collect::<Vec<_>>()).collect()
}

/// One pair of uniforms: `gate` decides whether to drop, `choice` picks the class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DropoutDraw {
    pub gate: f64,
    pub choice: f64,
}

impl DropoutDraw {
    pub fn keyed(run_seed: u64, epoch: usize, sample_id: &str) -> Self {
        let mut rng = keyed_rng(run_seed, &["label-dropout".into(), epoch.into(), sample_id.into()]);
        Self { gate: rng.random(), choice: rng.random() }
    }
}

/// Eligible classes this sample still annotates.
pub fn eligible_for(sample: &SegmentationSample, cfg: &DropoutConfig) -> Vec<usize> {
    cfg.eligible_classes.iter().copied().filter(|&c| sample.presence.is_present(c)).collect()
}

/// The class a draw would erase, if any.
pub fn dropped_class(sample: &SegmentationSample, cfg: &DropoutConfig, draw: DropoutDraw) -> Option<usize> {
    if !(draw.gate < cfg.probability) {
        return None;
    }
    let candidates = eligible_for(sample, cfg);
    if candidates.is_empty() {
        return None;
    }
    let idx = ((draw.choice * candidates.len() as f64) as usize).min(candidates.len() - 1);
    Some(candidates[idx])
}

pub fn apply_label_dropout(sample: &SegmentationSample, cfg: &DropoutConfig, draw: DropoutDraw) -> SegmentationSample {
    let mut out = sample.clone();
    if let Some(c) = dropped_class(sample, cfg, draw) {
        out.erase_class(c);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_sample, DomainSpec};
    use crate::types::{validate_sample, ClassVocabulary, PresenceVector};

    fn full() -> SegmentationSample {
        generate_sample(&DomainSpec::preset("camus_like", 32).unwrap(), 1).unwrap()
    }

    #[test]
    fn eligibility_is_intersection_with_presence() {
        let s = full();
        assert_eq!(eligible_for(&s, &DropoutConfig::new(0.5, [1, 2])), vec![1, 2]);
        let lv_only = generate_sample(&DomainSpec::preset("echonet_like", 32).unwrap(), 1).unwrap();
        assert!(eligible_for(&lv_only, &DropoutConfig::new(0.5, [1, 2])).is_empty());
        assert!(eligible_for(&s, &DropoutConfig::new(0.5, [])).is_empty());
    }

    #[test]
    fn probability_extremes() {
        let s = full();
        let never = DropoutConfig::new(0.0, [1, 2]);
        let always = DropoutConfig::new(1.0, [2]);
        for e in 0..200 {
            let d = DropoutDraw::keyed(4, e, &s.sample_id);
            assert_eq!(apply_label_dropout(&s, &never, d), s);
            let out = apply_label_dropout(&s, &always, d);
            assert!(!out.presence.is_present(2));
            assert!(!out.labels.as_slice().contains(&3));
            assert!(validate_sample(&out, &ClassVocabulary::default()).is_empty());
        }
    }

    #[test]
    fn at_most_one_class_changes_and_input_untouched() {
        let s = full();
        let before = s.clone();
        let cfg = DropoutConfig::new(0.7, [0, 1, 2]);
        for e in 0..100 {
            let out = apply_label_dropout(&s, &cfg, DropoutDraw::keyed(1, e, &s.sample_id));
            let changed = (0..3).filter(|&c| out.presence.is_present(c) != s.presence.is_present(c)).count();
            assert!(changed <= 1);
            let labels: BTreeSet<u8> = out.labels.as_slice().iter().copied().collect();
            let orig: BTreeSet<u8> = s.labels.as_slice().iter().copied().collect();
            assert!(labels.is_subset(&orig));
        }
        assert_eq!(s, before);
    }

    #[test]
    fn corpus_level_eligibility() {
        let mut a = full();
        let b = a.clone();
        a.presence = PresenceVector::new(vec![true, true, false]);
        a.erase_class(2);
        assert_eq!(partially_labelled_classes(&[a, b.clone()]), BTreeSet::from([2]));
        assert!(partially_labelled_classes(&[b]).is_empty());
    }

    #[test]
    fn config_validation() {
        assert!(DropoutConfig::new(1.2, [0]).validate(3).is_err());
        assert!(DropoutConfig::new(0.2, [3]).validate(3).is_err());
        assert!(DropoutConfig::new(0.2, [2]).validate(3).is_ok());
    }
}
