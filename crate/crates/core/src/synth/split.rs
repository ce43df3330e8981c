use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::keyed_rng;

/// Train/validation/test fractions and the shuffle seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub fractions: [f64; 3],
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { fractions: [0.8, 0.1, 0.1], seed: 0 }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if self.fractions.iter().any(|&f| !(f > 0.0)) {
            return Err(Error::Config(format!("split fractions {:?} must all be positive", self.fractions)));
        }
        let sum: f64 = self.fractions.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions sum to {sum}, not 1")));
        }
        Ok(())
    }
}

/// Random disjoint partition into `⌊f_train·n⌋`, `⌊f_val·n⌋` and the remainder, each part non-empty.
pub fn split_dataset<S: Clone>(samples: &[S], spec: &SplitSpec) -> Result<(Vec<S>, Vec<S>, Vec<S>)> {
    spec.validate()?;
    let n = samples.len();
    if n < 3 {
        return Err(Error::Config(format!("need at least 3 samples to split, got {n}")));
    }
    let floor = |f: f64| ((f * n as f64) + 1e-9).floor() as usize;
    let val = floor(spec.fractions[1]).max(1);
    let train = floor(spec.fractions[0]).max(1).min(n - val - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut keyed_rng(spec.seed, &["split".into()]));
    let pick = |idx: &[usize]| idx.iter().map(|&i| samples[i].clone()).collect::<Vec<_>>();
    Ok((pick(&order[..train]), pick(&order[train..train + val]), pick(&order[train + val..])))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_split_sizes() {
        let v: Vec<u32> = (0..100).collect();
        let (a, b, c) = split_dataset(&v, &SplitSpec::default()).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (80, 10, 10));
        let mut all: Vec<u32> = a.iter().chain(&b).chain(&c).copied().collect();
        all.sort();
        assert_eq!(all, v);
        assert_eq!((a, b, c), split_dataset(&v, &SplitSpec::default()).unwrap());
    }

    #[test]
    fn small_inputs() {
        let (a, b, c) = split_dataset(&[1, 2, 3], &SplitSpec::default()).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (1, 1, 1));
        assert!(split_dataset(&[1, 2], &SplitSpec::default()).is_err());
    }

    #[test]
    fn fractions_validated() {
        let bad = SplitSpec { fractions: [0.5, 0.5, 0.0], seed: 0 };
        assert!(split_dataset(&[1, 2, 3, 4], &bad).is_err());
        let bad = SplitSpec { fractions: [0.5, 0.3, 0.3], seed: 0 };
        assert!(bad.validate().is_err());
    }
}
