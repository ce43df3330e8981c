//! Pixel-wise categorical cross-entropy for fully and partially labelled supervision.
//!
//! All three regimes take logits `B×(K+1)×H×W`, one label map per sample and one presence
//! vector per sample, and reduce by the mean over every pixel of the batch.
//!
//! * **standard**: softmax over all channels, presence ignored. Missing structures are
//!   therefore supervised as background.
//! * **adaptive**: channels of missing classes are deleted before the softmax, so the
//!   distribution is renormalised over background plus the annotated classes. Missing
//!   channels receive exactly zero gradient.
//! * **marginal**: softmax over all channels; on background-labelled pixels the target
//!   probability is the background mass plus the mass of every missing class.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::scalar::Scalar;
use crate::types::{LabelMap, PresenceVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Standard,
    Adaptive,
    Marginal,
}

impl LossKind {
    pub const ALL: [LossKind; 3] = [LossKind::Standard, LossKind::Adaptive, LossKind::Marginal];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Standard => "standard",
            LossKind::Adaptive => "adaptive",
            LossKind::Marginal => "marginal",
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(LossKind::Standard),
            "adaptive" => Ok(LossKind::Adaptive),
            "marginal" => Ok(LossKind::Marginal),
            other => Err(Error::Config(format!("unknown loss kind {other:?}"))),
        }
    }
}

/// Loss regime. The reduction is always the pixel-count-weighted batch mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossConfig {
    pub kind: LossKind,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { kind: LossKind::Standard }
    }
}

fn check_inputs<T: Scalar>(
    kind: LossKind,
    logits: &Tensor<T>,
    targets: &[LabelMap],
    presence: &[PresenceVector],
) -> Result<()> {
    let [b, c, h, w] = logits.shape();
    if c < 2 {
        return Err(Error::Shape(format!("logits need at least 2 channels, got {c}")));
    }
    if targets.len() != b {
        return Err(Error::Shape(format!("{} label maps for a batch of {b}", targets.len())));
    }
    for (n, t) in targets.iter().enumerate() {
        if t.dims() != (h, w) {
            return Err(Error::Shape(format!("label map {n} is {:?}, logits are {h}x{w}", t.dims())));
        }
        if let Some(&bad) = t.as_slice().iter().find(|&&l| l as usize >= c) {
            return Err(Error::Shape(format!("label {bad} in sample {n} exceeds {} classes", c - 1)));
        }
    }
    if kind != LossKind::Standard {
        if presence.len() != b {
            return Err(Error::Shape(format!("{} presence vectors for a batch of {b}", presence.len())));
        }
        for (n, (t, p)) in targets.iter().zip(presence).enumerate() {
            if p.len() != c - 1 {
                return Err(Error::Shape(format!("presence {n} has {} flags, logits imply {}", p.len(), c - 1)));
            }
            if let Some(&bad) = t.as_slice().iter().find(|&&l| l > 0 && !p.is_present(l as usize - 1)) {
                return Err(Error::Supervision(format!("sample {n} labels class {bad} whose presence flag is false")));
            }
        }
    }
    Ok(())
}

/// log Σ exp over the channels selected by `keep`.
#[inline]
fn logsumexp<T: Scalar>(z: &[T], keep: impl Fn(usize) -> bool) -> T {
    let mut max = T::neg_infinity();
    for (j, &v) in z.iter().enumerate() {
        if keep(j) && v > max {
            max = v;
        }
    }
    let mut s = T::zero();
    for (j, &v) in z.iter().enumerate() {
        if keep(j) {
            s += (v - max).exp();
        }
    }
    max + s.ln()
}

/// Per-pixel loss; writes `∂loss/∂z` into `grad` when given.
#[inline]
fn pixel<T: Scalar>(kind: LossKind, z: &[T], target: usize, kept: &[bool], grad: Option<&mut [T]>) -> T {
    match kind {
        LossKind::Standard => {
            let lse = logsumexp(z, |_| true);
            if let Some(g) = grad {
                for (j, gj) in g.iter_mut().enumerate() {
                    *gj = (z[j] - lse).exp() - if j == target { T::one() } else { T::zero() };
                }
            }
            lse - z[target]
        }
        LossKind::Adaptive => {
            let lse = logsumexp(z, |j| kept[j]);
            if let Some(g) = grad {
                for (j, gj) in g.iter_mut().enumerate() {
                    *gj = if kept[j] {
                        (z[j] - lse).exp() - if j == target { T::one() } else { T::zero() }
                    } else {
                        T::zero()
                    };
                }
            }
            lse - z[target]
        }
        LossKind::Marginal => {
            let lse = logsumexp(z, |_| true);
            if target != 0 {
                if let Some(g) = grad {
                    for (j, gj) in g.iter_mut().enumerate() {
                        *gj = (z[j] - lse).exp() - if j == target { T::one() } else { T::zero() };
                    }
                }
                return lse - z[target];
            }
            // background merged with every missing class
            let merged = |j: usize| j == 0 || !kept[j];
            let lse_merged = logsumexp(z, merged);
            if let Some(g) = grad {
                for (j, gj) in g.iter_mut().enumerate() {
                    let p = (z[j] - lse).exp();
                    *gj = if merged(j) { p - (z[j] - lse_merged).exp() } else { p };
                }
            }
            lse - lse_merged
        }
    }
}

fn reduce<T: Scalar>(
    kind: LossKind,
    logits: &Tensor<T>,
    targets: &[LabelMap],
    presence: &[PresenceVector],
    mut grad: Option<&mut Tensor<T>>,
) -> Result<T> {
    check_inputs(kind, logits, targets, presence)?;
    let [b, c, h, w] = logits.shape();
    let hw = h * w;
    let count = T::from_usize(b * hw).unwrap();
    let inv = T::one() / count;
    let mut z = vec![T::zero(); c];
    let mut g = vec![T::zero(); c];
    let mut kept = vec![true; c];
    let mut total = T::zero();
    for n in 0..b {
        kept[0] = true;
        for j in 1..c {
            kept[j] = kind == LossKind::Standard || presence[n].is_present(j - 1);
        }
        let src = logits.item(n);
        let labels = targets[n].as_slice();
        let mut sample_total = T::zero();
        for i in 0..hw {
            for j in 0..c {
                z[j] = src[j * hw + i];
            }
            let t = labels[i] as usize;
            match grad.as_deref_mut() {
                Some(out) => {
                    sample_total += pixel(kind, &z, t, &kept, Some(&mut g));
                    let dst = out.item_mut(n);
                    for j in 0..c {
                        dst[j * hw + i] = g[j] * inv;
                    }
                }
                None => sample_total += pixel(kind, &z, t, &kept, None),
            }
        }
        total += sample_total;
    }
    Ok(total * inv)
}

/// Loss value only.
pub fn loss<T: Scalar>(kind: LossKind, logits: &Tensor<T>, targets: &[LabelMap], presence: &[PresenceVector]) -> Result<T> {
    reduce(kind, logits, targets, presence, None)
}

/// Loss value and its gradient with respect to the logits.
pub fn loss_and_grad<T: Scalar>(
    kind: LossKind,
    logits: &Tensor<T>,
    targets: &[LabelMap],
    presence: &[PresenceVector],
) -> Result<(T, Tensor<T>)> {
    let mut g = Tensor::zeros(logits.shape());
    let v = reduce(kind, logits, targets, presence, Some(&mut g))?;
    Ok((v, g))
}

/// Mean over pixels of `−log softmax(z)[target]`; presence is ignored.
pub fn standard_cce<T: Scalar>(logits: &Tensor<T>, targets: &[LabelMap], presence: &[PresenceVector]) -> Result<T> {
    loss(LossKind::Standard, logits, targets, presence)
}

/// Cross-entropy with the missing classes' channels removed before normalisation.
pub fn adaptive_cce<T: Scalar>(logits: &Tensor<T>, targets: &[LabelMap], presence: &[PresenceVector]) -> Result<T> {
    loss(LossKind::Adaptive, logits, targets, presence)
}

/// Cross-entropy with missing classes merged into background on background pixels.
pub fn marginal_cce<T: Scalar>(logits: &Tensor<T>, targets: &[LabelMap], presence: &[PresenceVector]) -> Result<T> {
    loss(LossKind::Marginal, logits, targets, presence)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Grid;

    fn one_pixel(z: &[f64]) -> Tensor<f64> {
        Tensor::from_vec([1, z.len(), 1, 1], z.to_vec()).unwrap()
    }

    fn target(t: u8) -> Vec<LabelMap> {
        vec![Grid::filled(1, 1, t)]
    }

    fn pres(flags: &[bool]) -> Vec<PresenceVector> {
        vec![PresenceVector::new(flags.to_vec())]
    }

    #[test]
    fn uniform_logits_give_ln_channels() {
        let logits = Tensor::<f64>::zeros([2, 4, 3, 3]);
        let targets = vec![Grid::filled(3, 3, 2u8), Grid::filled(3, 3, 0u8)];
        let p = vec![PresenceVector::all(3); 2];
        let v = standard_cce(&logits, &targets, &p).unwrap();
        assert!((v - 4f64.ln()).abs() < 1e-12);
        assert!((v - 1.3863).abs() < 1e-4);
    }

    #[test]
    fn confident_correct_prediction_near_zero() {
        let mut z = vec![0.0; 4];
        z[3] = 20.0;
        let v = standard_cce(&one_pixel(&z), &target(3), &pres(&[true; 3])).unwrap();
        assert!(v < 1e-8);
    }

    #[test]
    fn standard_hand_evaluated() {
        let z = [1.0f64, 2.0, 0.5, 0.0];
        let e = f64::exp;
        let expect = -(e(2.0) / (e(1.0) + e(2.0) + e(0.5) + e(0.0))).ln();
        let v = standard_cce(&one_pixel(&z), &target(1), &pres(&[true; 3])).unwrap();
        assert!((v - expect).abs() < 1e-12);
    }

    #[test]
    fn adaptive_renormalises_over_remaining_channels() {
        let v = adaptive_cce(&one_pixel(&[0.0, 0.0, 0.0]), &target(0), &pres(&[true, false])).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-12);
        let e = f64::exp;
        let v = adaptive_cce(&one_pixel(&[1.0, 2.0, 3.0]), &target(1), &pres(&[true, false])).unwrap();
        assert!((v + (e(2.0) / (e(1.0) + e(2.0))).ln()).abs() < 1e-12);
    }

    #[test]
    fn marginal_merges_missing_into_background() {
        let v = marginal_cce(&one_pixel(&[0.0, 0.0, 0.0]), &target(0), &pres(&[true, false])).unwrap();
        assert!((v + (2.0f64 / 3.0).ln()).abs() < 1e-12);
        let e = f64::exp;
        let v = marginal_cce(&one_pixel(&[1.0, 2.0, 3.0]), &target(0), &pres(&[true, false])).unwrap();
        let expect = -((e(1.0) + e(3.0)) / (e(1.0) + e(2.0) + e(3.0))).ln();
        assert!((v - expect).abs() < 1e-12);
    }

    #[test]
    fn missing_class_target_is_rejected() {
        for kind in [LossKind::Adaptive, LossKind::Marginal] {
            let err = loss(kind, &one_pixel(&[0.0, 0.0, 0.0]), &target(2), &pres(&[true, false])).unwrap_err();
            assert!(matches!(err, Error::Supervision(_)));
        }
        // the naive regime does not look at presence
        assert!(standard_cce(&one_pixel(&[0.0, 0.0, 0.0]), &target(2), &pres(&[true, false])).is_ok());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let logits = Tensor::<f64>::zeros([1, 3, 2, 2]);
        let err = standard_cce(&logits, &[Grid::filled(3, 2, 0u8)], &pres(&[true, true])).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
        let err = standard_cce(&logits, &[], &[]).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
        let err = adaptive_cce(&logits, &[Grid::filled(2, 2, 0u8)], &pres(&[true])).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn adaptive_gradient_vanishes_on_missing_channel() {
        let z = [0.3, -1.2, 0.8];
        let (_, g) = loss_and_grad(LossKind::Adaptive, &one_pixel(&z), &target(1), &pres(&[true, false])).unwrap();
        assert_eq!(g.as_slice()[2], 0.0);
    }

    #[test]
    fn kind_parses_and_names() {
        for k in LossKind::ALL {
            assert_eq!(k.name().parse::<LossKind>().unwrap(), k);
        }
        assert!("bce".parse::<LossKind>().is_err());
    }
}
