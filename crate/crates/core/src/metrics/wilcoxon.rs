//! Two-sided Wilcoxon signed-rank test for paired samples.
//!
//! Zero differences are discarded and tied magnitudes share their average rank. For
//! `n ≤ 25` the p-value is exact: the null distribution of the positive rank sum is
//! enumerated by dynamic programming over doubled (hence integral) ranks, which handles
//! ties exactly. Above that a normal approximation with continuity and tie correction is used.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

pub const EXACT_MAX_N: usize = 25;
pub const MIN_PAIRS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WilcoxonMethod {
    Auto,
    Exact,
    Normal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Signed-rank sum `W+ − W−`.
    pub statistic: f64,
    pub w_plus: f64,
    pub w_minus: f64,
    /// Pairs left after dropping zero differences.
    pub n: usize,
    pub p_value: f64,
    pub exact: bool,
}

/// Average ranks (1-based) of `values`, ties sharing the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Non-zero differences `a − b` with their signed ranks.
fn signed_ranks(a: &[f64], b: &[f64]) -> Result<(Vec<f64>, Vec<bool>)> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("paired samples of length {} and {}", a.len(), b.len())));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    if diffs.len() < MIN_PAIRS {
        return Err(Error::InsufficientPairs(format!(
            "{} non-zero differences, need at least {MIN_PAIRS}",
            diffs.len()
        )));
    }
    let mags: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    Ok((average_ranks(&mags), diffs.iter().map(|&d| d > 0.0).collect()))
}

/// Exact two-sided p-value of the observed positive rank sum given the (possibly tied) ranks.
pub fn exact_p_value(ranks: &[f64], w_plus: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let total: usize = doubled.iter().sum();
    // counts[s] = number of sign assignments whose doubled positive rank sum is s
    let mut counts = vec![0u64; total + 1];
    counts[0] = 1;
    let mut reach = 0;
    for &r in &doubled {
        for s in (0..=reach).rev() {
            if counts[s] != 0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    let observed = (2.0 * w_plus).round() as usize;
    let lower: u64 = counts[..=observed].iter().sum();
    let upper: u64 = counts[observed..].iter().sum();
    let tail = lower.min(upper);
    let all = 2f64.powi(ranks.len() as i32);
    ((2 * tail) as f64 / all).min(1.0)
}

/// Normal approximation with continuity and tie correction.
pub fn normal_p_value(ranks: &[f64], w_plus: f64) -> f64 {
    let n = ranks.len() as f64;
    let mean = n * (n + 1.0) / 4.0;
    let mut var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0;
    let mut sorted = ranks.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut i = 0;
    while i < sorted.len() {
        let j = sorted[i..].iter().take_while(|&&r| r == sorted[i]).count();
        let t = j as f64;
        var -= (t * t * t - t) / 48.0;
        i += j;
    }
    if var <= 0.0 {
        return 1.0;
    }
    let z = ((w_plus - mean).abs() - 0.5).max(0.0) / var.sqrt();
    let phi = Normal::new(0.0, 1.0).expect("standard normal").cdf(z);
    (2.0 * (1.0 - phi)).clamp(f64::MIN_POSITIVE, 1.0)
}

pub fn wilcoxon_signed_rank_with(a: &[f64], b: &[f64], method: WilcoxonMethod) -> Result<WilcoxonResult> {
    let (ranks, positive) = signed_ranks(a, b)?;
    let w_plus: f64 = ranks.iter().zip(&positive).filter(|(_, &p)| p).map(|(r, _)| r).sum();
    let w_minus: f64 = ranks.iter().zip(&positive).filter(|(_, &p)| !p).map(|(r, _)| r).sum();
    let exact = match method {
        WilcoxonMethod::Auto => ranks.len() <= EXACT_MAX_N,
        WilcoxonMethod::Exact => true,
        WilcoxonMethod::Normal => false,
    };
    let p_value = if exact { exact_p_value(&ranks, w_plus) } else { normal_p_value(&ranks, w_plus) };
    Ok(WilcoxonResult { statistic: w_plus - w_minus, w_plus, w_minus, n: ranks.len(), p_value, exact })
}

/// Exact for up to 25 non-zero pairs, normal approximation above.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult> {
    wilcoxon_signed_rank_with(a, b, WilcoxonMethod::Auto)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[5.0, 7.0, 5.0, 1.0]), vec![2.5, 4.0, 2.5, 1.0]);
    }

    #[test]
    fn identical_samples_have_no_pairs() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0];
        assert!(matches!(wilcoxon_signed_rank(&a, &a), Err(Error::InsufficientPairs(_))));
        assert!(wilcoxon_signed_rank(&a, &a[..6]).is_err());
    }

    #[test]
    fn constant_shift_is_significant() {
        let b: Vec<f64> = (0..10).map(|i| i as f64 * 0.1).collect();
        let a: Vec<f64> = b.iter().map(|v| v + 0.05).collect();
        let r = wilcoxon_signed_rank(&a, &b).unwrap();
        assert!(r.exact);
        assert_eq!(r.w_plus, 55.0);
        // all 10 signs positive: 2 / 2^10
        assert_eq!(r.p_value, 2.0 / 1024.0);
        assert!(r.p_value < 0.01);
    }

    #[test]
    fn large_n_uses_normal_branch() {
        let b: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let a: Vec<f64> = b.iter().enumerate().map(|(i, v)| v + (i as f64 * 1.3).cos() * 0.2 + 0.05).collect();
        let r = wilcoxon_signed_rank(&a, &b).unwrap();
        assert!(!r.exact);
        assert!(r.p_value > 0.0 && r.p_value <= 1.0);
    }

    /// Brute-force two-sided p over all 2^n sign assignments of `ranks`.
    fn enumerate_p(ranks: &[f64], w_plus: f64) -> f64 {
        let n = ranks.len();
        let (mut le, mut ge) = (0u64, 0u64);
        for mask in 0u64..(1 << n) {
            let s: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
            if s <= w_plus + 1e-9 {
                le += 1;
            }
            if s >= w_plus - 1e-9 {
                ge += 1;
            }
        }
        (2.0 * le.min(ge) as f64 / (1u64 << n) as f64).min(1.0)
    }

    #[test]
    fn textbook_pairs() {
        let a = [125.0, 115.0, 130.0, 140.0, 140.0, 115.0, 140.0, 125.0, 140.0, 135.0];
        let b = [110.0, 122.0, 125.0, 120.0, 140.0, 124.0, 123.0, 137.0, 135.0, 145.0];
        let r = wilcoxon_signed_rank(&a, &b).unwrap();
        assert_eq!(r.n, 9);
        assert_eq!(r.statistic, 9.0);
        assert_eq!((r.w_plus, r.w_minus), (27.0, 18.0));
        let diffs: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
        let ranks = average_ranks(&diffs.iter().map(|d| d.abs()).collect::<Vec<_>>());
        let oracle = enumerate_p(&ranks, r.w_plus);
        assert_eq!(r.p_value, oracle);
        assert!((r.p_value - 0.6328125).abs() < 1e-12);
    }

    proptest::proptest! {
        #[test]
        fn exact_matches_enumeration(diffs in proptest::collection::vec((1u8..20, proptest::bool::ANY), 6..=12)) {
            let a: Vec<f64> = diffs.iter().map(|&(m, s)| if s { m as f64 } else { -(m as f64) }).collect();
            let b = vec![0.0; a.len()];
            let r = wilcoxon_signed_rank(&a, &b).unwrap();
            let ranks = average_ranks(&a.iter().map(|d| d.abs()).collect::<Vec<_>>());
            proptest::prop_assert_eq!(r.p_value, enumerate_p(&ranks, r.w_plus));
            proptest::prop_assert!(r.p_value > 0.0 && r.p_value <= 1.0);
        }

        #[test]
        fn branches_agree_at_25(xs in proptest::collection::vec(-1.0f64..1.0, 25)) {
            let b = vec![0.0; 25];
            proptest::prop_assume!(xs.iter().all(|x| *x != 0.0));
            let e = wilcoxon_signed_rank_with(&xs, &b, WilcoxonMethod::Exact).unwrap();
            let n = wilcoxon_signed_rank_with(&xs, &b, WilcoxonMethod::Normal).unwrap();
            proptest::prop_assert!((e.p_value - n.p_value).abs() < 0.02, "{} vs {}", e.p_value, n.p_value);
        }
    }
}
