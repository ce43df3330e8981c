//! Dice scores, per-domain evaluation reports and paired significance testing.

pub mod dice;
pub mod wilcoxon;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Tensor, UNet};
use crate::scalar::Scalar;
use crate::types::{ClassVocabulary, Image, LabelMap, SegmentationSample};

pub use dice::{class_dice, dice, soft_dice};
pub use wilcoxon::{wilcoxon_signed_rank, wilcoxon_signed_rank_with, WilcoxonMethod, WilcoxonResult};

/// Anything that maps images to hard label maps.
pub trait Segmenter {
    fn segment(&self, images: &[&Image]) -> Result<Vec<LabelMap>>;
}

/// Stack single-channel images into an `N×1×H×W` tensor.
pub fn image_batch<T: Scalar>(images: &[&Image]) -> Result<Tensor<T>> {
    let first = images.first().ok_or_else(|| Error::Empty("image batch".into()))?;
    let (h, w) = first.dims();
    let mut data = Vec::with_capacity(images.len() * h * w);
    for img in images {
        if img.dims() != (h, w) {
            return Err(Error::Shape(format!("batch mixes {:?} and {:?} images", (h, w), img.dims())));
        }
        data.extend(img.as_slice().iter().map(|&v| T::from_f32(v).unwrap()));
    }
    Tensor::from_vec([images.len(), 1, h, w], data)
}

/// Per-pixel argmax over channels.
pub fn argmax_labels<T: Scalar>(logits: &Tensor<T>) -> Vec<LabelMap> {
    let [n, c, h, w] = logits.shape();
    let hw = h * w;
    (0..n)
        .map(|i| {
            let z = logits.item(i);
            let data = (0..hw)
                .map(|p| {
                    let mut best = 0;
                    for ch in 1..c {
                        if z[ch * hw + p] > z[best * hw + p] {
                            best = ch;
                        }
                    }
                    best as u8
                })
                .collect();
            LabelMap::from_vec(h, w, data).expect("sized from logits")
        })
        .collect()
}

const PREDICT_BATCH: usize = 16;

impl<T: Scalar> Segmenter for UNet<T> {
    fn segment(&self, images: &[&Image]) -> Result<Vec<LabelMap>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(PREDICT_BATCH) {
            out.extend(argmax_labels(&self.forward(&image_batch::<T>(chunk)?)?));
        }
        Ok(out)
    }
}

/// Dice of one foreground class on one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleDice {
    pub domain_id: String,
    pub sample_id: String,
    /// Foreground index, 0-based.
    pub class: usize,
    pub dice: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSummary {
    pub domain_id: String,
    pub class_name: String,
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSummary {
    pub domain_id: String,
    /// Mean over samples of each sample's mean over its annotated foreground classes.
    pub mean_foreground_dice: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub class_names: Vec<String>,
    pub per_class: Vec<ClassSummary>,
    pub per_domain: Vec<DomainSummary>,
    pub samples: Vec<SampleDice>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Build a report from hard predictions; classes absent from a sample's ground truth are skipped.
pub fn evaluate_predictions(
    predictions: &[LabelMap],
    test_set: &[SegmentationSample],
    vocab: &ClassVocabulary,
) -> Result<MetricsReport> {
    if test_set.is_empty() {
        return Err(Error::Empty("test set".into()));
    }
    if predictions.len() != test_set.len() {
        return Err(Error::Shape(format!("{} predictions for {} samples", predictions.len(), test_set.len())));
    }
    let mut samples = Vec::new();
    let mut fg_by_domain: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for (pred, s) in predictions.iter().zip(test_set) {
        let mut sample_scores = Vec::new();
        for c in 0..vocab.k() {
            if !s.presence.is_present(c) {
                continue;
            }
            let d = class_dice(pred, &s.labels, (c + 1) as u8)?;
            sample_scores.push(d);
            samples.push(SampleDice { domain_id: s.domain_id.clone(), sample_id: s.sample_id.clone(), class: c, dice: d });
        }
        if !sample_scores.is_empty() {
            let m = sample_scores.iter().sum::<f64>() / sample_scores.len() as f64;
            fg_by_domain.entry(&s.domain_id).or_default().push(m);
        }
    }
    let mut per_class = Vec::new();
    let domains: Vec<&str> = {
        let mut d: Vec<&str> = test_set.iter().map(|s| s.domain_id.as_str()).collect();
        d.sort();
        d.dedup();
        d
    };
    for dom in &domains {
        for (c, name) in vocab.names().iter().enumerate() {
            let vals: Vec<f64> = samples.iter().filter(|e| e.domain_id == *dom && e.class == c).map(|e| e.dice).collect();
            if vals.is_empty() {
                continue;
            }
            let (mean, std) = mean_std(&vals);
            per_class.push(ClassSummary { domain_id: dom.to_string(), class_name: name.clone(), mean, std, count: vals.len() });
        }
    }
    let per_domain = fg_by_domain
        .into_iter()
        .map(|(d, v)| DomainSummary { domain_id: d.to_string(), mean_foreground_dice: mean_std(&v).0, samples: v.len() })
        .collect();
    Ok(MetricsReport { class_names: vocab.names().to_vec(), per_class, per_domain, samples })
}

/// Segment every test image with `model` and score it.
pub fn evaluate(model: &dyn Segmenter, test_set: &[SegmentationSample], vocab: &ClassVocabulary) -> Result<MetricsReport> {
    if test_set.is_empty() {
        return Err(Error::Empty("test set".into()));
    }
    let images: Vec<&Image> = test_set.iter().map(|s| &s.image).collect();
    let preds = model.segment(&images)?;
    evaluate_predictions(&preds, test_set, vocab)
}

impl MetricsReport {
    pub fn class_mean(&self, domain: &str, class_name: &str) -> Option<f64> {
        self.per_class.iter().find(|c| c.domain_id == domain && c.class_name == class_name).map(|c| c.mean)
    }

    pub fn foreground_mean(&self, domain: &str) -> Option<f64> {
        self.per_domain.iter().find(|d| d.domain_id == domain).map(|d| d.mean_foreground_dice)
    }

    /// Mean foreground Dice pooled over every sample of every domain.
    pub fn overall_foreground_mean(&self) -> f64 {
        let total: usize = self.per_domain.iter().map(|d| d.samples).sum();
        self.per_domain.iter().map(|d| d.mean_foreground_dice * d.samples as f64).sum::<f64>() / total as f64
    }

    /// Sample-level Dice of one class, in test-set order.
    pub fn sample_scores(&self, domain: &str, class: usize) -> Vec<f64> {
        self.samples.iter().filter(|s| s.domain_id == domain && s.class == class).map(|s| s.dice).collect()
    }

    /// Per-sample mean foreground Dice for one domain, in test-set order.
    pub fn sample_foreground(&self, domain: &str) -> Vec<f64> {
        let mut out: Vec<(String, Vec<f64>)> = Vec::new();
        for s in self.samples.iter().filter(|s| s.domain_id == domain) {
            match out.last_mut() {
                Some((id, v)) if *id == s.sample_id => v.push(s.dice),
                _ => out.push((s.sample_id.clone(), vec![s.dice])),
            }
        }
        out.into_iter().map(|(_, v)| v.iter().sum::<f64>() / v.len() as f64).collect()
    }

    /// One row per sample × class.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("domain_id,sample_id,class,dice\n");
        for e in &self.samples {
            writeln!(s, "{},{},{},{:.17e}", e.domain_id, e.sample_id, self.class_names[e.class], e.dice).unwrap();
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// `D×D` matrix of mean LV Dice: row = training domain, column = test domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossDomainMatrix {
    pub domains: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl CrossDomainMatrix {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("train\\test");
        for d in &self.domains {
            write!(s, ",{d}").unwrap();
        }
        s.push('\n');
        for (d, row) in self.domains.iter().zip(&self.values) {
            s.push_str(d);
            for v in row {
                write!(s, ",{v:.6}").unwrap();
            }
            s.push('\n');
        }
        s
    }

    pub fn diagonal_margin(&self) -> f64 {
        let d = self.domains.len();
        if d < 2 {
            return 0.0;
        }
        let diag = (0..d).map(|i| self.values[i][i]).sum::<f64>() / d as f64;
        let off = (0..d).flat_map(|i| (0..d).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| self.values[i][j]).sum::<f64>()
            / (d * (d - 1)) as f64;
        diag - off
    }
}

/// Evaluate each per-domain model on each domain's test set, recording LV (class 0) Dice.
pub fn cross_domain_matrix(
    models: &[(String, &dyn Segmenter)],
    test_sets: &[(String, Vec<SegmentationSample>)],
    vocab: &ClassVocabulary,
) -> Result<CrossDomainMatrix> {
    if models.is_empty() {
        return Err(Error::Empty("cross-domain models".into()));
    }
    let domains: Vec<String> = models.iter().map(|(d, _)| d.clone()).collect();
    let mut values = Vec::new();
    for (_, model) in models {
        let mut row = Vec::new();
        for d in &domains {
            let (_, test) = test_sets
                .iter()
                .find(|(name, _)| name == d)
                .ok_or_else(|| Error::Config(format!("no test set for domain {d}")))?;
            let report = evaluate(*model, test, vocab)?;
            let lv = report.sample_scores(d, 0);
            if lv.is_empty() {
                return Err(Error::Empty(format!("no LV ground truth in domain {d}")));
            }
            row.push(lv.iter().sum::<f64>() / lv.len() as f64);
        }
        values.push(row);
    }
    if test_sets.len() != domains.len() {
        return Err(Error::Config(format!("{} models but {} test sets", domains.len(), test_sets.len())));
    }
    Ok(CrossDomainMatrix { domains, values })
}
