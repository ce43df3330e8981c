//! Deterministic training loop, grid search and the run manifest.
//!
//! Every source of randomness is keyed by the run seed plus (epoch, sample id), so a
//! manifest replays bit-for-bit on the same platform. Per presentation the pristine sample
//! is augmented first and label dropout is applied to the result.

use std::collections::HashSet;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dropout::{apply_label_dropout, DropoutConfig, DropoutDraw};
use crate::error::{Error, Result};
use crate::losses::{loss_and_grad, LossKind};
use crate::metrics::{evaluate_predictions, image_batch, Segmenter};
use crate::nn::unet::UPSAMPLING;
use crate::nn::{ModelParameters, UNet, UNetConfig};
use crate::optim::{poly_lr, NesterovSgd, MOMENTUM};
use crate::rng::{derive_seed, keyed_rng};
use crate::scalar::Scalar;
use crate::synth::augment::{augment, AugmentConfig};
use crate::types::{ensure_valid, ClassVocabulary, Image, SegmentationSample};

pub const TRANSFORM_ORDER: [&str; 2] = ["augment", "label_dropout"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub learning_rates: Vec<f64>,
    pub batch_sizes: Vec<usize>,
    /// Epoch budget per grid point; the run's own `epochs` when unset.
    pub epochs: Option<usize>,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { learning_rates: vec![0.1, 0.01, 0.001], batch_sizes: vec![8, 16], epochs: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub lr_decay_exponent: f64,
    pub batch_size: usize,
    pub loss: LossKind,
    pub dropout: Option<DropoutConfig>,
    pub augment: Option<AugmentConfig>,
    pub seed: u64,
    /// Architecture; its `seed` is replaced by the run seed when training starts.
    pub model: UNetConfig,
    pub grid: Option<GridConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            learning_rate: 0.01,
            lr_decay_exponent: 0.9,
            batch_size: 8,
            loss: LossKind::Standard,
            dropout: None,
            augment: None,
            seed: 0,
            model: UNetConfig::default(),
            grid: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, vocab: &ClassVocabulary) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning_rate {} must be positive", self.learning_rate)));
        }
        if !(self.lr_decay_exponent.is_finite() && self.lr_decay_exponent >= 0.0) {
            return Err(Error::Config("lr_decay_exponent must be non-negative".into()));
        }
        if let Some(d) = &self.dropout {
            d.validate(vocab.k())?;
        }
        if let Some(a) = &self.augment {
            a.validate()?;
        }
        if self.model.out_channels != vocab.num_channels() {
            return Err(Error::Config(format!(
                "model has {} output channels, vocabulary needs {}",
                self.model.out_channels,
                vocab.num_channels()
            )));
        }
        self.model.validate()?;
        if let Some(g) = &self.grid {
            if g.learning_rates.is_empty() || g.batch_sizes.is_empty() {
                return Err(Error::Config("grid must contain at least one point".into()));
            }
            if g.batch_sizes.contains(&0) || g.epochs == Some(0) {
                return Err(Error::Config("grid batch sizes and epochs must be at least 1".into()));
            }
            if g.learning_rates.iter().any(|lr| !(lr.is_finite() && *lr > 0.0)) {
                return Err(Error::Config("grid learning rates must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub learning_rate: f64,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub point: GridPoint,
    pub epochs: usize,
    /// `None` when the run diverged.
    pub best_val_dice: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetFingerprint {
    pub role: String,
    pub count: usize,
    /// SHA-256 over the sorted per-sample image hashes.
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: TrainConfig,
    pub datasets: Vec<DatasetFingerprint>,
    /// No image appears in more than one dataset.
    pub disjoint: bool,
    pub grid_point: GridPoint,
    pub grid_results: Vec<GridResult>,
    pub learning_rates: Vec<f64>,
    pub train_loss: Vec<f64>,
    pub val_dice: Vec<f64>,
    /// 0-based; `None` only in diagnostic manifests of runs that never finished an epoch.
    pub best_epoch: Option<usize>,
    pub best_val_dice: Option<f64>,
    pub momentum: f64,
    pub upsampling: String,
    pub transform_order: Vec<String>,
    pub scalar: String,
    pub wall_clock_seconds: f64,
    pub version: String,
}

impl RunManifest {
    /// The manifest with the wall-clock time zeroed, for replay comparisons.
    pub fn without_timing(&self) -> Self {
        Self { wall_clock_seconds: 0.0, ..self.clone() }
    }

    /// Add a dataset (typically the test set) and recompute disjointness.
    pub fn record_dataset(&mut self, role: &str, samples: &[SegmentationSample], all: &[&[SegmentationSample]]) {
        self.datasets.push(fingerprint_dataset(role, samples));
        self.disjoint = datasets_disjoint(all);
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn image_hash(img: &Image) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update((img.height() as u64).to_le_bytes());
    h.update((img.width() as u64).to_le_bytes());
    for v in img.as_slice() {
        h.update(v.to_le_bytes());
    }
    h.finalize().into()
}

/// Content hash of one sample: id, image, labels and presence.
pub fn fingerprint_sample(s: &SegmentationSample) -> String {
    let mut h = Sha256::new();
    for part in [s.sample_id.as_bytes(), s.domain_id.as_bytes()] {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part);
    }
    h.update(image_hash(&s.image));
    h.update(s.labels.as_slice());
    h.update(s.presence.flags().iter().map(|&b| b as u8).collect::<Vec<_>>());
    hex(&h.finalize())
}

pub fn fingerprint_dataset(role: &str, samples: &[SegmentationSample]) -> DatasetFingerprint {
    let mut hashes: Vec<String> = samples.iter().map(fingerprint_sample).collect();
    hashes.sort();
    let mut h = Sha256::new();
    for s in &hashes {
        h.update(s.as_bytes());
    }
    DatasetFingerprint { role: role.into(), count: samples.len(), sha256: hex(&h.finalize()) }
}

/// True when no image (by pixel content) occurs in two of the given datasets.
pub fn datasets_disjoint(sets: &[&[SegmentationSample]]) -> bool {
    let mut seen: HashSet<[u8; 32]> = HashSet::new();
    for set in sets {
        let own: HashSet<[u8; 32]> = set.iter().map(|s| image_hash(&s.image)).collect();
        if own.iter().any(|h| seen.contains(h)) {
            return false;
        }
        seen.extend(own);
    }
    true
}

/// The sample actually presented to the network at `epoch`.
pub fn presentation(sample: &SegmentationSample, cfg: &TrainConfig, epoch: usize) -> SegmentationSample {
    let augmented = match &cfg.augment {
        Some(a) => augment(sample, a, derive_seed(cfg.seed, &["augment".into(), epoch.into(), sample.sample_id.as_str().into()])),
        None => sample.clone(),
    };
    match &cfg.dropout {
        Some(d) => apply_label_dropout(&augmented, d, DropoutDraw::keyed(cfg.seed, epoch, &sample.sample_id)),
        None => augmented,
    }
}

/// Mean foreground Dice over the annotated classes of each validation sample.
pub fn validation_dice(model: &dyn Segmenter, val: &[SegmentationSample], vocab: &ClassVocabulary) -> Result<f64> {
    let images: Vec<&Image> = val.iter().map(|s| &s.image).collect();
    let preds = model.segment(&images)?;
    let report = evaluate_predictions(&preds, val, vocab)?;
    Ok(report.overall_foreground_mean())
}

fn check_data(cfg: &TrainConfig, train: &[SegmentationSample], val: &[SegmentationSample], vocab: &ClassVocabulary) -> Result<()> {
    if train.is_empty() {
        return Err(Error::Empty("training set".into()));
    }
    if val.is_empty() {
        return Err(Error::Empty("validation set".into()));
    }
    for s in train.iter().chain(val) {
        ensure_valid(s, vocab)?;
        if s.image.dims() != (cfg.model.image_size, cfg.model.image_size) {
            return Err(Error::Shape(format!(
                "sample {} is {:?}, model expects {}×{}",
                s.sample_id,
                s.image.dims(),
                cfg.model.image_size,
                cfg.model.image_size
            )));
        }
    }
    if !val.iter().any(|s| s.presence.any_present()) {
        return Err(Error::Empty("validation set annotates no foreground class".into()));
    }
    Ok(())
}

/// Train one model at the configured learning rate and batch size, ignoring `grid`.
pub fn train<T: Scalar>(
    cfg: &TrainConfig,
    train_set: &[SegmentationSample],
    val_set: &[SegmentationSample],
    vocab: &ClassVocabulary,
) -> Result<(ModelParameters<T>, RunManifest)> {
    cfg.validate(vocab)?;
    check_data(cfg, train_set, val_set, vocab)?;
    let started = Instant::now();
    let mut resolved = cfg.clone();
    resolved.model.seed = cfg.seed;
    let mut model = UNet::<T>::new(resolved.model.clone())?;
    let mut opt = NesterovSgd::<T>::new(model.params.len(), MOMENTUM);

    let mut manifest = RunManifest {
        config: resolved.clone(),
        datasets: vec![fingerprint_dataset("train", train_set), fingerprint_dataset("val", val_set)],
        disjoint: datasets_disjoint(&[train_set, val_set]),
        grid_point: GridPoint { learning_rate: cfg.learning_rate, batch_size: cfg.batch_size },
        grid_results: Vec::new(),
        learning_rates: Vec::new(),
        train_loss: Vec::new(),
        val_dice: Vec::new(),
        best_epoch: None,
        best_val_dice: None,
        momentum: MOMENTUM,
        upsampling: UPSAMPLING.into(),
        transform_order: TRANSFORM_ORDER.iter().map(|s| s.to_string()).collect(),
        scalar: std::any::type_name::<T>().into(),
        wall_clock_seconds: 0.0,
        version: env!("CARGO_PKG_VERSION").into(),
    };
    if !manifest.disjoint {
        return Err(Error::Config("training and validation sets share images".into()));
    }

    let diverged = |manifest: &mut RunManifest, epoch: usize, reason: String| {
        manifest.wall_clock_seconds = started.elapsed().as_secs_f64();
        Error::Divergence { epoch, reason, manifest: Some(Box::new(manifest.clone())) }
    };

    let mut best: Option<ModelParameters<T>> = None;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..cfg.epochs {
        let lr = poly_lr(cfg.learning_rate, epoch, cfg.epochs, cfg.lr_decay_exponent);
        manifest.learning_rates.push(lr);
        order.sort_unstable();
        order.shuffle(&mut keyed_rng(cfg.seed, &["shuffle".into(), epoch.into()]));

        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let shown: Vec<SegmentationSample> = batch.iter().map(|&i| presentation(&train_set[i], cfg, epoch)).collect();
            let images: Vec<&Image> = shown.iter().map(|s| &s.image).collect();
            let targets: Vec<_> = shown.iter().map(|s| s.labels.clone()).collect();
            let presence: Vec<_> = shown.iter().map(|s| s.presence.clone()).collect();
            let (logits, cache) = model.forward_train(&image_batch::<T>(&images)?)?;
            let (value, dlogits) = loss_and_grad(cfg.loss, &logits, &targets, &presence)?;
            let value = value.to_f64_lossy();
            if !value.is_finite() {
                return Err(diverged(&mut manifest, epoch, format!("non-finite loss {value}")));
            }
            loss_sum += value * batch.len() as f64;
            let grad = model.backward(&cache, &dlogits);
            opt.step(&mut model.params.values, &grad, lr);
            model.update_running_stats(&cache);
        }
        if !model.params.is_finite() {
            return Err(diverged(&mut manifest, epoch, "non-finite parameters".into()));
        }
        manifest.train_loss.push(loss_sum / train_set.len() as f64);

        let dice = validation_dice(&model, val_set, vocab)?;
        manifest.val_dice.push(dice);
        if manifest.best_val_dice.is_none_or(|b| dice > b) {
            manifest.best_val_dice = Some(dice);
            manifest.best_epoch = Some(epoch);
            best = Some(model.params.clone());
        }
    }
    manifest.wall_clock_seconds = started.elapsed().as_secs_f64();
    Ok((best.expect("at least one epoch"), manifest))
}

fn grid_points(g: &GridConfig) -> Vec<GridPoint> {
    let mut lrs = g.learning_rates.clone();
    lrs.sort_by(f64::total_cmp);
    lrs.dedup();
    let mut bss = g.batch_sizes.clone();
    bss.sort_unstable();
    bss.dedup();
    lrs.iter().flat_map(|&lr| bss.iter().map(move |&bs| GridPoint { learning_rate: lr, batch_size: bs })).collect()
}

/// Outcome of a grid search, with the winning run kept when its budget was the full one.
pub struct GridOutcome<T> {
    pub best: TrainConfig,
    pub results: Vec<GridResult>,
    reusable: Option<(ModelParameters<T>, RunManifest)>,
}

/// One run per grid point; highest best-validation Dice wins, ties going to the lower
/// learning rate and then the smaller batch. Diverged points are skipped.
pub fn grid_search<T: Scalar>(
    cfg: &TrainConfig,
    train_set: &[SegmentationSample],
    val_set: &[SegmentationSample],
    vocab: &ClassVocabulary,
) -> Result<GridOutcome<T>> {
    let grid = cfg.grid.clone().unwrap_or_default();
    let epochs = grid.epochs.unwrap_or(cfg.epochs);
    let mut results = Vec::new();
    let mut best: Option<(f64, GridPoint, Option<(ModelParameters<T>, RunManifest)>)> = None;
    for point in grid_points(&grid) {
        let point_cfg = TrainConfig {
            learning_rate: point.learning_rate,
            batch_size: point.batch_size,
            epochs,
            grid: None,
            ..cfg.clone()
        };
        match train::<T>(&point_cfg, train_set, val_set, vocab) {
            Ok((params, manifest)) => {
                let score = manifest.best_val_dice.expect("finished run has a best epoch");
                results.push(GridResult { point, epochs, best_val_dice: Some(score) });
                // points are visited in ascending (lr, batch) order, so strict improvement keeps the tie-break
                if best.as_ref().is_none_or(|(b, _, _)| score > *b) {
                    let keep = (epochs == cfg.epochs).then_some((params, manifest));
                    best = Some((score, point, keep));
                }
            }
            Err(Error::Divergence { .. }) => results.push(GridResult { point, epochs, best_val_dice: None }),
            Err(e) => return Err(e),
        }
    }
    let (_, point, reusable) = best.ok_or_else(|| Error::Divergence {
        epoch: 0,
        reason: "every grid point diverged".into(),
        manifest: None,
    })?;
    let best = TrainConfig { learning_rate: point.learning_rate, batch_size: point.batch_size, ..cfg.clone() };
    Ok(GridOutcome { best, results, reusable })
}

/// Train with grid search when `cfg.grid` is set, otherwise a single run.
pub fn train_with_grid<T: Scalar>(
    cfg: &TrainConfig,
    train_set: &[SegmentationSample],
    val_set: &[SegmentationSample],
    vocab: &ClassVocabulary,
) -> Result<(ModelParameters<T>, RunManifest)> {
    if cfg.grid.is_none() {
        return train(cfg, train_set, val_set, vocab);
    }
    cfg.validate(vocab)?;
    let started = Instant::now();
    let outcome = grid_search::<T>(cfg, train_set, val_set, vocab)?;
    let (params, mut manifest) = match outcome.reusable {
        Some(run) => run,
        None => train(&TrainConfig { grid: None, ..outcome.best.clone() }, train_set, val_set, vocab)?,
    };
    manifest.config.grid = cfg.grid.clone();
    manifest.grid_results = outcome.results;
    manifest.wall_clock_seconds = started.elapsed().as_secs_f64();
    Ok((params, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_full_dataset, DomainSpec};

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 3,
            learning_rate: 0.05,
            batch_size: 4,
            model: UNetConfig { depth: 2, base_channels: 4, image_size: 32, ..UNetConfig::default() },
            seed: 11,
            ..TrainConfig::default()
        }
    }

    fn data(n: usize, seed: u64) -> Vec<SegmentationSample> {
        generate_full_dataset(&DomainSpec::preset("camus_like", 32).unwrap(), n, seed).unwrap()
    }

    #[test]
    fn deterministic_replay() {
        let (train_set, val) = (data(10, 1), data(4, 2));
        let vocab = ClassVocabulary::default();
        let mut cfg = small_cfg();
        cfg.augment = Some(AugmentConfig::default());
        cfg.dropout = Some(DropoutConfig::new(0.5, [1, 2]));
        let (p1, m1) = train::<f32>(&cfg, &train_set, &val, &vocab).unwrap();
        let (p2, m2) = train::<f32>(&cfg, &train_set, &val, &vocab).unwrap();
        assert_eq!(p1.values, p2.values);
        assert_eq!(m1.without_timing(), m2.without_timing());
        assert_eq!(m1.val_dice.len(), 3);
        let best = m1.best_epoch.unwrap();
        assert_eq!(m1.best_val_dice, Some(m1.val_dice.iter().copied().fold(f64::MIN, f64::max)));
        assert_eq!(m1.val_dice[best], m1.best_val_dice.unwrap());
        assert!(m1.disjoint);
    }

    #[test]
    fn adaptive_equals_standard_on_full_labels() {
        let (train_set, val) = (data(8, 3), data(3, 4));
        let vocab = ClassVocabulary::default();
        let mut cfg = small_cfg();
        cfg.dropout = Some(DropoutConfig::new(0.0, [1]));
        let (ps, ms) = train::<f32>(&cfg, &train_set, &val, &vocab).unwrap();
        cfg.loss = LossKind::Adaptive;
        let (pa, ma) = train::<f32>(&cfg, &train_set, &val, &vocab).unwrap();
        assert_eq!(ps.values, pa.values);
        assert_eq!(ms.train_loss, ma.train_loss);
        assert_eq!(ms.val_dice, ma.val_dice);
    }

    #[test]
    fn overlap_between_train_and_val_is_rejected() {
        let train_set = data(6, 5);
        let vocab = ClassVocabulary::default();
        assert!(matches!(train::<f32>(&small_cfg(), &train_set, &train_set[..2], &vocab), Err(Error::Config(_))));
    }

    #[test]
    fn divergent_grid_point_is_never_selected() {
        let (train_set, val) = (data(8, 6), data(3, 7));
        let vocab = ClassVocabulary::default();
        let mut cfg = small_cfg();
        cfg.epochs = 2;
        cfg.grid = Some(GridConfig { learning_rates: vec![1000.0, 0.05], batch_sizes: vec![4], epochs: None });
        let out = grid_search::<f32>(&cfg, &train_set, &val, &vocab).unwrap();
        assert_eq!(out.best.learning_rate, 0.05);
        let bad = out.results.iter().find(|r| r.point.learning_rate == 1000.0).unwrap();
        assert_eq!(bad.best_val_dice, None);

        let direct = train::<f32>(&TrainConfig { learning_rate: 1000.0, grid: None, ..cfg.clone() }, &train_set, &val, &vocab);
        match direct {
            Err(Error::Divergence { manifest: Some(m), .. }) => assert!(m.best_epoch.is_none() || !m.train_loss.is_empty()),
            other => panic!("expected divergence, got {:?}", other.map(|r| r.1.best_val_dice)),
        }

        cfg.grid = Some(GridConfig { learning_rates: vec![1000.0], batch_sizes: vec![4], epochs: None });
        assert!(matches!(grid_search::<f32>(&cfg, &train_set, &val, &vocab), Err(Error::Divergence { .. })));
    }

    #[test]
    fn single_point_grid_reuses_its_run() {
        let (train_set, val) = (data(8, 8), data(3, 9));
        let vocab = ClassVocabulary::default();
        let mut cfg = small_cfg();
        cfg.epochs = 2;
        let (plain, mp) = train::<f32>(&cfg, &train_set, &val, &vocab).unwrap();
        cfg.grid = Some(GridConfig { learning_rates: vec![cfg.learning_rate], batch_sizes: vec![cfg.batch_size], epochs: None });
        let (gridded, mg) = train_with_grid::<f32>(&cfg, &train_set, &val, &vocab).unwrap();
        assert_eq!(plain.values, gridded.values);
        assert_eq!(mp.val_dice, mg.val_dice);
        assert_eq!(mg.grid_results.len(), 1);
    }

    #[test]
    fn overfits_one_batch() {
        let batch = data(4, 10);
        let vocab = ClassVocabulary::default();
        let cfg = TrainConfig {
            epochs: 200,
            learning_rate: 0.1,
            lr_decay_exponent: 0.0,
            batch_size: 4,
            model: UNetConfig { depth: 2, base_channels: 8, image_size: 32, ..UNetConfig::default() },
            seed: 3,
            ..TrainConfig::default()
        };
        // the validation copy needs distinct pixels for the disjointness check
        let val: Vec<SegmentationSample> = batch.clone();
        let mut train_copy = batch.clone();
        for s in &mut train_copy {
            s.image.as_mut_slice()[0] += 1e-6;
        }
        let (_, m) = train::<f32>(&cfg, &train_copy, &val, &vocab).unwrap();
        assert!(m.best_val_dice.unwrap() > 0.95, "best val dice {:?}", m.best_val_dice);
    }
}
