//! Configuration-driven reproduction of the four experiments and the final comparison.
//!
//! Each run is written to `<out>/<experiment>/<run>-<seed>/` with `manifest.json`,
//! `checkpoint.ldck`, `metrics.csv`, `metrics.json` and `plots/curves.svg`. Reported
//! metrics are always computed from the checkpoint reloaded from disk. Test sets are
//! fully labelled; training and validation sets carry only each domain's own labels.

pub mod plots;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dropout::{partially_labelled_classes, DropoutConfig};
use crate::error::{Error, Result};
use crate::losses::LossKind;
use crate::metrics::{evaluate, wilcoxon_signed_rank, CrossDomainMatrix, MetricsReport, Segmenter, WilcoxonResult};
use crate::nn::{Checkpoint, UNet};
use crate::rng::derive_seed;
use crate::synth::augment::AugmentConfig;
use crate::synth::{apply_label_removal, generate_full_dataset, restrict_to_domain_labels, split_dataset, DomainSpec, SplitSpec};
use crate::trainer::{train_with_grid, RunManifest, TrainConfig};
use crate::types::{ClassVocabulary, PresenceVector, SegmentationSample};
use plots::{Series, Tile};

/// A domain given by preset name or spelled out in full.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DomainSource {
    Preset(String),
    Custom(Box<DomainSpec>),
}

impl DomainSource {
    pub fn resolve(&self, image_size: usize) -> Result<DomainSpec> {
        let spec = match self {
            DomainSource::Preset(name) => DomainSpec::preset(name, image_size)?,
            DomainSource::Custom(spec) => (**spec).clone(),
        };
        spec.validate()?;
        if spec.image_size != image_size {
            return Err(Error::Config(format!(
                "domain {} is {}×{} but the experiment uses {image_size}",
                spec.domain_id, spec.image_size, spec.image_size
            )));
        }
        Ok(spec)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Exp2Model {
    StandardAug,
    AdaptiveNoAug,
    AdaptiveAug,
}

impl Exp2Model {
    pub fn name(self) -> &'static str {
        match self {
            Exp2Model::StandardAug => "standard-aug",
            Exp2Model::AdaptiveNoAug => "adaptive-noaug",
            Exp2Model::AdaptiveAug => "adaptive-aug",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Exp1Config {
    /// Domains used for the cross-domain matrix; all configured domains when empty.
    pub domains: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Exp2Config {
    pub models: Vec<Exp2Model>,
    /// Test samples shown in the qualitative panel.
    pub panel_samples: usize,
}

impl Default for Exp2Config {
    fn default() -> Self {
        Self { models: vec![Exp2Model::StandardAug, Exp2Model::AdaptiveNoAug, Exp2Model::AdaptiveAug], panel_samples: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Exp3Config {
    pub domain: String,
    pub removed_class: String,
    pub removal_fraction: f64,
    /// Samples generated for the single domain (overrides `samples_per_domain`).
    pub samples: usize,
}

impl Default for Exp3Config {
    fn default() -> Self {
        Self { domain: "camus_like".into(), removed_class: "LVM".into(), removal_fraction: 0.5, samples: 375 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Exp4Config {
    pub domains: Vec<String>,
    /// Domain whose training and validation masks lose `removed_class` entirely.
    pub removed_domain: String,
    pub removed_class: String,
    pub probabilities: Vec<f64>,
    pub benchmark: bool,
    /// Training epochs for every Exp 4 run (overrides `train.epochs`).
    pub epochs: usize,
}

impl Default for Exp4Config {
    fn default() -> Self {
        Self {
            domains: vec!["camus_like".into(), "unity_like".into()],
            removed_domain: "unity_like".into(),
            removed_class: "LA".into(),
            probabilities: (0..=10).map(|i| i as f64 / 10.0).collect(),
            benchmark: true,
            epochs: 40,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinalConfig {
    pub dropout_probability: f64,
}

impl Default for FinalConfig {
    fn default() -> Self {
        Self { dropout_probability: 0.5 }
    }
}

/// Everything an experiment needs; every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub out: PathBuf,
    pub image_size: usize,
    pub samples_per_domain: usize,
    pub data_seed: u64,
    pub seeds: Vec<u64>,
    pub domains: Vec<DomainSource>,
    /// The domain annotating LV only, evaluated in Exp 2 and the final comparison.
    pub lv_only_domain: String,
    pub split: SplitSpec,
    /// Template for every run; loss, augmentation, dropout and seed are set per run.
    pub train: TrainConfig,
    /// Augmentation used by runs that augment.
    pub augment: AugmentConfig,
    pub exp1: Exp1Config,
    pub exp2: Exp2Config,
    pub exp3: Exp3Config,
    pub exp4: Exp4Config,
    #[serde(rename = "final")]
    pub final_: FinalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut train = TrainConfig { epochs: 20, learning_rate: 0.05, batch_size: 8, ..TrainConfig::default() };
        train.model.depth = 3;
        train.model.base_channels = 8;
        Self {
            out: PathBuf::from("runs"),
            image_size: 64,
            samples_per_domain: 125,
            data_seed: 2024,
            seeds: vec![0, 1, 2],
            domains: ["camus_like", "unity_like", "echonet_like"].into_iter().map(|n| DomainSource::Preset(n.into())).collect(),
            lv_only_domain: "echonet_like".into(),
            split: SplitSpec::default(),
            train,
            augment: AugmentConfig::default(),
            exp1: Exp1Config::default(),
            exp2: Exp2Config::default(),
            exp3: Exp3Config::default(),
            exp4: Exp4Config::default(),
            final_: FinalConfig::default(),
        }
    }
}

fn merge_tables(base: &mut toml::Table, overlay: toml::Table) {
    for (key, value) in overlay {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge_tables(b, o),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

impl ExperimentConfig {
    /// Parses `text` layered over [`ExperimentConfig::default`]: nested tables merge key by key,
    /// so a partial `[train]` keeps the experiment's training defaults.
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut base = toml::Table::try_from(Self::default())?;
        merge_tables(&mut base, toml::from_str(text)?);
        Ok(toml::Value::Table(base).try_into()?)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    /// Copy of the config with the model sized to `image_size`.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.train.model.image_size = c.image_size;
        c
    }

    pub fn validate(&self) -> Result<()> {
        let vocab = ClassVocabulary::default();
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if self.samples_per_domain < 3 {
            return Err(Error::Config("samples_per_domain must be at least 3".into()));
        }
        if self.domains.is_empty() {
            return Err(Error::Config("at least one domain is required".into()));
        }
        let specs = self.domain_specs()?;
        let mut ids: Vec<&str> = specs.iter().map(|s| s.domain_id.as_str()).collect();
        ids.sort();
        ids.dedup();
        if ids.len() != specs.len() {
            return Err(Error::Config("domain ids must be unique".into()));
        }
        self.split.validate()?;
        self.augment.validate()?;
        self.resolved().train.validate(&vocab)?;
        if self.exp4.epochs == 0 {
            return Err(Error::Config("exp4.epochs must be at least 1".into()));
        }
        if self.exp3.samples < 3 {
            return Err(Error::Config("exp3.samples must be at least 3".into()));
        }
        if !(0.0..=1.0).contains(&self.exp3.removal_fraction) {
            return Err(Error::Config(format!("exp3.removal_fraction {} outside [0,1]", self.exp3.removal_fraction)));
        }
        for c in [&self.exp3.removed_class, &self.exp4.removed_class] {
            if vocab.index_of(c).is_none() {
                return Err(Error::Config(format!("unknown class {c:?} (expected one of {:?})", vocab.names())));
            }
        }
        if let Some(p) = self.exp4.probabilities.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Config(format!("exp4 probability {p} outside [0,1]")));
        }
        if !(0.0..=1.0).contains(&self.final_.dropout_probability) {
            return Err(Error::Config("final.dropout_probability outside [0,1]".into()));
        }
        Ok(())
    }

    pub fn domain_specs(&self) -> Result<Vec<DomainSpec>> {
        self.domains.iter().map(|d| d.resolve(self.image_size)).collect()
    }

    fn domain(&self, id: &str) -> Result<DomainSpec> {
        self.domain_specs()?
            .into_iter()
            .find(|s| s.domain_id == id)
            .ok_or_else(|| Error::Config(format!("domain {id:?} is not configured")))
    }
}

/// One domain's samples: train and val restricted to the domain's labels, test fully labelled.
#[derive(Debug, Clone)]
pub struct DomainData {
    pub spec: DomainSpec,
    pub train: Vec<SegmentationSample>,
    pub val: Vec<SegmentationSample>,
    pub test: Vec<SegmentationSample>,
}

pub fn prepare_domain(spec: &DomainSpec, n: usize, data_seed: u64, split: &SplitSpec) -> Result<DomainData> {
    let full = generate_full_dataset(spec, n, derive_seed(data_seed, &["domain".into(), spec.domain_id.as_str().into()]))?;
    let spec_split = SplitSpec { seed: derive_seed(split.seed, &[spec.domain_id.as_str().into()]), ..split.clone() };
    let (train, val, test) = split_dataset(&full, &spec_split)?;
    let restrict = |v: Vec<SegmentationSample>| -> Vec<SegmentationSample> {
        v.into_iter().map(|s| restrict_to_domain_labels(s, &spec.labels_present)).collect()
    };
    Ok(DomainData { spec: spec.clone(), train: restrict(train), val: restrict(val), test })
}

fn restrict_all(samples: &[SegmentationSample], keep: &PresenceVector) -> Vec<SegmentationSample> {
    samples.iter().map(|s| restrict_to_domain_labels(s.clone(), keep)).collect()
}

fn concat<'a>(parts: impl IntoIterator<Item = &'a [SegmentationSample]>) -> Vec<SegmentationSample> {
    parts.into_iter().flat_map(|p| p.iter().cloned()).collect()
}

/// Result of one trained and evaluated model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub model: String,
    pub seed: u64,
    pub dir: PathBuf,
    pub best_epoch: Option<usize>,
    pub best_val_dice: Option<f64>,
    pub report: MetricsReport,
}

impl RunSummary {
    pub fn class_mean(&self, domain: &str, class: &str) -> f64 {
        self.report.class_mean(domain, class).unwrap_or(f64::NAN)
    }
}

/// A paired Wilcoxon comparison; `error` is set when the test could not be run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedTest {
    pub label: String,
    pub model_a: String,
    pub model_b: String,
    pub pairs: usize,
    pub mean_a: f64,
    pub mean_b: f64,
    pub result: Option<WilcoxonResult>,
    pub error: Option<String>,
}

impl PairedTest {
    pub fn new(label: &str, model_a: &str, a: &[f64], model_b: &str, b: &[f64]) -> Self {
        let mean = |v: &[f64]| if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 };
        let (result, error) = match wilcoxon_signed_rank(a, b) {
            Ok(r) => (Some(r), None),
            Err(e) => (None, Some(e.to_string())),
        };
        Self {
            label: label.into(),
            model_a: model_a.into(),
            model_b: model_b.into(),
            pairs: a.len(),
            mean_a: mean(a),
            mean_b: mean(b),
            result,
            error,
        }
    }

    pub fn p_value(&self) -> Option<f64> {
        self.result.as_ref().map(|r| r.p_value)
    }
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    write(path, &serde_json::to_string_pretty(value)?)
}

fn read_json<S: for<'de> Deserialize<'de>>(path: &Path) -> Result<S> {
    Ok(serde_json::from_str(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)?)
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (m, var.sqrt())
}

/// Loads a run's checkpoint back from disk.
pub fn load_run_model(dir: &Path) -> Result<UNet<f32>> {
    Checkpoint::<f32>::load(&dir.join("checkpoint.ldck"))?.into_model()
}

struct Harness {
    cfg: ExperimentConfig,
    vocab: ClassVocabulary,
    dir: PathBuf,
}

impl Harness {
    fn new(cfg: &ExperimentConfig, experiment: &str) -> Result<Self> {
        cfg.validate()?;
        let cfg = cfg.resolved();
        let dir = cfg.out.join(experiment);
        mkdir(&dir)?;
        write(&dir.join("config.toml"), &cfg.to_toml()?)?;
        Ok(Self { cfg, vocab: ClassVocabulary::default(), dir })
    }

    fn data(&self, id: &str) -> Result<DomainData> {
        prepare_domain(&self.cfg.domain(id)?, self.cfg.samples_per_domain, self.cfg.data_seed, &self.cfg.split)
    }

    fn run_config(&self, seed: u64, loss: LossKind, augment: bool, dropout: Option<DropoutConfig>) -> TrainConfig {
        TrainConfig {
            seed,
            loss,
            augment: augment.then(|| self.cfg.augment.clone()),
            dropout,
            ..self.cfg.train.clone()
        }
    }

    fn run(
        &self,
        name: &str,
        cfg: &TrainConfig,
        train: &[SegmentationSample],
        val: &[SegmentationSample],
        test: &[SegmentationSample],
    ) -> Result<RunSummary> {
        let dir = self.dir.join(format!("{name}-{}", cfg.seed));
        let (manifest, report) = train_and_persist(&dir, cfg, train, val, test, &self.vocab)?;
        Ok(RunSummary {
            model: name.into(),
            seed: cfg.seed,
            dir,
            best_epoch: manifest.best_epoch,
            best_val_dice: manifest.best_val_dice,
            report,
        })
    }
}

/// Train one model into `dir`, then reload its checkpoint and evaluate it on `test`.
///
/// A diverged run still leaves its diagnostic `manifest.json` behind.
pub fn train_and_persist(
    dir: &Path,
    cfg: &TrainConfig,
    train: &[SegmentationSample],
    val: &[SegmentationSample],
    test: &[SegmentationSample],
    vocab: &ClassVocabulary,
) -> Result<(RunManifest, MetricsReport)> {
    mkdir(&dir.join("plots"))?;
    let (params, mut manifest) = match train_with_grid::<f32>(cfg, train, val, vocab) {
        Ok(r) => r,
        Err(e) => {
            if let Error::Divergence { manifest: Some(m), .. } = &e {
                write(&dir.join("manifest.json"), &m.to_json()?)?;
            }
            return Err(e);
        }
    };
    manifest.record_dataset("test", test, &[train, val, test]);
    write(&dir.join("manifest.json"), &manifest.to_json()?)?;
    if !manifest.disjoint {
        return Err(Error::Config(format!("{}: test set overlaps training or validation data", dir.display())));
    }
    let ck = Checkpoint {
        config: manifest.config.model.clone(),
        params,
        epoch: manifest.best_epoch.expect("finished run"),
        val_dice: manifest.best_val_dice.unwrap_or(f64::NAN),
    };
    ck.save(&dir.join("checkpoint.ldck"))?;
    let model = load_run_model(dir)?;
    let report = evaluate(&model, test, vocab)?;
    write(&dir.join("metrics.csv"), &report.to_csv())?;
    write(&dir.join("metrics.json"), &report.to_json()?)?;
    write_curves(&manifest, &dir.join("plots").join("curves.svg"))?;
    Ok((manifest, report))
}

fn write_curves(m: &RunManifest, path: &Path) -> Result<()> {
    let pts = |v: &[f64]| v.iter().enumerate().map(|(i, &y)| (i as f64, y, 0.0)).collect();
    let series = [Series { name: "train loss".into(), points: pts(&m.train_loss) }, Series { name: "val Dice".into(), points: pts(&m.val_dice) }];
    plots::line_plot_svg(&series, "training curves", "epoch", "value", None, path)
}

/// Per-(model, seed, domain, class) mean Dice in long format.
pub fn summary_csv(runs: &[RunSummary]) -> String {
    let mut s = String::from("model,seed,domain_id,class,mean_dice,std_dice,count\n");
    for r in runs {
        for c in &r.report.per_class {
            writeln!(s, "{},{},{},{},{:.6},{:.6},{}", r.model, r.seed, c.domain_id, c.class_name, c.mean, c.std, c.count).unwrap();
        }
    }
    s
}

/// Sample-level Dice of `class` on `domain`, concatenated over runs of `model` in seed order.
pub fn pooled_scores(runs: &[RunSummary], model: &str, domain: &str, class: usize) -> Vec<f64> {
    let mut selected: Vec<&RunSummary> = runs.iter().filter(|r| r.model == model).collect();
    selected.sort_by_key(|r| r.seed);
    selected.iter().flat_map(|r| r.report.sample_scores(domain, class)).collect()
}

fn pooled_foreground(runs: &[RunSummary], model: &str, domain: &str) -> Vec<f64> {
    let mut selected: Vec<&RunSummary> = runs.iter().filter(|r| r.model == model).collect();
    selected.sort_by_key(|r| r.seed);
    selected.iter().flat_map(|r| r.report.sample_foreground(domain)).collect()
}

fn tests_csv(tests: &[PairedTest]) -> String {
    let mut s = String::from("comparison,model_a,model_b,pairs,mean_a,mean_b,statistic,p_value,exact,error\n");
    for t in tests {
        let (stat, p, exact) = match &t.result {
            Some(r) => (format!("{}", r.statistic), format!("{:.6e}", r.p_value), r.exact.to_string()),
            None => (String::new(), String::new(), String::new()),
        };
        writeln!(
            s,
            "{},{},{},{},{:.6},{:.6},{stat},{p},{exact},{}",
            t.label,
            t.model_a,
            t.model_b,
            t.pairs,
            t.mean_a,
            t.mean_b,
            t.error.clone().unwrap_or_default().replace(',', ";")
        )
        .unwrap();
    }
    s
}

// ---------------------------------------------------------------- Exp 1

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exp1Result {
    /// Seed-averaged matrix.
    pub matrix: CrossDomainMatrix,
    pub per_seed: Vec<(u64, CrossDomainMatrix)>,
    pub runs: Vec<RunSummary>,
}

/// One LV-only model per domain, evaluated on every domain's test set.
pub fn run_exp1(cfg: &ExperimentConfig) -> Result<Exp1Result> {
    let h = Harness::new(cfg, "exp1")?;
    let ids: Vec<String> = if h.cfg.exp1.domains.is_empty() {
        h.cfg.domain_specs()?.into_iter().map(|s| s.domain_id).collect()
    } else {
        h.cfg.exp1.domains.clone()
    };
    if ids.len() < 2 {
        return Err(Error::Config("exp1 needs at least two domains".into()));
    }
    let lv_only = PresenceVector::new(vec![true, false, false]);
    let data: Vec<DomainData> = ids.iter().map(|d| h.data(d)).collect::<Result<_>>()?;
    let mut runs = Vec::new();
    let mut per_seed = Vec::new();
    for &seed in &h.cfg.seeds {
        let mut values = Vec::new();
        for d in &data {
            let train = restrict_all(&d.train, &lv_only);
            let val = restrict_all(&d.val, &lv_only);
            let test = concat(data.iter().map(|x| x.test.as_slice()));
            let run = h.run(&format!("lv-{}", d.spec.domain_id), &h.run_config(seed, LossKind::Standard, true, None), &train, &val, &test)?;
            values.push(ids.iter().map(|t| mean_std(&run.report.sample_scores(t, 0)).0).collect::<Vec<f64>>());
            runs.push(run);
        }
        per_seed.push((seed, CrossDomainMatrix { domains: ids.clone(), values }));
    }
    let d = ids.len();
    let values = (0..d)
        .map(|i| (0..d).map(|j| per_seed.iter().map(|(_, m)| m.values[i][j]).sum::<f64>() / per_seed.len() as f64).collect())
        .collect();
    let result = Exp1Result { matrix: CrossDomainMatrix { domains: ids, values }, per_seed, runs };
    write(&h.dir.join("matrix.csv"), &result.matrix.to_csv())?;
    write(&h.dir.join("summary.csv"), &summary_csv(&result.runs))?;
    write_json(&h.dir.join("results.json"), &result)?;
    render_exp1(&h.dir, &result)?;
    Ok(result)
}

fn render_exp1(dir: &Path, r: &Exp1Result) -> Result<()> {
    plots::heatmap_png(&r.matrix, &dir.join("heatmap.png"))?;
    plots::heatmap_svg(&r.matrix, "LV Dice, cross-domain", &dir.join("heatmap.svg"))
}

/// Evaluate persisted per-domain models on each domain's test set.
pub fn cross_domain_from_runs(
    models: &[(String, UNet<f32>)],
    tests: &[(String, Vec<SegmentationSample>)],
) -> Result<CrossDomainMatrix> {
    let refs: Vec<(String, &dyn Segmenter)> = models.iter().map(|(d, m)| (d.clone(), m as &dyn Segmenter)).collect();
    crate::metrics::cross_domain_matrix(&refs, tests, &ClassVocabulary::default())
}

// ---------------------------------------------------------------- Exp 2

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exp2Result {
    pub lv_only_domain: String,
    pub runs: Vec<RunSummary>,
}

impl Exp2Result {
    /// Seed-averaged class Dice of `model` on `domain`.
    pub fn mean(&self, model: &str, domain: &str, class: &str) -> f64 {
        mean_std(&self.runs.iter().filter(|r| r.model == model).map(|r| r.class_mean(domain, class)).collect::<Vec<_>>()).0
    }
}

fn combined(data: &[DomainData]) -> (Vec<SegmentationSample>, Vec<SegmentationSample>, Vec<SegmentationSample>) {
    (
        concat(data.iter().map(|d| d.train.as_slice())),
        concat(data.iter().map(|d| d.val.as_slice())),
        concat(data.iter().map(|d| d.test.as_slice())),
    )
}

fn all_domains(h: &Harness) -> Result<Vec<DomainData>> {
    h.cfg.domain_specs()?.iter().map(|s| h.data(&s.domain_id)).collect()
}

fn check_lv_only(h: &Harness) -> Result<()> {
    let spec = h.cfg.domain(&h.cfg.lv_only_domain)?;
    if spec.labels_present.all_present() {
        return Err(Error::Config(format!("lv_only_domain {} annotates every class", spec.domain_id)));
    }
    Ok(())
}

/// Standard and adaptive models on the combined, partially labelled corpus.
pub fn run_exp2(cfg: &ExperimentConfig) -> Result<Exp2Result> {
    let h = Harness::new(cfg, "exp2")?;
    check_lv_only(&h)?;
    let data = all_domains(&h)?;
    let (train, val, test) = combined(&data);
    let mut runs = Vec::new();
    for &seed in &h.cfg.seeds {
        for &m in &h.cfg.exp2.models {
            let rc = match m {
                Exp2Model::StandardAug => h.run_config(seed, LossKind::Standard, true, None),
                Exp2Model::AdaptiveNoAug => h.run_config(seed, LossKind::Adaptive, false, None),
                Exp2Model::AdaptiveAug => h.run_config(seed, LossKind::Adaptive, true, None),
            };
            runs.push(h.run(m.name(), &rc, &train, &val, &test)?);
        }
    }
    let result = Exp2Result { lv_only_domain: h.cfg.lv_only_domain.clone(), runs };
    write(&h.dir.join("summary.csv"), &summary_csv(&result.runs))?;
    write_json(&h.dir.join("results.json"), &result)?;
    render_panels(&h, &result.runs)?;
    Ok(result)
}

/// Image | ground truth | one prediction per model of the first seed, on LV-only-domain test samples.
fn render_panels(h: &Harness, runs: &[RunSummary]) -> Result<()> {
    let test = h.data(&h.cfg.lv_only_domain)?.test;
    let first_seed = h.cfg.seeds[0];
    let models: Vec<UNet<f32>> = runs.iter().filter(|r| r.seed == first_seed).map(|r| load_run_model(&r.dir)).collect::<Result<_>>()?;
    let shown: Vec<&SegmentationSample> = test.iter().take(h.cfg.exp2.panel_samples.max(1)).collect();
    let images: Vec<_> = shown.iter().map(|s| &s.image).collect();
    let preds: Vec<Vec<_>> = models.iter().map(|m| m.segment(&images)).collect::<Result<_>>()?;
    let rows: Vec<Vec<Tile<'_>>> = shown
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut row = vec![Tile::Image(&s.image), Tile::Labels(&s.labels)];
            row.extend(preds.iter().map(|p| Tile::Labels(&p[i])));
            row
        })
        .collect();
    plots::panels_png(&rows, 3, &h.dir.join("panels.png"))
}

// ---------------------------------------------------------------- Exp 3

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exp3Result {
    pub domain: String,
    pub runs: Vec<RunSummary>,
    pub tests: Vec<PairedTest>,
}

impl Exp3Result {
    pub fn mean_foreground(&self, model: &str) -> f64 {
        mean_std(&self.runs.iter().filter(|r| r.model == model).map(|r| r.report.foreground_mean(&self.domain).unwrap_or(f64::NAN)).collect::<Vec<_>>()).0
    }

    pub fn class_mean(&self, model: &str, class: &str) -> f64 {
        mean_std(&self.runs.iter().filter(|r| r.model == model).map(|r| r.class_mean(&self.domain, class)).collect::<Vec<_>>()).0
    }

    pub fn seeds(&self) -> Vec<u64> {
        let mut s: Vec<u64> = self.runs.iter().map(|r| r.seed).collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    pub fn run(&self, model: &str, seed: u64) -> Option<&RunSummary> {
        self.runs.iter().find(|r| r.model == model && r.seed == seed)
    }
}

pub const EXP3_MODELS: [&str; 3] = ["benchmark", "standard", "adaptive"];

/// Benchmark, standard and adaptive loss on a single domain with one class partly removed.
pub fn run_exp3(cfg: &ExperimentConfig) -> Result<Exp3Result> {
    let h = Harness::new(cfg, "exp3")?;
    let d = prepare_domain(&h.cfg.domain(&h.cfg.exp3.domain)?, h.cfg.exp3.samples, h.cfg.data_seed, &h.cfg.split)?;
    if !d.spec.labels_present.all_present() {
        return Err(Error::Config(format!("exp3 domain {} must be fully labelled", d.spec.domain_id)));
    }
    let class = h.vocab.index_of(&h.cfg.exp3.removed_class).expect("validated");
    let removed = apply_label_removal(&d.train, class, h.cfg.exp3.removal_fraction, derive_seed(h.cfg.data_seed, &["exp3-removal".into()]))?;
    let mut runs = Vec::new();
    for &seed in &h.cfg.seeds {
        runs.push(h.run("benchmark", &h.run_config(seed, LossKind::Standard, false, None), &d.train, &d.val, &d.test)?);
        runs.push(h.run("standard", &h.run_config(seed, LossKind::Standard, false, None), &removed, &d.val, &d.test)?);
        runs.push(h.run("adaptive", &h.run_config(seed, LossKind::Adaptive, false, None), &removed, &d.val, &d.test)?);
    }
    let dom = d.spec.domain_id.clone();
    let cname = h.cfg.exp3.removed_class.clone();
    let mut tests = Vec::new();
    for (a, b) in [("adaptive", "standard"), ("adaptive", "benchmark"), ("standard", "benchmark")] {
        tests.push(PairedTest::new(&format!("{cname} Dice"), a, &pooled_scores(&runs, a, &dom, class), b, &pooled_scores(&runs, b, &dom, class)));
        tests.push(PairedTest::new("foreground Dice", a, &pooled_foreground(&runs, a, &dom), b, &pooled_foreground(&runs, b, &dom)));
    }
    let result = Exp3Result { domain: dom, runs, tests };
    write(&h.dir.join("summary.csv"), &summary_csv(&result.runs))?;
    write(&h.dir.join("wilcoxon.csv"), &tests_csv(&result.tests))?;
    write_json(&h.dir.join("results.json"), &result)?;
    render_exp3(&h.dir, &result)?;
    Ok(result)
}

fn render_exp3(dir: &Path, r: &Exp3Result) -> Result<()> {
    let names = ClassVocabulary::default().names().to_vec();
    let models: Vec<String> = EXP3_MODELS.iter().map(|s| s.to_string()).collect();
    let values: Vec<Vec<Vec<f64>>> = (0..names.len())
        .map(|c| models.iter().map(|m| pooled_scores(&r.runs, m, &r.domain, c)).collect())
        .collect();
    plots::box_plot_svg(&names, &models, &values, "per-class test Dice", &dir.join("boxplot.svg"))
}

// ---------------------------------------------------------------- Exp 4

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub probability: f64,
    /// Mean test Dice of the removed class on the removed domain, one per seed.
    pub per_seed: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exp4Result {
    pub removed_domain: String,
    pub removed_class: String,
    pub sweep: Vec<SweepRow>,
    pub benchmark: Option<SweepRow>,
    pub runs: Vec<RunSummary>,
    /// p = 0 against p = 0.5 on pooled sample-level Dice, when both were run.
    pub wilcoxon: Option<PairedTest>,
}

impl Exp4Result {
    pub fn row(&self, p: f64) -> Option<&SweepRow> {
        self.sweep.iter().find(|r| (r.probability - p).abs() < 1e-9)
    }
}

pub fn dropout_run_name(p: f64) -> String {
    format!("dropout-{p:.2}")
}

/// Label-dropout probability sweep with the removed class missing from one domain.
pub fn run_exp4(cfg: &ExperimentConfig) -> Result<Exp4Result> {
    let h = Harness::new(cfg, "exp4")?;
    let e = &h.cfg.exp4;
    if e.domains.len() < 2 {
        return Err(Error::Config("exp4 needs two domains".into()));
    }
    if !e.domains.contains(&e.removed_domain) {
        return Err(Error::Config(format!("exp4.removed_domain {} is not among exp4.domains", e.removed_domain)));
    }
    let class = h.vocab.index_of(&e.removed_class).expect("validated");
    let data: Vec<DomainData> = e.domains.iter().map(|d| h.data(d)).collect::<Result<_>>()?;
    let (full_train, full_val, test) = combined(&data);
    let strip = |v: &[SegmentationSample]| -> Vec<SegmentationSample> {
        v.iter()
            .map(|s| {
                let mut s = s.clone();
                if s.domain_id == e.removed_domain {
                    s.erase_class(class);
                }
                s
            })
            .collect()
    };
    let (train, val) = (strip(&full_train), strip(&full_val));
    let eligible = partially_labelled_classes(&train);
    let dom = e.removed_domain.clone();

    let mut runs = Vec::new();
    let mut sweep = Vec::new();
    for &p in &e.probabilities {
        let mut per_seed = Vec::new();
        for &seed in &h.cfg.seeds {
            let rc = TrainConfig {
                epochs: h.cfg.exp4.epochs,
                ..h.run_config(seed, LossKind::Adaptive, true, Some(DropoutConfig { probability: p, eligible_classes: eligible.clone() }))
            };
            let run = h.run(&dropout_run_name(p), &rc, &train, &val, &test)?;
            per_seed.push(run.class_mean(&dom, &e.removed_class));
            runs.push(run);
        }
        let (mean, std) = mean_std(&per_seed);
        sweep.push(SweepRow { probability: p, per_seed, mean, std });
    }
    let benchmark = if e.benchmark {
        let mut per_seed = Vec::new();
        for &seed in &h.cfg.seeds {
            let rc = TrainConfig { epochs: h.cfg.exp4.epochs, ..h.run_config(seed, LossKind::Standard, true, None) };
            let run = h.run("benchmark", &rc, &full_train, &full_val, &test)?;
            per_seed.push(run.class_mean(&dom, &e.removed_class));
            runs.push(run);
        }
        let (mean, std) = mean_std(&per_seed);
        Some(SweepRow { probability: f64::NAN, per_seed, mean, std })
    } else {
        None
    };
    let has = |p: f64| e.probabilities.iter().any(|q| (q - p).abs() < 1e-9);
    let wilcoxon = (has(0.0) && has(0.5)).then(|| {
        let (a, b) = (dropout_run_name(0.5), dropout_run_name(0.0));
        PairedTest::new(
            &format!("{} Dice on {dom}", e.removed_class),
            &a,
            &pooled_scores(&runs, &a, &dom, class),
            &b,
            &pooled_scores(&runs, &b, &dom, class),
        )
    });
    let result = Exp4Result { removed_domain: dom, removed_class: e.removed_class.clone(), sweep, benchmark, runs, wilcoxon };
    write(&h.dir.join("sweep.csv"), &sweep_csv(&result))?;
    write(&h.dir.join("summary.csv"), &summary_csv(&result.runs))?;
    write(&h.dir.join("wilcoxon.csv"), &tests_csv(result.wilcoxon.as_slice()))?;
    write_json(&h.dir.join("results.json"), &result)?;
    render_exp4(&h.dir, &result)?;
    Ok(result)
}

fn sweep_csv(r: &Exp4Result) -> String {
    let mut s = String::from("probability,mean_dice,std_dice,seeds\n");
    for row in r.sweep.iter().chain(&r.benchmark) {
        let p = if row.probability.is_nan() { "benchmark".to_string() } else { format!("{:.2}", row.probability) };
        writeln!(s, "{p},{:.6},{:.6},{}", row.mean, row.std, row.per_seed.len()).unwrap();
    }
    s
}

fn render_exp4(dir: &Path, r: &Exp4Result) -> Result<()> {
    let mut series = vec![Series { name: "label dropout".into(), points: r.sweep.iter().map(|row| (row.probability, row.mean, row.std)).collect() }];
    if let (Some(b), Some(first), Some(last)) = (&r.benchmark, r.sweep.first(), r.sweep.last()) {
        series.push(Series { name: "fully labelled".into(), points: vec![(first.probability, b.mean, 0.0), (last.probability, b.mean, 0.0)] });
    }
    plots::line_plot_svg(
        &series,
        &format!("{} Dice on {}", r.removed_class, r.removed_domain),
        "label dropout probability",
        "Dice",
        Some((0.0, 1.0)),
        &dir.join("sweep.svg"),
    )
}

// ---------------------------------------------------------------- Final

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalRow {
    pub model: String,
    /// Seed-averaged Dice per class, in vocabulary order.
    pub dice: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalResult {
    pub domain: String,
    pub class_names: Vec<String>,
    pub table: Vec<FinalRow>,
    pub runs: Vec<RunSummary>,
    pub tests: Vec<PairedTest>,
}

pub const FINAL_MODELS: [&str; 2] = ["adaptive-aug", "adaptive-aug-dropout"];

impl FinalResult {
    pub fn table_csv(&self) -> String {
        let mut s = String::from("model");
        for c in &self.class_names {
            write!(s, ",{c}").unwrap();
        }
        s.push('\n');
        for row in &self.table {
            s.push_str(&row.model);
            for v in &row.dice {
                write!(s, ",{v:.4}").unwrap();
            }
            s.push('\n');
        }
        s
    }
}

/// Adaptive loss with augmentation, with and without label dropout, on the combined corpus.
pub fn run_final(cfg: &ExperimentConfig) -> Result<FinalResult> {
    let h = Harness::new(cfg, "final")?;
    check_lv_only(&h)?;
    let data = all_domains(&h)?;
    let (train, val, test) = combined(&data);
    let eligible = partially_labelled_classes(&train);
    let mut runs = Vec::new();
    for &seed in &h.cfg.seeds {
        runs.push(h.run(FINAL_MODELS[0], &h.run_config(seed, LossKind::Adaptive, true, None), &train, &val, &test)?);
        let dropout = DropoutConfig { probability: h.cfg.final_.dropout_probability, eligible_classes: eligible.clone() };
        runs.push(h.run(FINAL_MODELS[1], &h.run_config(seed, LossKind::Adaptive, true, Some(dropout)), &train, &val, &test)?);
    }
    let dom = h.cfg.lv_only_domain.clone();
    let names = h.vocab.names().to_vec();
    let table = FINAL_MODELS
        .iter()
        .map(|m| FinalRow {
            model: m.to_string(),
            dice: names
                .iter()
                .map(|c| mean_std(&runs.iter().filter(|r| r.model == *m).map(|r| r.class_mean(&dom, c)).collect::<Vec<_>>()).0)
                .collect(),
        })
        .collect();
    let tests = names
        .iter()
        .enumerate()
        .map(|(c, n)| {
            PairedTest::new(
                &format!("{n} Dice on {dom}"),
                FINAL_MODELS[1],
                &pooled_scores(&runs, FINAL_MODELS[1], &dom, c),
                FINAL_MODELS[0],
                &pooled_scores(&runs, FINAL_MODELS[0], &dom, c),
            )
        })
        .collect();
    let result = FinalResult { domain: dom, class_names: names, table, runs, tests };
    write(&h.dir.join("table.csv"), &result.table_csv())?;
    write(&h.dir.join("summary.csv"), &summary_csv(&result.runs))?;
    write(&h.dir.join("wilcoxon.csv"), &tests_csv(&result.tests))?;
    write_json(&h.dir.join("results.json"), &result)?;
    Ok(result)
}

// ---------------------------------------------------------------- Replay

/// Re-evaluate every run under `exp_dir` from its checkpoint and regenerated test set,
/// returning `metrics.csv` contents keyed by run directory name.
pub fn reevaluate(exp_dir: &Path) -> Result<BTreeMap<String, String>> {
    let cfg = ExperimentConfig::load(&exp_dir.join("config.toml"))?;
    let vocab = ClassVocabulary::default();
    let mut tests: BTreeMap<String, Vec<SegmentationSample>> = BTreeMap::new();
    for spec in cfg.domain_specs()? {
        tests.insert(spec.domain_id.clone(), prepare_domain(&spec, cfg.samples_per_domain, cfg.data_seed, &cfg.split)?.test);
    }
    let mut out = BTreeMap::new();
    let mut entries: Vec<PathBuf> = fs::read_dir(exp_dir)
        .map_err(|e| Error::io(exp_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("checkpoint.ldck").is_file())
        .collect();
    entries.sort();
    for dir in entries {
        let manifest = RunManifest::from_json(&fs::read_to_string(dir.join("manifest.json")).map_err(|e| Error::io(dir.join("manifest.json"), e))?)?;
        let test_fp = manifest.datasets.iter().find(|d| d.role == "test").ok_or_else(|| Error::Config(format!("{}: manifest lacks a test set", dir.display())))?;
        // the test set is the concatenation of some domains' test sets; find it by fingerprint
        let test = candidate_test_sets(&tests)
            .into_iter()
            .find(|t| crate::trainer::fingerprint_dataset("test", t).sha256 == test_fp.sha256)
            .ok_or_else(|| Error::Config(format!("{}: no configured test set matches the manifest", dir.display())))?;
        let report = evaluate(&load_run_model(&dir)?, &test, &vocab)?;
        out.insert(dir.file_name().unwrap().to_string_lossy().into_owned(), report.to_csv());
    }
    Ok(out)
}

fn candidate_test_sets(tests: &BTreeMap<String, Vec<SegmentationSample>>) -> Vec<Vec<SegmentationSample>> {
    let ids: Vec<&String> = tests.keys().collect();
    let mut out = Vec::new();
    for mask in 1u32..(1 << ids.len()) {
        let set: Vec<SegmentationSample> = ids.iter().enumerate().filter(|(i, _)| mask >> i & 1 == 1).flat_map(|(_, id)| tests[*id].clone()).collect();
        out.push(set);
    }
    out
}

/// Re-render an experiment's figures from its persisted results.
pub fn replot(exp_dir: &Path) -> Result<Vec<PathBuf>> {
    let name = exp_dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let results = exp_dir.join("results.json");
    match name.as_str() {
        "exp1" => {
            render_exp1(exp_dir, &read_json(&results)?)?;
            Ok(vec![exp_dir.join("heatmap.png"), exp_dir.join("heatmap.svg")])
        }
        "exp2" => {
            let cfg = ExperimentConfig::load(&exp_dir.join("config.toml"))?;
            let r: Exp2Result = read_json(&results)?;
            let h = Harness { cfg, vocab: ClassVocabulary::default(), dir: exp_dir.to_path_buf() };
            render_panels(&h, &r.runs)?;
            Ok(vec![exp_dir.join("panels.png")])
        }
        "exp3" => {
            render_exp3(exp_dir, &read_json(&results)?)?;
            Ok(vec![exp_dir.join("boxplot.svg")])
        }
        "exp4" => {
            render_exp4(exp_dir, &read_json(&results)?)?;
            Ok(vec![exp_dir.join("sweep.svg")])
        }
        "final" => {
            let r: FinalResult = read_json(&results)?;
            write(&exp_dir.join("table.csv"), &r.table_csv())?;
            Ok(vec![exp_dir.join("table.csv")])
        }
        other => Err(Error::Config(format!("{other:?} is not an experiment directory (exp1..exp4, final)"))),
    }
}
