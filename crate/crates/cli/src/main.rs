//! `labeldrop` command-line harness.

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use labeldrop::dropout::{partially_labelled_classes, DropoutConfig};
use labeldrop::experiments::{self, prepare_domain, train_and_persist, ExperimentConfig};
use labeldrop::losses::LossKind;
use labeldrop::metrics::{evaluate, MetricsReport};
use labeldrop::nn::Checkpoint;
use labeldrop::synth::ingest::{load_domain_dir, write_domain_dir};
use labeldrop::synth::split_dataset;
use labeldrop::{ClassVocabulary, Error, SegmentationSample};

#[derive(Parser)]
#[command(name = "labeldrop", version, about = "Partial-label segmentation experiments on synthetic echo-style data")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// TOML configuration; unset fields use built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run a single training seed instead of the configured list (`train` uses the first).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Square image side in pixels (power of two).
    #[arg(long, global = true)]
    image_size: Option<usize>,
    /// Training epochs per run (also replaces `exp4.epochs`).
    #[arg(long, global = true)]
    epochs: Option<usize>,
    /// Label-dropout probability (train, final; exp4 sweeps {0, p}).
    #[arg(long, global = true)]
    dropout_prob: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write every configured domain to <out>/data/<domain>/{train,val,test}.
    GenData,
    /// Train one model on ingested directories or on the configured synthetic domains.
    Train {
        /// Dataset directories in the ingestion layout; split 80/10/10 after merging.
        #[arg(long = "data")]
        data: Vec<PathBuf>,
        #[arg(long, default_value = "adaptive")]
        loss: LossKind,
        #[arg(long)]
        augment: bool,
        #[arg(long, default_value = "model")]
        name: String,
    },
    /// Evaluate a checkpoint on ingested test directories or the synthetic test sets.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "data")]
        data: Vec<PathBuf>,
    },
    /// Cross-domain LV matrix.
    Exp1,
    /// Shortcut learning on a combined, partially labelled corpus.
    Exp2,
    /// Controlled label removal on one domain.
    Exp3,
    /// Label-dropout probability sweep.
    Exp4,
    /// Adaptive loss with and without label dropout.
    Final,
    /// Re-render the figures of an experiment directory.
    Plot {
        /// Experiment directory such as runs/exp4.
        dir: PathBuf,
    },
    /// Print the effective configuration as TOML.
    ShowConfig,
}

fn config(g: &Global) -> labeldrop::Result<ExperimentConfig> {
    let mut cfg = match &g.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seeds = vec![s];
    }
    if let Some(o) = &g.out {
        cfg.out = o.clone();
    }
    if let Some(s) = g.image_size {
        cfg.image_size = s;
    }
    if let Some(e) = g.epochs {
        cfg.train.epochs = e;
        cfg.exp4.epochs = e;
    }
    if let Some(p) = g.dropout_prob {
        cfg.final_.dropout_probability = p;
        cfg.exp4.probabilities = if p == 0.0 { vec![0.0] } else { vec![0.0, p] };
    }
    cfg.validate()?;
    Ok(cfg.resolved())
}

fn load_dirs(dirs: &[PathBuf], vocab: &ClassVocabulary) -> labeldrop::Result<Vec<SegmentationSample>> {
    let mut all = Vec::new();
    for d in dirs {
        all.extend(load_domain_dir(d, vocab)?);
    }
    Ok(all)
}

fn print_report(report: &MetricsReport) {
    for d in &report.per_domain {
        println!("{:<16} mean foreground Dice {:.4} ({} samples)", d.domain_id, d.mean_foreground_dice, d.samples);
        for c in report.per_class.iter().filter(|c| c.domain_id == d.domain_id) {
            println!("  {:<5} {:.4} ± {:.4}", c.class_name, c.mean, c.std);
        }
    }
}

fn write(path: &Path, contents: &str) -> labeldrop::Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::Io { path: path.into(), source: e })
}

fn run(cli: Cli) -> labeldrop::Result<()> {
    let vocab = ClassVocabulary::default();
    let cfg = config(&cli.global)?;
    match cli.command {
        Command::ShowConfig => print!("{}", cfg.to_toml()?),
        Command::GenData => {
            for spec in cfg.domain_specs()? {
                let d = prepare_domain(&spec, cfg.samples_per_domain, cfg.data_seed, &cfg.split)?;
                for (part, samples) in [("train", &d.train), ("val", &d.val), ("test", &d.test)] {
                    let dir = cfg.out.join("data").join(&spec.domain_id).join(part);
                    write_domain_dir(&dir, &spec.domain_id, samples, &vocab)?;
                    println!("{}: {} samples", dir.display(), samples.len());
                }
            }
        }
        Command::Train { data, loss, augment, name } => {
            let (train, val, test) = if data.is_empty() {
                let mut parts = (Vec::new(), Vec::new(), Vec::new());
                for spec in cfg.domain_specs()? {
                    let d = prepare_domain(&spec, cfg.samples_per_domain, cfg.data_seed, &cfg.split)?;
                    parts.0.extend(d.train);
                    parts.1.extend(d.val);
                    parts.2.extend(d.test);
                }
                parts
            } else {
                split_dataset(&load_dirs(&data, &vocab)?, &cfg.split)?
            };
            let mut tc = cfg.train.clone();
            tc.seed = cfg.seeds[0];
            tc.loss = loss;
            tc.augment = augment.then(|| cfg.augment.clone());
            if let Some(p) = cli.global.dropout_prob {
                tc.dropout = Some(DropoutConfig { probability: p, eligible_classes: partially_labelled_classes(&train) });
            }
            let dir = cfg.out.join("train").join(format!("{name}-{}", tc.seed));
            let (manifest, report) = train_and_persist(&dir, &tc, &train, &val, &test, &vocab)?;
            println!(
                "best epoch {} (val Dice {:.4}), {:.1}s; run written to {}",
                manifest.best_epoch.unwrap_or(0),
                manifest.best_val_dice.unwrap_or(f64::NAN),
                manifest.wall_clock_seconds,
                dir.display()
            );
            print_report(&report);
        }
        Command::Evaluate { checkpoint, data } => {
            let model = Checkpoint::<f32>::load(&checkpoint)?.into_model()?;
            let test = if data.is_empty() {
                let mut t = Vec::new();
                for spec in cfg.domain_specs()? {
                    t.extend(prepare_domain(&spec, cfg.samples_per_domain, cfg.data_seed, &cfg.split)?.test);
                }
                t
            } else {
                load_dirs(&data, &vocab)?
            };
            let report = evaluate(&model, &test, &vocab)?;
            std::fs::create_dir_all(&cfg.out).map_err(|e| Error::Io { path: cfg.out.clone(), source: e })?;
            write(&cfg.out.join("metrics.csv"), &report.to_csv())?;
            write(&cfg.out.join("metrics.json"), &report.to_json()?)?;
            print_report(&report);
        }
        Command::Exp1 => {
            let r = experiments::run_exp1(&cfg)?;
            print!("{}", r.matrix.to_csv());
            println!("diagonal minus off-diagonal mean: {:.4}", r.matrix.diagonal_margin());
        }
        Command::Exp2 => {
            let r = experiments::run_exp2(&cfg)?;
            for m in ["standard-aug", "adaptive-noaug", "adaptive-aug"] {
                if r.runs.iter().any(|x| x.model == m) {
                    let v: Vec<String> = vocab.names().iter().map(|c| format!("{c} {:.4}", r.mean(m, &r.lv_only_domain, c))).collect();
                    println!("{m:<16} on {}: {}", r.lv_only_domain, v.join(", "));
                }
            }
        }
        Command::Exp3 => {
            let r = experiments::run_exp3(&cfg)?;
            for m in experiments::EXP3_MODELS {
                println!("{m:<10} mean foreground Dice {:.4}, {} Dice {:.4}", r.mean_foreground(m), cfg.exp3.removed_class, r.class_mean(m, &cfg.exp3.removed_class));
            }
            for t in &r.tests {
                println!("{} {} vs {}: p = {}", t.label, t.model_a, t.model_b, t.p_value().map_or("n/a".into(), |p| format!("{p:.4e}")));
            }
        }
        Command::Exp4 => {
            let r = experiments::run_exp4(&cfg)?;
            for row in &r.sweep {
                println!("p = {:.2}: {} Dice {:.4} ± {:.4}", row.probability, r.removed_class, row.mean, row.std);
            }
            if let Some(b) = &r.benchmark {
                println!("fully labelled: {:.4} ± {:.4}", b.mean, b.std);
            }
            if let Some(t) = &r.wilcoxon {
                println!("Wilcoxon p=0.5 vs p=0: p = {}", t.p_value().map_or("n/a".into(), |p| format!("{p:.4e}")));
            }
        }
        Command::Final => {
            let r = experiments::run_final(&cfg)?;
            print!("{}", r.table_csv());
            for t in &r.tests {
                println!("{}: p = {}", t.label, t.p_value().map_or("n/a".into(), |p| format!("{p:.4e}")));
            }
        }
        Command::Plot { dir } => {
            for p in experiments::replot(&dir)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Divergence { .. } => 3,
        Error::Io { .. } | Error::Image { .. } => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
