//! Acceptance gate: one PASS/FAIL line per criterion, nonzero exit if any fails.
//!
//! Criteria 5 to 7 train the desk-scale experiments and take most of the runtime.

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

use std::collections::HashSet;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use labeldrop::dropout::{apply_label_dropout, DropoutConfig, DropoutDraw};
use labeldrop::experiments::{self, dropout_run_name, ExperimentConfig, Exp2Model};
use labeldrop::losses::{loss, loss_and_grad, LossKind};
use labeldrop::metrics::wilcoxon::{average_ranks, wilcoxon_signed_rank};
use labeldrop::metrics::{class_dice, dice};
use labeldrop::nn::Tensor;
use labeldrop::synth::{generate_full_dataset, DomainSpec};
use labeldrop::trainer::RunManifest;
use labeldrop::{Grid, LabelMap, PresenceVector};

const EQUIVALENCE_TOL: f64 = 1e-9;
const FD_STEP: f64 = 1e-5;
const FD_REL_TOL: f64 = 1e-4;
const SWAP_TOL: f64 = 1e-12;
const DICE_TOL: f64 = 1e-12;
const EXP3_FG_GAP: f64 = 0.03;
const EXP3_LVM_MARGIN: f64 = 0.05;
const EXP2_PARTIAL_MAX: f64 = 0.1;
const EXP2_LV_MIN: f64 = 0.8;
const EXP4_MARGIN: f64 = 0.05;
const EXP4_PLATEAU: f64 = 0.1;
const EXP4_ALPHA: f64 = 0.05;

type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

/// Random logits, targets and presence vectors; targets avoid missing classes.
fn random_instance(rng: &mut ChaCha8Rng, shape: [usize; 4], all_present: bool) -> (Tensor<f64>, Vec<LabelMap>, Vec<PresenceVector>) {
    let [b, c, h, w] = shape;
    let logits = Tensor::from_vec(shape, (0..b * c * h * w).map(|_| rng.random_range(-4.0..4.0)).collect()).unwrap();
    let mut targets = Vec::new();
    let mut presence = Vec::new();
    for _ in 0..b {
        let flags: Vec<bool> = (0..c - 1).map(|_| all_present || rng.random_bool(0.5)).collect();
        let allowed: Vec<u8> = std::iter::once(0).chain((1..c).filter(|&j| flags[j - 1]).map(|j| j as u8)).collect();
        targets.push(Grid::from_vec(h, w, (0..h * w).map(|_| allowed[rng.random_range(0..allowed.len())]).collect()).unwrap());
        presence.push(PresenceVector::new(flags));
    }
    (logits, targets, presence)
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let shape = [rng.random_range(1..=3), 4, rng.random_range(1..=6), rng.random_range(1..=6)];
        let (z, t, p) = random_instance(&mut rng, shape, true);
        let s = loss(LossKind::Standard, &z, &t, &p).unwrap();
        for k in [LossKind::Adaptive, LossKind::Marginal] {
            worst = worst.max((loss(k, &z, &t, &p).unwrap() - s).abs());
        }
    }
    outcome(worst < EQUIVALENCE_TOL, format!("max |partial − standard| = {worst:.2e} over 1000 instances (tol {EQUIVALENCE_TOL:e})"))
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    let mut leaked = 0usize;
    for trial in 0..30 {
        let (z, t, p) = random_instance(&mut rng, [2, 4, 4, 4], trial % 3 == 0);
        for kind in LossKind::ALL {
            let (_, g) = loss_and_grad(kind, &z, &t, &p).unwrap();
            for i in 0..z.as_slice().len() {
                let mut plus = z.clone();
                plus.as_mut_slice()[i] += FD_STEP;
                let mut minus = z.clone();
                minus.as_mut_slice()[i] -= FD_STEP;
                let fd = (loss(kind, &plus, &t, &p).unwrap() - loss(kind, &minus, &t, &p).unwrap()) / (2.0 * FD_STEP);
                let a = g.as_slice()[i];
                worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-6));
            }
            if kind == LossKind::Adaptive {
                for (n, pv) in p.iter().enumerate() {
                    for c in pv.missing() {
                        leaked += g.item(n)[(c + 1) * 16..(c + 2) * 16].iter().filter(|&&v| v != 0.0).count();
                    }
                }
            }
        }
    }
    outcome(
        worst < FD_REL_TOL && leaked == 0,
        format!("max relative error {worst:.2e} (tol {FD_REL_TOL:e}); non-zero adaptive gradients on missing channels: {leaked}"),
    )
}

fn criterion_3() -> Outcome {
    let mut worst: f64 = 0.0;
    // instances without a missing class are redrawn
    let mut checked = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    while checked < 100 {
        let (z, t, p) = random_instance(&mut rng, [1, 4, 5, 5], false);
        let Some(c) = p[0].missing().next() else {
            continue;
        };
        let mut swapped = z.clone();
        let data = swapped.as_mut_slice();
        for i in 0..25 {
            data.swap(i, (c + 1) * 25 + i);
        }
        worst = worst.max((loss(LossKind::Marginal, &z, &t, &p).unwrap() - loss(LossKind::Marginal, &swapped, &t, &p).unwrap()).abs());
        checked += 1;
    }
    outcome(worst < SWAP_TOL, format!("max change under background/missing swap {worst:.2e} over 100 instances (tol {SWAP_TOL:e})"))
}

fn criterion_4() -> Outcome {
    let started = Instant::now();
    let sample = generate_full_dataset(&DomainSpec::preset("camus_like", 32).unwrap(), 1, 4).unwrap().remove(0);
    let n = 10_000usize;
    let half = DropoutConfig::new(0.5, [0, 1, 2]);
    let mut drops = 0usize;
    let mut per_class = [0usize; 3];
    for i in 0..n {
        let out = apply_label_dropout(&sample, &half, DropoutDraw::keyed(99, i / 100, &format!("s{}", i % 100)));
        let dropped = out.presence.missing().next();
        if let Some(c) = dropped {
            drops += 1;
            per_class[c] += 1;
        }
    }
    // 99.9% two-sided normal interval for Binomial(n, 0.5)
    let z = 3.290_526_731_491_926;
    let sd = (n as f64 * 0.25).sqrt();
    let freq_ok = (drops as f64 - n as f64 * 0.5).abs() <= z * sd;
    let csd = (drops as f64 * (1.0 / 3.0) * (2.0 / 3.0)).sqrt();
    let uniform_ok = per_class.iter().all(|&k| (k as f64 - drops as f64 / 3.0).abs() <= 3.0 * csd);

    let zero = DropoutConfig::new(0.0, [0, 1, 2]);
    let identity = (0..n).all(|i| apply_label_dropout(&sample, &zero, DropoutDraw::keyed(5, i, "x")) == sample);
    let one = DropoutConfig::new(1.0, [2]);
    let always = (0..n).all(|i| {
        let out = apply_label_dropout(&sample, &one, DropoutDraw::keyed(6, i, "x"));
        !out.presence.is_present(2) && out.labels.as_slice().iter().all(|&v| v != 3)
    });
    let fast = started.elapsed().as_secs_f64() < 10.0;
    outcome(
        freq_ok && uniform_ok && identity && always && fast,
        format!(
            "{drops}/{n} drops (99.9% interval ±{:.0}), per-class {per_class:?}, p=0 identity {identity}, p=1 always drops {always}, {:.1}s",
            z * sd,
            started.elapsed().as_secs_f64()
        ),
    )
}

fn desk_config(out: &std::path::Path) -> ExperimentConfig {
    ExperimentConfig { out: out.to_path_buf(), ..ExperimentConfig::default() }
}

fn criterion_5(out: &std::path::Path) -> Outcome {
    let started = Instant::now();
    let r = match experiments::run_exp3(&desk_config(out)) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("exp3 failed: {e}")),
    };
    let per_seed: Vec<String> = r
        .seeds()
        .iter()
        .map(|&s| {
            let fg = |m: &str| r.run(m, s).and_then(|x| x.report.foreground_mean(&r.domain)).unwrap_or(f64::NAN);
            let lvm = |m: &str| r.run(m, s).map(|x| x.class_mean(&r.domain, "LVM")).unwrap_or(f64::NAN);
            format!("seed {s}: fg {:.3}/{:.3}/{:.3} LVM std {:.3} adapt {:.3}", fg("benchmark"), fg("standard"), fg("adaptive"), lvm("standard"), lvm("adaptive"))
        })
        .collect();
    let gap = (r.mean_foreground("adaptive") - r.mean_foreground("benchmark")).abs();
    let margin = r.class_mean("adaptive", "LVM") - r.class_mean("standard", "LVM");
    outcome(
        gap <= EXP3_FG_GAP && margin >= EXP3_LVM_MARGIN,
        format!(
            "fg benchmark {:.3}, standard {:.3}, adaptive {:.3} (|gap| {gap:.3} ≤ {EXP3_FG_GAP}); LVM adaptive − standard {margin:.3} ≥ {EXP3_LVM_MARGIN}; {}; {:.0}s",
            r.mean_foreground("benchmark"),
            r.mean_foreground("standard"),
            r.mean_foreground("adaptive"),
            per_seed.join("; "),
            started.elapsed().as_secs_f64()
        ),
    )
}

fn criterion_6(out: &std::path::Path) -> Outcome {
    let started = Instant::now();
    let mut cfg = desk_config(out);
    cfg.seeds = vec![0];
    cfg.exp2.models = vec![Exp2Model::StandardAug];
    let r = match experiments::run_exp2(&cfg) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("exp2 failed: {e}")),
    };
    let d = r.lv_only_domain.clone();
    let (lv, lvm, la) = (r.mean("standard-aug", &d, "LV"), r.mean("standard-aug", &d, "LVM"), r.mean("standard-aug", &d, "LA"));
    outcome(
        lvm < EXP2_PARTIAL_MAX && la < EXP2_PARTIAL_MAX && lv > EXP2_LV_MIN,
        format!("standard loss on {d}: LV {lv:.3} (> {EXP2_LV_MIN}), LVM {lvm:.3}, LA {la:.3} (< {EXP2_PARTIAL_MAX}); {:.0}s", started.elapsed().as_secs_f64()),
    )
}

fn criterion_7(out: &std::path::Path) -> Outcome {
    let started = Instant::now();
    let mut cfg = desk_config(out);
    cfg.exp4.benchmark = false;
    let r = match experiments::run_exp4(&cfg) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("exp4 failed: {e}")),
    };
    let base = r.row(0.0).map(|x| x.mean).unwrap_or(f64::NAN);
    let mid: Vec<f64> = (1..=9).filter_map(|i| r.row(i as f64 / 10.0).map(|x| x.mean)).collect();
    let min = mid.iter().copied().fold(f64::INFINITY, f64::min);
    let max = mid.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let p = r.wilcoxon.as_ref().and_then(|t| t.p_value()).unwrap_or(f64::NAN);
    let rows: Vec<String> = r.sweep.iter().map(|x| format!("{:.1}:{:.3}", x.probability, x.mean)).collect();
    outcome(
        mid.len() == 9 && min - base >= EXP4_MARGIN && p < EXP4_ALPHA && max - min < EXP4_PLATEAU,
        format!(
            "LA Dice by p [{}]; min(0.1–0.9) − p0 = {:.3} (≥ {EXP4_MARGIN}); Wilcoxon p = {p:.2e} (< {EXP4_ALPHA}); plateau spread {:.3} (< {EXP4_PLATEAU}); {:.0}s",
            rows.join(" "),
            min - base,
            max - min,
            started.elapsed().as_secs_f64()
        ),
    )
}

fn criterion_8(out: &std::path::Path) -> Outcome {
    let mut cfg = desk_config(out);
    cfg.image_size = 32;
    cfg.samples_per_domain = 30;
    cfg.seeds = vec![4];
    cfg.train.epochs = 3;
    cfg.exp4.epochs = 3;
    cfg.train.model.depth = 2;
    cfg.train.augment = None;
    cfg.exp4.probabilities = vec![0.5];
    cfg.exp4.benchmark = false;
    let run = |sub: &str| -> labeldrop::Result<(Vec<u8>, RunManifest)> {
        let c = ExperimentConfig { out: out.join(sub), ..cfg.clone() };
        experiments::run_exp4(&c)?;
        let dir = c.out.join("exp4").join(format!("{}-4", dropout_run_name(0.5)));
        let csv = std::fs::read(dir.join("metrics.csv")).map_err(|e| labeldrop::Error::Io { path: dir.clone(), source: e })?;
        let m = RunManifest::from_json(&std::fs::read_to_string(dir.join("manifest.json")).unwrap())?;
        Ok((csv, m))
    };
    match (run("a"), run("b")) {
        (Ok((a, ma)), Ok((b, mb))) => {
            let replayed = experiments::reevaluate(&out.join("a").join("exp4")).ok().and_then(|m| m.values().next().cloned());
            let replay_ok = replayed.as_deref().map(str::as_bytes) == Some(a.as_slice());
            let same_manifest = ma.without_timing() == mb.without_timing();
            outcome(
                a == b && same_manifest && replay_ok,
                format!("metrics.csv byte-equal {}, manifests equal {same_manifest}, checkpoint re-evaluation byte-equal {replay_ok} ({} bytes)", a == b, a.len()),
            )
        }
        (Err(e), _) | (_, Err(e)) => outcome(false, format!("run failed: {e}")),
    }
}

fn enumerate_p(ranks: &[f64], w_plus: f64) -> f64 {
    let n = ranks.len();
    let (mut le, mut ge) = (0u64, 0u64);
    for mask in 0u64..(1 << n) {
        let s: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
        le += (s <= w_plus + 1e-9) as u64;
        ge += (s >= w_plus - 1e-9) as u64;
    }
    (2.0 * le.min(ge) as f64 / (1u64 << n) as f64).min(1.0)
}

fn criterion_9() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut mismatches = 0;
    let mut checked = 0;
    for _ in 0..500 {
        let n = rng.random_range(6..=12);
        // small integer magnitudes so ties are common
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(-6i32..=6) as f64).collect();
        let b = vec![0.0; n];
        let Ok(r) = wilcoxon_signed_rank(&a, &b) else {
            continue;
        };
        let nz: Vec<f64> = a.iter().copied().filter(|v| *v != 0.0).collect();
        let ranks = average_ranks(&nz.iter().map(|v| v.abs()).collect::<Vec<_>>());
        let w_plus: f64 = ranks.iter().zip(&nz).filter(|(_, v)| **v > 0.0).map(|(r, _)| r).sum();
        checked += 1;
        if r.p_value != enumerate_p(&ranks, w_plus) || r.w_plus != w_plus {
            mismatches += 1;
        }
    }
    let ta = [125.0, 115.0, 130.0, 140.0, 140.0, 115.0, 140.0, 125.0, 140.0, 135.0];
    let tb = [110.0, 122.0, 125.0, 120.0, 140.0, 124.0, 123.0, 137.0, 135.0, 145.0];
    let t = wilcoxon_signed_rank(&ta, &tb).unwrap();
    outcome(
        mismatches == 0 && checked >= 100 && t.statistic == 9.0 && t.n == 9,
        format!("{checked} random cases, {mismatches} p-value mismatches vs enumeration; textbook W = {} (n = {}, exact p = {:.4})", t.statistic, t.n, t.p_value),
    )
}

fn criterion_10() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let (h, w) = (rng.random_range(1..=24), rng.random_range(1..=24));
        let density = rng.random_range(0.0..1.0);
        let a: Vec<bool> = (0..h * w).map(|_| rng.random_bool(density)).collect();
        let b: Vec<bool> = (0..h * w).map(|_| rng.random_bool(density)).collect();
        let sa: HashSet<usize> = (0..h * w).filter(|&i| a[i]).collect();
        let sb: HashSet<usize> = (0..h * w).filter(|&i| b[i]).collect();
        let oracle = if sa.is_empty() && sb.is_empty() { 1.0 } else { 2.0 * sa.intersection(&sb).count() as f64 / (sa.len() + sb.len()) as f64 };
        let got = dice(&Grid::from_vec(h, w, a.clone()).unwrap(), &Grid::from_vec(h, w, b.clone()).unwrap()).unwrap();
        let la = Grid::from_vec(h, w, a.iter().map(|&v| v as u8 * 2).collect()).unwrap();
        let lb = Grid::from_vec(h, w, b.iter().map(|&v| v as u8 * 2).collect()).unwrap();
        let via_labels = class_dice(&la, &lb, 2).unwrap();
        worst = worst.max((got - oracle).abs()).max((via_labels - oracle).abs());
    }
    outcome(worst < DICE_TOL, format!("max |dice − set-count oracle| = {worst:.2e} over 1000 pairs (tol {DICE_TOL:e})"))
}

fn main() {
    let work = tempfile::tempdir().expect("temporary directory");
    let root = work.path();
    let criteria: Vec<Criterion> = vec![
        ("loss equivalence", Box::new(criterion_1)),
        ("gradient correctness", Box::new(criterion_2)),
        ("marginal swap symmetry", Box::new(criterion_3)),
        ("label-dropout statistics", Box::new(criterion_4)),
        ("exp3 analog", Box::new(|| criterion_5(&root.join("c5")))),
        ("exp2 shortcut analog", Box::new(|| criterion_6(&root.join("c6")))),
        ("exp4 analog", Box::new(|| criterion_7(&root.join("c7")))),
        ("determinism", Box::new(|| criterion_8(&root.join("c8")))),
        ("wilcoxon oracle", Box::new(criterion_9)),
        ("dice oracle", Box::new(criterion_10)),
    ];
    let filter: Vec<usize> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect())
        .unwrap_or_default();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let id = i + 1;
        if !filter.is_empty() && !filter.contains(&id) {
            continue;
        }
        let o = f();
        println!("criterion {id:>2} [{}] {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += !o.pass as usize;
    }
    drop(criteria);
    drop(work);
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
