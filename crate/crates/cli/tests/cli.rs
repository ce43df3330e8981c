use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
image_size = 32
samples_per_domain = 20
seeds = [1]
domains = ["camus_like"]

[train]
epochs = 2
batch_size = 4

[train.model]
depth = 2
base_channels = 4
"#;

fn labeldrop(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_labeldrop")).args(args).current_dir(dir).output().expect("binary runs")
}

fn tiny_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("tiny.toml");
    std::fs::write(&path, format!("{TINY}{extra}")).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn show_config_applies_flag_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let out = labeldrop(&["show-config", "--epochs", "7", "--seed", "9", "--dropout-prob", "0.3"], dir.path());
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("epochs = 7"));
    assert!(text.contains("seeds = [9]"));
    assert!(text.contains("dropout_probability = 0.3"));
}

#[test]
fn invalid_config_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "");
    let out = labeldrop(&["show-config", "--config", &cfg, "--image-size", "30"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    std::fs::write(dir.path().join("bad.toml"), "no_such_field = 1\n").unwrap();
    let out = labeldrop(&["show-config", "--config", "bad.toml"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gen_data_train_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "");
    let out = labeldrop(&["gen-data", "--config", &cfg, "--out", "o"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let data = dir.path().join("o/data/camus_like");
    for part in ["train", "val", "test"] {
        assert!(data.join(part).is_dir());
    }

    let train = data.join("train");
    let out = labeldrop(&["train", "--config", &cfg, "--out", "o", "--data", train.to_str().unwrap(), "--dropout-prob", "0.5"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = dir.path().join("o/train/model-1");
    for f in ["manifest.json", "checkpoint.ldck", "metrics.csv", "metrics.json"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }

    let test = data.join("test");
    let ckpt = run.join("checkpoint.ldck");
    let out = labeldrop(&["evaluate", "--config", &cfg, "--out", "e", "--checkpoint", ckpt.to_str().unwrap(), "--data", test.to_str().unwrap()], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("e/metrics.csv")).unwrap();
    assert!(csv.starts_with("domain_id,sample_id,class,dice"));
}

#[test]
fn divergence_exits_with_its_own_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "");
    let cfg = std::fs::read_to_string(&cfg).unwrap().replace("epochs = 2", "epochs = 2\nlearning_rate = 1e30");
    std::fs::write(dir.path().join("div.toml"), cfg).unwrap();
    let out = labeldrop(&["train", "--config", "div.toml", "--out", "o"], dir.path());
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("o/train/model-1/manifest.json").is_file());
}

#[test]
fn exp3_then_plot() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "\n[exp3]\nsamples = 20\n");
    let out = labeldrop(&["exp3", "--config", &cfg, "--out", "o"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("benchmark") && text.contains("adaptive"));
    let out = labeldrop(&["plot", "o/exp3"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
