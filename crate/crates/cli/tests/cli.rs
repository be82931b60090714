use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn msatl(args: &[&str], env: &[(&str, &Path)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_msatl"));
    cmd.args(args).env_remove("MSATL_OUTPUT");
    for (k, v) in env {
        cmd.env(k, v);
    }
    let out = cmd.output().expect("spawn msatl");
    assert!(
        out.status.success(),
        "msatl {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

const SETTINGS: &str = r#"
[load]
resolution = [16, 16]

[split]
train_frac = 0.5
val_frac = 0.2
test_frac = 0.3
unlabeled_frac = 0.5

[net]
base_width = 4
norm_groups = 2
depth = 2
classifier_hidden = [4, 4]

[train]
epochs = 2
n_sb = 4
"#;

#[test]
fn synth_prepare_train_evaluate_sweep_plot() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = root.join("data");
    let out = msatl(
        &["synth", "--size", "16", "--target-samples", "20", "--source-samples", "6", "--out", data.to_str().unwrap()],
        &[],
    );
    assert!(String::from_utf8_lossy(&out.stdout).contains("[[domains]]"));
    assert!(data.join("target/masks").is_dir());

    let domains = fs::read_to_string(data.join("domains.toml")).unwrap();
    let config = root.join("exp.toml");
    fs::write(&config, format!("output_dir = \"unused\"\nsweep = [0.0, 0.5]\n{domains}{SETTINGS}")).unwrap();
    let cfg = config.to_str().unwrap();

    let prep = root.join("prep");
    msatl(&["prepare", "--config", cfg, "--out", prep.to_str().unwrap()], &[]);
    let split = fs::read_to_string(prep.join("split.csv")).unwrap();
    assert_eq!(split.lines().count(), 21);
    assert_eq!(split.lines().filter(|l| l.ends_with(",test,1")).count(), 6);

    // MSATL_OUTPUT replaces the configured directory; --out would win over it.
    let run = root.join("run");
    msatl(&["train", "--config", cfg, "--seed", "4"], &[("MSATL_OUTPUT", &run)]);
    for f in ["history.csv", "metrics.csv", "manifest.toml", "best.ckpt.json"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    assert!(fs::read_to_string(run.join("manifest.toml")).unwrap().contains("seed = 4"));

    let eval = root.join("eval");
    msatl(
        &["evaluate", "--config", cfg, "--seed", "4", "--out", eval.to_str().unwrap(), "--checkpoint", run.join("best.ckpt.json").to_str().unwrap()],
        &[],
    );
    assert_eq!(fs::read(eval.join("metrics.csv")).unwrap(), fs::read(run.join("metrics.csv")).unwrap());

    let sweep = root.join("sweep");
    msatl(&["sweep", "--config", cfg, "--out", sweep.to_str().unwrap()], &[]);
    assert_eq!(fs::read_to_string(sweep.join("sweep.csv")).unwrap().lines().count(), 9);

    let plot = root.join("plot");
    let out = msatl(&["plot", sweep.join("sweep.csv").to_str().unwrap(), "--out", plot.to_str().unwrap()], &[]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("4 panels"));
    assert!(plot.join("trends.svg").is_file());
}

#[test]
fn bad_config_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "mode = { kind = \"single-source-adversarial\", source = 5 }\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_msatl"))
        .args(["train", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}
