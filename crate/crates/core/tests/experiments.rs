use std::fs;
use std::path::{Path, PathBuf};

use msatl::data::{Role, SplitSpec};
use msatl::experiments::{
    domains_toml, gen_synthetic_detailed, load_domains, plot_trends, prepare, read_sweep_csv, run, sweep_alpha_lambda,
    sweep_unlabeled, write_synthetic, ExperimentConfig, Mode, SyntheticSpec, OUTPUT_ENV,
};
use msatl::metrics::{evaluate, read_metric_csv, EvalOptions};
use msatl::network::load_checkpoint;
use msatl::Error;

/// Small enough that a full run takes well under a second.
fn quick(out: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.output_dir = out.to_path_buf();
    c.synthetic = Some(SyntheticSpec::limited_similarity(16, 20, 6));
    c.split = SplitSpec { train_frac: 0.5, val_frac: 0.2, test_frac: 0.3, unlabeled_frac: 0.5, seed: 0 };
    c.net.base_width = 4;
    c.net.norm_groups = 2;
    c.net.depth = 2;
    c.net.classifier_hidden = [4, 4];
    c.train.epochs = 2;
    c.train.n_sb = 4;
    c
}

const CONFIG: &str = r#"
seed = 3
output_dir = "runs/thyroid"
mode = { kind = "single-source-adversarial", source = 2 }
precision = "f64"
sweep = [0.0, 0.5, 0.9]
alpha_lambda = [[1.0, 1.0], [0.5, 2.0]]

[[domains]]
name = "target"
path = "data/target"
role = "target"

[[domains]]
name = "a"
path = "data/a"
role = { source = 1 }

[[domains]]
name = "b"
path = "data/b"
role = { source = 2 }
layout = { kind = "paired-mask-files" }

[split]
unlabeled_frac = 0.9

[net]
base_width = 16

[train]
epochs = 5
n_sb = 8
final_learning_rate = 1e-4
"#;

#[test]
fn config_parses_and_round_trips() {
    let c = ExperimentConfig::from_toml_str(CONFIG).unwrap();
    assert_eq!(c.seed, 3);
    assert_eq!(c.mode, Mode::SingleSourceAdversarial { source: 2 });
    assert_eq!(c.domains.iter().map(|d| d.role).collect::<Vec<_>>(), [Role::Target, Role::Source(1), Role::Source(2)]);
    assert_eq!((c.split.unlabeled_frac, c.split.train_frac), (0.9, SplitSpec::default().train_frac));
    assert_eq!((c.net.base_width, c.train.epochs, c.train.n_sb), (16, 5, 8));
    assert_eq!(c.alpha_lambda.as_deref(), Some(&[(1.0, 1.0), (0.5, 2.0)][..]));
    c.validate().unwrap();
    assert_eq!(ExperimentConfig::from_toml_str(&c.to_toml().unwrap()).unwrap(), c);

    let r = c.resolved().unwrap();
    assert_eq!((r.net.n_sources, r.split.seed, r.train.seed), (1, 3, 3));

    let err = ExperimentConfig::from_toml_str("[train]\nepochs = \"many\"").unwrap_err();
    assert!(matches!(err, Error::Toml(_)), "{err:?}");
}

#[test]
fn output_env_overrides_config() {
    let mut c = ExperimentConfig::from_toml_str(CONFIG).unwrap();
    std::env::set_var(OUTPUT_ENV, "/tmp/elsewhere");
    c.apply_env();
    std::env::remove_var(OUTPUT_ENV);
    assert_eq!(c.output_dir, PathBuf::from("/tmp/elsewhere"));
    let mut d = ExperimentConfig::from_toml_str(CONFIG).unwrap();
    d.apply_env();
    assert_eq!(d.output_dir, PathBuf::from("runs/thyroid"));
}

#[test]
fn mode_and_role_validation() {
    let dir = tempfile::tempdir().unwrap();
    let base = quick(dir.path());
    let with_mode = |mode| ExperimentConfig { mode, ..base.clone() };
    assert!(with_mode(Mode::SingleSourceAdversarial { source: 3 }).validate().is_err());
    assert!(with_mode(Mode::SingleSourceAdversarial { source: 0 }).validate().is_err());
    with_mode(Mode::SingleSourceAdversarial { source: 2 }).validate().unwrap();

    let mut gap = base.clone();
    gap.synthetic.as_mut().unwrap().domains[2].role = Role::Source(3);
    assert!(gap.validate().is_err());
    let mut two_targets = base.clone();
    two_targets.synthetic.as_mut().unwrap().domains[1].role = Role::Target;
    assert!(two_targets.validate().is_err());
    let mut no_sources = base.clone();
    no_sources.synthetic.as_mut().unwrap().domains.truncate(1);
    assert!(no_sources.validate().is_err());
    ExperimentConfig { mode: Mode::TargetOnly, ..no_sources }.validate().unwrap();

    let mtl = with_mode(Mode::MultiTaskNoAdversarial).resolved().unwrap();
    assert_eq!((mtl.train.lambda, mtl.net.n_sources), (0.0, 2));
}

#[test]
fn prepare_splits_and_renumbers() {
    let dir = tempfile::tempdir().unwrap();
    let c = ExperimentConfig { mode: Mode::SingleSourceAdversarial { source: 2 }, ..quick(dir.path()) }.resolved().unwrap();
    let d = prepare(&c).unwrap();
    assert_eq!((d.train.len(), d.val.len(), d.test.len()), (10, 4, 6));
    assert_eq!(d.train.n_labeled(), 5);
    assert_eq!(d.sources.len(), 1);
    assert_eq!(d.sources[0].role, Role::Source(1));
    assert!(d.sources[0].samples.iter().all(|s| s.domain_id == 1 && s.sample_id.starts_with("source2")));
}

#[test]
fn run_writes_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&quick(dir.path())).unwrap();
    for f in ["manifest.toml", "history.csv", "metrics.csv", "best.ckpt.json", "last.ckpt.json"] {
        assert!(dir.path().join(f).is_file(), "{f} missing");
    }
    let manifest = ExperimentConfig::from_file(&dir.path().join("manifest.toml")).unwrap();
    assert_eq!(manifest, out.config);
    assert_eq!(manifest.net.n_sources, 2);

    let history = fs::read_to_string(dir.path().join("history.csv")).unwrap();
    assert_eq!(history, out.history.to_csv());
    assert_eq!(history.lines().count(), 3);

    let back = read_metric_csv(&dir.path().join("metrics.csv")).unwrap();
    assert_eq!(back, out.test.per_image);
    assert_eq!(back.len(), 6);

    let (best, meta) = load_checkpoint::<f32>(&dir.path().join("best.ckpt.json")).unwrap();
    assert_eq!(meta["best_epoch"], serde_json::json!(out.history.best_epoch));
    let data = prepare(&out.config).unwrap();
    assert_eq!(evaluate(&best, &data.test, &EvalOptions::default()).unwrap(), out.test);
}

#[test]
fn target_only_uses_one_subnet_and_the_source_step_budget() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&ExperimentConfig { mode: Mode::TargetOnly, ..quick(dir.path()) }).unwrap();
    assert_eq!((out.config.net.n_sources, out.config.train.lambda), (1, 0.0));
    // six samples per source, two source items per sub-batch
    assert!(out.history.epochs.iter().all(|e| e.steps == 3));
    for e in &out.history.epochs {
        assert_eq!(e.losses.source_seg, 0.0);
        assert!(e.losses.target_seg > 0.0);
        assert!((e.losses.total - out.config.train.alpha * e.losses.target_seg).abs() < 1e-12);
    }
}

#[test]
fn unlabeled_sweep_rows_and_plot() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = quick(dir.path());
    c.train.epochs = 1;
    c.sweep = Some(vec![0.5, 0.0, 0.5]);
    let rows = sweep_unlabeled(&c).unwrap();
    assert_eq!(rows.iter().map(|r| r.0).collect::<Vec<_>>(), [0.0, 0.5]);
    assert!(dir.path().join("frac-0.0/metrics.csv").is_file() && dir.path().join("frac-0.5/metrics.csv").is_file());

    let csv = fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "fraction,metric,mean,std");
    assert_eq!(lines.len(), 1 + 2 * 4);
    assert!(lines[1].starts_with("0.0,iou,") && lines[8].starts_with("0.5,f05,"));

    let series = read_sweep_csv(&dir.path().join("sweep.csv")).unwrap();
    assert_eq!(series.fractions(), [0.0, 0.5]);
    assert!((series.metrics[1][1].1 - rows[1].1.dice()).abs() < 5e-4);

    let copy = dir.path().join("other/sweep.csv");
    fs::create_dir_all(copy.parent().unwrap()).unwrap();
    fs::copy(dir.path().join("sweep.csv"), &copy).unwrap();
    let plot_dir = dir.path().join("plot");
    let summary = plot_trends(&[dir.path().join("sweep.csv"), copy], &plot_dir).unwrap();
    assert_eq!((summary.panels, summary.lines_per_panel), (4, 2));
    assert_eq!(summary.x_ticks, [0.0, 0.5]);
    let svg = fs::read_to_string(plot_dir.join("trends.svg")).unwrap();
    assert!(svg.starts_with("<svg") || svg.contains("<svg"));
    for title in ["IoU", "Dice", "F2", "F0.5"] {
        assert!(svg.contains(title), "panel {title} missing");
    }

    c.sweep = Some(vec![0.25]);
    assert!(sweep_unlabeled(&c).is_err());
}

#[test]
fn malformed_sweep_csv_names_the_row() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sweep.csv");
    fs::write(&path, "fraction,metric,mean,std\n0.0,iou,50.0,1.0\n0.0,dice,abc,1.0\n").unwrap();
    match read_sweep_csv(&path) {
        Err(Error::Csv { row, reason, .. }) => {
            assert_eq!(row, 3);
            assert!(reason.contains("abc"));
        }
        other => panic!("expected a row error, got {other:?}"),
    }
    fs::write(&path, "fraction,metric,mean\n").unwrap();
    assert!(matches!(read_sweep_csv(&path), Err(Error::Csv { row: 1, .. })));
    fs::write(&path, "fraction,metric,mean,std\n0.0,jaccard,1,1\n").unwrap();
    assert!(matches!(read_sweep_csv(&path), Err(Error::Csv { row: 2, .. })));
}

#[test]
fn alpha_lambda_groups() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = quick(dir.path());
    c.train.epochs = 1;
    let groups = sweep_alpha_lambda(&c, &[(1.0, 1.0), (0.5, 0.0)]).unwrap();
    assert_eq!(groups.iter().map(|g| (g.group, g.alpha, g.lambda)).collect::<Vec<_>>(), [(1, 1.0, 1.0), (2, 0.5, 0.0)]);
    let m = ExperimentConfig::from_file(&dir.path().join("group-2/frac-0.5/manifest.toml")).unwrap();
    assert_eq!((m.train.alpha, m.train.lambda), (0.5, 0.0));
    let csv = fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "group,alpha,lambda,fraction,metric,mean,std");
    assert_eq!(lines.len(), 1 + 2 * 4);
    assert!(lines[5].starts_with("2,0.5,0,0.5,iou,"));
    assert!(sweep_alpha_lambda(&c, &[]).is_err());
    assert!(sweep_alpha_lambda(&c, &[(-1.0, 1.0)]).is_err());
}

#[test]
fn synthetic_domains_survive_disk_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec::limited_similarity(16, 5, 4);
    let specs = write_synthetic(&spec, 11, dir.path()).unwrap();
    assert_eq!(specs.len(), 3);
    let toml_text = domains_toml(&specs).unwrap();
    let mut config = ExperimentConfig::from_toml_str(&toml_text).unwrap();
    assert_eq!(config.domains, specs);
    config.load.resolution = None;

    let loaded = load_domains(&config).unwrap();
    let generated = gen_synthetic_detailed(&spec, 11).unwrap();
    for (disk, mem) in loaded.iter().zip(&generated) {
        assert_eq!(disk.role, mem.dataset.role);
        assert_eq!(disk.len(), mem.dataset.len());
        for ((a, b), shape) in disk.samples.iter().zip(&mem.dataset.samples).zip(&mem.shapes) {
            assert_eq!(a.sample_id, b.sample_id);
            assert_eq!(a.mask, b.mask);
            assert_eq!(a.mask.as_ref().unwrap(), &shape.rasterize(16, 16));
            let worst = a.image.pixels.iter().zip(&b.image.pixels).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
            assert!(worst <= 0.5 / 255.0 + 1e-6, "{worst}");
        }
    }
}

#[test]
fn ablation_manifests_differ_only_where_expected() {
    let dir = tempfile::tempdir().unwrap();
    let base = quick(dir.path());
    let multi = base.resolved().unwrap();
    let mut plain = ExperimentConfig { mode: Mode::NoIndependence, ..base.clone() }.resolved().unwrap();
    assert_ne!(plain.train.sampler, multi.train.sampler);
    plain.mode = multi.mode;
    plain.train.sampler = multi.train.sampler;
    assert_eq!(plain.to_toml().unwrap(), multi.to_toml().unwrap());
}

#[test]
fn target_only_parameter_count() {
    use msatl::network::{build_model, Component};
    let dir = tempfile::tempdir().unwrap();
    let base = quick(dir.path());
    let only = ExperimentConfig { mode: Mode::TargetOnly, ..base.clone() }.resolved().unwrap();
    let two = build_model::<f32>(&base.resolved().unwrap().net, 0).unwrap();
    let one = build_model::<f32>(&only.net, 0).unwrap();
    let sub_network = two.store.numel_where(|k| k.source == Some(1));
    let target = two.store.numel_where(|k| k.component == Component::TargetDecoder);
    assert_eq!(one.store.numel(), sub_network + target);
}
