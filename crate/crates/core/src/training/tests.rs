use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::{Image, Mask, Role, Sample};
use crate::network::{build_model, Component, NetConfig};
use crate::sampling::{materialize, Batch, SubBatch};

fn tiny_net(n: usize) -> NetConfig {
    NetConfig { n_sources: n, base_width: 4, norm_groups: 2, classifier_hidden: [8, 4], ..NetConfig::default() }
}

fn random_domain(name: &str, role: Role, n: usize, hw: usize, rng: &mut ChaCha8Rng) -> DomainDataset {
    let samples = (0..n)
        .map(|i| {
            let img = Image::new(hw, hw, (0..hw * hw).map(|_| rng.random::<f32>()).collect()).unwrap();
            let mask = Mask::new(hw, hw, (0..hw * hw).map(|_| u8::from(rng.random_bool(0.3))).collect()).unwrap();
            Sample::new(format!("{name}{i:03}"), img, Some(mask), role.domain_id()).unwrap()
        })
        .collect();
    DomainDataset::new(name, role, samples).unwrap()
}

fn hide_labels(ds: &mut DomainDataset, every: usize) {
    for (i, s) in ds.samples.iter_mut().enumerate() {
        if i % every == 0 {
            s.labeled = false;
        }
    }
}

fn ids(prefix: &str, range: std::ops::Range<usize>) -> Vec<String> {
    range.map(|i| format!("{prefix}{i:03}")).collect()
}

#[test]
fn domain_loss_values() {
    let ln2 = std::f64::consts::LN_2;
    assert!((domain_loss(0.0f64, 0).unwrap() - ln2).abs() < 1e-15);
    assert!((domain_loss(0.0f64, 1).unwrap() - ln2).abs() < 1e-15);
    assert!(domain_loss(20.0f64, 1).unwrap() < 1e-8);
    assert!(domain_loss(0.0f64, 2).is_err());
    for c in [0.3f64, 2.0, 17.0] {
        let mean = |z: f64| (domain_loss(z, 0).unwrap() + domain_loss(z, 1).unwrap()) / 2.0;
        assert!((mean(c) - mean(-c)).abs() < 1e-12);
    }
}

#[test]
fn saturated_logits_give_tiny_cross_entropy() {
    let mut g = crate::autograd::Graph::<f64>::new();
    let targets = [0u8, 1, 1, 0];
    let logits: Vec<f64> = targets.iter().map(|&t| if t == 0 { 12.0 } else { -12.0 }).chain(targets.iter().map(|&t| if t == 1 { 12.0 } else { -12.0 })).collect();
    let x = g.input(Tensor::from_vec(&[1, 2, 2, 2], logits).unwrap());
    let ce = g.pixel_cross_entropy(x, &targets).unwrap();
    assert!(g.value(ce).data()[0] < 1e-3);
}

use crate::tensor::Tensor;

#[test]
fn unlabeled_target_contributes_only_adversarial() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let model = build_model::<f64>(&tiny_net(2), 1).unwrap();
    let mut t = random_domain("t", Role::Target, 1, 16, &mut rng);
    t.samples[0].labeled = false;
    let l = sample_loss(&model, &t.samples[0], Origin::TargetUnlabeled, &LossConfig::default()).unwrap();
    assert_eq!(l.target_seg, 0.0);
    assert_eq!(l.source_seg, 0.0);
    assert!(l.adversarial > 0.0);
    assert!(sample_loss(&model, &t.samples[0], Origin::TargetLabeled, &LossConfig::default()).is_err());
    assert!(matches!(
        sample_loss(&model, &t.samples[0], Origin::Source(1), &LossConfig::default()),
        Err(Error::MissingMask(_))
    ));
}

#[test]
fn source_sample_never_reaches_target_decoder() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let model = build_model::<f64>(&tiny_net(2), 3).unwrap();
    let s = random_domain("s", Role::Source(2), 1, 16, &mut rng);
    let arr = sample_arrays::<f64>(&s.samples[0], Origin::Source(2), 2).unwrap();
    let mut f = Forward::new(&model);
    let vars = batch_objective(&mut f, std::slice::from_ref(&arr), &LossConfig::default()).unwrap();
    let grads = f.graph.backward(vars.objective).unwrap().params(model.store.len());
    for (key, g) in model.store.keys().iter().zip(&grads) {
        let touched = g.as_ref().is_some_and(|g| g.data().iter().any(|v| *v != 0.0));
        let own = key.source == Some(2);
        assert_eq!(touched, own, "{key:?}");
        if key.component == Component::TargetDecoder {
            assert!(g.is_none());
        }
    }
}

#[test]
fn decomposition_and_special_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let model = build_model::<f64>(&tiny_net(2), 5).unwrap();
    let srcs = [random_domain("a", Role::Source(1), 4, 16, &mut rng), random_domain("b", Role::Source(2), 4, 16, &mut rng)];
    let mut t = random_domain("t", Role::Target, 4, 16, &mut rng);
    hide_labels(&mut t, 2);
    let batch = Batch {
        sub_batches: vec![
            SubBatch { source_index: 1, source_items: ids("a", 0..4), target_items: ids("t", 0..4) },
            SubBatch { source_index: 2, source_items: ids("b", 0..4), target_items: ids("t", 0..4) },
        ],
    };
    let subs = materialize::<f64>(&batch, &srcs, &t).unwrap();
    for cfg in [
        LossConfig::default(),
        LossConfig { alpha: 2.5, lambda: 0.3, target_loss_per_subbatch: false },
        LossConfig { alpha: 0.0, lambda: 0.0, target_loss_per_subbatch: false },
    ] {
        let whole = batch_loss(&model, &subs, &cfg).unwrap();
        let mut parts = LossTerms::default();
        for (i, src) in srcs.iter().enumerate() {
            for s in &src.samples {
                parts += sample_loss(&model, s, Origin::Source(i + 1), &cfg).unwrap();
            }
        }
        for s in &t.samples {
            let o = if s.labeled { Origin::TargetLabeled } else { Origin::TargetUnlabeled };
            parts += sample_loss(&model, s, o, &cfg).unwrap();
        }
        for (a, b) in [
            (whole.source_seg, parts.source_seg),
            (whole.target_seg, parts.target_seg),
            (whole.adversarial, parts.adversarial),
            (whole.total, parts.total),
        ] {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
        let expect = whole.source_seg + cfg.alpha * whole.target_seg - cfg.lambda * whole.adversarial;
        assert!((whole.total - expect).abs() < 1e-12);
    }
    let per_sub = LossConfig { target_loss_per_subbatch: true, ..LossConfig::default() };
    let l = batch_loss(&model, &subs, &per_sub).unwrap();
    assert!((l.total - (l.source_seg + 2.0 * l.target_seg - l.adversarial)).abs() < 1e-12);
}

#[test]
fn dropping_unlabeled_targets_changes_only_adversarial() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let model = build_model::<f64>(&tiny_net(1), 0).unwrap();
    let srcs = [random_domain("a", Role::Source(1), 4, 16, &mut rng)];
    let mut t = random_domain("t", Role::Target, 4, 16, &mut rng);
    hide_labels(&mut t, 2);
    let sb = |targets: Vec<String>| Batch {
        sub_batches: vec![SubBatch { source_index: 1, source_items: ids("a", 0..4), target_items: targets }],
    };
    let cfg = LossConfig::default();
    let full = batch_loss(&model, &materialize::<f64>(&sb(ids("t", 0..4)), &srcs, &t).unwrap(), &cfg).unwrap();
    let kept = vec!["t001".to_string(), "t003".to_string()];
    let reduced = batch_loss(&model, &materialize::<f64>(&sb(kept), &srcs, &t).unwrap(), &cfg).unwrap();
    assert_eq!(full.source_seg.to_bits(), reduced.source_seg.to_bits());
    assert_eq!(full.target_seg.to_bits(), reduced.target_seg.to_bits());
    assert!(full.adversarial > reduced.adversarial);

    let all_unlabeled = vec!["t000".to_string(), "t002".to_string()];
    let cfg0 = LossConfig { alpha: 0.0, lambda: 0.7, target_loss_per_subbatch: false };
    let l = batch_loss(&model, &materialize::<f64>(&sb(all_unlabeled), &srcs, &t).unwrap(), &cfg0).unwrap();
    assert_eq!(l.target_seg, 0.0);
    assert!((l.total - (l.source_seg - 0.7 * l.adversarial)).abs() < 1e-12);
}

#[test]
fn epoch_step_count_and_determinism() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let srcs = [random_domain("a", Role::Source(1), 8, 16, &mut rng), random_domain("b", Role::Source(2), 8, 16, &mut rng)];
    let t = random_domain("t", Role::Target, 8, 16, &mut rng);
    let v = random_domain("v", Role::Target, 2, 16, &mut rng);
    let cfg = TrainConfig { epochs: 2, n_sb: 4, ..TrainConfig::default() };
    let run = || {
        let model = build_model::<f32>(&tiny_net(2), 0).unwrap();
        train(model, &srcs, &t, &v, &cfg).unwrap()
    };
    let (best_a, ha) = run();
    let (best_b, hb) = run();
    assert_eq!(ha.epochs.iter().map(|e| e.steps).collect::<Vec<_>>(), vec![4, 4]);
    assert_eq!(ha.to_csv(), hb.to_csv());
    assert_eq!(best_a, best_b);
    assert_eq!(ha.len(), 2);
    assert!(ha.epochs.iter().all(|e| e.validation.is_some()));
}

#[test]
fn non_finite_loss_aborts_with_term() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut srcs = [random_domain("a", Role::Source(1), 4, 16, &mut rng)];
    srcs[0].samples[2].image.pixels[5] = f32::NAN;
    let t = random_domain("t", Role::Target, 4, 16, &mut rng);
    let v = random_domain("v", Role::Target, 0, 16, &mut rng);
    let cfg = TrainConfig { epochs: 1, n_sb: 8, ..TrainConfig::default() };
    let model = build_model::<f32>(&tiny_net(1), 0).unwrap();
    match train(model, &srcs, &t, &v, &cfg) {
        Err(Error::NonFiniteLoss { term, epoch: 1, step: 1 }) => assert_eq!(term, "source_seg"),
        other => panic!("expected a non-finite loss error, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn learning_rate_schedule() {
    let c = TrainConfig { epochs: 11, final_learning_rate: Some(1e-4), ..TrainConfig::default() };
    assert_eq!(c.learning_rate_at(0), 1e-3);
    assert!((c.learning_rate_at(10) - 1e-4).abs() < 1e-15);
    assert!((c.learning_rate_at(5) - 5.5e-4).abs() < 1e-15);
    assert_eq!(TrainConfig::default().learning_rate_at(99), 1e-3);
    assert!(TrainConfig { n_sb: 5, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig { alpha: -1.0, ..TrainConfig::default() }.validate().is_err());
}

#[test]
fn dealt_target_items_stay_in_their_subnetwork() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let model = build_model::<f64>(&tiny_net(2), 1).unwrap();
    let srcs = [random_domain("a", Role::Source(1), 2, 16, &mut rng), random_domain("b", Role::Source(2), 2, 16, &mut rng)];
    let t = random_domain("t", Role::Target, 2, 16, &mut rng);
    // only target items, all owned by sub-batch 2
    let batch = Batch {
        sub_batches: vec![
            SubBatch { source_index: 1, source_items: vec![], target_items: vec![] },
            SubBatch { source_index: 2, source_items: vec![], target_items: ids("t", 0..2) },
        ],
    };
    let subs = materialize::<f64>(&batch, &srcs, &t).unwrap();
    assert!(!subs[1].shared_target);
    let mut f = Forward::new(&model);
    let v = batch_objective(&mut f, &subs, &LossConfig::default()).unwrap();
    let grads = f.graph.backward(v.objective).unwrap().params(model.store.len());
    for (key, g) in model.store.keys().iter().zip(&grads) {
        let touched = g.as_ref().is_some_and(|g| g.data().iter().any(|x| *x != 0.0));
        let allowed = key.component == Component::TargetDecoder
            || (key.source == Some(2) && matches!(key.component, Component::Encoder | Component::Classifier));
        assert_eq!(touched, allowed, "{key:?}");
    }

    // the fused decoder sees sub-network 2's features plus zeros
    let images = subs[1].target_images().unwrap();
    let pack = model.encode(2, &images).unwrap();
    let logits = model.decode_target_fused(&[pack.zeros_like(), pack]).unwrap();
    let mut g = crate::autograd::Graph::<f64>::new();
    let x = g.input(logits);
    let bits: Vec<u8> = t.samples.iter().flat_map(|s| s.mask.as_ref().unwrap().bits.clone()).collect();
    let ce = g.pixel_cross_entropy(x, &bits).unwrap();
    let expect: f64 = g.value(ce).data().iter().sum();
    assert!((v.terms.target_seg - expect).abs() < 1e-10);
    assert_eq!(v.terms.source_seg, 0.0);
}
