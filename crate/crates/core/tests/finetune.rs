mod common;

use common::{encoder, text_of, toy_dev, toy_train};
use punintent_core::finetune::{
    finetune_baseline_multiclass, multiclass_target, finetune_multitask, train_independent_heads,
    train_others_bucket, scheduled_lr, Batching, FinetuneConfig, LrSchedule,
};
use punintent_core::heads::TaskLabel;
use punintent_core::model::ModelKind;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cfg(epochs: usize) -> FinetuneConfig {
    FinetuneConfig {
        epochs,
        lr: 3e-3,
        batch_size: 16,
        ..Default::default()
    }
}

#[test]
fn multitask_reaches_high_dev_auc_on_separable_data() {
    for seed in 1..=3 {
        let train = toy_train(seed, 60, true);
        let dev = toy_dev(100 + seed);
        let out = finetune_multitask(encoder(seed), &train, &dev, &cfg(20), seed).unwrap();
        let best = out.history[out.best_epoch - 1].dev_average.unwrap();
        assert!(best >= 0.95, "seed {seed}: {best}");
        assert_eq!(out.model.kind, ModelKind::MultiTask);
        let report = punintent_core::eval::build_report("dev", &out.model, &dev).unwrap();
        assert_eq!(report.average, Some(best));
    }
}

#[test]
fn frozen_encoder_is_bit_identical() {
    let train = toy_train(4, 20, true);
    let dev = toy_dev(4);
    let enc = encoder(4);
    let c = FinetuneConfig {
        freeze_encoder: true,
        ..cfg(3)
    };
    let out = finetune_multitask(enc.clone(), &train, &dev, &c, 4).unwrap();
    for ((n1, a), (n2, b)) in enc.params().iter().zip(out.model.encoder.params().iter()) {
        assert_eq!(n1, n2);
        assert_eq!(a.data(), b.data(), "{n1}");
    }
}

fn mostly_decreasing(losses: &[f64]) -> bool {
    losses.windows(2).filter(|w| w[1] >= w[0]).count() <= 1
}

#[test]
fn mixed_and_per_task_batching_both_reduce_the_loss() {
    let train = toy_train(5, 40, true);
    let dev = toy_dev(5);
    for batching in [Batching::Mixed, Batching::PerTask] {
        let c = FinetuneConfig {
            batching,
            patience: 50,
            ..cfg(5)
        };
        let out = finetune_multitask(encoder(5), &train, &dev, &c, 5).unwrap();
        let losses: Vec<f64> = out.history.iter().map(|m| m.train_loss).collect();
        assert_eq!(losses.len(), 5);
        assert!(mostly_decreasing(&losses), "{batching:?}: {losses:?}");
        assert!(losses[4] < losses[0]);
    }
}

#[test]
fn baseline_ignores_negatives_entirely() {
    let train = toy_train(6, 30, true);
    let dev = toy_dev(6);
    let a = finetune_baseline_multiclass(encoder(6), &train, &dev, &cfg(4), 6).unwrap();

    let mut perturbed = train.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    for i in 0..perturbed.len() {
        if !perturbed.labels[i].accepted {
            let k = rng.random_range(0..2);
            perturbed.seqs[i] = text_of(&mut rng, k);
        }
    }
    let b = finetune_baseline_multiclass(encoder(6), &perturbed, &dev, &cfg(4), 6).unwrap();
    assert_eq!(a.model.encoder.params().len(), b.model.encoder.params().len());
    for ((_, x), (_, y)) in a.model.encoder.params().iter().zip(b.model.encoder.params().iter()) {
        assert_eq!(x.data(), y.data());
    }
    for ((_, x), (_, y)) in a.model.heads.params().iter().zip(b.model.heads.params().iter()) {
        assert_eq!(x.data(), y.data());
    }
    assert!(!a.model.heads.has_binary());
}

#[test]
fn baseline_fits_separable_positives() {
    let train = toy_train(7, 60, false);
    let dev = toy_dev(7);
    let out = finetune_baseline_multiclass(encoder(7), &train, &dev, &cfg(15), 7).unwrap();
    let u = out.model.classification_vectors(&train.seqs).unwrap();
    let mut correct = 0;
    for (ui, l) in u.iter().zip(&train.labels) {
        let p = out.model.heads.class_probs(ui);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let pred = if p[1] > p[0] { 1 } else { 0 };
        correct += usize::from(pred == l.class);
    }
    let acc = correct as f64 / train.len() as f64;
    assert!(acc >= 0.95, "{acc}");
}

#[test]
fn single_class_data_is_rejected() {
    let mut train = toy_train(8, 10, false);
    train.labels.iter_mut().for_each(|l| l.class = 0);
    let dev = toy_dev(8);
    assert!(finetune_baseline_multiclass(encoder(8), &train, &dev, &cfg(2), 8).is_err());
}

#[test]
fn others_bucket_has_an_extra_output_and_needs_negatives() {
    let dev = toy_dev(9);
    let out = train_others_bucket(encoder(9), &toy_train(9, 20, true), &dev, &cfg(3), 9).unwrap();
    assert_eq!(out.model.heads.n_outputs(), 3);
    assert_eq!(out.model.kind, ModelKind::OthersBucket);
    assert!(train_others_bucket(encoder(9), &toy_train(9, 20, false), &dev, &cfg(3), 9).is_err());


    for l in &toy_train(9, 20, true).labels {
        let t = multiclass_target(ModelKind::OthersBucket, l, 2);
        assert_eq!(t, Some(if l.accepted { l.class } else { 2 }));
        let t = multiclass_target(ModelKind::Multiclass, l, 2);
        assert_eq!(t, l.accepted.then_some(l.class));
    }
}

#[test]
fn independent_heads_fit_on_a_frozen_baseline() {
    let train = toy_train(11, 60, true);
    let dev = toy_dev(11);
    let base = finetune_baseline_multiclass(encoder(11), &train, &dev, &cfg(8), 11).unwrap();
    let (model, fits) = train_independent_heads(&base.model, &train, &FinetuneConfig::default(), 11).unwrap();
    assert_eq!(model.kind, ModelKind::IndependentHeads);
    assert_eq!(model.encoder, base.model.encoder);
    assert_eq!(
        model.heads.params().get("head.multiclass.weight").unwrap().data(),
        base.model.heads.params().get("head.multiclass.weight").unwrap().data()
    );
    for f in &fits {
        assert!(f.loss.unwrap() <= std::f64::consts::LN_2, "{f:?}");
    }

    // a class whose pool has one label value is skipped
    let mut one_sided = train.clone();
    for l in one_sided.labels.iter_mut() {
        if l.class == 1 {
            *l = TaskLabel::positive(1);
        }
    }
    let (_, fits) = train_independent_heads(&base.model, &one_sided, &FinetuneConfig::default(), 11).unwrap();
    assert!(fits[0].loss.is_some());
    assert_eq!(fits[1].loss, None);

    assert!(train_independent_heads(&model, &train, &FinetuneConfig::default(), 11).is_err());
}

#[test]
fn same_seed_same_model() {
    let train = toy_train(12, 20, true);
    let dev = toy_dev(12);
    let a = finetune_multitask(encoder(12), &train, &dev, &cfg(3), 12).unwrap();
    let b = finetune_multitask(encoder(12), &train, &dev, &cfg(3), 12).unwrap();
    assert_eq!(a.history, b.history);
    for ((_, x), (_, y)) in a.model.heads.params().iter().zip(b.model.heads.params().iter()) {
        assert_eq!(x.data(), y.data());
    }
}

#[test]
fn warmup_then_linear_decay() {
    let c = FinetuneConfig {
        lr: 1.0,
        warmup_fraction: 0.1,
        ..Default::default()
    };
    let lrs: Vec<f64> = (0..100).map(|s| scheduled_lr(&c, s, 100)).collect();
    assert!((lrs[0] - 0.1).abs() < 1e-12);
    assert!((lrs[9] - 1.0).abs() < 1e-12);
    assert!(lrs[..10].windows(2).all(|w| w[0] < w[1]));
    assert!(lrs[10..].windows(2).all(|w| w[0] > w[1]));
    assert!(lrs[99] > 0.0 && lrs[99] < 0.02);
    let flat = FinetuneConfig {
        lr: 0.5,
        schedule: LrSchedule::Constant,
        ..Default::default()
    };
    assert!((0..50).all(|s| scheduled_lr(&flat, s, 50) == 0.5));
    let bad = FinetuneConfig {
        warmup_fraction: 1.0,
        ..Default::default()
    };
    assert!(bad.validate().is_err());
}
