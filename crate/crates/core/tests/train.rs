use fair_denoise::arch::{build_model, presets, BodyKind, ModelConfig};
use fair_denoise::attention::AttentionKind;
use fair_denoise::data::{build_schedule, synth_dataset, Dataset, StagePlan};
use fair_denoise::metrics::{evaluate_model, EvalOptions};
use fair_denoise::train::{
    batches, lr_at, train, train_model, train_to_dir, NonFinitePolicy, TrainConfig,
};
use fair_denoise::Error;
use proptest::prelude::*;

fn tiny(body: BodyKind) -> ModelConfig {
    let mut c = presets::toy(body);
    c.channels = 8;
    c.ffn_hidden = 16;
    c.attention.heads = 1;
    c.attention.window = 4;
    if c.depths.len() == 2 {
        c.depths = vec![1];
    }
    c
}

fn data() -> Dataset {
    synth_dataset("t", 5, 3, 20, 20, 3).unwrap()
}

fn cfg(epochs: usize) -> TrainConfig {
    TrainConfig::new(epochs, StagePlan::constant(12, 2), 9, 1)
}

#[test]
fn batch_digests_do_not_depend_on_the_model() {
    let ds = data();
    let plain = tiny(BodyKind::Swinir);
    let mut channel = tiny(BodyKind::Restormer);
    channel.attention.kind = AttentionKind::Channel;
    let (_, a) = train(&cfg(2), &plain, &ds).unwrap();
    let (_, b) = train(&cfg(2), &channel, &ds).unwrap();
    let c = train(
        &TrainConfig {
            init_seed: 77,
            ..cfg(2)
        },
        &plain,
        &ds,
    )
    .unwrap()
    .1;
    assert_eq!(a.digest_csv(), b.digest_csv());
    assert_eq!(a.digest_csv(), c.digest_csv());
    assert_ne!(a.to_csv(), b.to_csv());
    let d = train(
        &TrainConfig {
            data_seed: 10,
            ..cfg(2)
        },
        &plain,
        &ds,
    )
    .unwrap()
    .1;
    assert_ne!(a.digest_csv(), d.digest_csv());
}

#[test]
fn repeated_runs_are_byte_identical() {
    let ds = data();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        train_to_dir(&cfg(2), &tiny(BodyKind::Uformer), &ds, d.path(), |_| {}).unwrap();
    }
    for f in ["train_log.csv", "model.fdnc", "model.fdnc.json"] {
        let a = std::fs::read(dirs[0].path().join(f)).unwrap();
        let b = std::fs::read(dirs[1].path().join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
}

#[test]
fn per_sample_threads_do_not_change_results() {
    let ds = data();
    let (m1, l1) = train(&cfg(1), &tiny(BodyKind::Swinir), &ds).unwrap();
    let (m2, l2) = train(
        &TrainConfig { jobs: 2, ..cfg(1) },
        &tiny(BodyKind::Swinir),
        &ds,
    )
    .unwrap();
    assert_eq!(l1, l2);
    assert!(m1
        .params
        .tensors()
        .iter()
        .zip(m2.params.tensors())
        .all(|(a, b)| a.bit_eq(b)));
}

#[test]
fn last_partial_batch_is_kept() {
    let ds = data();
    let c = cfg(3);
    let (_, log) = train(&c, &tiny(BodyKind::Swinir), &ds).unwrap();
    // 5 samples per epoch in batches of 2, 2, 1
    assert_eq!(log.rows.len(), 9);
    let s = build_schedule(ds.manifest(), &c.stage_plan, 3, c.data_seed).unwrap();
    let sizes: Vec<usize> = batches(&s, &c.stage_plan)
        .iter()
        .map(|b| b.1.len())
        .collect();
    assert_eq!(sizes, [2, 2, 1, 2, 2, 1, 2, 2, 1]);
    for r in &log.rows {
        assert_eq!(r.lr, lr_at(r.epoch, &c).unwrap());
    }
    assert_eq!(
        log.rows.iter().map(|r| r.iter).collect::<Vec<_>>(),
        (0..9).collect::<Vec<_>>()
    );
}

#[test]
fn progressive_plan_changes_batch_size() {
    let ds = data();
    let plan = StagePlan::progressive(4, [8, 12, 16], [5, 2, 1]).unwrap();
    let (_, log) = train(
        &TrainConfig::new(4, plan, 1, 1),
        &tiny(BodyKind::Swinir),
        &ds,
    )
    .unwrap();
    // epoch 0: one batch of 5, epoch 1: 3 batches, epochs 2-3: 5 batches each
    assert_eq!(log.rows.len(), 1 + 3 + 5 + 5);
}

#[test]
fn training_beats_the_untrained_identity() {
    let ds = synth_dataset("t", 8, 3, 24, 24, 4).unwrap();
    let held_out = synth_dataset("h", 2, 3, 24, 24, 5).unwrap();
    let c = TrainConfig {
        warmup_fraction: 0.0,
        base_lr: 2e-3,
        ..TrainConfig::new(8, StagePlan::constant(16, 4), 2, 2)
    };
    let opts = EvalOptions {
        sigmas: vec![25.0],
        ..EvalOptions::default()
    };
    let untrained = build_model(&tiny(BodyKind::Swinir), c.init_seed).unwrap();
    let (trained, _) = train(&c, &tiny(BodyKind::Swinir), &ds).unwrap();
    let before =
        evaluate_model(&untrained, std::slice::from_ref(&held_out), &opts).unwrap()[0].psnr_db;
    let after = evaluate_model(&trained, &[held_out], &opts).unwrap()[0].psnr_db;
    assert!(after > before, "{before} -> {after}");
}

fn poisoned(cfg_: &ModelConfig) -> fair_denoise::arch::Model {
    let mut m = build_model(cfg_, 1).unwrap();
    let id = m.params.find("head.weight").unwrap();
    m.params.get_mut(id).data_mut()[0] = f32::NAN;
    m
}

#[test]
fn non_finite_loss_aborts_with_location() {
    let ds = data();
    let err = train_model(&cfg(1), poisoned(&tiny(BodyKind::Swinir)), &ds, |_| {}).unwrap_err();
    assert!(
        matches!(err, Error::NonFiniteLoss { epoch: 0, iter: 0 }),
        "{err}"
    );
}

#[test]
fn non_finite_loss_can_continue_from_previous_step() {
    let ds = data();
    let c = TrainConfig {
        on_non_finite: NonFinitePolicy::RestorePrevious,
        ..cfg(1)
    };
    let m = poisoned(&tiny(BodyKind::Swinir));
    let before = m.params.clone();
    let (after, log) = train_model(&c, m, &ds, |_| {}).unwrap();
    assert_eq!(log.rows.len(), 3);
    assert!(log.rows.iter().all(|r| !r.loss.is_finite()));
    assert!(before
        .tensors()
        .iter()
        .zip(after.params.tensors())
        .all(|(a, b)| a.bit_eq(b)));
}

#[test]
fn gradient_clipping_is_observable() {
    let ds = data();
    let c = TrainConfig {
        warmup_fraction: 0.0,
        ..cfg(2)
    };
    let (_, free) = train(&c, &tiny(BodyKind::Swinir), &ds).unwrap();
    let (_, clipped) = train(
        &TrainConfig {
            clip_grad_norm: Some(1e-6),
            ..c.clone()
        },
        &tiny(BodyKind::Swinir),
        &ds,
    )
    .unwrap();
    assert_eq!(free.digest_csv(), clipped.digest_csv());
    assert_eq!(free.rows[0].loss, clipped.rows[0].loss);
    assert_ne!(free.losses(), clipped.losses());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lr_rises_then_falls(epochs in 2usize..500, warm in 0.0f64..0.4) {
        let c = TrainConfig { warmup_fraction: warm, ..TrainConfig::new(epochs, StagePlan::constant(8, 1), 0, 0) };
        prop_assume!(c.validate().is_ok());
        let lrs: Vec<f64> = (0..epochs).map(|e| lr_at(e, &c).unwrap()).collect();
        let w = c.warmup_epochs().min(epochs);
        prop_assert!(lrs[..w].windows(2).all(|p| p[1] >= p[0]));
        prop_assert!(lrs[w..].windows(2).all(|p| p[1] <= p[0]));
        prop_assert!(lrs.iter().all(|&l| (0.0..=c.base_lr).contains(&l)));
    }
}
