//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
//! failure.

mod common;

use std::cell::RefCell;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use common::{ks_critical_01, ks_uniform, ssim_pairs, PAIR_H, PAIR_W, SSIM_REFERENCE};
use fair_denoise::arch::{
    body_suite, build_model, count_params, forward_denoise, hierarchy_ablation_arms, presets,
    BodyKind,
};
use fair_denoise::attention::{
    sa_complexity, Attention, AttentionConfig, AttentionKind, ComplexityKind, MultiScaleAttention,
};
use fair_denoise::data::{
    add_awgn, build_schedule, build_schedule_distributed, sample_entry, schedule_hash,
    synth_dataset, StagePlan,
};
use fair_denoise::metrics::{
    evaluate_model, psnr, ssim, ssim_plane, EvalOptions, IdentityDenoiser,
};
use fair_denoise::nn::{AttentionProbe, Ctx, ParamBuilder, ParamStore};
use fair_denoise::rng::{Gaussian, SplitMix64};
use fair_denoise::tensor::{primitive_suite, Tape, Tensor};
use fair_denoise::train::{train, train_to_dir, TrainConfig};

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn c1_fair_training() -> Outcome {
    let start = Instant::now();
    let ds = synth_dataset("train", 64, 3, 48, 48, 1).map_err(|e| e.to_string())?;
    let canonical = build_schedule(ds.manifest(), &StagePlan::constant(32, 8), 30, 7).unwrap();
    let want = schedule_hash(&canonical);
    for batch in [1, 2, 4, 8] {
        for devices in [1, 2] {
            let plan = StagePlan::constant(32, batch);
            let s =
                build_schedule_distributed(ds.manifest(), &plan, 30, 7, batch, devices).unwrap();
            ensure(schedule_hash(&s) == want, || {
                format!("hash differs at batch {batch}, devices {devices}")
            })?;
        }
    }
    let small = synth_dataset("small", 8, 3, 24, 24, 3).unwrap();
    let cfg = TrainConfig::new(2, StagePlan::constant(16, 4), 7, 7);
    let plain = presets::toy(BodyKind::Swinir);
    let channel = presets::toy(BodyKind::Restormer);
    ensure(plain.attention.kind == AttentionKind::PlainWindow, || {
        "swinir toy is not plain window".into()
    })?;
    ensure(channel.attention.kind == AttentionKind::Channel, || {
        "restormer toy is not channel".into()
    })?;
    let (_, a) = train(&cfg, &plain, &small).map_err(|e| e.to_string())?;
    let (_, b) = train(&cfg, &channel, &small).map_err(|e| e.to_string())?;
    ensure(a.digest_csv() == b.digest_csv(), || {
        "batch digest logs differ".into()
    })?;
    ensure(a.losses() != b.losses(), || {
        "the two bodies trained identically".into()
    })?;
    let t = start.elapsed();
    ensure(t < Duration::from_secs(60), || format!("took {t:.1?}"))?;
    Ok(format!(
        "8 schedule builds share {}, {} digests equal, {t:.1?}",
        &hex::encode(want)[..12],
        a.rows.len()
    ))
}

fn c2_complexity() -> Outcome {
    let local = sa_complexity(ComplexityKind::LocalSpatial, 64, 64, 16, 8, 1)
        .map_err(|e| e.to_string())?
        .total;
    let channel = sa_complexity(ComplexityKind::Channel, 64, 64, 16, 1, 4)
        .map_err(|e| e.to_string())?
        .total;
    ensure(local == 12_582_912, || format!("local {local}"))?;
    ensure(channel == 4_718_592, || format!("channel {channel}"))?;
    Ok(format!("local {local}, channel {channel}"))
}

fn c3_gradients() -> Outcome {
    let start = Instant::now();
    let mut checks = primitive_suite(1e-4)
        .map_err(|e| e.to_string())?
        .into_iter()
        .map(|(n, r)| (n.to_string(), r))
        .collect::<Vec<_>>();
    checks.extend(body_suite(1e-4).map_err(|e| e.to_string())?);
    let worst = checks
        .iter()
        .map(|(_, r)| r.max_rel_error)
        .fold(0.0, f64::max);
    let failed: Vec<&str> = checks
        .iter()
        .filter(|(_, r)| !(r.pass && r.max_rel_error < 1e-4))
        .map(|(n, _)| n.as_str())
        .collect();
    ensure(failed.is_empty(), || format!("failed: {failed:?}"))?;
    let t = start.elapsed();
    ensure(t < Duration::from_secs(300), || format!("took {t:.1?}"))?;
    Ok(format!(
        "{} checks, max rel error {worst:.2e}, {t:.1?}",
        checks.len()
    ))
}

fn c4_residual_identity() -> Outcome {
    let mut rng = SplitMix64::new(4);
    let mut g = Gaussian::new(4);
    for i in 0..20 {
        let body = BodyKind::ALL[i % BodyKind::ALL.len()];
        let mut m = build_model(&presets::toy(body), rng.next_u64()).map_err(|e| e.to_string())?;
        m.zero_final_tail();
        let (h, w) = (8 + rng.below(33) as usize, 8 + rng.below(33) as usize);
        let x = Tensor::from_fn(&[3, h, w], |_| (0.5 + 0.3 * g.next()) as f32);
        let y = forward_denoise(&m, &x).map_err(|e| e.to_string())?;
        ensure(y.bit_eq(&x), || {
            format!("input {i} ({}, {h}x{w}) changed", body.name())
        })?;
    }
    Ok("20 inputs over 7 bodies reproduced bit-exactly".into())
}

fn c5_noise() -> Outcome {
    let clean = Tensor::full(&[1, 1000, 1000], 0.5f32);
    let noisy = add_awgn(&clean, 25.0, 5).map_err(|e| e.to_string())?;
    let n = noisy.numel() as f64;
    let mean = noisy.data().iter().map(|&v| v as f64 - 0.5).sum::<f64>() / n;
    let var = noisy
        .data()
        .iter()
        .map(|&v| (v as f64 - 0.5 - mean).powi(2))
        .sum::<f64>()
        / n;
    let ratio = var.sqrt() / (25.0 / 255.0);
    ensure(mean.abs() < 5e-4, || format!("mean {mean:e}"))?;
    ensure((ratio - 1.0).abs() < 0.02, || format!("std ratio {ratio}"))?;
    ensure(add_awgn(&clean, 0.0, 5).unwrap().bit_eq(&clean), || {
        "sigma 0 changed the image".into()
    })?;
    let ds = synth_dataset("one", 1, 3, 8, 8, 0).unwrap();
    let plan = StagePlan::constant(8, 1);
    let mut sigmas: Vec<f64> = (0..100_000)
        .map(|e| sample_entry(11, e, 0, ds.manifest(), &plan).map(|s| s.sigma as f64))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let d = ks_uniform(&mut sigmas, 0.0, 50.0);
    let crit = ks_critical_01(sigmas.len());
    ensure(d < crit, || format!("KS {d} >= {crit}"))?;
    Ok(format!(
        "mean {mean:.1e}, std ratio {ratio:.4}, KS {d:.4} < {crit:.4}"
    ))
}

fn c6_metrics() -> Outcome {
    let a = Tensor::from_fn(&[3, 32, 32], |i| ((i * 13) % 254) as f32 / 255.0);
    let p = psnr(&a, &a.map(|v| v + 1.0 / 255.0)).map_err(|e| e.to_string())?;
    ensure((p - 48.1308).abs() < 1e-3, || format!("psnr {p}"))?;
    let s = ssim(&a, &a).map_err(|e| e.to_string())?;
    ensure(s == 1.0, || format!("ssim of identical images {s}"))?;
    let mut worst: f64 = 0.0;
    for ((name, x, y), (_, want)) in ssim_pairs().into_iter().zip(SSIM_REFERENCE) {
        let got = ssim_plane(&x, &y, PAIR_H, PAIR_W).map_err(|e| e.to_string())?;
        worst = worst.max((got - want).abs());
        ensure((got - want).abs() < 1e-6, || {
            format!("{name}: {got} vs {want}")
        })?;
    }
    Ok(format!(
        "psnr {p:.4} dB, ssim(x, x) = 1, 5 reference pairs within {worst:.1e}"
    ))
}

struct ToyRun {
    log: Vec<u8>,
    checkpoint: Vec<u8>,
    sidecar: Vec<u8>,
    trained_db: f64,
    identity_db: f64,
    iterations: usize,
    elapsed: Duration,
}

fn toy_run() -> Result<ToyRun, String> {
    let e = |e: fair_denoise::Error| e.to_string();
    let train_set = synth_dataset("train", 64, 3, 48, 48, 1).map_err(e)?;
    let held_out = synth_dataset("held_out", 8, 3, 64, 64, 2).map_err(e)?;
    let cfg = TrainConfig::new(30, StagePlan::constant(32, 8), 7, 7);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let start = Instant::now();
    let (model, log) = train_to_dir(
        &cfg,
        &presets::toy(BodyKind::Swinir),
        &train_set,
        dir.path(),
        |_| {},
    )
    .map_err(e)?;
    let elapsed = start.elapsed();
    let opts = EvalOptions {
        sigmas: vec![25.0],
        ..EvalOptions::default()
    };
    let trained_db =
        evaluate_model(&model, std::slice::from_ref(&held_out), &opts).map_err(e)?[0].psnr_db;
    let identity_db = evaluate_model(&IdentityDenoiser { channels: 3 }, &[held_out], &opts)
        .map_err(e)?[0]
        .psnr_db;
    let read = |f: &str| std::fs::read(dir.path().join(f)).map_err(|e| e.to_string());
    Ok(ToyRun {
        log: read("train_log.csv")?,
        checkpoint: read("model.fdnc")?,
        sidecar: read("model.fdnc.json")?,
        trained_db,
        identity_db,
        iterations: log.rows.len(),
        elapsed,
    })
}

fn c7_end_to_end(run: &Result<ToyRun, String>) -> Outcome {
    let r = run.as_ref().map_err(Clone::clone)?;
    let gain = r.trained_db - r.identity_db;
    ensure(gain >= 1.0, || format!("gain {gain:.3} dB"))?;
    ensure(r.elapsed < Duration::from_secs(900), || {
        format!("training took {:.1?}", r.elapsed)
    })?;
    Ok(format!(
        "{} iterations in {:.1?}: identity {:.3} dB, trained {:.3} dB (+{gain:.3})",
        r.iterations, r.elapsed, r.identity_db, r.trained_db
    ))
}

fn c8_hierarchy() -> Outcome {
    let arms =
        hierarchy_ablation_arms(&presets::toy(BodyKind::Uformer)).map_err(|e| e.to_string())?;
    let ds = synth_dataset("h", 6, 3, 24, 24, 8).unwrap();
    let cfg = TrainConfig::new(2, StagePlan::constant(16, 3), 8, 8);
    let mut params = Vec::new();
    let mut digests = Vec::new();
    for (name, c) in &arms {
        let (m, log) = train(&cfg, c, &ds).map_err(|e| format!("{name}: {e}"))?;
        params.push(count_params(&m));
        digests.push(log.digest_csv());
    }
    let names: Vec<&str> = arms.iter().map(|a| a.0).collect();
    ensure(
        names == ["baseline", "+dense", "+scdp", "+asymmetric"],
        || format!("arms {names:?}"),
    )?;
    ensure(params[1] > params[0], || {
        format!("+dense {} <= baseline {}", params[1], params[0])
    })?;
    ensure((params[3] as f64) < 0.7 * params[0] as f64, || {
        format!("+asymmetric {} vs baseline {}", params[3], params[0])
    })?;
    ensure(digests.iter().all(|d| *d == digests[0]), || {
        "digest logs differ between arms".into()
    })?;
    Ok(format!("params {params:?}, digests shared"))
}

fn probe_input(c: usize, h: usize, w: usize) -> Tensor<f64> {
    let mut g = Gaussian::new(9);
    Tensor::from_fn(&[c, h, w], |_| g.next())
}

fn c9_weight_sharing() -> Outcome {
    let mut ms = AttentionConfig::new(AttentionKind::MultiscaleWindow, 1, 4);
    ms.scales = vec![2, 4];
    ms.qk_shared = true;
    let mut pb = ParamBuilder::new(3);
    let att = Attention::build(&mut pb, &ms, 8, 1, 0).map_err(|e| e.to_string())?;
    let store: ParamStore<f64> = pb.finish().cast();
    let tape = Tape::new();
    let params = store.bind(&tape, false);
    let probe = RefCell::new(AttentionProbe::default());
    att.forward(
        &Ctx::with_probe(&params, &probe),
        tape.constant(probe_input(8, 16, 16)),
        None,
        "qk",
    )
    .map_err(|e| e.to_string())?;
    let mut asym: f64 = 0.0;
    for r in &probe.borrow().records {
        let s = r.scores.as_ref().ok_or("no scores recorded")?;
        let (b, n) = (s.shape()[0], s.shape()[1]);
        for bi in 0..b {
            for i in 0..n {
                for j in 0..n {
                    asym = asym.max((s.at(&[bi, i, j]) - s.at(&[bi, j, i])).abs());
                }
            }
        }
    }
    ensure(asym < 1e-6, || format!("score asymmetry {asym:e}"))?;

    let scales = [2, 4];
    let mut pb = ParamBuilder::new(4);
    let provider = pb
        .scope("p", |pb| {
            MultiScaleAttention::new(pb, 8, &scales, true, false)
        })
        .map_err(|e| e.to_string())?;
    let consumer = pb
        .scope("c", |pb| {
            MultiScaleAttention::new(pb, 8, &scales, true, true)
        })
        .map_err(|e| e.to_string())?;
    let store: ParamStore<f64> = pb.finish().cast();
    let tape = Tape::new();
    let params = store.bind(&tape, false);
    let probe = RefCell::new(AttentionProbe::default());
    let cx = Ctx::with_probe(&params, &probe);
    let (y, maps) = provider
        .forward(&cx, tape.constant(probe_input(8, 16, 16)), None, "p")
        .map_err(|e| e.to_string())?;
    consumer
        .forward(&cx, y, Some(&maps), "c")
        .map_err(|e| e.to_string())?;
    let recs = probe.into_inner().records;
    ensure(recs.len() == 4, || format!("{} probe records", recs.len()))?;
    ensure(
        (0..2).all(|g| recs[g].maps.bit_eq(&recs[g + 2].maps)),
        || "consumer maps differ".into(),
    )?;

    // Disabling sharing gives every provider a key projection and every
    // consumer a query and a key projection, each a c -> c pointwise conv.
    let shared = presets::toy(BodyKind::Elan);
    let mut unshared = shared.clone();
    unshared.attention.qk_shared = false;
    unshared.attention.score_shared = false;
    let c = shared.channels;
    let projection = c * c + c;
    let blocks: usize = shared.depths.iter().sum();
    let consumers: usize = shared.depths.iter().map(|d| d / 2).sum();
    let expected = (blocks - consumers) * projection + consumers * 2 * projection;
    let diff = count_params(&build_model(&unshared, 0).map_err(|e| e.to_string())?)
        - count_params(&build_model(&shared, 0).map_err(|e| e.to_string())?);
    ensure(diff == expected, || {
        format!("param diff {diff}, expected {expected}")
    })?;
    Ok(format!(
        "asymmetry {asym:.1e}, consumer maps exact, unshared adds {diff} params"
    ))
}

fn c10_budgets() -> Outcome {
    let mut notes = Vec::new();
    let mut failed = Vec::new();
    for body in BodyKind::ALL {
        let n =
            count_params(&build_model(&presets::reference(body), 0).map_err(|e| e.to_string())?);
        let target = presets::reference_param_target(body);
        let rel = n as f64 / target as f64 - 1.0;
        println!(
            "    {:<10} {n:>9} params, target {target:>9}, {:+.2}%",
            body.name(),
            100.0 * rel
        );
        if matches!(
            body,
            BodyKind::Restormer | BodyKind::Uformer | BodyKind::Cat | BodyKind::Art
        ) {
            notes.push(format!("{} {:+.1}%", body.name(), 100.0 * rel));
            if rel.abs() > 0.10 {
                failed.push(body.name());
            }
        }
    }
    ensure(failed.is_empty(), || format!("outside 10%: {failed:?}"))?;
    Ok(notes.join(", "))
}

fn c11_determinism(first: &Result<ToyRun, String>) -> Outcome {
    let a = first.as_ref().map_err(Clone::clone)?;
    let b = toy_run()?;
    ensure(a.log == b.log, || "train logs differ".into())?;
    ensure(a.checkpoint == b.checkpoint, || "checkpoints differ".into())?;
    ensure(a.sidecar == b.sidecar, || {
        "checkpoint sidecars differ".into()
    })?;
    Ok(format!(
        "log {} B, checkpoint {} B identical across runs",
        a.log.len(),
        a.checkpoint.len()
    ))
}

fn report(id: usize, title: &str, f: impl FnOnce() -> Outcome) -> bool {
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into()))
    });
    match &outcome {
        Ok(detail) => println!("PASS criterion {id:>2} {title}: {detail}"),
        Err(why) => println!("FAIL criterion {id:>2} {title}: {why}"),
    }
    outcome.is_ok()
}

fn main() {
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut ok = true;
    ok &= report(1, "fair training contract", c1_fair_training);
    ok &= report(2, "complexity oracle", c2_complexity);
    ok &= report(3, "gradient suite", c3_gradients);
    ok &= report(4, "residual identity", c4_residual_identity);
    ok &= report(5, "noise model", c5_noise);
    ok &= report(6, "metrics oracle", c6_metrics);
    let run = catch_unwind(toy_run).unwrap_or_else(|_| Err("toy run panicked".into()));
    ok &= report(7, "end-to-end sanity", || c7_end_to_end(&run));
    ok &= report(8, "hierarchy ablation structure", c8_hierarchy);
    ok &= report(9, "weight-sharing mechanics", c9_weight_sharing);
    ok &= report(10, "parameter budgets", c10_budgets);
    ok &= report(11, "determinism", || c11_determinism(&run));
    if !ok {
        std::process::exit(1);
    }
}
