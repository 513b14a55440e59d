//! Trains the toy plain-window model on a synthetic corpus and compares it
//! with the identity baseline at σ = 25.

use std::time::Instant;

use fair_denoise::arch::{presets, BodyKind};
use fair_denoise::data::{synth_dataset, StagePlan};
use fair_denoise::metrics::{evaluate_model, EvalOptions, IdentityDenoiser};
use fair_denoise::train::{train_model, TrainConfig};

fn main() -> fair_denoise::Result<()> {
    let epochs: usize = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(30);
    let train_set = synth_dataset("train", 64, 3, 48, 48, 1)?;
    let test_set = synth_dataset("held_out", 8, 3, 64, 64, 2)?;
    let cfg = TrainConfig::new(epochs, StagePlan::constant(32, 8), 7, 7);
    let model = fair_denoise::arch::build_model(&presets::toy(BodyKind::Swinir), cfg.init_seed)?;
    let start = Instant::now();
    let (model, log) = train_model(&cfg, model, &train_set, |r| {
        if r.iter % 8 == 0 {
            println!(
                "epoch {:>3} iter {:>4} loss {:.5} lr {:.2e}",
                r.epoch, r.iter, r.loss, r.lr
            );
        }
    })?;
    println!(
        "trained {} iterations in {:.1?}",
        log.rows.len(),
        start.elapsed()
    );
    let opts = EvalOptions {
        sigmas: vec![25.0],
        ..EvalOptions::default()
    };
    let trained = &evaluate_model(&model, std::slice::from_ref(&test_set), &opts)?[0];
    let identity = &evaluate_model(&IdentityDenoiser { channels: 3 }, &[test_set], &opts)?[0];
    println!(
        "identity {:.3} dB, trained {:.3} dB",
        identity.psnr_db, trained.psnr_db
    );
    Ok(())
}
