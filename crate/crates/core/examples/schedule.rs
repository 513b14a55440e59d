//! Builds a training schedule, shows that batching and device count leave its
//! hash unchanged, and catches a tampered entry on replay.

use fair_denoise::data::{
    build_schedule, build_schedule_distributed, parse_schedule, replay_verify, schedule_hash,
    synth_dataset, StagePlan,
};

fn main() -> fair_denoise::Result<()> {
    let ds = synth_dataset("corpus", 16, 3, 48, 48, 1)?;
    let plan = StagePlan::constant(32, 8);
    let schedule = build_schedule(ds.manifest(), &plan, 4, 42)?;
    println!("canonical      {}", hex::encode(schedule_hash(&schedule)));
    for (batch, devices) in [(1, 1), (4, 2), (8, 2)] {
        let s = build_schedule_distributed(
            ds.manifest(),
            &StagePlan::constant(32, batch),
            4,
            42,
            batch,
            devices,
        )?;
        println!(
            "batch {batch} x {devices} dev {}",
            hex::encode(schedule_hash(&s))
        );
    }
    for e in schedule.epoch_entries(0).take(3) {
        println!(
            "{} crop ({}, {}) flip {} rot {} sigma {:.2}",
            e.image_id, e.crop_y, e.crop_x, e.hflip, e.rotation, e.sigma
        );
    }
    let mut tampered = parse_schedule(&schedule.to_canonical_string())?;
    tampered.entries[5].crop_x += 1;
    println!(
        "replay: {}",
        replay_verify(&tampered, ds.manifest(), &plan, 4, 42)?
    );
    Ok(())
}
