//! Saves a model with its JSON sidecar, loads it back and checks the outputs
//! agree bit for bit.

use fair_denoise::arch::{
    build_model, forward_denoise, load_checkpoint, presets, save_checkpoint, BodyKind,
};
use fair_denoise::data::synth_image;

fn main() -> fair_denoise::Result<()> {
    let model = build_model(&presets::toy(BodyKind::Cat), 3)?;
    let path = std::env::temp_dir().join("fdn-example.fdnc");
    save_checkpoint(&model, &path)?;
    let back = load_checkpoint(&path)?;
    let x = synth_image(5, 3, 32, 32);
    let same = forward_denoise(&model, &x)?.bit_eq(&forward_denoise(&back, &x)?);
    println!(
        "{} -> {} (init seed {}), outputs identical: {same}",
        model.config.body.name(),
        path.display(),
        back.init_seed
    );
    Ok(())
}
