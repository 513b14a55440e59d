//! Parameter counts of the built-in reference and toy configurations.

use fair_denoise::arch::{build_model, count_params, presets, BodyKind};

fn main() -> fair_denoise::Result<()> {
    println!(
        "{:<10} {:>10} {:>10} {:>8}",
        "body", "reference", "target", "toy"
    );
    for body in BodyKind::ALL {
        let r = count_params(&build_model(&presets::reference(body), 0)?);
        let t = count_params(&build_model(&presets::toy(body), 0)?);
        println!(
            "{:<10} {:>10} {:>10} {:>8}",
            body.name(),
            r,
            presets::reference_param_target(body),
            t
        );
    }
    Ok(())
}
