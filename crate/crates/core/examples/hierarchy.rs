//! Parameter counts of the cumulative hierarchy ablation arms for the toy
//! and reference U-shaped models.

use fair_denoise::arch::{build_model, count_params, hierarchy_ablation_arms, presets, BodyKind};

fn main() -> fair_denoise::Result<()> {
    for (label, base) in [
        ("toy", presets::toy(BodyKind::Uformer)),
        ("reference", presets::reference(BodyKind::Uformer)),
    ] {
        println!("{label}");
        let arms = hierarchy_ablation_arms(&base)?;
        let baseline = count_params(&build_model(&arms[0].1, 0)?) as f64;
        for (name, cfg) in arms {
            let n = count_params(&build_model(&cfg, 0)?);
            println!("  {name:<12} {n:>9} ({:.2}x)", n as f64 / baseline);
        }
    }
    Ok(())
}
