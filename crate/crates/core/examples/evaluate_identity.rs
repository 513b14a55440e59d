//! Writes a synthetic PNG corpus, reloads it from its manifest and reports
//! the PSNR/SSIM of leaving the noise in place.

use fair_denoise::data::{synth_corpus, Dataset};
use fair_denoise::metrics::{evaluate_model, reports_to_csv, EvalOptions, IdentityDenoiser};

fn main() -> fair_denoise::Result<()> {
    let dir = std::env::temp_dir().join("fdn-example-corpus");
    let manifest = synth_corpus(&dir, 4, 3, 64, 64, 1001)?;
    let ds = Dataset::load("synthetic", manifest)?;
    let reports = evaluate_model(
        &IdentityDenoiser { channels: 3 },
        &[ds],
        &EvalOptions::default(),
    )?;
    print!("{}", reports_to_csv(&reports));
    println!("corpus in {}", dir.display());
    Ok(())
}
