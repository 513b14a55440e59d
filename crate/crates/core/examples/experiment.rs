//! Runs a shipped experiment definition (default `seed`) and writes its
//! report under `results/<name>`.

use std::path::Path;

use fair_denoise::experiments::{run_experiment, ExperimentSpec};

fn main() -> fair_denoise::Result<()> {
    let name = std::env::args().nth(1).unwrap_or_else(|| "seed".into());
    let path = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../experiments")
        .join(format!("{name}.json"));
    let (spec, dir) = ExperimentSpec::load(&path)?;
    let report = run_experiment(&spec, &dir, 1)?;
    let out = Path::new("results").join(&spec.name);
    report.write(&out)?;
    print!("{}", report.to_csv());
    println!("{}", serde_json::to_string_pretty(&report.summary)?);
    Ok(())
}
