//! Procedural texture corpus: a linear gradient, a few oriented sinusoids and
//! a checkerboard per image, quantized to 8 bits.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use super::{save_png, Dataset, DatasetManifest, ManifestEntry};
use crate::error::{invalid, Result};
use crate::rng::{derive_seed, SplitMix64};
use crate::tensor::Tensor;

struct Wave {
    fy: f64,
    fx: f64,
    phase: f64,
    amp: Vec<f64>,
}

/// Deterministic texture for `seed`, values are multiples of 1/255.
pub fn synth_image(seed: u64, channels: usize, h: usize, w: usize) -> Tensor<f32> {
    let mut rng = SplitMix64::new(seed);
    let base: Vec<f64> = (0..channels).map(|_| rng.uniform(0.3, 0.7)).collect();
    let (gy, gx) = (rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3));
    let n_waves = 2 + rng.below(2) as usize;
    let waves: Vec<Wave> = (0..n_waves)
        .map(|_| {
            let freq = rng.uniform(0.02, 0.2);
            let theta = rng.uniform(0.0, PI);
            Wave {
                fy: freq * theta.sin(),
                fx: freq * theta.cos(),
                phase: rng.uniform(0.0, 2.0 * PI),
                amp: (0..channels).map(|_| rng.uniform(0.03, 0.15)).collect(),
            }
        })
        .collect();
    let cell = 4 + rng.below(13) as usize;
    let check_amp: Vec<f64> = (0..channels).map(|_| rng.uniform(-0.15, 0.15)).collect();

    Tensor::from_fn(&[channels, h, w], |i| {
        let (c, y, x) = (i / (h * w), (i / w) % h, i % w);
        let (yf, xf) = (y as f64, x as f64);
        let mut v = base[c] + gy * (yf / h as f64 - 0.5) + gx * (xf / w as f64 - 0.5);
        for wave in &waves {
            v += wave.amp[c] * (2.0 * PI * (wave.fy * yf + wave.fx * xf) + wave.phase).sin();
        }
        if ((y / cell) + (x / cell)).is_multiple_of(2) {
            v += check_amp[c];
        }
        ((v.clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32
    })
}

fn image_ids(n: usize) -> impl Iterator<Item = String> {
    (0..n).map(|i| format!("synth{i:04}"))
}

/// In-memory synthetic dataset; manifest paths are nominal `<id>.png` names.
pub fn synth_dataset(
    name: &str,
    n: usize,
    channels: usize,
    h: usize,
    w: usize,
    seed: u64,
) -> Result<Dataset> {
    if n == 0 {
        return Err(invalid!("synthetic dataset needs at least one image"));
    }
    let mut entries = Vec::with_capacity(n);
    let mut images = Vec::with_capacity(n);
    for (i, id) in image_ids(n).enumerate() {
        images.push(synth_image(derive_seed(seed, &[i as u64]), channels, h, w));
        entries.push(ManifestEntry {
            path: PathBuf::from(format!("{id}.png")),
            image_id: id,
            height: h,
            width: w,
            channels,
        });
    }
    Dataset::new(name, DatasetManifest::new(entries)?, images)
}

/// Writes the synthetic corpus as PNGs plus `manifest.csv` under `dir`.
pub fn synth_corpus(
    dir: impl AsRef<Path>,
    n: usize,
    channels: usize,
    h: usize,
    w: usize,
    seed: u64,
) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let ds = synth_dataset("synthetic", n, channels, h, w, seed)?;
    for (e, img) in ds.manifest().entries().iter().zip(ds.images()) {
        save_png(img, dir.join(&e.path))?;
    }
    fs::write(dir.join("manifest.csv"), ds.manifest().to_csv())?;
    DatasetManifest::load(dir.join("manifest.csv"))
}
