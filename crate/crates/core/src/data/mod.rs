//! Training-data stream: manifests, progressive stage plans, the per-sample
//! schedule, and the augmentation/noise pipeline that turns a schedule entry
//! into an `(lq, hq)` pair.

mod augment;
mod image_io;
mod schedule;
mod synth;

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

pub use augment::{add_awgn, crop, hflip, materialize_sample, rotate_ccw};
pub use image_io::{load_png, save_png, tensor_to_u8};
pub use schedule::{
    build_schedule, build_schedule_distributed, parse_schedule, replay_verify, sample_entry,
    schedule_hash, stream_seed, ReplayReport, Schedule, ScheduleEntry,
};
pub use synth::{synth_corpus, synth_dataset, synth_image};

/// One image of a dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image_id: String,
    pub path: PathBuf,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

/// Ordered list of images; order defines the image-pick index.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DatasetManifest {
    entries: Vec<ManifestEntry>,
}

const MANIFEST_HEADER: &str = "image_id,path,height,width,channels";

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self> {
        let mut seen = HashSet::new();
        for e in &entries {
            if e.image_id.is_empty() || e.image_id.contains([',', '\n', '\r']) {
                return Err(invalid!(
                    "image id {:?} is empty or contains a separator",
                    e.image_id
                ));
            }
            if !seen.insert(e.image_id.as_str()) {
                return Err(invalid!("duplicate image id `{}`", e.image_id));
            }
            if e.channels != 1 && e.channels != 3 {
                return Err(invalid!(
                    "image `{}` has {} channels; expected 1 or 3",
                    e.image_id,
                    e.channels
                ));
            }
            if e.height == 0 || e.width == 0 {
                return Err(invalid!("image `{}` has an empty extent", e.image_id));
            }
        }
        Ok(DatasetManifest { entries })
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, image_id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.image_id == image_id)
    }

    /// Errors naming the first image smaller than `patch_size`.
    pub fn check_patch_size(&self, patch_size: usize) -> Result<()> {
        match self
            .entries
            .iter()
            .find(|e| e.height < patch_size || e.width < patch_size)
        {
            Some(e) => Err(Error::UnusableImage {
                image_id: e.image_id.clone(),
                height: e.height,
                width: e.width,
                patch_size,
            }),
            None => Ok(()),
        }
    }

    /// Parses manifest CSV; relative paths resolve against `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || (lineno == 0 && line == MANIFEST_HEADER) {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            let bad =
                |detail: &str| Error::format("manifest", format!("line {}: {detail}", lineno + 1));
            let [id, path, h, w, c] = fields[..] else {
                return Err(bad("expected 5 fields"));
            };
            let num = |s: &str| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| bad(&format!("bad integer {s:?}")))
            };
            let path = Path::new(path.trim());
            entries.push(ManifestEntry {
                image_id: id.trim().to_string(),
                path: if path.is_absolute() {
                    path.to_path_buf()
                } else {
                    base_dir.join(path)
                },
                height: num(h)?,
                width: num(w)?,
                channels: num(c)?,
            });
        }
        Self::new(entries)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{MANIFEST_HEADER}\n");
        for e in &self.entries {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                e.image_id,
                e.path.display(),
                e.height,
                e.width,
                e.channels
            ));
        }
        out
    }
}

/// A manifest together with its decoded images (`[C, H, W]`, values in `[0, 1]`).
#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    manifest: DatasetManifest,
    images: Vec<Tensor<f32>>,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        manifest: DatasetManifest,
        images: Vec<Tensor<f32>>,
    ) -> Result<Self> {
        if images.len() != manifest.len() {
            return Err(invalid!(
                "{} images for a manifest of {}",
                images.len(),
                manifest.len()
            ));
        }
        for (e, img) in manifest.entries().iter().zip(&images) {
            if img.shape() != [e.channels, e.height, e.width] {
                return Err(Error::shape(
                    "dataset image",
                    img.shape(),
                    &[e.channels, e.height, e.width],
                ));
            }
        }
        Ok(Dataset {
            name: name.into(),
            manifest,
            images,
        })
    }

    /// Loads every PNG listed in the manifest.
    pub fn load(name: impl Into<String>, manifest: DatasetManifest) -> Result<Self> {
        let images = manifest
            .entries()
            .iter()
            .map(|e| load_png(&e.path))
            .collect::<Result<Vec<_>>>()?;
        Self::new(name, manifest, images)
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn images(&self) -> &[Tensor<f32>] {
        &self.images
    }

    pub fn image(&self, image_id: &str) -> Option<&Tensor<f32>> {
        let i = self
            .manifest
            .entries()
            .iter()
            .position(|e| e.image_id == image_id)?;
        Some(&self.images[i])
    }

    pub fn channels(&self) -> Option<usize> {
        self.manifest.entries().first().map(|e| e.channels)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage {
    pub start_epoch: usize,
    pub patch_size: usize,
    pub batch_size: usize,
}

/// Progressive patch/batch schedule.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StagePlan {
    pub stages: Vec<Stage>,
}

impl StagePlan {
    pub fn new(stages: Vec<Stage>) -> Result<Self> {
        let plan = StagePlan { stages };
        plan.validate()?;
        Ok(plan)
    }

    /// A single stage covering all epochs.
    pub fn constant(patch_size: usize, batch_size: usize) -> Self {
        StagePlan {
            stages: vec![Stage {
                start_epoch: 0,
                patch_size,
                batch_size,
            }],
        }
    }

    /// Three stages starting at 0, 25% and 50% of `epochs`.
    pub fn progressive(epochs: usize, patches: [usize; 3], batches: [usize; 3]) -> Result<Self> {
        let starts = [
            0,
            (epochs as f64 * 0.25).round() as usize,
            (epochs as f64 * 0.5).round() as usize,
        ];
        let mut stages: Vec<Stage> = Vec::new();
        for i in 0..3 {
            let stage = Stage {
                start_epoch: starts[i],
                patch_size: patches[i],
                batch_size: batches[i],
            };
            match stages.last_mut() {
                // too few epochs to separate stages: the later one wins
                Some(last) if last.start_epoch == stage.start_epoch => *last = stage,
                _ => stages.push(stage),
            }
        }
        Self::new(stages)
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .stages
            .first()
            .ok_or_else(|| invalid!("stage plan is empty"))?;
        if first.start_epoch != 0 {
            return Err(invalid!("first stage must start at epoch 0"));
        }
        for s in &self.stages {
            if s.patch_size == 0 || s.batch_size == 0 {
                return Err(invalid!("stage {s:?} has a zero patch or batch size"));
            }
        }
        for w in self.stages.windows(2) {
            if w[1].start_epoch <= w[0].start_epoch {
                return Err(invalid!("stage start epochs must strictly increase"));
            }
            if w[1].patch_size < w[0].patch_size {
                return Err(invalid!("stage patch sizes must not decrease"));
            }
        }
        Ok(())
    }

    pub fn stage_at(&self, epoch: usize) -> &Stage {
        self.stages
            .iter()
            .rev()
            .find(|s| s.start_epoch <= epoch)
            .expect("validated plan starts at epoch 0")
    }

    pub fn max_patch(&self) -> usize {
        self.stages.iter().map(|s| s.patch_size).max().unwrap_or(0)
    }
}
