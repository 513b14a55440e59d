//! The per-sample schedule: derivation, canonical file format, hashing and replay.
//!
//! Each entry is drawn from its own SplitMix64 stream seeded by
//! [`stream_seed`]`(data_seed, epoch, sample_index)`. Draw order:
//!
//! 1. image index, `below(n_images)`
//! 2. `crop_y`, `below(H - P + 1)`
//! 3. `crop_x`, `below(W - P + 1)`
//! 4. horizontal flip, top bit of the next word
//! 5. rotation, `below(4) * 90` degrees counter-clockwise
//! 6. sigma, `(next >> 11) * 2^-53 * 50` rounded to `f32`
//! 7. noise seed, the next raw word
//!
//! `below(n)` is the multiply-shift map `(word * n) >> 64`.

use std::fmt;
use std::fmt::Write as _;

use sha2::{Digest, Sha256};

use super::{DatasetManifest, StagePlan};
use crate::error::{invalid, Error, Result};
use crate::rng::{derive_seed, SplitMix64};

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleEntry {
    pub epoch: usize,
    pub sample_index: usize,
    pub image_id: String,
    pub crop_y: usize,
    pub crop_x: usize,
    pub patch_size: usize,
    pub hflip: bool,
    pub rotation: u16,
    pub sigma: f32,
    pub noise_seed: u64,
}

impl ScheduleEntry {
    fn write_row(&self, out: &mut String) {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.sample_index,
            self.image_id,
            self.crop_y,
            self.crop_x,
            self.patch_size,
            u8::from(self.hflip),
            self.rotation,
            self.sigma,
            self.noise_seed
        );
    }

    /// Field-by-field comparison; returns the first differing field.
    fn first_difference(&self, other: &ScheduleEntry) -> Option<(&'static str, String, String)> {
        macro_rules! cmp {
            ($($field:ident),*) => {
                $(if self.$field != other.$field {
                    return Some((stringify!($field), format!("{:?}", self.$field), format!("{:?}", other.$field)));
                })*
            };
        }
        cmp!(
            epoch,
            sample_index,
            image_id,
            crop_y,
            crop_x,
            patch_size,
            hflip,
            rotation
        );
        if self.sigma.to_bits() != other.sigma.to_bits() {
            return Some(("sigma", self.sigma.to_string(), other.sigma.to_string()));
        }
        cmp!(noise_seed);
        None
    }
}

/// Ordered schedule for a whole run.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub data_seed: u64,
    pub epochs: usize,
    pub entries: Vec<ScheduleEntry>,
}

impl Schedule {
    /// Canonical serialization: header line then one CSV row per entry, LF endings.
    pub fn to_canonical_string(&self) -> String {
        let mut out = format!("FDN-SCHED v1 {} {}\n", self.data_seed, self.epochs);
        for e in &self.entries {
            e.write_row(&mut out);
        }
        out
    }

    pub fn epoch_entries(&self, epoch: usize) -> impl Iterator<Item = &ScheduleEntry> {
        self.entries.iter().filter(move |e| e.epoch == epoch)
    }
}

/// Seed of the stream for one `(epoch, sample_index)`.
pub fn stream_seed(data_seed: u64, epoch: usize, sample_index: usize) -> u64 {
    derive_seed(data_seed, &[epoch as u64, sample_index as u64])
}

pub fn sample_entry(
    data_seed: u64,
    epoch: usize,
    sample_index: usize,
    manifest: &DatasetManifest,
    plan: &StagePlan,
) -> Result<ScheduleEntry> {
    if manifest.is_empty() {
        return Err(invalid!("manifest is empty"));
    }
    if sample_index >= manifest.len() {
        return Err(invalid!(
            "sample index {sample_index} beyond {} samples per epoch",
            manifest.len()
        ));
    }
    let patch_size = plan.stage_at(epoch).patch_size;
    let mut rng = SplitMix64::new(stream_seed(data_seed, epoch, sample_index));
    let img = &manifest.entries()[rng.below(manifest.len() as u64) as usize];
    if img.height < patch_size || img.width < patch_size {
        return Err(Error::UnusableImage {
            image_id: img.image_id.clone(),
            height: img.height,
            width: img.width,
            patch_size,
        });
    }
    let crop_y = rng.below((img.height - patch_size + 1) as u64) as usize;
    let crop_x = rng.below((img.width - patch_size + 1) as u64) as usize;
    let hflip = rng.next_bool();
    let rotation = rng.below(4) as u16 * 90;
    let sigma = (rng.next_f64() * 50.0) as f32;
    let noise_seed = rng.next_u64();
    Ok(ScheduleEntry {
        epoch,
        sample_index,
        image_id: img.image_id.clone(),
        crop_y,
        crop_x,
        patch_size,
        hflip,
        rotation,
        sigma,
        noise_seed,
    })
}

/// Samples per epoch equal the number of manifest images.
pub fn build_schedule(
    manifest: &DatasetManifest,
    plan: &StagePlan,
    epochs: usize,
    data_seed: u64,
) -> Result<Schedule> {
    if manifest.is_empty() {
        return Err(invalid!("manifest is empty"));
    }
    plan.validate()?;
    let mut entries = Vec::with_capacity(epochs * manifest.len());
    for epoch in 0..epochs {
        for i in 0..manifest.len() {
            entries.push(sample_entry(data_seed, epoch, i, manifest, plan)?);
        }
    }
    Ok(Schedule {
        data_seed,
        epochs,
        entries,
    })
}

/// Builds the schedule the way `devices` workers with per-device batch size
/// `batch_size` would: each global step hands consecutive index slices to
/// the devices, every device derives its own entries, and the pieces are
/// reassembled in canonical `(epoch, sample_index)` order.
pub fn build_schedule_distributed(
    manifest: &DatasetManifest,
    plan: &StagePlan,
    epochs: usize,
    data_seed: u64,
    batch_size: usize,
    devices: usize,
) -> Result<Schedule> {
    if batch_size == 0 || devices == 0 {
        return Err(invalid!("batch size and device count must be positive"));
    }
    if manifest.is_empty() {
        return Err(invalid!("manifest is empty"));
    }
    plan.validate()?;
    let n = manifest.len();
    let mut per_device: Vec<Vec<ScheduleEntry>> = vec![Vec::new(); devices];
    for epoch in 0..epochs {
        let mut start = 0;
        while start < n {
            for (d, out) in per_device.iter_mut().enumerate() {
                let lo = (start + d * batch_size).min(n);
                let hi = (lo + batch_size).min(n);
                for i in lo..hi {
                    out.push(sample_entry(data_seed, epoch, i, manifest, plan)?);
                }
            }
            start += batch_size * devices;
        }
    }
    let mut entries: Vec<ScheduleEntry> = per_device.into_iter().flatten().collect();
    entries.sort_by_key(|e| (e.epoch, e.sample_index));
    Ok(Schedule {
        data_seed,
        epochs,
        entries,
    })
}

/// SHA-256 over the canonical serialization.
pub fn schedule_hash(schedule: &Schedule) -> [u8; 32] {
    Sha256::digest(schedule.to_canonical_string().as_bytes()).into()
}

pub fn parse_schedule(text: &str) -> Result<Schedule> {
    let mut lines = text.split('\n');
    let header = lines.next().unwrap_or_default();
    let bad =
        |line: usize, detail: String| Error::format("schedule", format!("line {line}: {detail}"));
    let parts: Vec<&str> = header.split(' ').collect();
    let (data_seed, epochs) = match parts[..] {
        ["FDN-SCHED", "v1", seed, epochs] => (
            seed.parse::<u64>()
                .map_err(|e| bad(1, format!("data seed: {e}")))?,
            epochs
                .parse::<usize>()
                .map_err(|e| bad(1, format!("epochs: {e}")))?,
        ),
        _ => return Err(bad(1, format!("bad header {header:?}"))),
    };
    let mut entries = Vec::new();
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 10 {
            return Err(bad(lineno, format!("expected 10 fields, got {}", f.len())));
        }
        fn num<T: std::str::FromStr>(s: &str, name: &str, lineno: usize) -> Result<T>
        where
            T::Err: fmt::Display,
        {
            s.parse::<T>()
                .map_err(|e| Error::format("schedule", format!("line {lineno}: {name}: {e}")))
        }
        let hflip = match f[6] {
            "0" => false,
            "1" => true,
            other => return Err(bad(lineno, format!("hflip must be 0 or 1, got {other:?}"))),
        };
        entries.push(ScheduleEntry {
            epoch: num(f[0], "epoch", lineno)?,
            sample_index: num(f[1], "sample_index", lineno)?,
            image_id: f[2].to_string(),
            crop_y: num(f[3], "crop_y", lineno)?,
            crop_x: num(f[4], "crop_x", lineno)?,
            patch_size: num(f[5], "patch_size", lineno)?,
            hflip,
            rotation: num(f[7], "rotation", lineno)?,
            sigma: num(f[8], "sigma", lineno)?,
            noise_seed: num(f[9], "noise_seed", lineno)?,
        });
    }
    Ok(Schedule {
        data_seed,
        epochs,
        entries,
    })
}

/// Outcome of regenerating a schedule and comparing it with a recorded one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ReplayReport {
    Match {
        entries: usize,
    },
    Mismatch {
        epoch: usize,
        sample_index: usize,
        field: &'static str,
        expected: String,
        found: String,
    },
    LengthMismatch {
        expected: usize,
        found: usize,
    },
}

impl ReplayReport {
    pub fn is_match(&self) -> bool {
        matches!(self, ReplayReport::Match { .. })
    }
}

impl fmt::Display for ReplayReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ReplayReport::Match { entries } => write!(f, "match ({entries} entries)"),
            ReplayReport::Mismatch {
                epoch,
                sample_index,
                field,
                expected,
                found,
            } => write!(
                f,
                "mismatch at epoch {epoch}, sample {sample_index}: {field} expected {expected}, found {found}"
            ),
            ReplayReport::LengthMismatch { expected, found } => {
                write!(f, "length mismatch: expected {expected} entries, found {found}")
            }
        }
    }
}

/// Regenerates every entry from `(data_seed, manifest, plan)` and compares.
pub fn replay_verify(
    schedule: &Schedule,
    manifest: &DatasetManifest,
    plan: &StagePlan,
    epochs: usize,
    data_seed: u64,
) -> Result<ReplayReport> {
    let expected_len = epochs * manifest.len();
    for (k, got) in schedule.entries.iter().enumerate() {
        if k >= expected_len {
            break;
        }
        let (epoch, index) = (k / manifest.len(), k % manifest.len());
        let want = sample_entry(data_seed, epoch, index, manifest, plan)?;
        if let Some((field, expected, found)) = want.first_difference(got) {
            return Ok(ReplayReport::Mismatch {
                epoch,
                sample_index: index,
                field,
                expected,
                found,
            });
        }
    }
    if schedule.entries.len() != expected_len {
        return Ok(ReplayReport::LengthMismatch {
            expected: expected_len,
            found: schedule.entries.len(),
        });
    }
    Ok(ReplayReport::Match {
        entries: expected_len,
    })
}
