//! Multi-arm studies at toy scale. Every arm of a study trains on the same
//! schedule unless the study varies the data seed on purpose.
//!
//! A study is described by a JSON [`ExperimentSpec`]; [`run_experiment`]
//! trains and evaluates every arm and [`ExperimentReport::write`] stores
//! `report.csv`, `summary.json`, `schedule_digest.txt` and one
//! `<arm>/loss.csv` per arm.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::arch::{build_model, count_params, hierarchy_ablation_arms, presets, ModelConfig};
use crate::attention::{sa_complexity, AttentionConfig, AttentionKind, ComplexityKind};
use crate::data::{
    build_schedule, schedule_hash, synth_dataset, Dataset, DatasetManifest, StagePlan,
};
use crate::error::{invalid, Error, Result};
use crate::metrics::{evaluate_model, parallel_map, EvalOptions, MetricReport};
use crate::train::{train_model, NonFinitePolicy, TrainConfig, TrainLog};

/// A model config given by preset name (`"uformer-toy"`), by path to a JSON
/// file, or inline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ConfigRef {
    Named(String),
    Inline(ModelConfig),
}

impl ConfigRef {
    pub fn resolve(&self, base_dir: &Path) -> Result<ModelConfig> {
        match self {
            ConfigRef::Inline(c) => {
                c.validate()?;
                Ok(c.clone())
            }
            ConfigRef::Named(name) if name.ends_with(".json") => {
                ModelConfig::from_json(&fs::read_to_string(base_dir.join(name))?)
            }
            ConfigRef::Named(name) => presets::by_name(name)
                .ok_or_else(|| Error::Config(format!("unknown model preset `{name}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSetSpec {
    pub name: String,
    /// Manifest CSV of real images; synthetic images are generated when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    #[serde(default = "eval_images")]
    pub images: usize,
    #[serde(default = "eval_size")]
    pub size: usize,
    #[serde(default)]
    pub seed: u64,
}

fn eval_images() -> usize {
    8
}

fn eval_size() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_manifest: Option<PathBuf>,
    #[serde(default = "train_images")]
    pub train_images: usize,
    #[serde(default = "train_size")]
    pub train_size: usize,
    #[serde(default = "train_seed")]
    pub train_seed: u64,
    #[serde(default = "channels")]
    pub channels: usize,
    #[serde(default = "default_eval_sets")]
    pub eval_sets: Vec<EvalSetSpec>,
}

fn train_images() -> usize {
    64
}

fn train_size() -> usize {
    48
}

fn train_seed() -> u64 {
    1
}

fn channels() -> usize {
    3
}

fn default_eval_sets() -> Vec<EvalSetSpec> {
    vec![
        EvalSetSpec {
            name: "synth_a".into(),
            manifest: None,
            images: 8,
            size: 64,
            seed: 1001,
        },
        EvalSetSpec {
            name: "synth_b".into(),
            manifest: None,
            images: 4,
            size: 96,
            seed: 1002,
        },
    ]
}

impl Default for DataSpec {
    fn default() -> Self {
        serde_json::from_value(json!({})).expect("all fields have defaults")
    }
}

impl DataSpec {
    pub fn train_set(&self, base_dir: &Path) -> Result<Dataset> {
        match &self.train_manifest {
            Some(p) => Dataset::load("train", DatasetManifest::load(base_dir.join(p))?),
            None => synth_dataset(
                "train",
                self.train_images,
                self.channels,
                self.train_size,
                self.train_size,
                self.train_seed,
            ),
        }
    }

    pub fn eval_sets(&self, base_dir: &Path) -> Result<Vec<Dataset>> {
        self.eval_sets
            .iter()
            .map(|e| match &e.manifest {
                Some(p) => Dataset::load(e.name.clone(), DatasetManifest::load(base_dir.join(p))?),
                None => synth_dataset(&e.name, e.images, self.channels, e.size, e.size, e.seed),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSpec {
    #[serde(default = "epochs")]
    pub epochs: usize,
    #[serde(default = "patch")]
    pub patch_size: usize,
    #[serde(default = "batch")]
    pub batch_size: usize,
    #[serde(default = "base_lr")]
    pub base_lr: f64,
    #[serde(default)]
    pub data_seed: u64,
    #[serde(default)]
    pub init_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip_grad_norm: Option<f64>,
}

fn epochs() -> usize {
    30
}

fn patch() -> usize {
    32
}

fn batch() -> usize {
    8
}

fn base_lr() -> f64 {
    4e-4
}

impl Default for TrainSpec {
    fn default() -> Self {
        serde_json::from_value(json!({})).expect("all fields have defaults")
    }
}

impl TrainSpec {
    pub fn to_config(&self) -> TrainConfig {
        TrainConfig {
            base_lr: self.base_lr,
            clip_grad_norm: self.clip_grad_norm,
            ..TrainConfig::new(
                self.epochs,
                StagePlan::constant(self.patch_size, self.batch_size),
                self.data_seed,
                self.init_seed,
            )
        }
    }
}

/// One arm of a custom study: JSON fields merged over the base config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSpec {
    pub name: String,
    #[serde(default)]
    pub overrides: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Study {
    /// Same model trained on two data seeds.
    Seed {
        seeds: [u64; 2],
    },
    /// All four combinations of two data seeds and two init seeds.
    Causal {
        data_seeds: [u64; 2],
        init_seeds: [u64; 2],
    },
    /// Baseline, +dense, +scdp, +asymmetric (cumulative) from a symmetric base.
    Hierarchy,
    /// Channel versus local-window attention at base and doubled width.
    AttentionSpace {
        #[serde(default = "window")]
        window: usize,
    },
    /// Query/key and score sharing on versus off.
    WeightSharing {
        #[serde(default = "spike_factor")]
        spike_factor: f64,
        #[serde(default = "spike_window")]
        spike_window: usize,
    },
    /// Every combination of tail depth and kernel size.
    TailVariant {
        layers: Vec<usize>,
        kernels: Vec<usize>,
    },
    Custom {
        arms: Vec<ArmSpec>,
    },
}

fn window() -> usize {
    8
}

fn spike_factor() -> f64 {
    5.0
}

fn spike_window() -> usize {
    256
}

impl Study {
    pub fn name(&self) -> &'static str {
        match self {
            Study::Seed { .. } => "seed",
            Study::Causal { .. } => "causal",
            Study::Hierarchy => "hierarchy",
            Study::AttentionSpace { .. } => "attention_space",
            Study::WeightSharing { .. } => "weight_sharing",
            Study::TailVariant { .. } => "tail_variant",
            Study::Custom { .. } => "custom",
        }
    }
}

fn sigmas() -> Vec<f32> {
    vec![15.0, 25.0, 50.0]
}

/// JSON experiment definition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub name: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub description: String,
    pub study: Study,
    pub base: ConfigRef,
    #[serde(default)]
    pub train: TrainSpec,
    #[serde(default)]
    pub data: DataSpec,
    #[serde(default = "sigmas")]
    pub sigmas: Vec<f32>,
    #[serde(default)]
    pub eval_seed: u64,
}

impl ExperimentSpec {
    /// Reads a definition; relative paths inside it resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<(Self, PathBuf)> {
        let path = path.as_ref();
        let spec: ExperimentSpec = serde_json::from_str(&fs::read_to_string(path)?)?;
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((spec, dir))
    }
}

/// A fully resolved arm.
#[derive(Debug, Clone, PartialEq)]
pub struct Arm {
    pub name: String,
    pub config: ModelConfig,
    pub data_seed: u64,
    pub init_seed: u64,
    pub on_non_finite: NonFinitePolicy,
}

#[derive(Debug, Clone)]
pub struct ArmResult {
    pub arm: Arm,
    pub params: usize,
    pub schedule_hash: [u8; 32],
    pub log: TrainLog,
    pub reports: Vec<MetricReport>,
    pub sa_complexity: Option<u64>,
    pub spikes: Option<usize>,
}

impl ArmResult {
    pub fn mean_psnr(&self) -> f64 {
        let n = self.reports.len().max(1) as f64;
        self.reports.iter().map(|r| r.psnr_db).sum::<f64>() / n
    }

    /// SHA-256 of the arm's `epoch,iter,batch_digest` log.
    pub fn digest_log_hash(&self) -> [u8; 32] {
        Sha256::digest(self.log.digest_csv().as_bytes()).into()
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub name: String,
    pub study: &'static str,
    pub arms: Vec<ArmResult>,
    /// Derived values and soft expectations; reported, never asserted.
    pub summary: BTreeMap<String, Value>,
}

/// Iterations whose loss exceeds `factor` times the median of up to `window`
/// preceding finite losses. Non-finite losses always count.
pub fn count_spikes(losses: &[f64], factor: f64, window: usize) -> usize {
    let mut spikes = 0;
    for (i, &l) in losses.iter().enumerate() {
        if !l.is_finite() {
            spikes += 1;
            continue;
        }
        let mut prev: Vec<f64> = losses[i.saturating_sub(window)..i]
            .iter()
            .copied()
            .filter(|v| v.is_finite())
            .collect();
        if prev.is_empty() {
            continue;
        }
        prev.sort_by(f64::total_cmp);
        let mid = prev.len() / 2;
        let median = if prev.len().is_multiple_of(2) {
            (prev[mid - 1] + prev[mid]) / 2.0
        } else {
            prev[mid]
        };
        if l > factor * median {
            spikes += 1;
        }
    }
    spikes
}

/// Recursive JSON merge: objects merge key by key, anything else replaces.
fn merge(base: &mut Value, over: &Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                merge(b.entry(k.clone()).or_insert(Value::Null), v);
            }
        }
        (b, o) => *b = o.clone(),
    }
}

fn with_overrides(base: &ModelConfig, overrides: &Value) -> Result<ModelConfig> {
    let mut v = serde_json::to_value(base)?;
    if !overrides.is_null() {
        merge(&mut v, overrides);
    }
    let cfg: ModelConfig = serde_json::from_value(v)?;
    cfg.validate()?;
    Ok(cfg)
}

fn arm(name: impl Into<String>, config: ModelConfig, train: &TrainSpec) -> Arm {
    Arm {
        name: name.into(),
        config,
        data_seed: train.data_seed,
        init_seed: train.init_seed,
        on_non_finite: NonFinitePolicy::Abort,
    }
}

/// Expands a study into its arms.
pub fn study_arms(study: &Study, base: &ModelConfig, train: &TrainSpec) -> Result<Vec<Arm>> {
    Ok(match study {
        Study::Seed { seeds } => ["alpha", "beta"]
            .iter()
            .zip(seeds)
            .map(|(n, &s)| Arm {
                data_seed: s,
                ..arm(*n, base.clone(), train)
            })
            .collect(),
        Study::Causal {
            data_seeds,
            init_seeds,
        } => {
            let mut arms = Vec::new();
            for (di, &d) in data_seeds.iter().enumerate() {
                for (ii, &i) in init_seeds.iter().enumerate() {
                    arms.push(Arm {
                        data_seed: d,
                        init_seed: i,
                        ..arm(
                            format!("data{}_init{}", ["a", "b"][di], ["a", "b"][ii]),
                            base.clone(),
                            train,
                        )
                    });
                }
            }
            arms
        }
        Study::Hierarchy => hierarchy_ablation_arms(base)?
            .into_iter()
            .map(|(n, c)| arm(n, c, train))
            .collect(),
        Study::AttentionSpace { window } => {
            let heads = base.attention.heads;
            let mut arms = Vec::new();
            for mult in [1, 2] {
                for (label, kind) in [
                    ("channel", AttentionKind::Channel),
                    ("window", AttentionKind::PlainWindow),
                ] {
                    let mut c = base.clone();
                    c.channels = base.channels * mult;
                    c.ffn_hidden = base.ffn_hidden * mult;
                    c.attention = AttentionConfig {
                        qkv_dwconv: kind == AttentionKind::Channel && base.attention.qkv_dwconv,
                        ..AttentionConfig::new(kind, heads, *window)
                    };
                    c.validate()?;
                    arms.push(arm(format!("{label}_c{}", c.channels), c, train));
                }
            }
            arms
        }
        Study::WeightSharing { .. } => {
            let mut shared = base.clone();
            shared.attention.qk_shared = true;
            shared.attention.score_shared = true;
            let mut unshared = base.clone();
            unshared.attention.qk_shared = false;
            unshared.attention.score_shared = false;
            [("shared", shared), ("unshared", unshared)]
                .into_iter()
                .map(|(n, c)| -> Result<Arm> {
                    c.validate()?;
                    Ok(Arm {
                        on_non_finite: NonFinitePolicy::RestorePrevious,
                        ..arm(n, c, train)
                    })
                })
                .collect::<Result<_>>()?
        }
        Study::TailVariant { layers, kernels } => {
            let mut arms = Vec::new();
            for &k in kernels {
                for &l in layers {
                    let c = ModelConfig {
                        tail_layers: l,
                        tail_kernel: k,
                        ..base.clone()
                    };
                    c.validate()?;
                    arms.push(arm(format!("tail_l{l}_k{k}"), c, train));
                }
            }
            arms
        }
        Study::Custom { arms } => arms
            .iter()
            .map(|a| -> Result<Arm> {
                Ok(Arm {
                    data_seed: a.data_seed.unwrap_or(train.data_seed),
                    init_seed: a.init_seed.unwrap_or(train.init_seed),
                    ..arm(a.name.clone(), with_overrides(base, &a.overrides)?, train)
                })
            })
            .collect::<Result<_>>()?,
    })
}

/// Level-0 self-attention cost of an arm at `patch × patch`.
fn arm_complexity(c: &ModelConfig, patch: usize) -> Result<u64> {
    let a = &c.attention;
    let (kind, m) = match a.kind {
        AttentionKind::Channel => (ComplexityKind::Channel, 1),
        _ => (ComplexityKind::LocalSpatial, a.window),
    };
    let p = patch as u64;
    Ok(sa_complexity(kind, p, p, c.channels as u64, m as u64, a.heads as u64)?.total)
}

/// Trains and evaluates one arm.
pub fn run_arm(
    arm: &Arm,
    spec: &ExperimentSpec,
    train_set: &Dataset,
    eval_sets: &[Dataset],
) -> Result<ArmResult> {
    let cfg = TrainConfig {
        data_seed: arm.data_seed,
        init_seed: arm.init_seed,
        on_non_finite: arm.on_non_finite,
        ..spec.train.to_config()
    };
    let schedule = build_schedule(
        train_set.manifest(),
        &cfg.stage_plan,
        cfg.epochs,
        cfg.data_seed,
    )?;
    let model = build_model(&arm.config, arm.init_seed)?;
    let params = count_params(&model);
    let (model, log) = train_model(&cfg, model, train_set, |_| {})?;
    let opts = EvalOptions {
        sigmas: spec.sigmas.clone(),
        eval_seed: spec.eval_seed,
        ..EvalOptions::default()
    };
    let reports = evaluate_model(&model, eval_sets, &opts)?;
    let (sa, spikes) = match &spec.study {
        Study::AttentionSpace { .. } => (
            Some(arm_complexity(&arm.config, spec.train.patch_size)?),
            None,
        ),
        Study::WeightSharing {
            spike_factor,
            spike_window,
        } => (
            None,
            Some(count_spikes(&log.losses(), *spike_factor, *spike_window)),
        ),
        _ => (None, None),
    };
    Ok(ArmResult {
        arm: arm.clone(),
        params,
        schedule_hash: schedule_hash(&schedule),
        log,
        reports,
        sa_complexity: sa,
        spikes,
    })
}

/// Runs every arm (up to `jobs` at once) and derives the study summary.
pub fn run_experiment(
    spec: &ExperimentSpec,
    base_dir: &Path,
    jobs: usize,
) -> Result<ExperimentReport> {
    let base = spec.base.resolve(base_dir)?;
    let arms = study_arms(&spec.study, &base, &spec.train)?;
    if arms.is_empty() {
        return Err(invalid!("experiment `{}` has no arms", spec.name));
    }
    let mut names: Vec<&str> = arms.iter().map(|a| a.name.as_str()).collect();
    names.sort_unstable();
    if names.windows(2).any(|w| w[0] == w[1]) {
        return Err(invalid!(
            "experiment `{}` has duplicate arm names",
            spec.name
        ));
    }
    let train_set = spec.data.train_set(base_dir)?;
    let eval_sets = spec.data.eval_sets(base_dir)?;
    let results = parallel_map(arms.len(), jobs, |i| {
        run_arm(&arms[i], spec, &train_set, &eval_sets)
    })?;
    let summary = summarize(&spec.study, &results);
    Ok(ExperimentReport {
        name: spec.name.clone(),
        study: spec.study.name(),
        arms: results,
        summary,
    })
}

fn grid_spread(results: &[ArmResult], outer_is_data: bool) -> f64 {
    // arms are ordered data-major: [(a,a), (a,b), (b,a), (b,b)]
    let p: Vec<f64> = results.iter().map(ArmResult::mean_psnr).collect();
    if outer_is_data {
        // vary data, hold init
        (p[0] - p[2]).abs().max((p[1] - p[3]).abs())
    } else {
        (p[0] - p[1]).abs().max((p[2] - p[3]).abs())
    }
}

fn summarize(study: &Study, results: &[ArmResult]) -> BTreeMap<String, Value> {
    let mut s = BTreeMap::new();
    let params: BTreeMap<&str, usize> = results
        .iter()
        .map(|r| (r.arm.name.as_str(), r.params))
        .collect();
    s.insert("params".into(), json!(params));
    let psnr: BTreeMap<&str, f64> = results
        .iter()
        .map(|r| (r.arm.name.as_str(), r.mean_psnr()))
        .collect();
    s.insert("mean_psnr".into(), json!(psnr));
    let mut by_seed: BTreeMap<u64, Vec<[u8; 32]>> = BTreeMap::new();
    for r in results {
        by_seed
            .entry(r.arm.data_seed)
            .or_default()
            .push(r.digest_log_hash());
    }
    let shared = by_seed.values().all(|v| v.windows(2).all(|w| w[0] == w[1]));
    s.insert("digests_shared_within_data_seed".into(), json!(shared));
    match study {
        Study::Seed { .. } => {
            s.insert(
                "psnr_delta_beta_minus_alpha".into(),
                json!(results[1].mean_psnr() - results[0].mean_psnr()),
            );
        }
        Study::Causal { .. } => {
            let (sd, si) = (grid_spread(results, true), grid_spread(results, false));
            s.insert("spread_data".into(), json!(sd));
            s.insert("spread_init".into(), json!(si));
            s.insert("soft.spread_init_below_spread_data".into(), json!(si < sd));
        }
        Study::Hierarchy => {
            let p: Vec<usize> = results.iter().map(|r| r.params).collect();
            s.insert("dense_adds_params".into(), json!(p[1] > p[0]));
            s.insert("asymmetric_ratio".into(), json!(p[3] as f64 / p[0] as f64));
        }
        Study::AttentionSpace { .. } => {
            let sa: BTreeMap<&str, Option<u64>> = results
                .iter()
                .map(|r| (r.arm.name.as_str(), r.sa_complexity))
                .collect();
            s.insert("sa_complexity".into(), json!(sa));
            for pair in results.chunks(2) {
                if let [ch, win] = pair {
                    let key = format!("soft.{}_at_least_{}", win.arm.name, ch.arm.name);
                    s.insert(key, json!(win.mean_psnr() >= ch.mean_psnr()));
                }
            }
        }
        Study::WeightSharing { .. } => {
            let sp: BTreeMap<&str, Option<usize>> = results
                .iter()
                .map(|r| (r.arm.name.as_str(), r.spikes))
                .collect();
            s.insert("loss_spikes".into(), json!(sp));
        }
        Study::TailVariant { kernels, layers } => {
            let mut monotone = true;
            for chunk in results.chunks(layers.len()) {
                let mut sorted: Vec<&ArmResult> = chunk.iter().collect();
                sorted.sort_by_key(|r| r.arm.config.tail_layers);
                monotone &= sorted
                    .windows(2)
                    .all(|w| w[1].mean_psnr() >= w[0].mean_psnr());
            }
            s.insert("kernels".into(), json!(kernels));
            s.insert("soft.psnr_non_decreasing_in_layers".into(), json!(monotone));
        }
        Study::Custom { .. } => {}
    }
    s
}

pub const EXPERIMENT_REPORT_HEADER: &str =
    "arm,data_seed,init_seed,dataset,sigma,psnr,ssim,params,psnr_delta,sa_complexity,spikes,notes";

impl ExperimentReport {
    /// One row per arm, dataset and sigma; `psnr_delta` is relative to the
    /// first arm at the same dataset and sigma.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{EXPERIMENT_REPORT_HEADER}\n");
        let reference = &self.arms[0].reports;
        for r in &self.arms {
            for (m, base) in r.reports.iter().zip(reference) {
                let opt = |v: Option<String>| v.unwrap_or_default();
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{:.6},{:.6},{},{:.6},{},{},{}",
                    r.arm.name,
                    r.arm.data_seed,
                    r.arm.init_seed,
                    m.dataset_name,
                    m.sigma,
                    m.psnr_db,
                    m.ssim,
                    r.params,
                    m.psnr_db - base.psnr_db,
                    opt(r.sa_complexity.map(|v| v.to_string())),
                    opt(r.spikes.map(|v| v.to_string())),
                    m.notes
                );
            }
        }
        out
    }

    /// `arm,schedule_hash,digest_log_sha256` per arm.
    pub fn schedule_digest(&self) -> String {
        let mut out = String::from("arm,schedule_hash,digest_log_sha256\n");
        for r in &self.arms {
            let _ = writeln!(
                out,
                "{},{},{}",
                r.arm.name,
                hex::encode(r.schedule_hash),
                hex::encode(r.digest_log_hash())
            );
        }
        out
    }

    pub fn summary_json(&self) -> String {
        let v = json!({
            "name": self.name,
            "study": self.study,
            "values": self.summary,
        });
        serde_json::to_string_pretty(&v).expect("summary serializes") + "\n"
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.csv"), self.to_csv())?;
        fs::write(dir.join("schedule_digest.txt"), self.schedule_digest())?;
        fs::write(dir.join("summary.json"), self.summary_json())?;
        for r in &self.arms {
            let arm_dir = dir.join(&r.arm.name);
            fs::create_dir_all(&arm_dir)?;
            r.log.write_csv(arm_dir.join("loss.csv"))?;
            fs::write(arm_dir.join("config.json"), r.arm.config.to_json() + "\n")?;
        }
        Ok(())
    }
}
