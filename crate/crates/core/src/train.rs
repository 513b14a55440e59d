//! L1 training with Adam, warmup plus step decay, and per-iteration batch
//! digests that certify every model saw the same samples.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::arch::{build_model, save_checkpoint, Model, ModelConfig};
use crate::data::{
    build_schedule, materialize_sample, Dataset, Schedule, ScheduleEntry, StagePlan,
};
use crate::error::{invalid, Error, Result};
use crate::metrics::parallel_map;
use crate::nn::Ctx;
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// What to do when a batch produces a non-finite loss or gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NonFinitePolicy {
    /// Stop with [`Error::NonFiniteLoss`].
    #[default]
    Abort,
    /// Log the loss, skip the update and continue from the previous parameters.
    RestorePrevious,
}

fn default_base_lr() -> f64 {
    4e-4
}

fn default_warmup() -> f64 {
    0.05
}

fn default_decays() -> Vec<f64> {
    vec![0.5, 0.75, 0.875, 0.9375]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    #[serde(default = "default_base_lr")]
    pub base_lr: f64,
    #[serde(default = "default_warmup")]
    pub warmup_fraction: f64,
    #[serde(default = "default_decays")]
    pub decay_fractions: Vec<f64>,
    pub stage_plan: StagePlan,
    pub data_seed: u64,
    pub init_seed: u64,
    #[serde(default)]
    pub adam: AdamConfig,
    /// Rescales the global gradient norm to at most this value.
    #[serde(default)]
    pub clip_grad_norm: Option<f64>,
    #[serde(default)]
    pub on_non_finite: NonFinitePolicy,
    /// Worker threads over the samples of a batch. Gradients are summed in
    /// sample order, so results do not depend on this.
    #[serde(default = "one")]
    pub jobs: usize,
}

fn one() -> usize {
    1
}

impl TrainConfig {
    /// Defaults for everything but the epoch count, plan and seeds.
    pub fn new(epochs: usize, stage_plan: StagePlan, data_seed: u64, init_seed: u64) -> Self {
        TrainConfig {
            epochs,
            base_lr: default_base_lr(),
            warmup_fraction: default_warmup(),
            decay_fractions: default_decays(),
            stage_plan,
            data_seed,
            init_seed,
            adam: AdamConfig::default(),
            clip_grad_norm: None,
            on_non_finite: NonFinitePolicy::Abort,
            jobs: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if !(self.base_lr.is_finite() && self.base_lr >= 0.0) {
            return Err(Error::Config(format!("bad base_lr {}", self.base_lr)));
        }
        let d = &self.decay_fractions;
        if d.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) || d.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config(format!(
                "decay fractions must increase within (0, 1]: {d:?}"
            )));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction)
            || d.first().is_some_and(|&f| self.warmup_fraction >= f)
        {
            return Err(Error::Config(format!(
                "warmup fraction {} must be below the first decay fraction",
                self.warmup_fraction
            )));
        }
        if self.clip_grad_norm.is_some_and(|c| c.is_nan() || c <= 0.0) {
            return Err(Error::Config("clip_grad_norm must be positive".into()));
        }
        self.stage_plan.validate()
    }

    pub fn warmup_epochs(&self) -> usize {
        (self.warmup_fraction * self.epochs as f64).round() as usize
    }
}

/// Learning rate for a whole epoch: linear from 0 over the warmup epochs,
/// then halved once for every decay fraction already reached.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(invalid!("epoch {epoch} outside 0..{}", cfg.epochs));
    }
    let warmup = cfg.warmup_epochs();
    if epoch < warmup {
        return Ok(cfg.base_lr * epoch as f64 / warmup as f64);
    }
    let halvings = cfg
        .decay_fractions
        .iter()
        .filter(|&&f| epoch >= (f * cfg.epochs as f64).round() as usize)
        .count();
    Ok(cfg.base_lr / (1u64 << halvings) as f64)
}

/// First and second moment estimates.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
    pub step: u64,
}

impl AdamState {
    pub fn zeros_like(params: &[Tensor<f32>]) -> Self {
        let z: Vec<_> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        AdamState {
            m: z.clone(),
            v: z,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(
    params: &mut [Tensor<f32>],
    grads: &[Tensor<f32>],
    state: &mut AdamState,
    lr: f64,
    adam: &AdamConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len()
    {
        return Err(invalid!(
            "adam_step: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        ));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::shape("adam_step", p.shape(), g.shape()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - adam.beta1.powi(t);
    let c2 = 1.0 - adam.beta2.powi(t);
    let (b1, b2) = (adam.beta1, adam.beta2);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for (((pi, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            let g = gi as f64;
            let mn = b1 * *mi as f64 + (1.0 - b1) * g;
            let vn = b2 * *vi as f64 + (1.0 - b2) * g * g;
            *mi = mn as f32;
            *vi = vn as f32;
            let update = lr * (mn / c1) / ((vn / c2).sqrt() + adam.eps);
            *pi = (*pi as f64 - update) as f32;
        }
    }
    Ok(())
}

/// SHA-256 over each sample's `lq` then `hq` bytes (f32 little-endian), in batch order.
pub fn batch_digest(batch: &[(Tensor<f32>, Tensor<f32>)]) -> [u8; 32] {
    let mut h = Sha256::new();
    for (lq, hq) in batch {
        h.update(lq.to_le_bytes());
        h.update(hq.to_le_bytes());
    }
    h.finalize().into()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    /// Global iteration index.
    pub iter: usize,
    pub loss: f64,
    pub lr: f64,
    pub batch_digest: [u8; 32],
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
    pub checkpoint: Option<PathBuf>,
}

pub const TRAIN_LOG_HEADER: &str = "epoch,iter,loss,lr,batch_digest";

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{TRAIN_LOG_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{:e},{:e},{}",
                r.epoch,
                r.iter,
                r.loss,
                r.lr,
                hex::encode(r.batch_digest)
            );
        }
        out
    }

    /// Only the `epoch,iter,batch_digest` columns: equal across models trained on one schedule.
    pub fn digest_csv(&self) -> String {
        let mut out = String::from("epoch,iter,batch_digest\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{}",
                r.epoch,
                r.iter,
                hex::encode(r.batch_digest)
            );
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn losses(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.loss).collect()
    }
}

/// Splits each epoch into consecutive batches of the stage's batch size,
/// keeping the last partial batch.
pub fn batches<'s>(
    schedule: &'s Schedule,
    plan: &StagePlan,
) -> Vec<(usize, Vec<&'s ScheduleEntry>)> {
    let mut out = Vec::new();
    for epoch in 0..schedule.epochs {
        let bs = plan.stage_at(epoch).batch_size;
        let entries: Vec<&ScheduleEntry> = schedule.epoch_entries(epoch).collect();
        out.extend(entries.chunks(bs).map(|c| (epoch, c.to_vec())));
    }
    out
}

fn sample_grads(
    model: &Model,
    lq: &Tensor<f32>,
    hq: &Tensor<f32>,
) -> Result<(f64, Vec<Tensor<f32>>)> {
    let tape = Tape::new();
    let params = model.params.bind(&tape, true);
    let cx = Ctx::new(&params);
    let pred = model.forward(&cx, tape.constant(lq.clone()))?;
    let loss = pred.l1_loss(tape.constant(hq.clone()))?;
    let mut grads = tape.backward(loss)?;
    let g = params
        .iter()
        .zip(model.params.tensors())
        .map(|(&p, t)| grads.take(p).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    Ok((loss.item() as f64, g))
}

fn all_finite(ts: &[Tensor<f32>]) -> bool {
    ts.iter().all(|t| t.data().iter().all(|v| v.is_finite()))
}

/// Builds the model from `model_config` and trains it on `dataset`.
pub fn train(
    cfg: &TrainConfig,
    model_config: &ModelConfig,
    dataset: &Dataset,
) -> Result<(Model, TrainLog)> {
    let model = build_model(model_config, cfg.init_seed)?;
    train_model(cfg, model, dataset, |_| {})
}

/// Trains an already built model, calling `on_iter` after every logged row.
pub fn train_model(
    cfg: &TrainConfig,
    mut model: Model,
    dataset: &Dataset,
    mut on_iter: impl FnMut(&LogRow),
) -> Result<(Model, TrainLog)> {
    cfg.validate()?;
    let schedule = build_schedule(
        dataset.manifest(),
        &cfg.stage_plan,
        cfg.epochs,
        cfg.data_seed,
    )?;
    let mut state = AdamState::zeros_like(model.params.tensors());
    let mut log = TrainLog::default();
    for (iter, (epoch, entries)) in batches(&schedule, &cfg.stage_plan).into_iter().enumerate() {
        let lr = lr_at(epoch, cfg)?;
        let batch = entries
            .iter()
            .map(|e| {
                let img = dataset
                    .image(&e.image_id)
                    .ok_or_else(|| invalid!("schedule names unknown image `{}`", e.image_id))?;
                materialize_sample(e, img)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut row = LogRow {
            epoch,
            iter,
            loss: f64::NAN,
            lr,
            batch_digest: batch_digest(&batch),
        };

        let per_sample = parallel_map(batch.len(), cfg.jobs, |i| {
            sample_grads(&model, &batch[i].0, &batch[i].1)
        })?;
        let n = per_sample.len() as f32;
        let mut loss = 0.0;
        let mut grads: Vec<Tensor<f32>> = model
            .params
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        for (l, g) in &per_sample {
            loss += l;
            for (acc, gi) in grads.iter_mut().zip(g) {
                acc.data_mut()
                    .iter_mut()
                    .zip(gi.data())
                    .for_each(|(a, &b)| *a += b);
            }
        }
        grads
            .iter_mut()
            .for_each(|g| g.data_mut().iter_mut().for_each(|v| *v /= n));
        row.loss = loss / per_sample.len() as f64;

        if !row.loss.is_finite() || !all_finite(&grads) {
            if cfg.on_non_finite == NonFinitePolicy::Abort {
                return Err(Error::NonFiniteLoss { epoch, iter });
            }
            // keep the pre-step parameters and moments
            row.loss = if row.loss.is_finite() {
                f64::INFINITY
            } else {
                row.loss
            };
            on_iter(&row);
            log.rows.push(row);
            continue;
        }
        if let Some(max) = cfg.clip_grad_norm {
            let norm = grads
                .iter()
                .flat_map(|g| g.data())
                .map(|&v| (v as f64) * (v as f64))
                .sum::<f64>()
                .sqrt();
            if norm > max {
                let s = (max / norm) as f32;
                grads
                    .iter_mut()
                    .for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= s));
            }
        }
        on_iter(&row);
        log.rows.push(row);
        adam_step(
            model.params.tensors_mut(),
            &grads,
            &mut state,
            lr,
            &cfg.adam,
        )?;
    }
    Ok((model, log))
}

/// Trains, then writes `train_log.csv` and `model.fdnc` (plus its sidecar) into `dir`.
pub fn train_to_dir(
    cfg: &TrainConfig,
    model_config: &ModelConfig,
    dataset: &Dataset,
    dir: impl AsRef<Path>,
    on_iter: impl FnMut(&LogRow),
) -> Result<(Model, TrainLog)> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let model = build_model(model_config, cfg.init_seed)?;
    let (model, mut log) = train_model(cfg, model, dataset, on_iter)?;
    let ckpt = dir.join("model.fdnc");
    save_checkpoint(&model, &ckpt)?;
    log.checkpoint = Some(ckpt);
    log.write_csv(dir.join("train_log.csv"))?;
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(epochs: usize) -> TrainConfig {
        TrainConfig::new(epochs, StagePlan::constant(16, 4), 0, 0)
    }

    #[test]
    fn lr_schedule_examples() {
        let c = cfg(400);
        assert_eq!(c.warmup_epochs(), 20);
        assert_eq!(lr_at(0, &c).unwrap(), 0.0);
        assert_eq!(lr_at(10, &c).unwrap(), 2e-4);
        assert_eq!(lr_at(20, &c).unwrap(), 4e-4);
        assert_eq!(lr_at(199, &c).unwrap(), 4e-4);
        assert_eq!(lr_at(200, &c).unwrap(), 2e-4);
        assert_eq!(lr_at(300, &c).unwrap(), 1e-4);
        assert_eq!(lr_at(375, &c).unwrap(), 4e-4 / 16.0);
        assert_eq!(lr_at(399, &c).unwrap(), 4e-4 / 16.0);
        assert!(lr_at(400, &c).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = cfg(10);
        assert!(c.validate().is_ok());
        c.decay_fractions = vec![0.5, 0.4];
        assert!(c.validate().is_err());
        let mut c = cfg(10);
        c.warmup_fraction = 0.6;
        assert!(c.validate().is_err());
        let mut c = cfg(10);
        c.clip_grad_norm = Some(0.0);
        assert!(c.validate().is_err());
    }

    #[test]
    fn adam_first_step_and_zero_gradient() {
        let adam = AdamConfig::default();
        let mut p = vec![Tensor::full(&[3], 1.0f32)];
        let mut st = AdamState::zeros_like(&p);
        adam_step(&mut p, &[Tensor::full(&[3], 1.0)], &mut st, 1e-3, &adam).unwrap();
        let want = 1.0 - 1e-3 / (1.0 + 1e-8);
        assert!(p[0].data().iter().all(|&v| (v as f64 - want).abs() < 1e-7));

        let mut q = vec![Tensor::full(&[2], 0.5f32)];
        let mut st = AdamState::zeros_like(&q);
        adam_step(&mut q, &[Tensor::zeros(&[2])], &mut st, 1e-3, &adam).unwrap();
        assert_eq!(q[0].data(), &[0.5, 0.5]);
        assert_eq!(st.step, 1);
        assert!(adam_step(&mut q, &[Tensor::zeros(&[3])], &mut st, 1e-3, &adam).is_err());
    }

    #[test]
    fn train_log_csv_format() {
        let log = TrainLog {
            rows: vec![LogRow {
                epoch: 0,
                iter: 0,
                loss: 0.5,
                lr: 0.0,
                batch_digest: [0xab; 32],
            }],
            checkpoint: None,
        };
        let csv = log.to_csv();
        assert!(csv.starts_with("epoch,iter,loss,lr,batch_digest\n0,0,5e-1,0e0,abab"));
        assert!(log
            .digest_csv()
            .ends_with(&format!("0,0,{}\n", "ab".repeat(32))));
    }
}
