//! Optimization loop: only the image encoder, its projection head and
//! (optionally) the temperature receive updates. The caption embeddings are
//! read from the cache and never have optimizer state.

mod optim;
mod schedule;

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::time::Instant;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::cache::EmbeddingCache;
use crate::checkpoint;
use crate::data::DatasetManifest;
use crate::error::{LiftError, Result};
use crate::loss::{contrastive_loss, cosine_loss, AlignedBatch, Temperature, DEFAULT_INIT_TAU};
use crate::vit::{
    backward, forward, forward_tape, init_params, EncoderParams, ImageTensor, ViTConfig,
};

pub use optim::{AdamHyper, AdamState, ScalarAdam};
pub use schedule::lr_at;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Contrastive,
    Cosine,
}

impl std::str::FromStr for LossKind {
    type Err = LiftError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "contrastive" => Ok(LossKind::Contrastive),
            "cosine" => Ok(LossKind::Cosine),
            other => Err(LiftError::Config(format!("unknown loss {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub total_steps: u64,
    pub warmup_steps: u64,
    pub peak_lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub loss: LossKind,
    pub seed: u64,
    /// Write a checkpoint every this many steps; 0 disables.
    pub checkpoint_every: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub init_tau: f64,
    pub learn_temperature: bool,
    /// When false the `wall_ms` metrics column is written as 0 so reruns
    /// produce byte-identical logs.
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 1000,
            warmup_steps: 500,
            peak_lr: 1e-3,
            weight_decay: 0.2,
            batch_size: 64,
            loss: LossKind::Contrastive,
            seed: 0,
            checkpoint_every: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.98,
            adam_epsilon: 1e-8,
            init_tau: DEFAULT_INIT_TAU,
            learn_temperature: true,
            record_wall_time: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_steps > 0 && self.warmup_steps >= self.total_steps {
            return Err(LiftError::Config(format!(
                "warmup_steps {} must be below total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if !(self.peak_lr > 0.0) {
            return Err(LiftError::Config("peak_lr must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(LiftError::Config("batch_size must be at least 1".into()));
        }
        if !(self.init_tau > 0.0) {
            return Err(LiftError::Config("init_tau must be positive".into()));
        }
        Ok(())
    }

    pub fn temperature(&self) -> Temperature {
        if self.learn_temperature {
            Temperature::learnable(self.init_tau)
        } else {
            Temperature::fixed(self.init_tau)
        }
    }

    fn hyper(&self, lr: f64, t: u64) -> AdamHyper {
        AdamHyper {
            lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_epsilon,
            weight_decay: self.weight_decay,
            t,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossStats {
    pub last: f64,
    pub ema: f64,
    pub count: u64,
}

impl LossStats {
    const DECAY: f64 = 0.95;

    fn record(&mut self, loss: f64) {
        self.ema = if self.count == 0 {
            loss
        } else {
            Self::DECAY * self.ema + (1.0 - Self::DECAY) * loss
        };
        self.last = loss;
        self.count += 1;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub params: EncoderParams<f32>,
    pub adam: AdamState,
    pub temperature: Temperature,
    pub temperature_adam: ScalarAdam,
    pub stats: LossStats,
}

/// Images plus their cached caption embeddings, row-aligned.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub ids: Vec<u64>,
    pub images: Vec<ImageTensor>,
    pub text: Array2<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub lr: f64,
    pub loss: f64,
    pub similarity_evals: u64,
}

fn first_non_finite(grads: &EncoderParams<f32>) -> Option<String> {
    grads
        .tensors()
        .into_iter()
        .find(|(_, d)| !d.iter().all(|x| x.is_finite()))
        .map(|(i, _)| i.name)
}

impl TrainState {
    pub fn new(model: &ViTConfig, config: &TrainConfig) -> Result<Self> {
        let params = init_params::<f32>(model, config.seed)?;
        Ok(Self {
            step: 0,
            adam: AdamState::new(&params),
            params,
            temperature: config.temperature(),
            temperature_adam: ScalarAdam::default(),
            stats: LossStats::default(),
        })
    }

    /// Evaluates the configured loss on `batch` without updating anything.
    pub fn evaluate(&self, batch: &TrainBatch, config: &TrainConfig) -> Result<f64> {
        let emb = forward(&self.params, &batch.images)?;
        let aligned =
            AlignedBatch::new(batch.text.clone(), emb.mapv(f64::from), batch.ids.clone())?;
        match config.loss {
            LossKind::Contrastive => contrastive_loss(&aligned, &self.temperature),
            LossKind::Cosine => cosine_loss(&aligned),
        }
        .map(|o| o.loss)
    }

    /// One optimizer update on `batch`.
    pub fn train_step(&mut self, batch: &TrainBatch, config: &TrainConfig) -> Result<StepReport> {
        let lr = lr_at(config, self.step)?;
        let (emb, tape) = forward_tape(&self.params, &batch.images)?;
        if !emb.iter().all(|x| x.is_finite()) {
            return Err(LiftError::Numeric(format!(
                "image embeddings non-finite at step {}",
                self.step
            )));
        }
        let aligned =
            AlignedBatch::new(batch.text.clone(), emb.mapv(f64::from), batch.ids.clone())?;
        let out = match config.loss {
            LossKind::Contrastive => contrastive_loss(&aligned, &self.temperature)?,
            LossKind::Cosine => cosine_loss(&aligned)?,
        };
        if !out.loss.is_finite() {
            return Err(LiftError::Numeric(format!(
                "loss is {} at step {}",
                out.loss, self.step
            )));
        }
        let upstream = out.image_grad.mapv(|x| x as f32);
        let grads = backward(&self.params, &tape, &upstream)?;
        if let Some(name) = first_non_finite(&grads) {
            return Err(LiftError::Numeric(format!(
                "non-finite gradient in {name} at step {}",
                self.step
            )));
        }

        let hyper = config.hyper(lr, self.step + 1);
        self.adam.step(&mut self.params, &grads, hyper);
        if let (true, Some(g)) = (self.temperature.learnable, out.log_scale_grad) {
            if !g.is_finite() {
                return Err(LiftError::Numeric(format!(
                    "non-finite gradient in log_scale at step {}",
                    self.step
                )));
            }
            self.temperature_adam
                .step(&mut self.temperature.log_scale, g, hyper);
            self.temperature.clamp();
        }
        self.step += 1;
        self.stats.record(out.loss);
        Ok(StepReport {
            lr,
            loss: out.loss,
            similarity_evals: out.similarity_evals,
        })
    }
}

/// Loads images and gathers caption embeddings for the given manifest rows.
pub fn load_batch(
    manifest: &DatasetManifest,
    cache: &EmbeddingCache,
    model: &ViTConfig,
    indices: &[usize],
) -> Result<TrainBatch> {
    let ids = manifest.caption_ids(indices);
    let text = cache.batch_gather(&ids)?.mapv(f64::from);
    let images = manifest.load_images(indices, model.channels, model.image_size)?;
    Ok(TrainBatch { ids, images, text })
}

/// Pairs the encoder's embeddings of the given rows with their cached
/// caption embeddings.
pub fn make_batch(
    manifest: &DatasetManifest,
    cache: &EmbeddingCache,
    params: &EncoderParams<f32>,
    indices: &[usize],
) -> Result<AlignedBatch> {
    let batch = load_batch(manifest, cache, &params.config, indices)?;
    let emb = forward(params, &batch.images)?;
    AlignedBatch::new(batch.text, emb.mapv(f64::from), batch.ids)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricRow {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub wall_ms: f64,
}

pub const METRICS_HEADER: &str = "step,lr,loss,wall_ms";

impl MetricRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{:.3}",
            self.step, self.lr, self.loss, self.wall_ms
        )
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Periodic checkpoints go here as `step-NNNNNN.lftk`.
    pub checkpoint_dir: Option<PathBuf>,
    /// Append-only CSV log; created with a header when absent.
    pub metrics_path: Option<PathBuf>,
}

#[derive(Debug)]
pub struct RunOutput {
    pub state: TrainState,
    pub metrics: Vec<MetricRow>,
}

struct MetricsLog {
    path: PathBuf,
    out: BufWriter<File>,
}

impl MetricsLog {
    fn open(path: PathBuf, resume: bool) -> Result<Self> {
        let append = resume && path.exists();
        let file = if append {
            OpenOptions::new().append(true).open(&path)
        } else {
            File::create(&path)
        }
        .map_err(|e| LiftError::io(&path, e))?;
        let mut log = Self {
            out: BufWriter::new(file),
            path,
        };
        if !append {
            log.line(METRICS_HEADER)?;
        }
        Ok(log)
    }

    fn line(&mut self, s: &str) -> Result<()> {
        writeln!(self.out, "{s}").map_err(|e| LiftError::io(&self.path, e))
    }

    fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| LiftError::io(&self.path, e))
    }
}

pub fn checkpoint_name(step: u64) -> String {
    format!("step-{step:06}.lftk")
}

/// Runs the configured number of steps, starting from `resume` if given.
///
/// Batches are consecutive slices of a per-epoch permutation seeded by the
/// manifest, so a resumed run sees exactly the batches the uninterrupted
/// run would have.
pub fn run(
    manifest: &DatasetManifest,
    cache: &EmbeddingCache,
    model: &ViTConfig,
    config: &TrainConfig,
    opts: &RunOptions,
    resume: Option<TrainState>,
) -> Result<RunOutput> {
    config.validate()?;
    model.validate()?;
    if cache.dim() != model.embed_dim {
        return Err(LiftError::shape(
            "cache dim vs embed_dim",
            model.embed_dim,
            cache.dim(),
        ));
    }
    manifest.check_resolvable(cache)?;
    let resuming = resume.is_some();
    let mut state = match resume {
        Some(s) => {
            if s.params.config != *model {
                return Err(LiftError::Config(
                    "resume checkpoint has a different model config".into(),
                ));
            }
            s
        }
        None => TrainState::new(model, config)?,
    };

    let mut log = opts
        .metrics_path
        .clone()
        .map(|p| MetricsLog::open(p, resuming))
        .transpose()?;
    if let Some(dir) = &opts.checkpoint_dir {
        fs::create_dir_all(dir).map_err(|e| LiftError::io(dir, e))?;
    }

    let mut metrics = Vec::new();
    if state.step < config.total_steps {
        let batch = config.batch_size;
        if manifest.len() < batch {
            return Err(LiftError::Config(format!(
                "manifest has {} entries, fewer than batch_size {batch}",
                manifest.len()
            )));
        }
        let per_epoch = (manifest.len() / batch) as u64;
        let mut order: Option<(u64, Vec<usize>)> = None;
        while state.step < config.total_steps {
            let step = state.step;
            let epoch = step / per_epoch;
            if order.as_ref().map(|(e, _)| *e) != Some(epoch) {
                order = Some((epoch, manifest.epoch_order(epoch)));
            }
            let k = (step % per_epoch) as usize;
            let indices = &order.as_ref().unwrap().1[k * batch..(k + 1) * batch];

            let started = Instant::now();
            let tb = load_batch(manifest, cache, model, indices)?;
            let report = state.train_step(&tb, config)?;
            let wall_ms = if config.record_wall_time {
                started.elapsed().as_secs_f64() * 1e3
            } else {
                0.0
            };
            let row = MetricRow {
                step,
                lr: report.lr,
                loss: report.loss,
                wall_ms,
            };
            if let Some(log) = log.as_mut() {
                log.line(&row.to_csv())?;
            }
            metrics.push(row);

            if let Some(dir) = &opts.checkpoint_dir {
                if config.checkpoint_every > 0 && state.step % config.checkpoint_every == 0 {
                    if let Some(log) = log.as_mut() {
                        log.flush()?;
                    }
                    checkpoint::save_state(
                        dir.join(checkpoint_name(state.step)),
                        &state,
                        Some(config),
                    )?;
                }
            }
        }
    }
    if let Some(log) = log.as_mut() {
        log.flush()?;
    }
    Ok(RunOutput { state, metrics })
}
