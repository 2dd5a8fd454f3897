//! Optimisation loop for the noise-regression objective: linear warm-up,
//! Adam, an EMA shadow copy of the weights, checkpoints and a step log.
//!
//! All randomness of step `s` (crop offsets, rotation angles, timesteps,
//! noise) comes from a generator seeded by `(seed, s)`, and the shuffle of
//! epoch `e` from one seeded by `(seed, e)`. Resuming at any step therefore
//! replays exactly what an uninterrupted run would have done.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment_rotate, PairedSample};
use crate::denoiser::{Checkpoint, Denoiser, DenoiserConfig, DenoiserParams, ParamTensor};
use crate::diffusion::{conditioning, training_loss_conditioned, TrainableNoisePredictor, SR_FACTOR};
use crate::error::{Error, Result};
use crate::image::{ImageTensor, Range};
use crate::resample::degrade;
use crate::schedule::{rescaled_endpoints, NoiseSchedule};

const EMA_PREFIX: &str = "ema.";
const ADAM_M_PREFIX: &str = "adam_m.";
const ADAM_V_PREFIX: &str = "adam_v.";
const BETA_START_KEY: &str = "beta_start";
const BETA_END_KEY: &str = "beta_end";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub ema_decay: f64,
    pub seed: u64,
    /// Save a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: usize,
    /// Rotation magnitudes in degrees; each sample draws uniformly from
    /// `{0} ∪ {±a}`. Empty disables augmentation.
    pub augment_angles: Vec<f64>,
    /// Train on random aligned `crop x crop` HR patches instead of full images.
    pub crop_size: Option<usize>,
    /// Stop after this many steps even if epochs remain.
    pub max_steps: Option<usize>,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 4,
            epochs: 64,
            base_lr: 2e-4,
            warmup_steps: 500,
            ema_decay: 0.999,
            seed: 0,
            checkpoint_every: 1000,
            augment_angles: vec![5.0, 10.0, 15.0],
            crop_size: None,
            max_steps: None,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::config(format!("base_lr {} must be positive", self.base_lr)));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::config(format!("ema_decay {} outside [0, 1)", self.ema_decay)));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::config("Adam moment decays must lie in [0, 1)"));
        }
        if self.adam_eps <= 0.0 {
            return Err(Error::config("adam_eps must be positive"));
        }
        if let Some(c) = self.crop_size {
            if c == 0 || c % SR_FACTOR != 0 {
                return Err(Error::config(format!("crop size {c} must be a positive multiple of {SR_FACTOR}")));
            }
        }
        if self.augment_angles.iter().any(|a| !a.is_finite()) {
            return Err(Error::config("augmentation angles must be finite"));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, train_len: usize) -> usize {
        train_len.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self, train_len: usize) -> usize {
        let full = self.epochs * self.steps_per_epoch(train_len);
        self.max_steps.map_or(full, |m| m.min(full))
    }
}

/// Learning rate at (1-based) step `step`: a linear ramp to `base_lr` over
/// `warmup_steps`, constant afterwards.
pub fn warmup_lr(step: usize, config: &TrainConfig) -> f64 {
    if config.warmup_steps == 0 {
        return config.base_lr;
    }
    config.base_lr * (step as f64 / config.warmup_steps as f64).min(1.0)
}

/// `decay * shadow + (1 - decay) * current`, elementwise.
pub fn ema_update(shadow: &DenoiserParams, current: &DenoiserParams, decay: f64) -> Result<DenoiserParams> {
    let mut out = shadow.clone();
    ema_update_in_place(&mut out, current, decay)?;
    Ok(out)
}

pub fn ema_update_in_place(shadow: &mut DenoiserParams, current: &DenoiserParams, decay: f64) -> Result<()> {
    if !shadow.same_layout(current) {
        return Err(Error::shape("EMA shadow and current parameters differ in layout"));
    }
    let take = (1.0 - decay) as f32;
    for (s, c) in shadow.tensors.values_mut().zip(current.tensors.values()) {
        if decay == 0.0 {
            s.data.copy_from_slice(&c.data);
            continue;
        }
        for (a, &b) in s.data.iter_mut().zip(&c.data) {
            *a += take * (b - *a);
        }
    }
    Ok(())
}

/// First and second moment estimates keyed by parameter name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub first: DenoiserParams,
    pub second: DenoiserParams,
}

impl AdamState {
    pub fn zeros_like(params: &DenoiserParams) -> Self {
        let zero = DenoiserParams {
            tensors: params
                .tensors
                .iter()
                .map(|(k, v)| {
                    (
                        k.clone(),
                        ParamTensor {
                            shape: v.shape.clone(),
                            data: vec![0.0; v.data.len()],
                        },
                    )
                })
                .collect(),
        };
        Self {
            first: zero.clone(),
            second: zero,
        }
    }

    /// One bias-corrected Adam update at 1-based step `step`.
    pub fn apply<M: TrainableNoisePredictor + ?Sized>(
        &mut self,
        model: &mut M,
        step: usize,
        lr: f64,
        config: &TrainConfig,
    ) -> Result<()> {
        let (b1, b2) = (config.adam_beta1, config.adam_beta2);
        let c1 = 1.0 - b1.powi(step as i32);
        let c2 = 1.0 - b2.powi(step as i32);
        let step_size = (lr / c1) as f32;
        let c2_sqrt = c2.sqrt() as f32;
        let (b1, b2, eps) = (b1 as f32, b2 as f32, config.adam_eps as f32);
        let mut missing = None;
        let (first, second) = (&mut self.first.tensors, &mut self.second.tensors);
        model.for_each_param(&mut |name, p| {
            let (Some(m), Some(v)) = (first.get_mut(name), second.get_mut(name)) else {
                missing.get_or_insert_with(|| name.to_string());
                return;
            };
            for (((w, &g), m), v) in p.value.iter_mut().zip(&p.grad).zip(&mut m.data).zip(&mut v.data) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *w -= step_size * *m / ((*v).sqrt() / c2_sqrt + eps);
            }
        });
        match missing {
            Some(name) => Err(Error::config(format!("optimizer has no state for parameter {name}"))),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    /// Wall-clock seconds per completed epoch.
    pub epoch_seconds: Vec<f64>,
}

impl TrainLog {
    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|r| r.loss).collect()
    }

    /// One JSON object per line.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.steps {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let steps = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<StepRecord>, _>>()?;
        Ok(Self {
            steps,
            epoch_seconds: Vec::new(),
        })
    }
}

/// Converted and conditioned views of one sample, ready for cropping.
struct Prepared {
    target: ImageTensor,
    cond: ImageTensor,
}

fn prepare(hr: &ImageTensor, factor: usize) -> Result<Prepared> {
    let lr = degrade(hr, factor)?;
    Ok(Prepared {
        target: hr.convert(Range::Symmetric),
        cond: conditioning(&lr)?,
    })
}

/// Independent generator for `(seed, stream, index)`.
pub(crate) fn derived_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&stream.to_le_bytes());
    key[16..24].copy_from_slice(&index.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

const STEP_STREAM: u64 = 1;
const SHUFFLE_STREAM: u64 = 2;

/// Model, EMA shadow, optimizer state and position of a training run.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Denoiser,
    pub ema: DenoiserParams,
    pub adam: AdamState,
    /// Steps completed so far.
    pub step: usize,
    schedule: NoiseSchedule,
    samples: Vec<PairedSample>,
    cache: Vec<Prepared>,
    order: Option<(usize, Vec<usize>)>,
}

impl Trainer {
    pub fn new(
        config: TrainConfig,
        denoiser: DenoiserConfig,
        schedule: NoiseSchedule,
        train_samples: Vec<PairedSample>,
    ) -> Result<Self> {
        let model = Denoiser::new(denoiser)?;
        let ema = model.params();
        let adam = AdamState::zeros_like(&ema);
        Self::assemble(config, model, ema, adam, 0, schedule, train_samples)
    }

    /// Continues from a state checkpoint written by [`Trainer::state_checkpoint`].
    pub fn resume(
        config: TrainConfig,
        checkpoint: &Checkpoint,
        schedule: NoiseSchedule,
        train_samples: Vec<PairedSample>,
    ) -> Result<Self> {
        let step: usize = checkpoint
            .meta
            .get("step")
            .ok_or_else(|| Error::Checkpoint("no step recorded; not a training state".into()))?
            .parse()
            .map_err(|_| Error::Checkpoint("unparsable step".into()))?;
        let weights = checkpoint.params_excluding(&[EMA_PREFIX, ADAM_M_PREFIX, ADAM_V_PREFIX]);
        let model = Denoiser::from_params(checkpoint.config.clone(), &weights)?;
        let ema = checkpoint.params_with_prefix(EMA_PREFIX);
        let adam = AdamState {
            first: checkpoint.params_with_prefix(ADAM_M_PREFIX),
            second: checkpoint.params_with_prefix(ADAM_V_PREFIX),
        };
        for (what, p) in [("EMA", &ema), ("Adam first moment", &adam.first), ("Adam second moment", &adam.second)] {
            if !p.same_layout(&weights) {
                return Err(Error::Checkpoint(format!("{what} tensors do not match the weights")));
            }
        }
        Self::assemble(config, model, ema, adam, step, schedule, train_samples)
    }

    fn assemble(
        config: TrainConfig,
        model: Denoiser,
        ema: DenoiserParams,
        adam: AdamState,
        step: usize,
        schedule: NoiseSchedule,
        samples: Vec<PairedSample>,
    ) -> Result<Self> {
        config.validate()?;
        if samples.is_empty() {
            return Err(Error::Empty("training split has no samples".into()));
        }
        if schedule.timesteps() != model.config().num_timesteps {
            return Err(Error::config(format!(
                "schedule has {} steps, denoiser was built for {}",
                schedule.timesteps(),
                model.config().num_timesteps
            )));
        }
        let side = samples[0].hr.height();
        let multiple = model.config().spatial_multiple();
        let patch = config.crop_size.unwrap_or(side);
        if patch % multiple != 0 {
            return Err(Error::config(format!("training patch {patch} is not a multiple of {multiple}")));
        }
        for s in &samples {
            if s.hr.height() < patch || s.hr.width() < patch {
                return Err(Error::config(format!("sample {} is smaller than the {patch} patch", s.id)));
            }
            if config.crop_size.is_none() && (s.hr.height() != side || s.hr.width() != side) {
                return Err(Error::shape("full-image training needs equally sized samples"));
            }
        }
        let cache = samples.iter().map(|s| prepare(&s.hr, SR_FACTOR)).collect::<Result<_>>()?;
        Ok(Self {
            config,
            model,
            ema,
            adam,
            step,
            schedule,
            samples,
            cache,
            order: None,
        })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.config.steps_per_epoch(self.samples.len())
    }

    pub fn total_steps(&self) -> usize {
        self.config.total_steps(self.samples.len())
    }

    fn epoch_order(&mut self, epoch: usize) -> &[usize] {
        if self.order.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut idx: Vec<usize> = (0..self.samples.len()).collect();
            idx.shuffle(&mut derived_rng(self.config.seed, SHUFFLE_STREAM, epoch as u64));
            self.order = Some((epoch, idx));
        }
        &self.order.as_ref().expect("just set").1
    }

    fn draw_view(&self, index: usize, rng: &mut ChaCha8Rng) -> Result<(ImageTensor, ImageTensor)> {
        let angles = &self.config.augment_angles;
        let angle = if angles.is_empty() {
            0.0
        } else {
            let k = rng.random_range(0..=2 * angles.len());
            match k {
                0 => 0.0,
                k if k <= angles.len() => angles[k - 1],
                k => -angles[k - 1 - angles.len()],
            }
        };
        let rotated;
        let view = if angle == 0.0 {
            &self.cache[index]
        } else {
            rotated = prepare(&augment_rotate(&self.samples[index].hr, angle), SR_FACTOR)?;
            &rotated
        };
        match self.config.crop_size {
            None => Ok((view.target.clone(), view.cond.clone())),
            Some(c) => {
                let (h, w, _) = view.target.dims();
                let top = rng.random_range(0..=(h - c) / SR_FACTOR) * SR_FACTOR;
                let left = rng.random_range(0..=(w - c) / SR_FACTOR) * SR_FACTOR;
                Ok((view.target.crop(top, left, c, c)?, view.cond.crop(top, left, c, c)?))
            }
        }
    }

    /// Runs the next step and returns its record.
    pub fn step_once(&mut self) -> Result<StepRecord> {
        let step = self.step + 1;
        let spe = self.steps_per_epoch();
        let epoch = (step - 1) / spe;
        let within = (step - 1) % spe;
        let batch = self.config.batch_size;
        let members: Vec<usize> = {
            let order = self.epoch_order(epoch);
            order[within * batch..((within + 1) * batch).min(order.len())].to_vec()
        };
        let mut rng = derived_rng(self.config.seed, STEP_STREAM, step as u64);
        let mut targets = Vec::with_capacity(members.len());
        let mut conds = Vec::with_capacity(members.len());
        for &i in &members {
            let (t, c) = self.draw_view(i, &mut rng)?;
            targets.push(t);
            conds.push(c);
        }
        let lr = warmup_lr(step, &self.config);
        self.model.zero_grad();
        let outcome = training_loss_conditioned(&mut self.model, &targets, &conds, &self.schedule, &mut rng)?;
        if !outcome.loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                lr,
                loss: outcome.loss,
                batch_ids: members.iter().map(|&i| self.samples[i].id.clone()).collect(),
            });
        }
        self.adam.apply(&mut self.model, step, lr, &self.config)?;
        ema_update_in_place(&mut self.ema, &self.model.params(), self.config.ema_decay)?;
        self.step = step;
        Ok(StepRecord {
            step,
            epoch,
            lr,
            loss: outcome.loss,
        })
    }

    /// Weights, EMA shadow and optimizer moments in one checkpoint.
    pub fn state_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(self.model.config().clone(), &self.model.params());
        ck.insert_params(EMA_PREFIX, &self.ema);
        ck.insert_params(ADAM_M_PREFIX, &self.adam.first);
        ck.insert_params(ADAM_V_PREFIX, &self.adam.second);
        ck.meta.insert("step".into(), self.step.to_string());
        ck.meta.insert("train_config".into(), serde_json::to_string(&self.config)?);
        let betas = self.schedule.betas();
        ck.meta.insert(BETA_START_KEY.into(), betas[0].to_string());
        ck.meta.insert(BETA_END_KEY.into(), betas[betas.len() - 1].to_string());
        Ok(ck)
    }

    pub fn ema_denoiser(&self) -> Result<Denoiser> {
        Denoiser::from_params(self.model.config().clone(), &self.ema)
    }
}

/// The linear schedule a checkpoint was trained with: `num_timesteps` from its
/// config, endpoints from its metadata or else the rescaled defaults.
pub fn checkpoint_schedule(checkpoint: &Checkpoint) -> Result<NoiseSchedule> {
    let steps = checkpoint.config.num_timesteps;
    let beta = |key: &str| -> Result<Option<f64>> {
        checkpoint
            .meta
            .get(key)
            .map(|v| v.parse().map_err(|_| Error::Checkpoint(format!("unparsable {key} {v:?}"))))
            .transpose()
    };
    let (start, end) = match (beta(BETA_START_KEY)?, beta(BETA_END_KEY)?) {
        (Some(start), Some(end)) => (start, end),
        (start, end) => {
            let (s, e) = rescaled_endpoints(steps)?;
            (start.unwrap_or(s), end.unwrap_or(e))
        }
    };
    NoiseSchedule::linear(steps, start, end)
}

/// Loads sampling weights from a checkpoint, preferring the EMA shadow.
pub fn sampling_denoiser(checkpoint: &Checkpoint) -> Result<Denoiser> {
    let ema = checkpoint.params_with_prefix(EMA_PREFIX);
    let params = if ema.tensors.is_empty() {
        checkpoint.params_excluding(&[ADAM_M_PREFIX, ADAM_V_PREFIX])
    } else {
        ema
    };
    Denoiser::from_params(checkpoint.config.clone(), &params)
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub params: DenoiserParams,
    pub ema: DenoiserParams,
    pub log: TrainLog,
    pub checkpoints: Vec<PathBuf>,
}

pub fn checkpoint_name(step: usize) -> String {
    format!("checkpoint_{step:06}.ckpt")
}

pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";

/// Runs `trainer` to completion. With `out_dir`, checkpoints go there at the
/// configured cadence and at the end, and the step log is streamed to
/// `train_log.jsonl` (appending when resuming).
pub fn run_training(trainer: &mut Trainer, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let total = trainer.total_steps();
    let spe = trainer.steps_per_epoch();
    let mut log = TrainLog::default();
    let mut checkpoints = Vec::new();
    let mut writer = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(TRAIN_LOG_FILE);
            let file = fs::OpenOptions::new()
                .create(true)
                .append(trainer.step > 0)
                .write(true)
                .truncate(trainer.step == 0)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            Some((path, BufWriter::new(file)))
        }
        None => None,
    };
    let save = |trainer: &Trainer, checkpoints: &mut Vec<PathBuf>| -> Result<()> {
        if let Some(dir) = out_dir {
            let path = dir.join(checkpoint_name(trainer.step));
            crate::denoiser::write_checkpoint(&path, &trainer.state_checkpoint()?)?;
            checkpoints.push(path);
        }
        Ok(())
    };
    let mut epoch_start = Instant::now();
    while trainer.step < total {
        let record = trainer.step_once()?;
        if let Some((path, w)) = writer.as_mut() {
            let line = serde_json::to_string(&record)?;
            writeln!(w, "{line}").map_err(|e| Error::io(path.as_path(), e))?;
        }
        log.steps.push(record);
        if record.step % spe == 0 {
            log.epoch_seconds.push(epoch_start.elapsed().as_secs_f64());
            epoch_start = Instant::now();
            info!("epoch {} done at step {} (loss {:.4})", record.epoch, record.step, record.loss);
        }
        let every = trainer.config.checkpoint_every;
        if every > 0 && record.step % every == 0 && record.step < total {
            save(trainer, &mut checkpoints)?;
        }
    }
    if let Some((path, w)) = writer.as_mut() {
        w.flush().map_err(|e| Error::io(path.as_path(), e))?;
    }
    save(trainer, &mut checkpoints)?;
    Ok(TrainOutcome {
        params: trainer.model.params(),
        ema: trainer.ema.clone(),
        log,
        checkpoints,
    })
}

/// Trains from scratch on the training split of `samples`.
pub fn train(
    config: TrainConfig,
    train_samples: Vec<PairedSample>,
    denoiser: DenoiserConfig,
    schedule: NoiseSchedule,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config, denoiser, schedule, train_samples)?;
    run_training(&mut trainer, out_dir)
}

/// Reads a step log written by [`run_training`].
pub fn read_train_log(path: impl AsRef<Path>) -> Result<TrainLog> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    TrainLog::from_jsonl(&text)
}
