//! Training: synthetic corpus, optimizer, weight averaging, checkpoints and
//! the single-threaded training loop.

pub mod checkpoint;
pub mod dataset;
pub mod optim;

#[cfg(test)]
mod tests;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{make_training_batch, training_loss, NoiseSchedule, CLASS_DROP_PROB};
use crate::error::{Error, Result};
use crate::masking::{sample_mask, Mask};
use crate::model::{ChannelNorm, Mdt, ModelConfig, ParamStore};
use crate::stroke::StrokeSequence;
use crate::tensor::{Tape, Tensor};

pub use checkpoint::Checkpoint;
pub use optim::{adam_step, cosine_lr, ema_decay_at, ema_update, AdamState};

pub const LATEST_CHECKPOINT: &str = "latest.ckpt";
pub const TRAIN_LOG: &str = "train_log.jsonl";

/// Draws before giving up on finding a mask with something to predict.
const MASK_RETRIES: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr_max: f64,
    pub batch_size: usize,
    pub total_steps: u64,
    pub ema_decay: f64,
    /// Ramp the averaging horizon up from a few steps (see `ema_decay_at`).
    pub ema_warmup: bool,
    pub class_drop: f64,
    pub seed: u64,
    pub model: ModelConfig,
    pub schedule: NoiseSchedule,
    pub data_dir: PathBuf,
    pub checkpoint_every: u64,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_max: 1e-4,
            batch_size: 32,
            total_steps: 2000,
            ema_decay: 0.9999,
            ema_warmup: true,
            class_drop: CLASS_DROP_PROB,
            seed: 0,
            model: ModelConfig::custom(4, 64, 4, 2),
            schedule: NoiseSchedule::default(),
            data_dir: PathBuf::from("data"),
            checkpoint_every: 500,
            log_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.schedule.validate()?;
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if !(self.lr_max.is_finite() && self.lr_max > 0.0) {
            return bad("lr_max must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return bad("ema_decay must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.class_drop) {
            return bad("class_drop must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: TrainConfig = serde_json::from_str(&text)?;
        config.validate()?;
        Ok(config)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f32,
    pub lr: f64,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: Mdt<f32>,
    pub ema: ParamStore<f32>,
    pub adam: AdamState,
    pub step: u64,
    pub class_names: Vec<String>,
    rng: ChaCha8Rng,
    data: Vec<StrokeSequence>,
}

impl Trainer {
    /// Fresh run: normalization fitted on `data`, weights from the seed.
    pub fn new(config: TrainConfig, data: Vec<StrokeSequence>, class_names: Vec<String>) -> Result<Self> {
        config.validate()?;
        check_data(&config.model, &data)?;
        let norm = ChannelNorm::fit(&data)?;
        let model = Mdt::init(config.model.clone(), norm, config.seed)?;
        let ema = model.params.clone();
        let adam = AdamState::new(model.params.tensors());
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Trainer {
            config,
            model,
            ema,
            adam,
            step: 0,
            class_names,
            rng,
            data,
        })
    }

    pub fn resume(ckpt: Checkpoint, data: Vec<StrokeSequence>) -> Result<Self> {
        let config = ckpt
            .train
            .clone()
            .ok_or_else(|| Error::Malformed("checkpoint carries no training config".into()))?;
        let adam = ckpt
            .adam
            .clone()
            .ok_or_else(|| Error::Malformed("checkpoint carries no optimizer state".into()))?;
        let rng = ckpt
            .rng
            .clone()
            .ok_or_else(|| Error::Malformed("checkpoint carries no rng state".into()))?;
        check_data(&config.model, &data)?;
        let model = ckpt.raw_model()?;
        Ok(Trainer {
            config,
            model,
            ema: ckpt.ema,
            adam,
            step: ckpt.step,
            class_names: ckpt.class_names,
            rng,
            data,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            step: self.step,
            model: self.model.config.clone(),
            norm: self.model.norm,
            schedule: self.config.schedule,
            weights: self.model.params.clone(),
            ema: self.ema.clone(),
            adam: Some(self.adam.clone()),
            class_names: self.class_names.clone(),
            train: Some(self.config.clone()),
            rng: Some(self.rng.clone()),
        }
    }

    pub fn ema_model(&self) -> Mdt<f32> {
        Mdt {
            config: self.model.config.clone(),
            norm: self.model.norm,
            params: self.ema.clone(),
        }
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.config.total_steps
    }

    fn draw_items(&mut self) -> Result<Vec<(usize, Mask)>> {
        let mut items = Vec::with_capacity(self.config.batch_size);
        for _ in 0..self.config.batch_size {
            let idx = self.rng.random_range(0..self.data.len());
            let seq = &self.data[idx];
            let mut mask = None;
            for _ in 0..MASK_RETRIES {
                let (_, m) = sample_mask(&mut self.rng, seq)?;
                if m.predict_count() > 0 {
                    mask = Some(m);
                    break;
                }
            }
            let mask = mask.ok_or_else(|| Error::InvalidArgument("could not draw a mask with targets".into()))?;
            items.push((idx, mask));
        }
        Ok(items)
    }

    /// One optimizer step: loss, backward, Adam at the scheduled rate, EMA.
    pub fn train_step(&mut self) -> Result<StepRecord> {
        let drawn = self.draw_items()?;
        let items: Vec<(&StrokeSequence, &Mask)> = drawn.iter().map(|(i, m)| (&self.data[*i], m)).collect();
        let batch = make_training_batch(
            &items,
            &self.model.norm,
            &self.config.schedule,
            self.config.class_drop,
            &mut self.rng,
        )?;
        let tape = Tape::new();
        let vars = self.model.bind(&tape, true);
        let loss_var = training_loss(&self.model, &tape, &vars, &batch)?;
        let loss = loss_var.item();
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss {loss} at step {}", self.step)));
        }
        let mut grads = tape.backward(loss_var)?;
        let grads: Vec<Tensor<f32>> = vars.iter().map(|&v| grads.take(v)).collect();
        drop(tape);
        let lr = cosine_lr(self.step, self.config.total_steps, self.config.lr_max);
        adam_step(self.model.params.tensors_mut(), &grads, &mut self.adam, lr)?;
        let decay = ema_decay_at(self.step, self.config.ema_decay, self.config.ema_warmup);
        ema_update(self.ema.tensors_mut(), self.model.params.tensors(), decay)?;
        let record = StepRecord { step: self.step, loss, lr };
        self.step += 1;
        Ok(record)
    }

    /// Trains until `total_steps`, checkpointing into `out_dir` periodically
    /// and at the end. Returns the path of the last checkpoint.
    pub fn run(&mut self, out_dir: impl AsRef<Path>, mut on_step: impl FnMut(&StepRecord)) -> Result<PathBuf> {
        let out_dir = out_dir.as_ref();
        fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let log_path = out_dir.join(TRAIN_LOG);
        let mut log = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?;
        let ckpt_path = out_dir.join(LATEST_CHECKPOINT);
        while !self.is_done() {
            let rec = self.train_step()?;
            writeln!(log, "{}", serde_json::to_string(&rec)?).map_err(|e| Error::io(&log_path, e))?;
            if self.config.log_every > 0 && rec.step % self.config.log_every == 0 {
                log::info!("step {} loss {:.4} lr {:.3e}", rec.step, rec.loss, rec.lr);
            }
            on_step(&rec);
            if self.config.checkpoint_every > 0 && self.step % self.config.checkpoint_every == 0 && !self.is_done() {
                self.checkpoint().save(&ckpt_path)?;
            }
        }
        self.checkpoint().save(&ckpt_path)?;
        Ok(ckpt_path)
    }
}

fn check_data(model: &ModelConfig, data: &[StrokeSequence]) -> Result<()> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    for seq in data {
        if seq.len() != model.seq_len {
            return Err(Error::LengthMismatch {
                what: "training sequence",
                expected: model.seq_len,
                found: seq.len(),
            });
        }
        seq.class.check(model.num_classes)?;
    }
    Ok(())
}

/// Reads a training log written by `Trainer::run`.
pub fn read_log(path: impl AsRef<Path>) -> Result<Vec<StepRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
