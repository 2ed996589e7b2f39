use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::adamw::{adamw_step, AdamWConfig, AdamWState};
use crate::error::{Error, Result};
use crate::lora::{attach_adapters, AdaptedModel, LoraConfig};
use crate::model::{CausalLm, Prebound, TransformerLm, Vocabulary};
use crate::numerics::{Rng, Scalar, Stream, Tape};
use crate::objective::{dm_loss, loss_floor};
use crate::tasks::Instance;

/// When the relative early-stop rule is applied.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EarlyStop {
    /// Every run.
    Always,
    /// Only when some training instance uses an empirical proxy target.
    #[default]
    ProxyOnly,
    Never,
}

/// Learning-rate schedule over `max_steps`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Decays linearly from `lr` at the first step to `lr / max_steps` at the last.
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub schedule: LrSchedule,
    pub batch_size: usize,
    pub max_steps: usize,
    /// Stop once the batch loss is at most `(1 + ratio) ×` the batch's mean loss floor.
    pub early_stop_ratio: f64,
    pub early_stop: EarlyStop,
    pub seed: u64,
    pub lora: LoraConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            schedule: LrSchedule::Constant,
            batch_size: 32,
            max_steps: 50,
            early_stop_ratio: 0.2,
            early_stop: EarlyStop::default(),
            seed: 0,
            lora: LoraConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("beta1 and beta2 must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 || self.max_steps == 0 {
            return Err(Error::Config("batch_size and max_steps must be positive".into()));
        }
        if !(self.early_stop_ratio > 0.0 && self.early_stop_ratio <= 1.0) {
            return Err(Error::Config(format!(
                "early_stop_ratio must lie in (0, 1], got {}",
                self.early_stop_ratio
            )));
        }
        self.lora.validate()
    }

    /// Optimizer settings for update `step` (0-based).
    pub fn optimizer(&self, step: usize) -> AdamWConfig {
        let lr = match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Linear => self.lr * (self.max_steps - step.min(self.max_steps - 1)) as f64 / self.max_steps as f64,
        };
        AdamWConfig {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            ..AdamWConfig::default()
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Batch loss before each update.
    pub losses: Vec<f64>,
    /// Mean loss floor of each step's batch.
    pub floors: Vec<f64>,
    /// Number of optimizer updates applied.
    pub steps: usize,
    pub stopped_early: bool,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.losses.last().copied()
    }

    /// `step,loss,floor` rows.
    pub fn trace_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Numeric(format!("csv: {e}"));
        w.write_record(["step", "loss", "floor"]).map_err(csv_err)?;
        for (i, (l, f)) in self.losses.iter().zip(&self.floors).enumerate() {
            w.write_record([i.to_string(), l.to_string(), f.to_string()]).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Numeric(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }
}

/// Attaches freshly initialized adapters, seeded from `cfg.seed`.
pub fn prepare<T: Scalar>(base: TransformerLm<T>, cfg: &TrainConfig) -> Result<AdaptedModel<T>> {
    let mut rng = Rng::new(cfg.seed, Stream::Init).fork(1);
    attach_adapters(base, &cfg.lora, &mut rng)
}

/// Distribution-matching fine-tuning of the adapter factors.
///
/// Batches are drawn from a reshuffled pass over `train`; when `train` is
/// smaller than the batch, pairs repeat to fill it. The step loss is the mean
/// [`dm_loss`] over the batch.
pub fn finetune<T: Scalar>(model: &mut AdaptedModel<T>, train: &[Instance], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Contract("no training instances".into()));
    }
    let mut encoded = Vec::with_capacity(train.len());
    for inst in train {
        let dist = inst.target.as_ref().ok_or_else(|| Error::Validation {
            task: inst.task.clone(),
            message: "open tasks cannot be trained on".into(),
        })?;
        let prompt = Vocabulary.encode(&inst.prompt)?;
        let needed = prompt.len() + 1 + dist.longest_target();
        if needed > model.config().max_context {
            return Err(Error::Length {
                needed,
                max: model.config().max_context,
            });
        }
        encoded.push((prompt, dist.clone()));
    }
    let stop_enabled = match cfg.early_stop {
        EarlyStop::Always => true,
        EarlyStop::ProxyOnly => train.iter().any(|i| i.proxy),
        EarlyStop::Never => false,
    };

    let mut rng = Rng::new(cfg.seed, Stream::Data);
    let mut queue: Vec<usize> = Vec::new();
    let mut state = AdamWState::new(model.trainable().into_iter().map(|(_, t)| t));
    let mut report = TrainReport::default();
    let n = T::from_usize(cfg.batch_size).unwrap();

    for step in 0..cfg.max_steps {
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for _ in 0..cfg.batch_size {
            if queue.is_empty() {
                queue = (0..encoded.len()).collect();
                rng.shuffle(&mut queue);
            }
            *counts.entry(queue.pop().expect("refilled")).or_default() += 1;
        }

        let mut tape = Tape::new();
        let (bound, trainable) = model.bind_trainable(&mut tape);
        let view = Prebound::new(model.base(), &bound);
        let mut total = None;
        let mut floor = 0.0;
        for (&i, &mult) in &counts {
            let (prompt, dist) = &encoded[i];
            let part = dm_loss(&view, &mut tape, prompt, dist).map_err(|e| match e {
                Error::Numeric(_) => Error::NonFiniteLoss {
                    step,
                    task: train[i].task.clone(),
                    loss: f64::NAN,
                },
                e => e,
            })?;
            let value = tape.item(part).as_f64();
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    task: train[i].task.clone(),
                    loss: value,
                });
            }
            floor += loss_floor(dist) * mult as f64 / cfg.batch_size as f64;
            let part = tape.scale(part, T::from_usize(mult).unwrap() / n);
            total = Some(match total {
                Some(acc) => tape.add(acc, part)?,
                None => part,
            });
        }
        let loss = total.expect("non-empty batch");
        let value = tape.item(loss).as_f64();
        report.losses.push(value);
        report.floors.push(floor);
        if stop_enabled && value <= (1.0 + cfg.early_stop_ratio) * floor {
            report.stopped_early = true;
            break;
        }
        let grads = tape.backward(loss)?;
        let grad_refs: Vec<Option<&[T]>> = trainable.iter().map(|&v| grads.get(v)).collect();
        let mut params = model.trainable_mut();
        adamw_step(&mut params, &grad_refs, &mut state, &cfg.optimizer(step))?;
        report.steps += 1;
    }
    Ok(report)
}

