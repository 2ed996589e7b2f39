use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::transformer::{Prebound, TransformerLm};
use super::vocab::{TokenSequence, Vocabulary};
use super::weighted_target_loss;
use crate::error::{Error, Result};
use crate::harness::adamw::{adamw_step, AdamWConfig, AdamWState};
use crate::numerics::{Rng, Scalar, Tape};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 300,
            batch_size: 32,
            optimizer: AdamWConfig::with_lr(3e-3),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    /// Mean per-token cross-entropy of each step's batch.
    pub losses: Vec<f64>,
}

/// Next-token cross-entropy training on completions; prompt tokens carry no loss.
///
/// Each step draws `batch_size` corpus items uniformly with replacement from
/// `rng`. The loss is the mean over every completion token in the batch
/// (EOS included).
pub fn pretrain<T: Scalar>(
    model: &mut TransformerLm<T>,
    corpus: &[(String, String)],
    cfg: &PretrainConfig,
    rng: &mut Rng,
) -> Result<PretrainReport> {
    if corpus.is_empty() {
        return Err(Error::Contract("pretraining corpus is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let vocab = Vocabulary;
    let encoded = corpus
        .iter()
        .map(|(p, c)| Ok((vocab.encode(p)?, vocab.encode(c)?.with_eos())))
        .collect::<Result<Vec<_>>>()?;

    let mut state = AdamWState::new(model.params().iter().map(|(_, t)| t));
    let mut report = PretrainReport::default();
    for step in 0..cfg.steps {
        // prompt -> completion -> multiplicity
        let mut groups: BTreeMap<&TokenSequence, BTreeMap<&TokenSequence, usize>> = BTreeMap::new();
        let mut n_tokens = 0usize;
        for _ in 0..cfg.batch_size {
            let (p, c) = &encoded[rng.below(encoded.len())];
            *groups.entry(p).or_default().entry(c).or_default() += 1;
            n_tokens += c.len();
        }
        let per_token = T::one() / T::from_usize(n_tokens).unwrap();

        let mut tape = Tape::new();
        let bound = model.bind_all(&mut tape, true);
        let mut loss = None;
        for (prompt, completions) in &groups {
            let targets: Vec<&TokenSequence> = completions.keys().copied().collect();
            let weights: Vec<T> = completions
                .values()
                .map(|&k| T::from_usize(k).unwrap() * per_token)
                .collect();
            let part = weighted_target_loss(&Prebound::new(model, &bound), &mut tape, prompt, &targets, &weights)?;
            loss = Some(match loss {
                Some(acc) => tape.add(acc, part)?,
                None => part,
            });
        }
        let loss = loss.expect("non-empty batch");
        let value = tape.item(loss).as_f64();
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                task: "pretraining".into(),
                loss: value,
            });
        }
        report.losses.push(value);
        let grads = tape.backward(loss)?;
        let grad_refs: Vec<Option<&[T]>> = bound.params.iter().map(|&v| grads.get(v)).collect();
        let mut params: Vec<_> = model.params_mut().tensors_mut().collect();
        adamw_step(&mut params, &grad_refs, &mut state, &cfg.optimizer)?;
    }
    Ok(report)
}
