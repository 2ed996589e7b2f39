//! Character tokenizer, the transformer LM, and sequence scoring.
//!
//! The model conditions on `[BOS] ⊕ prompt`. A target's log-probability is the
//! teacher-forced sum of its per-token log-probabilities; several targets of
//! one prompt are scored in a single packed pass (see [`Layout::tree`]).

mod pretrain;
mod sampling;
mod transformer;
mod vocab;

pub use pretrain::{pretrain, PretrainConfig, PretrainReport};
pub use sampling::{sample, Sampler};
pub use transformer::{
    BoundAdapter, BoundParams, CausalLm, Layout, ModelConfig, ParamStore, Prebound, TargetReadout, TransformerLm,
    ADAPTABLE_MATRICES,
};
pub use vocab::{TokenId, TokenSequence, Vocabulary};

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tape, Var};

/// Upper bound on rows in one packed forward pass.
pub const MAX_PACKED_ROWS: usize = 384;

/// `[BOS] ⊕ prompt`.
pub fn model_context(prompt: &TokenSequence) -> Vec<TokenId> {
    let mut ctx = Vec::with_capacity(prompt.len() + 1);
    ctx.push(Vocabulary::BOS);
    ctx.extend_from_slice(prompt.ids());
    ctx
}

fn check_target(config: &ModelConfig, prompt: &TokenSequence, target: &TokenSequence) -> Result<()> {
    if !target.ends_with_eos() {
        return Err(Error::Contract(format!("target `{target}` does not end with EOS")));
    }
    let needed = prompt.len() + target.len();
    if needed > config.max_context {
        return Err(Error::Length {
            needed,
            max: config.max_context,
        });
    }
    Ok(())
}

/// Splits target indices into groups whose packed layout stays under [`MAX_PACKED_ROWS`].
fn chunk_targets(context_len: usize, targets: &[&TokenSequence]) -> Vec<Vec<usize>> {
    let mut chunks: Vec<Vec<usize>> = Vec::new();
    let mut rows = context_len;
    for (i, t) in targets.iter().enumerate() {
        let extra = t.len().saturating_sub(1);
        match chunks.last_mut() {
            Some(chunk) if rows + extra <= MAX_PACKED_ROWS => {
                chunk.push(i);
                rows += extra;
            }
            _ => {
                chunks.push(vec![i]);
                rows = context_len + extra;
            }
        }
    }
    chunks
}

/// `Σᵢ wᵢ · log p(targetᵢ | prompt)` for one packed group, as a scalar on `tape`.
fn packed_weighted_log_prob<T: Scalar, M: CausalLm<T> + ?Sized>(
    model: &M,
    tape: &mut Tape<T>,
    context: &[TokenId],
    targets: &[&TokenSequence],
    weights: &[T],
) -> Result<Var> {
    let (layout, readouts) = Layout::tree(context, targets)?;
    let first = context.len() - 1;
    let rows: Vec<usize> = (first..layout.len()).collect();
    let logp = model.log_probs(tape, &layout, Some(&rows))?;
    let v = model.config().vocab_size;
    let picks = readouts
        .iter()
        .zip(weights)
        .flat_map(|(readout, &w)| readout.iter().map(move |&(r, tok)| ((r - first) * v + tok as usize, w)))
        .collect();
    tape.pick_sum(logp, picks)
}

/// `log p(target | prompt)` as a differentiable scalar. `target` must end with EOS.
pub fn sequence_log_prob<T: Scalar, M: CausalLm<T> + ?Sized>(
    model: &M,
    tape: &mut Tape<T>,
    prompt: &TokenSequence,
    target: &TokenSequence,
) -> Result<Var> {
    check_target(model.config(), prompt, target)?;
    packed_weighted_log_prob(model, tape, &model_context(prompt), &[target], &[T::one()])
}

/// `−Σᵢ wᵢ · log p(targetᵢ | prompt)` as a differentiable scalar.
pub fn weighted_target_loss<T: Scalar, M: CausalLm<T> + ?Sized>(
    model: &M,
    tape: &mut Tape<T>,
    prompt: &TokenSequence,
    targets: &[&TokenSequence],
    weights: &[T],
) -> Result<Var> {
    if targets.len() != weights.len() || targets.is_empty() {
        return Err(Error::Contract(format!(
            "{} targets with {} weights",
            targets.len(),
            weights.len()
        )));
    }
    for t in targets {
        check_target(model.config(), prompt, t)?;
    }
    let context = model_context(prompt);
    let mut total: Option<Var> = None;
    for chunk in chunk_targets(context.len(), targets) {
        let ts: Vec<&TokenSequence> = chunk.iter().map(|&i| targets[i]).collect();
        let ws: Vec<T> = chunk.iter().map(|&i| -weights[i]).collect();
        let part = packed_weighted_log_prob(model, tape, &context, &ts, &ws)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, part)?,
            None => part,
        });
    }
    Ok(total.expect("at least one chunk"))
}

/// Exact `log p(target | prompt)` for every target, evaluated without gradients.
pub fn target_log_probs<T: Scalar, M: CausalLm<T> + ?Sized>(
    model: &M,
    prompt: &TokenSequence,
    targets: &[&TokenSequence],
) -> Result<Vec<T>> {
    for t in targets {
        check_target(model.config(), prompt, t)?;
    }
    let context = model_context(prompt);
    let first = context.len() - 1;
    let v = model.config().vocab_size;
    let mut out = vec![T::zero(); targets.len()];
    for chunk in chunk_targets(context.len(), targets) {
        let ts: Vec<&TokenSequence> = chunk.iter().map(|&i| targets[i]).collect();
        let (layout, readouts) = Layout::tree(&context, &ts)?;
        let rows: Vec<usize> = (first..layout.len()).collect();
        let mut tape = Tape::no_grad();
        let logp = model.log_probs(&mut tape, &layout, Some(&rows))?;
        let values = tape.value(logp);
        for (&i, readout) in chunk.iter().zip(&readouts) {
            out[i] = readout
                .iter()
                .map(|&(r, tok)| values[(r - first) * v + tok as usize])
                .sum();
        }
    }
    Ok(out)
}

/// Next-token log-distribution after `context` (which already includes BOS).
pub fn next_token_log_probs<T: Scalar, M: CausalLm<T> + ?Sized>(model: &M, context: &[TokenId]) -> Result<Vec<T>> {
    if context.is_empty() {
        return Err(Error::Contract("next-token query needs a non-empty context".into()));
    }
    if context.len() > model.config().max_context {
        return Err(Error::Length {
            needed: context.len(),
            max: model.config().max_context,
        });
    }
    let layout = Layout::causal(context);
    let mut tape = Tape::no_grad();
    let logp = model.log_probs(&mut tape, &layout, Some(&[context.len() - 1]))?;
    Ok(tape.value(logp).to_vec())
}

#[cfg(test)]
mod tests;
