use std::collections::HashMap;

use super::transformer::CausalLm;
use super::vocab::{TokenId, TokenSequence, Vocabulary};
use super::{model_context, next_token_log_probs};
use crate::error::{Error, Result};
use crate::numerics::{argmax, sample_categorical, Rng, Scalar};

/// Below this temperature sampling degenerates to greedy argmax.
pub const GREEDY_BELOW: f64 = 1e-6;

/// Memo entries kept per sampler before new prefixes stop being cached.
const MEMO_CAPACITY: usize = 40_000;

/// Draws repeated completions of one prompt.
///
/// Next-token distributions are memoized by generated prefix. Sampling many
/// completions from a peaked model revisits the same prefixes constantly, so
/// most draws never run the network.
pub struct Sampler<'m, T: Scalar, M: CausalLm<T> + ?Sized> {
    model: &'m M,
    context: Vec<TokenId>,
    memo: HashMap<Vec<TokenId>, Vec<T>>,
}

impl<'m, T: Scalar, M: CausalLm<T> + ?Sized> Sampler<'m, T, M> {
    pub fn new(model: &'m M, prompt: &TokenSequence) -> Result<Self> {
        let context = model_context(prompt);
        if context.len() > model.config().max_context {
            return Err(Error::Length {
                needed: context.len(),
                max: model.config().max_context,
            });
        }
        Ok(Sampler {
            model,
            context,
            memo: HashMap::new(),
        })
    }

    fn distribution(&mut self, generated: &[TokenId]) -> Result<Vec<T>> {
        if let Some(lp) = self.memo.get(generated) {
            return Ok(lp.clone());
        }
        let mut ctx = self.context.clone();
        ctx.extend_from_slice(generated);
        let lp = next_token_log_probs(self.model, &ctx)?;
        if self.memo.len() < MEMO_CAPACITY {
            self.memo.insert(generated.to_vec(), lp.clone());
        }
        Ok(lp)
    }

    /// One completion, decoded and without EOS. Generation also stops when
    /// the context window is full.
    pub fn draw(&mut self, temperature: f64, max_new_tokens: usize, rng: &mut Rng) -> Result<String> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::Contract(format!("temperature must be positive, got {temperature}")));
        }
        let room = self.model.config().max_context - self.context.len();
        let limit = max_new_tokens.min(room);
        let mut generated: Vec<TokenId> = Vec::new();
        while generated.len() < limit {
            let lp = self.distribution(&generated)?;
            let next = if temperature < GREEDY_BELOW {
                argmax(&lp)
            } else if temperature == 1.0 {
                sample_categorical(&lp, rng)?
            } else {
                sample_categorical(&tempered(&lp, temperature), rng)?
            };
            let next = next as TokenId;
            if next == Vocabulary::EOS {
                break;
            }
            generated.push(next);
        }
        Ok(Vocabulary.decode(&generated))
    }
}

/// `log_softmax(logp / temperature)`.
fn tempered<T: Scalar>(logp: &[T], temperature: f64) -> Vec<T> {
    let inv = T::lit(1.0 / temperature);
    let scaled: Vec<T> = logp.iter().map(|&x| x * inv).collect();
    let max = scaled.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = max + scaled.iter().map(|&x| (x - max).exp()).sum::<T>().ln();
    scaled.into_iter().map(|x| x - lse).collect()
}

/// Single completion of `prompt`; see [`Sampler::draw`].
pub fn sample<T: Scalar, M: CausalLm<T> + ?Sized>(
    model: &M,
    prompt: &TokenSequence,
    temperature: f64,
    max_new_tokens: usize,
    rng: &mut Rng,
) -> Result<String> {
    Sampler::new(model, prompt)?.draw(temperature, max_new_tokens, rng)
}
