//! Distribution-matching loss over a prefix-free target set.
//!
//! For a prompt `x` and targets `y` with probabilities `p*(y)`,
//!
//! ```text
//! L(x) = −Σ_y p*(y) · log p_model(y | x)
//!      = KL(p* ‖ p_model|_T) + H(p*)
//! ```
//!
//! so `H(p*)` (the [`loss_floor`]) is the smallest attainable value.

use crate::error::{Error, Result};
use crate::model::{weighted_target_loss, CausalLm, TokenSequence, Vocabulary};
use crate::numerics::{Scalar, Tape, Var};

/// Allowed deviation of the weight total from one.
pub const WEIGHT_TOL: f64 = 1e-9;

/// Targets with ground-truth probabilities. Targets are stored both as text and
/// encoded with EOS appended.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetDistribution {
    entries: Vec<(String, f64)>,
    encoded: Vec<TokenSequence>,
}

impl TargetDistribution {
    /// Checks non-negative weights summing to one, distinct encodable targets
    /// and the prefix-free property after EOS.
    pub fn new(entries: Vec<(String, f64)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Contract("target distribution has no entries".into()));
        }
        if let Some((t, w)) = entries.iter().find(|(_, w)| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Contract(format!("target `{t}` has invalid weight {w}")));
        }
        let total: f64 = entries.iter().map(|(_, w)| w).sum();
        if (total - 1.0).abs() > WEIGHT_TOL {
            return Err(Error::Contract(format!("target weights sum to {total}, not 1")));
        }
        let encoded = entries
            .iter()
            .map(|(t, _)| Ok(Vocabulary.encode(t)?.with_eos()))
            .collect::<Result<Vec<_>>>()?;
        if let Some(v) = validate_prefix_free(&encoded).first() {
            return Err(Error::Contract(format!(
                "targets `{}` and `{}` violate the prefix-free condition",
                entries[v.prefix].0, entries[v.extension].0
            )));
        }
        Ok(TargetDistribution { entries, encoded })
    }

    /// Equal weight on every string.
    pub fn uniform<S: AsRef<str>>(targets: &[S]) -> Result<Self> {
        let w = 1.0 / targets.len().max(1) as f64;
        Self::new(targets.iter().map(|t| (t.as_ref().to_string(), w)).collect())
    }

    /// Frequency-weighted distribution from `(value, count)` pairs; repeated
    /// values are merged, counts are kept as relative frequencies.
    pub fn from_counts<S: AsRef<str>>(counts: &[(S, u64)]) -> Result<Self> {
        let mut merged: Vec<(String, u64)> = Vec::new();
        for (v, c) in counts {
            match merged.iter_mut().find(|(m, _)| m == v.as_ref()) {
                Some(slot) => slot.1 += c,
                None => merged.push((v.as_ref().to_string(), *c)),
            }
        }
        let total: u64 = merged.iter().map(|(_, c)| c).sum();
        if total == 0 {
            return Err(Error::Contract("sample counts are all zero".into()));
        }
        let mut entries: Vec<(String, f64)> =
            merged.into_iter().map(|(v, c)| (v, c as f64 / total as f64)).collect();
        // Division rounding can leave the sum a few ulps off one.
        let drift: f64 = 1.0 - entries.iter().map(|(_, w)| w).sum::<f64>();
        entries[0].1 += drift;
        Self::new(entries)
    }

    pub fn entries(&self) -> &[(String, f64)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Encoded targets, EOS appended.
    pub fn targets(&self) -> &[TokenSequence] {
        &self.encoded
    }

    pub fn weights(&self) -> impl Iterator<Item = f64> + '_ {
        self.entries.iter().map(|(_, w)| *w)
    }

    pub fn weight_of(&self, target: &str) -> Option<f64> {
        self.entries.iter().find(|(t, _)| t == target).map(|(_, w)| *w)
    }

    pub fn longest_target(&self) -> usize {
        self.encoded.iter().map(TokenSequence::len).max().unwrap_or(0)
    }
}

/// `targets[prefix]` is a prefix of `targets[extension]`; `duplicate` when they are equal.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PrefixViolation {
    pub prefix: usize,
    pub extension: usize,
    pub duplicate: bool,
}

/// Every ordered pair where one target is a prefix of another. Equal targets
/// are reported once, lower index first. An empty report means the set is
/// prefix-free.
pub fn validate_prefix_free(targets: &[TokenSequence]) -> Vec<PrefixViolation> {
    let mut order: Vec<usize> = (0..targets.len()).collect();
    order.sort_by(|&a, &b| targets[a].cmp(&targets[b]).then(a.cmp(&b)));
    let mut out = Vec::new();
    // In lexicographic order, everything extending a sequence follows it contiguously.
    for (k, &i) in order.iter().enumerate() {
        for &j in &order[k + 1..] {
            if !targets[j].starts_with(&targets[i]) {
                break;
            }
            let duplicate = targets[i] == targets[j];
            let (prefix, extension) = if duplicate { (i.min(j), i.max(j)) } else { (i, j) };
            out.push(PrefixViolation {
                prefix,
                extension,
                duplicate,
            });
        }
    }
    out.sort_by_key(|v| (v.prefix, v.extension));
    out
}

/// `−Σ_y p*(y) · log p_model(y | prompt)` as a differentiable scalar.
pub fn dm_loss<T: Scalar, M: CausalLm<T> + ?Sized>(
    model: &M,
    tape: &mut Tape<T>,
    prompt: &TokenSequence,
    dist: &TargetDistribution,
) -> Result<Var> {
    let (targets, weights): (Vec<&TokenSequence>, Vec<T>) = dist
        .targets()
        .iter()
        .zip(dist.weights())
        .filter(|(_, w)| *w > 0.0)
        .map(|(t, w)| (t, T::lit(w)))
        .unzip();
    weighted_target_loss(model, tape, prompt, &targets, &weights)
}

/// `H(p*) = −Σ p* ln p*`, the minimum of [`dm_loss`].
pub fn loss_floor(dist: &TargetDistribution) -> f64 {
    dist.weights().filter(|&w| w > 0.0).map(|w| -w * w.ln()).sum()
}

/// Unweighted mean of [`dm_loss`] over `batch`. Repeated pairs (same prompt and
/// the same distribution object) are scored once with their multiplicity.
pub fn batch_dm_loss<T: Scalar, M: CausalLm<T> + ?Sized>(
    model: &M,
    tape: &mut Tape<T>,
    batch: &[(&TokenSequence, &TargetDistribution)],
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let n = T::from_usize(batch.len()).unwrap();
    let mut total: Option<Var> = None;
    for ((prompt, dist), mult) in dedupe(batch) {
        let part = dm_loss(model, tape, prompt, dist)?;
        let part = tape.scale(part, T::from_usize(mult).unwrap() / n);
        total = Some(match total {
            Some(acc) => tape.add(acc, part)?,
            None => part,
        });
    }
    Ok(total.expect("non-empty batch"))
}

/// Mean [`loss_floor`] over `batch`.
pub fn batch_loss_floor(batch: &[(&TokenSequence, &TargetDistribution)]) -> f64 {
    batch.iter().map(|(_, d)| loss_floor(d)).sum::<f64>() / batch.len().max(1) as f64
}

type Pair<'a> = (&'a TokenSequence, &'a TargetDistribution);

/// Distinct pairs with multiplicities, in order of first appearance. Pairs
/// match when the prompts are equal and the distribution is the same object.
fn dedupe<'a>(batch: &[Pair<'a>]) -> Vec<(Pair<'a>, usize)> {
    let mut out: Vec<(Pair<'a>, usize)> = Vec::new();
    for &(p, d) in batch {
        match out.iter_mut().find(|((q, e), _)| *q == p && std::ptr::eq(*e, d)) {
            Some(slot) => slot.1 += 1,
            None => out.push(((p, d), 1)),
        }
    }
    out
}
