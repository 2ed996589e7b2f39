//! Tensors, reverse-mode autodiff and seeded randomness.

mod kernels;
mod rng;
mod scalar;
mod tape;
mod tensor;

pub use rng::{Rng, Stream};
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Tolerance on `Σ exp(log_probs) = 1` accepted by [`sample_categorical`].
pub const NORMALIZATION_TOL: f64 = 1e-9;

/// Draws an index from a normalized log-probability vector.
pub fn sample_categorical<T: Scalar>(log_probs: &[T], rng: &mut Rng) -> Result<usize> {
    let probs: Vec<f64> = log_probs.iter().map(|lp| lp.as_f64().exp()).collect();
    let total: f64 = probs.iter().sum();
    if !total.is_finite() || (total - 1.0).abs() > NORMALIZATION_TOL {
        return Err(Error::Contract(format!(
            "sample_categorical expects normalized log-probabilities (sum of probabilities = {total})"
        )));
    }
    let u = rng.uniform() * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (i, p) in probs.iter().enumerate() {
        if *p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return Ok(i);
            }
        }
    }
    Ok(last)
}

/// Index of the largest entry; the first one on ties.
pub fn argmax<T: Scalar>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

/// Eager matrix product of two 2-d tensors.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::no_grad();
    let (va, vb) = (tape.leaf(a), tape.leaf(b));
    let c = tape.matmul(va, vb)?;
    Ok(tape.tensor(c))
}

/// Eager log-softmax along `axis`.
pub fn softmax_log<T: Scalar>(logits: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let mut tape = Tape::no_grad();
    let v = tape.leaf(logits);
    let out = tape.log_softmax(v, axis)?;
    Ok(tape.tensor(out))
}
