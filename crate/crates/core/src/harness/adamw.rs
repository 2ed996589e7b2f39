//! AdamW with decoupled weight decay.
//!
//! ```text
//! p ← p − lr·wd·p
//! m ← β₁m + (1−β₁)g
//! v ← β₂v + (1−β₂)g²
//! p ← p − lr · m̂ / (√v̂ + ε),   m̂ = m/(1−β₁ᵗ), v̂ = v/(1−β₂ᵗ)
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamWConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamWConfig {
            lr,
            ..Self::default()
        }
    }
}

/// Moment buffers, one pair per parameter, plus the shared step counter.
#[derive(Clone, Debug)]
pub struct AdamWState<T: Scalar> {
    pub step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Scalar> AdamWState<T> {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        let (first, second) = params
            .into_iter()
            .map(|p| (vec![T::zero(); p.numel()], vec![T::zero(); p.numel()]))
            .unzip();
        AdamWState {
            step: 0,
            first,
            second,
        }
    }

    pub fn len(&self) -> usize {
        self.first.len()
    }

    pub fn is_empty(&self) -> bool {
        self.first.is_empty()
    }
}

/// One AdamW update. `grads[i]` belongs to `params[i]`; `None` means zero gradient.
pub fn adamw_step<T: Scalar>(
    params: &mut [&mut Tensor<T>],
    grads: &[Option<&[T]>],
    state: &mut AdamWState<T>,
    cfg: &AdamWConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.len() {
        return Err(Error::Contract(format!(
            "adamw_step: {} parameters, {} gradients, {} moment buffers",
            params.len(),
            grads.len(),
            state.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        let n = p.numel();
        if g.is_some_and(|g| g.len() != n) || state.first[i].len() != n {
            return Err(Error::Dimension {
                op: "adamw_step",
                lhs: p.shape().to_vec(),
                rhs: vec![g.map_or(0, |g| g.len())],
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let bc1 = T::one() - b1.powi(t);
    let bc2 = T::one() - b2.powi(t);
    let lr = T::lit(cfg.lr);
    let decay = T::one() - lr * T::lit(cfg.weight_decay);
    let eps = T::lit(cfg.eps);
    for (i, p) in params.iter_mut().enumerate() {
        let (m, v) = (&mut state.first[i], &mut state.second[i]);
        let data = p.data_mut();
        for j in 0..data.len() {
            let gj = grads[i].map_or(T::zero(), |g| g[j]);
            if cfg.weight_decay != 0.0 {
                data[j] *= decay;
            }
            m[j] = b1 * m[j] + (T::one() - b1) * gj;
            v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
            let mh = m[j] / bc1;
            let vh = v[j] / bc2;
            data[j] -= lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}
