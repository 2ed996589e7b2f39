//! Low-rank adapters: a frozen weight `W [d_out × d_in]` is used as
//! `W + (α/r)·B·A` with trainable `A [r × d_in]` and `B [d_out × r]`.
//!
//! The adapted forward pass never materializes the sum; it computes
//! `x Wᵀ + (α/r)·((x Aᵀ) Bᵀ)`. [`LoraAdapter::merge`] builds the dense matrix
//! for export and for checking that both routes agree.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BoundAdapter, BoundParams, CausalLm, ModelConfig, TransformerLm, ADAPTABLE_MATRICES};
use crate::numerics::{matmul, Rng, Scalar, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    /// Matrix kinds (`"wq"`) or full parameter names (`"layers.1.mlp.w2"`).
    pub targets: Vec<String>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 4,
            alpha: 4.0,
            targets: ADAPTABLE_MATRICES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl LoraConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("LoRA rank must be at least 1".into()));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::Config(format!("LoRA alpha must be positive, got {}", self.alpha)));
        }
        if self.targets.is_empty() {
            return Err(Error::Config("LoRA target list is empty".into()));
        }
        Ok(())
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// Trainable scalar count `Σ r·(d_in + d_out)` over matched matrices.
    pub fn trainable_count(&self, model: &ModelConfig) -> Result<usize> {
        let probe = TransformerLm::<f64>::new(*model, &mut Rng::new(0, crate::numerics::Stream::Init))?;
        Ok(resolve_targets(&probe, self)?
            .iter()
            .map(|&(_, i)| {
                let s = probe.params().tensor(i).shape();
                self.rank * (s[0] + s[1])
            })
            .sum())
    }
}

fn matches_target(name: &str, target: &str) -> bool {
    name == target || name.strip_suffix(target).is_some_and(|head| head.ends_with('.'))
}

/// Adaptable parameters selected by `cfg.targets`, in model order.
fn resolve_targets<T: Scalar>(model: &TransformerLm<T>, cfg: &LoraConfig) -> Result<Vec<(String, usize)>> {
    cfg.validate()?;
    let adaptable = model.adaptable();
    for target in &cfg.targets {
        if !adaptable.iter().any(|(name, _)| matches_target(name, target)) {
            return Err(Error::Config(format!(
                "unknown or non-adaptable weight matrix `{target}` (adaptable kinds: {})",
                ADAPTABLE_MATRICES.join(", ")
            )));
        }
    }
    Ok(adaptable
        .into_iter()
        .filter(|(name, _)| cfg.targets.iter().any(|t| matches_target(name, t)))
        .collect())
}

#[derive(Clone, Debug)]
pub struct LoraAdapter<T: Scalar> {
    /// Name of the wrapped base parameter.
    pub name: String,
    base: Tensor<T>,
    pub a: Tensor<T>,
    pub b: Tensor<T>,
    pub alpha: f64,
}

impl<T: Scalar> LoraAdapter<T> {
    /// `A ~ N(0, 1/d_in)`, `B = 0`.
    pub fn new(name: impl Into<String>, base: Tensor<T>, rank: usize, alpha: f64, rng: &mut Rng) -> Result<Self> {
        let [d_out, d_in] = *base.shape() else {
            return Err(Error::Config(format!("adapter base must be a matrix, got {:?}", base.shape())));
        };
        if rank == 0 {
            return Err(Error::Config("LoRA rank must be at least 1".into()));
        }
        let a = Tensor::randn(&[rank, d_in], 1.0 / (d_in as f64).sqrt(), rng).with_requires_grad(true);
        let b = Tensor::zeros(&[d_out, rank]).with_requires_grad(true);
        Ok(LoraAdapter {
            name: name.into(),
            base: base.with_requires_grad(false),
            a,
            b,
            alpha,
        })
    }

    pub fn rank(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn scale(&self) -> T {
        T::lit(self.alpha / self.rank() as f64)
    }

    pub fn base(&self) -> &Tensor<T> {
        &self.base
    }

    /// Replaces both factors, checking shapes.
    pub fn set_factors(&mut self, a: Tensor<T>, b: Tensor<T>) -> Result<()> {
        if a.shape() != self.a.shape() || b.shape() != self.b.shape() {
            return Err(Error::Dimension {
                op: "set_factors",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        self.a = a.with_requires_grad(true);
        self.b = b.with_requires_grad(true);
        Ok(())
    }

    /// Dense `W + (α/r)·B·A`.
    pub fn merge(&self) -> Result<Tensor<T>> {
        let ba = matmul(&self.b, &self.a)?;
        let s = self.scale();
        let data = self
            .base
            .data()
            .iter()
            .zip(ba.data())
            .map(|(&w, &d)| w + s * d)
            .collect();
        Tensor::new(self.base.shape().to_vec(), data)
    }
}

/// A frozen base model with adapters on a subset of its matrices.
#[derive(Clone, Debug)]
pub struct AdaptedModel<T: Scalar> {
    base: TransformerLm<T>,
    config: LoraConfig,
    adapters: Vec<LoraAdapter<T>>,
    /// Base-parameter index of each adapter.
    slots: Vec<usize>,
}

/// Wraps the matrices selected by `cfg`; the returned model's trainable
/// parameters are exactly the adapter factors.
pub fn attach_adapters<T: Scalar>(model: TransformerLm<T>, cfg: &LoraConfig, rng: &mut Rng) -> Result<AdaptedModel<T>> {
    let targets = resolve_targets(&model, cfg)?;
    let mut base = model;
    for t in base.params_mut().tensors_mut() {
        t.set_requires_grad(false);
    }
    let mut adapters = Vec::with_capacity(targets.len());
    let mut slots = Vec::with_capacity(targets.len());
    for (name, idx) in targets {
        let w = base.params().tensor(idx).clone();
        adapters.push(LoraAdapter::new(name, w, cfg.rank, cfg.alpha, rng)?);
        slots.push(idx);
    }
    Ok(AdaptedModel {
        base,
        config: cfg.clone(),
        adapters,
        slots,
    })
}

impl<T: Scalar> AdaptedModel<T> {
    pub fn base(&self) -> &TransformerLm<T> {
        &self.base
    }

    pub fn lora_config(&self) -> &LoraConfig {
        &self.config
    }

    pub fn adapters(&self) -> &[LoraAdapter<T>] {
        &self.adapters
    }

    pub fn adapters_mut(&mut self) -> &mut [LoraAdapter<T>] {
        &mut self.adapters
    }

    /// Trainable tensors named `<matrix>.lora_a` / `<matrix>.lora_b`, A before B per adapter.
    pub fn trainable(&self) -> Vec<(String, &Tensor<T>)> {
        self.adapters
            .iter()
            .flat_map(|ad| [(format!("{}.lora_a", ad.name), &ad.a), (format!("{}.lora_b", ad.name), &ad.b)])
            .collect()
    }

    /// Same order as [`AdaptedModel::trainable`].
    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.adapters.iter_mut().flat_map(|ad| [&mut ad.a, &mut ad.b]).collect()
    }

    pub fn trainable_count(&self) -> usize {
        self.trainable().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Restores adapter factors from tensors named as in [`AdaptedModel::trainable`].
    pub fn load_trainable(&mut self, named: &HashMap<String, Tensor<T>>) -> Result<()> {
        if named.len() != 2 * self.adapters.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} adapter tensors, found {}",
                2 * self.adapters.len(),
                named.len()
            )));
        }
        for ad in &mut self.adapters {
            let get = |suffix: &str| {
                let key = format!("{}.{suffix}", ad.name);
                named
                    .get(&key)
                    .cloned()
                    .ok_or_else(|| Error::Checkpoint(format!("missing adapter tensor `{key}`")))
            };
            let (a, b) = (get("lora_a")?, get("lora_b")?);
            ad.set_factors(a, b)?;
        }
        Ok(())
    }

    /// Plain model with every adapter folded into its base matrix.
    pub fn merged(&self) -> Result<TransformerLm<T>> {
        let mut out = self.base.clone();
        for ad in &self.adapters {
            out.set_param(&ad.name, ad.merge()?)?;
        }
        Ok(out)
    }

    /// Registers base parameters as frozen and adapter factors as tracked.
    /// Returns the bound handles and the `(A, B)` variables per adapter.
    pub fn bind_trainable(&self, tape: &mut Tape<T>) -> (BoundParams<T>, Vec<Var>) {
        let mut bound = self.base.bind_all(tape, false);
        let mut trainable = Vec::with_capacity(2 * self.adapters.len());
        for (ad, &slot) in self.adapters.iter().zip(&self.slots) {
            let a = tape.input(&ad.a, true);
            let b = tape.input(&ad.b, true);
            bound.adapters[slot] = Some(BoundAdapter {
                a,
                b,
                scale: ad.scale(),
            });
            trainable.extend([a, b]);
        }
        (bound, trainable)
    }
}

impl<T: Scalar> CausalLm<T> for AdaptedModel<T> {
    fn backbone(&self) -> &TransformerLm<T> {
        &self.base
    }

    fn bind(&self, tape: &mut Tape<T>) -> BoundParams<T> {
        self.bind_trainable(tape).0
    }
}
