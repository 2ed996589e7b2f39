use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::vocab::{TokenId, TokenSequence, Vocabulary};
use crate::error::{Error, Result};
use crate::numerics::{Rng, Scalar, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_context: usize,
    pub vocab_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 2,
            n_heads: 4,
            d_model: 64,
            d_ff: 256,
            max_context: 256,
            vocab_size: Vocabulary::SIZE,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("max_context", self.max_context),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size != Vocabulary::SIZE {
            return Err(Error::Config(format!(
                "vocab_size must be {} for the character vocabulary",
                Vocabulary::SIZE
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug)]
pub struct ParamStore<T: Scalar> {
    entries: Vec<(String, Tensor<T>)>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    fn push(&mut self, name: String, t: Tensor<T>) -> usize {
        let i = self.entries.len();
        self.index.insert(name.clone(), i);
        self.entries.push((name, t));
        i
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.position(name).map(|i| &self.entries[i].1)
    }

    pub fn name(&self, i: usize) -> &str {
        &self.entries[i].0
    }

    pub fn tensor(&self, i: usize) -> &Tensor<T> {
        &self.entries[i].1
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor<T> {
        &mut self.entries[i].1
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.entries.iter_mut().map(|(_, t)| t)
    }
}

#[derive(Clone, Copy, Debug)]
struct LayerParams {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

/// Weight-matrix kinds that low-rank adapters may wrap.
pub const ADAPTABLE_MATRICES: [&str; 6] = ["wq", "wk", "wv", "wo", "w1", "w2"];

/// Pre-norm decoder-only transformer with learned positions and a tied output projection.
#[derive(Clone, Debug)]
pub struct TransformerLm<T: Scalar> {
    config: ModelConfig,
    params: ParamStore<T>,
    layers: Vec<LayerParams>,
    tok_emb: usize,
    pos_emb: usize,
    lnf_g: usize,
    lnf_b: usize,
}

/// A low-rank pair bound on a tape: `x ↦ scale · (x Aᵀ) Bᵀ`.
#[derive(Clone, Copy, Debug)]
pub struct BoundAdapter<T> {
    pub a: Var,
    pub b: Var,
    pub scale: T,
}

/// Tape handles of every parameter for one forward pass.
#[derive(Clone, Debug)]
pub struct BoundParams<T> {
    pub params: Vec<Var>,
    pub adapters: Vec<Option<BoundAdapter<T>>>,
}

impl<T> BoundParams<T> {
    fn p(&self, i: usize) -> Var {
        self.params[i]
    }
}

/// Token layout of one forward pass: ids, position ids and the attention mask.
///
/// Besides the usual causal layout, [`Layout::tree`] packs several
/// continuations of a shared context into one pass: each continuation token
/// attends to the context and to its own earlier tokens only, and keeps the
/// position id it would have in a standalone sequence.
#[derive(Clone, Debug)]
pub struct Layout {
    tokens: Vec<TokenId>,
    positions: Vec<usize>,
    mask: Vec<bool>,
}

/// Where each target token's log-probability is read: `(row, token)`.
pub type TargetReadout = Vec<(usize, TokenId)>;

impl Layout {
    pub fn causal(tokens: &[TokenId]) -> Self {
        let n = tokens.len();
        let mut mask = vec![false; n * n];
        for i in 0..n {
            for j in 0..=i {
                mask[i * n + j] = true;
            }
        }
        Layout {
            tokens: tokens.to_vec(),
            positions: (0..n).collect(),
            mask,
        }
    }

    /// Packs `targets` after a shared `context`. `context` must be non-empty
    /// and every target non-empty.
    pub fn tree(context: &[TokenId], targets: &[&TokenSequence]) -> Result<(Self, Vec<TargetReadout>)> {
        if context.is_empty() {
            return Err(Error::Contract("tree layout needs a non-empty context".into()));
        }
        let c = context.len();
        let mut tokens = context.to_vec();
        let mut positions: Vec<usize> = (0..c).collect();
        let mut segment: Vec<usize> = vec![0; c];
        let mut readouts = Vec::with_capacity(targets.len());
        for (s, t) in targets.iter().enumerate() {
            if t.is_empty() {
                return Err(Error::Contract("empty target sequence".into()));
            }
            let mut readout = Vec::with_capacity(t.len());
            let mut prev = c - 1;
            for (j, &id) in t.ids().iter().enumerate() {
                readout.push((prev, id));
                if j + 1 < t.len() {
                    tokens.push(id);
                    positions.push(c + j);
                    segment.push(s + 1);
                    prev = tokens.len() - 1;
                }
            }
            readouts.push(readout);
        }
        let n = tokens.len();
        let mut mask = vec![false; n * n];
        for i in 0..n {
            for j in 0..=i {
                mask[i * n + j] = j < c || segment[j] == segment[i];
            }
        }
        Ok((
            Layout {
                tokens,
                positions,
                mask,
            },
            readouts,
        ))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }
}

impl<T: Scalar> TransformerLm<T> {
    /// Random initialization; all parameters start frozen (`requires_grad = false`).
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let (d, f, v) = (config.d_model, config.d_ff, config.vocab_size);
        let std = 0.02;
        let resid_std = std / (2.0 * config.n_layers as f64).sqrt();
        let mut params = ParamStore::new();
        let tok_emb = params.push("tok_emb".into(), Tensor::randn(&[v, d], std, rng));
        let pos_emb = params.push(
            "pos_emb".into(),
            Tensor::randn(&[config.max_context, d], std, rng),
        );
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let mut add = |name: &str, t: Tensor<T>| params.push(format!("layers.{l}.{name}"), t);
            let ones = |n| Tensor::full(&[n], T::one());
            layers.push(LayerParams {
                ln1_g: add("ln1.gain", ones(d)),
                ln1_b: add("ln1.bias", Tensor::zeros(&[d])),
                wq: add("attn.wq", Tensor::randn(&[d, d], std, rng)),
                bq: add("attn.bq", Tensor::zeros(&[d])),
                wk: add("attn.wk", Tensor::randn(&[d, d], std, rng)),
                bk: add("attn.bk", Tensor::zeros(&[d])),
                wv: add("attn.wv", Tensor::randn(&[d, d], std, rng)),
                bv: add("attn.bv", Tensor::zeros(&[d])),
                wo: add("attn.wo", Tensor::randn(&[d, d], resid_std, rng)),
                bo: add("attn.bo", Tensor::zeros(&[d])),
                ln2_g: add("ln2.gain", ones(d)),
                ln2_b: add("ln2.bias", Tensor::zeros(&[d])),
                w1: add("mlp.w1", Tensor::randn(&[f, d], std, rng)),
                b1: add("mlp.b1", Tensor::zeros(&[f])),
                w2: add("mlp.w2", Tensor::randn(&[d, f], resid_std, rng)),
                b2: add("mlp.b2", Tensor::zeros(&[d])),
            });
        }
        let lnf_g = params.push("ln_f.gain".into(), Tensor::full(&[d], T::one()));
        let lnf_b = params.push("ln_f.bias".into(), Tensor::zeros(&[d]));
        Ok(TransformerLm {
            config,
            params,
            layers,
            tok_emb,
            pos_emb,
            lnf_g,
            lnf_b,
        })
    }

    /// Rebuilds a model from named tensors, e.g. a checkpoint. Every expected
    /// name must be present with the expected shape.
    pub fn from_named(config: ModelConfig, named: &HashMap<String, Tensor<T>>) -> Result<Self> {
        let mut rng = Rng::new(0, crate::numerics::Stream::Init);
        let mut model = Self::new(config, &mut rng)?;
        for i in 0..model.params.len() {
            let name = model.params.name(i).to_string();
            let t = named
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if t.shape() != model.params.tensor(i).shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    model.params.tensor(i).shape()
                )));
            }
            *model.params.tensor_mut(i) = t.clone().with_requires_grad(false);
        }
        if named.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                model.params.len(),
                named.len()
            )));
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Replaces the payload of a named parameter, keeping its shape.
    pub fn set_param(&mut self, name: &str, t: Tensor<T>) -> Result<()> {
        let i = self
            .params
            .position(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))?;
        if t.shape() != self.params.tensor(i).shape() {
            return Err(Error::Dimension {
                op: "set_param",
                lhs: self.params.tensor(i).shape().to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
        *self.params.tensor_mut(i) = t;
        Ok(())
    }

    /// Parameter indices of adaptable matrices, keyed by full name.
    pub fn adaptable(&self) -> Vec<(String, usize)> {
        self.layers
            .iter()
            .flat_map(|l| [l.wq, l.wk, l.wv, l.wo, l.w1, l.w2])
            .map(|i| (self.params.name(i).to_string(), i))
            .collect()
    }

    /// Registers every parameter on `tape`; all are tracked iff `tracked`.
    pub fn bind_all(&self, tape: &mut Tape<T>, tracked: bool) -> BoundParams<T> {
        let params = self
            .params
            .iter()
            .map(|(_, t)| tape.input(t, tracked))
            .collect();
        BoundParams {
            params,
            adapters: vec![None; self.params.len()],
        }
    }

    fn linear(&self, tape: &mut Tape<T>, bound: &BoundParams<T>, x: Var, w: usize, b: usize) -> Result<Var> {
        let mut y = tape.matmul_t(x, bound.p(w))?;
        if let Some(ad) = bound.adapters[w] {
            let low = tape.matmul_t(x, ad.a)?;
            let up = tape.matmul_t(low, ad.b)?;
            let up = tape.scale(up, ad.scale);
            y = tape.add(y, up)?;
        }
        tape.add_row(y, bound.p(b))
    }

    fn block(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundParams<T>,
        l: &LayerParams,
        x: Var,
        mask: &[bool],
    ) -> Result<Var> {
        let h = tape.layer_norm(x, bound.p(l.ln1_g), bound.p(l.ln1_b))?;
        let q = self.linear(tape, bound, h, l.wq, l.bq)?;
        let k = self.linear(tape, bound, h, l.wk, l.bk)?;
        let v = self.linear(tape, bound, h, l.wv, l.bv)?;
        let hd = self.config.head_dim();
        let inv_sqrt = T::one() / T::from_usize(hd).unwrap().sqrt();
        let mut heads = Vec::with_capacity(self.config.n_heads);
        for head in 0..self.config.n_heads {
            let qh = tape.slice_cols(q, head * hd, hd)?;
            let kh = tape.slice_cols(k, head * hd, hd)?;
            let vh = tape.slice_cols(v, head * hd, hd)?;
            let scores = tape.matmul_t(qh, kh)?;
            let scores = tape.scale(scores, inv_sqrt);
            let attn = tape.softmax_rows(scores, Some(mask))?;
            heads.push(tape.matmul(attn, vh)?);
        }
        let o = tape.concat_cols(&heads)?;
        let o = self.linear(tape, bound, o, l.wo, l.bo)?;
        let x = tape.add(x, o)?;
        let h = tape.layer_norm(x, bound.p(l.ln2_g), bound.p(l.ln2_b))?;
        let m = self.linear(tape, bound, h, l.w1, l.b1)?;
        let m = tape.gelu(m);
        let m = self.linear(tape, bound, m, l.w2, l.b2)?;
        tape.add(x, m)
    }

    /// Next-token log-probabilities `[rows, vocab]` at `out_rows` of `layout`
    /// (every row when `None`).
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundParams<T>,
        layout: &Layout,
        out_rows: Option<&[usize]>,
    ) -> Result<Var> {
        if layout.is_empty() {
            return Err(Error::Contract("forward on an empty layout".into()));
        }
        let max_pos = layout.positions.iter().copied().max().unwrap_or(0);
        if max_pos >= self.config.max_context {
            return Err(Error::Length {
                needed: max_pos + 1,
                max: self.config.max_context,
            });
        }
        if let Some(&bad) = layout.tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::Contract(format!("token id {bad} outside the vocabulary")));
        }
        let ids: Vec<usize> = layout.tokens.iter().map(|&t| t as usize).collect();
        let tok = tape.gather_rows(bound.p(self.tok_emb), &ids)?;
        let pos = tape.gather_rows(bound.p(self.pos_emb), &layout.positions)?;
        let mut x = tape.add(tok, pos)?;
        for l in &self.layers {
            x = self.block(tape, bound, l, x, &layout.mask)?;
        }
        let x = match out_rows {
            Some(rows) => tape.gather_rows(x, rows)?,
            None => x,
        };
        let h = tape.layer_norm(x, bound.p(self.lnf_g), bound.p(self.lnf_b))?;
        let logits = tape.matmul_t(h, bound.p(self.tok_emb))?;
        tape.log_softmax(logits, 1)
    }
}

/// Anything that can run the transformer forward pass: a bare model or one
/// wrapped with adapters.
pub trait CausalLm<T: Scalar> {
    fn backbone(&self) -> &TransformerLm<T>;

    /// Registers parameters on `tape`, tracking exactly the trainable ones.
    fn bind(&self, tape: &mut Tape<T>) -> BoundParams<T>;

    fn config(&self) -> &ModelConfig {
        self.backbone().config()
    }

    fn log_probs(&self, tape: &mut Tape<T>, layout: &Layout, out_rows: Option<&[usize]>) -> Result<Var> {
        let bound = self.bind(tape);
        self.backbone().forward(tape, &bound, layout, out_rows)
    }
}

impl<T: Scalar> CausalLm<T> for TransformerLm<T> {
    fn backbone(&self) -> &TransformerLm<T> {
        self
    }

    fn bind(&self, tape: &mut Tape<T>) -> BoundParams<T> {
        let params = self.params.iter().map(|(_, t)| tape.leaf(t)).collect();
        BoundParams {
            params,
            adapters: vec![None; self.params.len()],
        }
    }
}

/// A model whose parameters are already registered on a tape, so several
/// forward passes in one step share the same leaves and accumulate into the
/// same gradients.
#[derive(Clone, Copy, Debug)]
pub struct Prebound<'a, T: Scalar> {
    model: &'a TransformerLm<T>,
    params: &'a BoundParams<T>,
}

impl<'a, T: Scalar> Prebound<'a, T> {
    pub fn new(model: &'a TransformerLm<T>, params: &'a BoundParams<T>) -> Self {
        Prebound { model, params }
    }
}

impl<T: Scalar> CausalLm<T> for Prebound<'_, T> {
    fn backbone(&self) -> &TransformerLm<T> {
        self.model
    }

    fn bind(&self, _tape: &mut Tape<T>) -> BoundParams<T> {
        self.params.clone()
    }
}
