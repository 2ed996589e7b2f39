//! Oracles shared by unit tests. Independent of the autodiff path.

/// Central differences of `f` at `x` with step `h`.
pub fn central_difference(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + h;
            let up = f(&p);
            p[i] = orig - h;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Central differences at `h = 1e-5` carry roundoff near `1e-16 · |f| / h ≈ 1e-10`,
/// so entries smaller than this are compared on an absolute scale.
pub const REL_ERR_FLOOR: f64 = 1e-5;

/// Largest elementwise `|a - b| / max(|a|, |b|, REL_ERR_FLOOR)`.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(REL_ERR_FLOOR))
        .fold(0.0, f64::max)
}

use crate::model::{ModelConfig, TransformerLm, Vocabulary};
use crate::numerics::{Rng, Stream, Tensor};

/// A small config used where the default would make oracles slow.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 8,
        d_ff: 16,
        max_context: 32,
        vocab_size: Vocabulary::SIZE,
    }
}

/// Every parameter redrawn as N(0, std²), gains around one. Far from uniform outputs.
pub fn random_model(config: ModelConfig, seed: u64, std: f64) -> TransformerLm<f64> {
    let mut rng = Rng::new(seed, Stream::Custom(77));
    let mut model = TransformerLm::new(config, &mut rng).unwrap();
    let names: Vec<String> = model.params().iter().map(|(n, _)| n.to_string()).collect();
    for name in names {
        let shape = model.params().get(&name).unwrap().shape().to_vec();
        let mut t = Tensor::randn(&shape, std, &mut rng);
        if name.ends_with("gain") {
            t.data_mut().iter_mut().for_each(|x| *x += 1.0);
        }
        model.set_param(&name, t).unwrap();
    }
    model
}

fn blank_model(config: ModelConfig) -> TransformerLm<f64> {
    let mut model = TransformerLm::new(config, &mut Rng::new(0, Stream::Init)).unwrap();
    let names: Vec<(String, Vec<usize>)> =
        model.params().iter().map(|(n, t)| (n.to_string(), t.shape().to_vec())).collect();
    for (name, shape) in names {
        model.set_param(&name, Tensor::zeros(&shape)).unwrap();
    }
    model
}

fn hand_config() -> ModelConfig {
    ModelConfig {
        n_layers: 1,
        n_heads: 1,
        d_model: 4,
        d_ff: 4,
        max_context: 8,
        vocab_size: Vocabulary::SIZE,
    }
}

/// One-layer model whose next-token logits equal `logits` at every position.
/// The transformer block has zero weights and the final layer-norm has zero
/// gain, so its output is the bias `e₀` and the tied projection reads column 0
/// of the embedding.
pub fn frozen_logits_model(logits: &[f64]) -> TransformerLm<f64> {
    let cfg = hand_config();
    let mut model = blank_model(cfg);
    let mut emb = vec![0.0; cfg.vocab_size * cfg.d_model];
    for (v, &z) in logits.iter().enumerate() {
        emb[v * cfg.d_model] = z;
    }
    model.set_param("tok_emb", Tensor::new(vec![cfg.vocab_size, cfg.d_model], emb).unwrap()).unwrap();
    model.set_param("ln_f.bias", Tensor::new(vec![4], vec![1.0, 0.0, 0.0, 0.0]).unwrap()).unwrap();
    model
}

/// Model that, after an empty prompt, draws its first token from
/// `softmax(first_logits)` and then emits EOS with probability 1 − O(e⁻¹⁰⁰⁰).
/// `first_logits[BOS]` must be 0 (the BOS embedding row is zero).
pub fn two_step_model(first_logits: &[f64]) -> TransformerLm<f64> {
    assert_eq!(first_logits[Vocabulary::BOS as usize], 0.0);
    let cfg = hand_config();
    let mut model = blank_model(cfg);
    let eps = 1e-3;
    let mut emb = vec![0.0; cfg.vocab_size * cfg.d_model];
    for (v, &z) in first_logits.iter().enumerate() {
        if v as u32 != Vocabulary::BOS {
            emb[v * cfg.d_model] = z * eps;
        }
    }
    emb[Vocabulary::EOS as usize * cfg.d_model + 1] = 1.0;
    let mut pos = vec![0.0; cfg.max_context * cfg.d_model];
    pos[2] = 1.0;
    pos[3] = -1.0;
    for p in 1..cfg.max_context {
        pos[p * cfg.d_model + 1] = 1.0;
        pos[p * cfg.d_model + 3] = -1.0;
    }
    model.set_param("tok_emb", Tensor::new(vec![cfg.vocab_size, 4], emb).unwrap()).unwrap();
    model.set_param("pos_emb", Tensor::new(vec![cfg.max_context, 4], pos).unwrap()).unwrap();
    model.set_param("ln_f.gain", Tensor::new(vec![4], vec![0.0, 1000.0, 0.0, 0.0]).unwrap()).unwrap();
    model.set_param("ln_f.bias", Tensor::new(vec![4], vec![1.0 / eps, 0.0, 0.0, 0.0]).unwrap()).unwrap();
    model
}

/// First-step logits putting (nearly) all mass on `chars` with the given probabilities.
pub fn logits_for(chars: &[(char, f64)]) -> Vec<f64> {
    let mut z = vec![0.0; Vocabulary::SIZE];
    for &(c, p) in chars {
        z[Vocabulary.id(c).unwrap() as usize] = p.ln() + 80.0;
    }
    z
}
