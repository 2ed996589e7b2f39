use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::metrics::{empirical, empirical_fields, kl_to_target, EmpiricalDistribution, KlMode, MetricReport, ParserMode};
use crate::model::{CausalLm, Sampler, Vocabulary};
use crate::numerics::{Rng, Scalar};
use crate::tasks::{Instance, TaskSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Samples per instance; `None` uses the task's own count.
    pub samples: Option<usize>,
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub kl_mode: KlMode,
    /// Compare outputs case-insensitively.
    pub case_fold: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            samples: None,
            temperature: 1.0,
            max_new_tokens: 40,
            kl_mode: KlMode::default(),
            case_fold: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceEval {
    pub prompt: String,
    pub report: MetricReport,
    pub dist: EmpiricalDistribution,
    /// Per-field distributions for multi-field tasks.
    pub fields: Vec<EmpiricalDistribution>,
}

/// `n` completions of `prompt`.
pub fn sample_completions<T: Scalar, M: CausalLm<T> + ?Sized>(
    model: &M,
    prompt: &str,
    n: usize,
    temperature: f64,
    max_new_tokens: usize,
    rng: &mut Rng,
) -> Result<Vec<String>> {
    let prompt = Vocabulary.encode(prompt)?;
    let mut sampler = Sampler::new(model, &prompt)?;
    (0..n).map(|_| sampler.draw(temperature, max_new_tokens, rng)).collect()
}

/// Samples one instance and summarizes the parsed outputs. KL is reported
/// whenever the instance has an enumerable target.
pub fn evaluate_instance<T: Scalar, M: CausalLm<T> + ?Sized>(
    model: &M,
    spec: &TaskSpec,
    inst: &Instance,
    label: &str,
    cfg: &EvalConfig,
    rng: &mut Rng,
) -> Result<InstanceEval> {
    let n = cfg.samples.unwrap_or(spec.samples);
    let samples = sample_completions(model, &inst.prompt, n, cfg.temperature, cfg.max_new_tokens, rng)?;
    let fold = |d: EmpiricalDistribution| if cfg.case_fold { d.case_folded() } else { d };
    let dist = fold(empirical(&samples, spec.parser));
    let fields: Vec<EmpiricalDistribution> = match spec.parser {
        ParserMode::Multi(k) => empirical_fields(&samples, k).into_iter().map(fold).collect(),
        ParserMode::Single => Vec::new(),
    };
    let kl = match &inst.target {
        Some(target) => Some(kl_to_target(model, &Vocabulary.encode(&inst.prompt)?, target, cfg.kl_mode)?),
        None => None,
    };
    let mut report = MetricReport::new(&inst.task, label, &dist, kl);
    if !fields.is_empty() {
        report = report.with_fields(&spec.field_names(), &fields);
    }
    Ok(InstanceEval {
        prompt: inst.prompt.clone(),
        report,
        dist,
        fields,
    })
}

/// Evaluates each instance on its own fork of `rng`.
pub fn evaluate_instances<T: Scalar, M: CausalLm<T> + ?Sized>(
    model: &M,
    spec: &TaskSpec,
    instances: &[Instance],
    label: &str,
    cfg: &EvalConfig,
    rng: &Rng,
) -> Result<Vec<InstanceEval>> {
    instances
        .iter()
        .enumerate()
        .map(|(i, inst)| evaluate_instance(model, spec, inst, label, cfg, &mut rng.fork(i as u32)))
        .collect()
}

/// Mean of the defined entropies, `None` if none is defined.
pub fn mean_entropy(evals: &[InstanceEval]) -> Option<f64> {
    let values: Vec<f64> = evals.iter().filter_map(|e| e.report.entropy).collect();
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}
