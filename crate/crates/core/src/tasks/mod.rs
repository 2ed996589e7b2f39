//! Task specifications, their on-disk format, and the bundled suite.
//!
//! A task pairs prompt templates with a target: an integer range, an
//! enumerated list, a proxy built from a sample file, a set of generated
//! records, or nothing ("open", metrics only). [`instantiate`] turns a task
//! and concrete slot values into `(prompt, distribution)` pairs.

pub mod bundled;
mod format;
mod records;

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use format::{load_suite, parse_suite, serialize_suite, FORMAT_HEADER};
pub use records::{balanced_tuples, record_targets, render_record, FieldKind, FieldSpec, RecordSchema};

use crate::error::{Error, Result};
use crate::metrics::ParserMode;
use crate::model::Vocabulary;
use crate::numerics::Rng;
use crate::objective::TargetDistribution;

/// Prompt prefix of the copy pairs added for [`TaskSpec::echo`].
pub const ECHO_PREFIX: &str = "Repeat: ";

/// Default number of generations sampled per evaluation.
pub const DEFAULT_EVAL_SAMPLES: usize = 1000;

/// Inclusive integer domain of a template slot.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotDomain {
    pub name: String,
    pub lo: i64,
    pub hi: i64,
}

/// A range bound: a literal or a slot reference.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Operand {
    Lit(i64),
    Slot(String),
}

impl Operand {
    fn resolve(&self, values: &SlotValues) -> Result<i64> {
        match self {
            Operand::Lit(v) => Ok(*v),
            Operand::Slot(s) => values
                .get(s)
                .copied()
                .ok_or_else(|| Error::Domain(format!("slot `{s}` has no value"))),
        }
    }
}

pub type SlotValues = BTreeMap<String, i64>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum TargetSpec {
    /// `{low}` … `{high}`, uniform.
    Range { low: Operand, high: Operand },
    /// Every value equally likely.
    Uniform(Vec<String>),
    /// Explicit probabilities.
    Weighted(Vec<(String, f64)>),
    /// Frequency-weighted proxy read from a two-column sample file.
    Samples { file: String, counts: Vec<(String, u64)> },
    /// Balanced tuples of a multi-field record.
    Records(RecordSchema),
    /// No ground truth.
    Open,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub prompts: Vec<String>,
    pub slots: Vec<SlotDomain>,
    /// Slot assignments the task is instantiated with by default.
    pub bindings: Vec<SlotValues>,
    pub target: TargetSpec,
    pub parser: ParserMode,
    /// Evaluation sample count N.
    pub samples: usize,
    /// Completions (with relative counts) the biased base model is pretrained on.
    pub bias: Vec<(u64, String)>,
    /// Copies of each target value the base model sees under [`ECHO_PREFIX`]
    /// prompts, so that every valid answer is a string it can already produce.
    #[serde(default)]
    pub echo: u64,
    /// `(count, prompt)` pairs: pretraining prompts under which the base model
    /// sees the task's own target distribution, `count` completions per unit
    /// of probability mass. Prompts may reference slots.
    #[serde(default)]
    pub aside: Vec<(u64, String)>,
}

/// One concrete prompt with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub task: String,
    pub prompt: String,
    pub target: Option<Arc<TargetDistribution>>,
    /// True when the target is an empirical proxy rather than the full ground truth.
    pub proxy: bool,
}

impl TaskSpec {
    pub fn is_record(&self) -> bool {
        matches!(self.target, TargetSpec::Records(_))
    }

    pub fn is_open(&self) -> bool {
        matches!(self.target, TargetSpec::Open)
    }

    /// Field names for multi-field parsing (`field1`, … when not declared).
    pub fn field_names(&self) -> Vec<String> {
        match (&self.target, self.parser) {
            (TargetSpec::Records(schema), _) => schema.field_names(),
            (_, ParserMode::Multi(k)) => (1..=k).map(|i| format!("field{i}")).collect(),
            _ => Vec::new(),
        }
    }

    fn slot(&self, name: &str) -> Option<&SlotDomain> {
        self.slots.iter().find(|s| s.name == name)
    }

    /// Slot names referenced by `${name}` in the prompts.
    fn referenced_slots(&self) -> Vec<String> {
        let mut out = Vec::new();
        for p in self.prompts.iter().chain(self.aside.iter().map(|(_, text)| text)) {
            let mut rest = p.as_str();
            while let Some(i) = rest.find("${") {
                rest = &rest[i + 2..];
                if let Some(j) = rest.find('}') {
                    out.push(rest[..j].to_string());
                    rest = &rest[j + 1..];
                } else {
                    break;
                }
            }
        }
        out.sort();
        out.dedup();
        out
    }

    /// Structural checks: at least one prompt, declared slots, encodable text,
    /// a valid target, and parser agreement with record fields.
    pub fn validate(&self) -> Result<()> {
        let fail = |message: String| Error::Validation {
            task: self.name.clone(),
            message,
        };
        if self.name.is_empty() || self.name.contains([' ', ']', '[']) {
            return Err(fail(format!("invalid task name `{}`", self.name)));
        }
        if self.prompts.is_empty() {
            return Err(fail("no prompt templates".into()));
        }
        if self.samples == 0 {
            return Err(fail("sample count must be positive".into()));
        }
        for s in &self.slots {
            if s.lo > s.hi {
                return Err(fail(format!("slot `{}` has empty domain {}..{}", s.name, s.lo, s.hi)));
            }
        }
        for name in self.referenced_slots() {
            if self.slot(&name).is_none() {
                return Err(fail(format!("prompt uses undeclared slot `{name}`")));
            }
        }
        for p in &self.prompts {
            let text = p.replace("${", "").replace('}', "");
            Vocabulary.encode(&text).map_err(|e| fail(format!("prompt not encodable: {e}")))?;
        }
        for (_, c) in &self.bias {
            Vocabulary.encode(c).map_err(|e| fail(format!("bias completion not encodable: {e}")))?;
        }
        if !self.aside.is_empty() && matches!(self.target, TargetSpec::Open) {
            return Err(fail("`aside` prompts need an enumerable target".into()));
        }
        for (_, text) in &self.aside {
            let text = text.replace("${", "").replace('}', "");
            Vocabulary.encode(&text).map_err(|e| fail(format!("aside prompt not encodable: {e}")))?;
        }
        if let TargetSpec::Range { low, high } = &self.target {
            for op in [low, high] {
                if let Operand::Slot(s) = op {
                    if self.slot(s).is_none() {
                        return Err(fail(format!("range uses undeclared slot `{s}`")));
                    }
                }
            }
        }
        if let TargetSpec::Records(schema) = &self.target {
            schema.validate()?;
            if self.parser != ParserMode::Multi(schema.fields.len()) {
                return Err(fail(format!(
                    "record with {} fields needs parser `multi {}`",
                    schema.fields.len(),
                    schema.fields.len()
                )));
            }
        }
        for b in &self.bindings {
            for inst in instantiate(self, b, None)? {
                Vocabulary.encode(&inst.prompt).map_err(|e| fail(e.to_string()))?;
            }
        }
        if !matches!(self.target, TargetSpec::Range { .. }) {
            self.fixed_target().map_err(|e| fail(e.to_string()))?;
        }
        Ok(())
    }

    /// Target distribution that does not depend on slot values.
    fn fixed_target(&self) -> Result<(Option<TargetDistribution>, bool)> {
        let braced = |v: &str| format!("{{{v}}}");
        Ok(match &self.target {
            TargetSpec::Range { .. } => unreachable!("range targets depend on slots"),
            TargetSpec::Uniform(values) => {
                let v: Vec<String> = values.iter().map(|v| braced(v)).collect();
                (Some(TargetDistribution::uniform(&v)?), false)
            }
            TargetSpec::Weighted(entries) => {
                let e = entries.iter().map(|(v, w)| (braced(v), *w)).collect();
                (Some(TargetDistribution::new(e)?), false)
            }
            TargetSpec::Samples { counts, .. } => {
                let c: Vec<(String, u64)> = counts.iter().map(|(v, n)| (braced(v), *n)).collect();
                (Some(TargetDistribution::from_counts(&c)?), true)
            }
            TargetSpec::Records(schema) => (Some(TargetDistribution::uniform(&record_targets(schema)?)?), false),
            TargetSpec::Open => (None, false),
        })
    }
}

fn fill_template(template: &str, values: &SlotValues) -> String {
    let mut out = template.to_string();
    for (k, v) in values {
        out = out.replace(&format!("${{{k}}}"), &v.to_string());
    }
    out
}

/// The uniform distribution over `{low}` … `{high}`.
pub fn range_target(low: i64, high: i64) -> Result<TargetDistribution> {
    if high < low {
        return Err(Error::Domain(format!("range high {high} is below low {low}")));
    }
    let values: Vec<String> = (low..=high).map(|n| format!("{{{n}}}")).collect();
    TargetDistribution::uniform(&values)
}

/// One instance per prompt template. Slots without a value are drawn
/// uniformly from their domain with `rng`; without an `rng` they are an error.
pub fn instantiate(spec: &TaskSpec, values: &SlotValues, rng: Option<&mut Rng>) -> Result<Vec<Instance>> {
    let mut values = values.clone();
    let mut rng = rng;
    for slot in &spec.slots {
        match values.get(&slot.name) {
            Some(&v) if v < slot.lo || v > slot.hi => {
                return Err(Error::Domain(format!(
                    "{}: slot `{}` = {v} is outside {}..{}",
                    spec.name, slot.name, slot.lo, slot.hi
                )))
            }
            Some(_) => {}
            None => match rng.as_deref_mut() {
                Some(r) => {
                    values.insert(slot.name.clone(), r.range_inclusive(slot.lo, slot.hi));
                }
                None => {
                    return Err(Error::Domain(format!("{}: slot `{}` has no value", spec.name, slot.name)));
                }
            },
        }
    }
    if let Some(unknown) = values.keys().find(|k| spec.slot(k).is_none()) {
        return Err(Error::Domain(format!("{}: unknown slot `{unknown}`", spec.name)));
    }
    let (target, proxy) = match &spec.target {
        TargetSpec::Range { low, high } => (Some(range_target(low.resolve(&values)?, high.resolve(&values)?)?), false),
        _ => spec.fixed_target()?,
    };
    let target = target.map(Arc::new);
    Ok(spec
        .prompts
        .iter()
        .map(|p| Instance {
            task: spec.name.clone(),
            prompt: fill_template(p, &values),
            target: target.clone(),
            proxy,
        })
        .collect())
}

/// Instances for every declared binding (or the single empty binding when none is declared).
pub fn instantiate_all(spec: &TaskSpec) -> Result<Vec<Instance>> {
    if spec.bindings.is_empty() {
        return instantiate(spec, &SlotValues::new(), None);
    }
    let mut out = Vec::new();
    for b in &spec.bindings {
        out.extend(instantiate(spec, b, None)?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub tasks: Vec<TaskSpec>,
    /// Tasks excluded from training.
    #[serde(default)]
    pub held_out: Vec<String>,
}

impl SuiteConfig {
    pub fn task(&self, name: &str) -> Option<&TaskSpec> {
        self.tasks.iter().find(|t| t.name == name)
    }

    pub fn task_names(&self) -> Vec<&str> {
        self.tasks.iter().map(|t| t.name.as_str()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, t) in self.tasks.iter().enumerate() {
            if self.tasks[..i].iter().any(|u| u.name == t.name) {
                return Err(Error::Validation {
                    task: t.name.clone(),
                    message: "task name is used twice".into(),
                });
            }
            t.validate()?;
        }
        for h in &self.held_out {
            if self.task(h).is_none() {
                return Err(Error::Validation {
                    task: h.clone(),
                    message: "held-out task is not in the suite".into(),
                });
            }
        }
        Ok(())
    }

    /// Tasks available for training.
    pub fn train_tasks(&self) -> Vec<&TaskSpec> {
        self.tasks.iter().filter(|t| !self.held_out.contains(&t.name)).collect()
    }

    /// `(prompt, completion)` pairs for the biased base model: every default
    /// instantiation of every task with each bias completion repeated by its
    /// count, plus `echo` copy pairs per distinct target value and the
    /// target-distributed completions of every `aside` prompt.
    pub fn pretraining_corpus(&self) -> Result<Vec<(String, String)>> {
        let mut corpus = Vec::new();
        for t in &self.tasks {
            let mut values = std::collections::BTreeSet::new();
            let bindings = if t.bindings.is_empty() { vec![SlotValues::new()] } else { t.bindings.clone() };
            for binding in &bindings {
                let instances = instantiate(t, binding, None)?;
                for inst in &instances {
                    for (count, completion) in &t.bias {
                        for _ in 0..*count {
                            corpus.push((inst.prompt.clone(), completion.clone()));
                        }
                    }
                }
                let Some(dist) = instances.first().and_then(|i| i.target.clone()) else { continue };
                values.extend(dist.entries().iter().map(|(v, _)| v.clone()));
                for (count, text) in &t.aside {
                    let prompt = fill_template(text, binding);
                    for (v, p) in dist.entries() {
                        let copies = (*count as f64 * p).round().max(1.0) as u64;
                        for _ in 0..copies {
                            corpus.push((prompt.clone(), v.clone()));
                        }
                    }
                }
            }
            for v in values {
                for _ in 0..t.echo {
                    corpus.push((format!("{ECHO_PREFIX}{v}"), v.clone()));
                }
            }
        }
        Ok(corpus)
    }
}

/// Splits a suite for leave-one-out evaluation. With `held_out = None`
/// (in-distribution mode) both sides are the full suite.
pub fn leave_one_out(suite: &SuiteConfig, held_out: Option<&str>) -> Result<(SuiteConfig, SuiteConfig)> {
    let Some(name) = held_out else {
        return Ok((suite.clone(), suite.clone()));
    };
    let held = suite
        .task(name)
        .ok_or_else(|| Error::Validation {
            task: name.to_string(),
            message: format!("no such task; suite has {}", suite.task_names().join(", ")),
        })?
        .clone();
    let train = SuiteConfig {
        tasks: suite.tasks.iter().filter(|t| t.name != name).cloned().collect(),
        held_out: Vec::new(),
    };
    let eval = SuiteConfig {
        tasks: vec![held],
        held_out: Vec::new(),
    };
    Ok((train, eval))
}

/// A multi-field task whose training target is `schema.budget` balanced tuples.
pub fn record_task(name: &str, prompts: Vec<String>, schema: RecordSchema) -> Result<TaskSpec> {
    let spec = TaskSpec {
        name: name.to_string(),
        prompts,
        slots: Vec::new(),
        bindings: Vec::new(),
        parser: ParserMode::Multi(schema.fields.len()),
        target: TargetSpec::Records(schema),
        samples: DEFAULT_EVAL_SAMPLES,
        bias: Vec::new(),
        echo: 0,
        aside: Vec::new(),
    };
    spec.validate()?;
    Ok(spec)
}

#[cfg(test)]
mod tests;
