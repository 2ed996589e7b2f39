//! Recipe-driven runs: pretrain a biased base, evaluate it, fine-tune, evaluate again.
//!
//! A recipe is a TOML file:
//!
//! ```toml
//! name = "rng-uniform"
//! seed = 1
//! suite = "bundled:rng"          # or a suite file path, relative to the recipe
//! # base = "base.ckpt"           # skip pretraining and load this model instead
//! mode = "standard"              # or "leave-one-out"
//!
//! [model]                        # architecture of a freshly pretrained base
//! [pretrain]                     # steps, batch_size, [pretrain.optimizer]
//! [finetune]                     # lr, batch_size, max_steps, early_stop, [finetune.lora]
//! [eval]                         # samples, temperature, max_new_tokens, kl_mode, case_fold
//!
//! [[train]]                      # standard mode: what to fine-tune on
//! task = "rng_1_10"
//! prompts = [0]                  # optional template indices
//! bindings = [{ low = 1, high = 10 }]
//!
//! [[evaluate]]                   # standard mode: defaults to the train list
//! task = "rng_1_10"
//! ```
//!
//! Leave-one-out mode ignores `train`/`evaluate` and uses every suite task
//! (or the `holdouts` list) in turn.
//!
//! Every run draws from streams of the single recipe seed: model init from
//! `Init`, pretraining batches from a fork of `Data`, fine-tuning batches from
//! `Data`, adapter init from a fork of `Init`, and evaluation from forks of
//! `Sampling` indexed by task and instance. `finetune.seed` is replaced by the
//! recipe seed.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::checkpoint::{model_digest, Checkpoint, TrainingMeta};
use super::eval::{evaluate_instances, mean_entropy, EvalConfig, InstanceEval};
use super::train::{finetune, prepare, TrainConfig, TrainReport};
use crate::error::{Error, Result};
use crate::lora::AdaptedModel;
use crate::metrics::plot_table;
use crate::model::{pretrain, CausalLm, ModelConfig, PretrainConfig, TransformerLm};
use crate::numerics::{Rng, Stream};
use crate::tasks::{bundled, instantiate, instantiate_all, leave_one_out, load_suite, Instance, SlotValues, SuiteConfig, TaskSpec};

/// Recipes shipped with the library.
pub const BUNDLED_RECIPES: &[(&str, &str)] = &[
    ("rng-uniform", include_str!("../../recipes/rng-uniform.toml")),
    ("range-generalization", include_str!("../../recipes/range-generalization.toml")),
    ("leave-one-out", include_str!("../../recipes/leave-one-out.toml")),
    ("bios", include_str!("../../recipes/bios.toml")),
];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    #[default]
    Standard,
    LeaveOneOut,
}

/// A task selection: optionally a subset of its prompt templates and explicit slot bindings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskRef {
    pub task: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub prompts: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub bindings: Vec<SlotValues>,
}

impl TaskRef {
    pub fn new(task: impl Into<String>) -> Self {
        TaskRef {
            task: task.into(),
            prompts: Vec::new(),
            bindings: Vec::new(),
        }
    }

    /// The selected spec and its instances.
    pub fn resolve(&self, suite: &SuiteConfig) -> Result<(TaskSpec, Vec<Instance>)> {
        let mut spec = suite
            .task(&self.task)
            .ok_or_else(|| Error::Validation {
                task: self.task.clone(),
                message: format!("not in the suite ({})", suite.task_names().join(", ")),
            })?
            .clone();
        if !self.prompts.is_empty() {
            spec.prompts = self
                .prompts
                .iter()
                .map(|&i| {
                    spec.prompts.get(i).cloned().ok_or_else(|| Error::Validation {
                        task: self.task.clone(),
                        message: format!("prompt index {i} out of range ({} templates)", spec.prompts.len()),
                    })
                })
                .collect::<Result<_>>()?;
        }
        let instances = if self.bindings.is_empty() {
            instantiate_all(&spec)?
        } else {
            let mut out = Vec::new();
            for b in &self.bindings {
                out.extend(instantiate(&spec, b, None)?);
            }
            out
        };
        Ok((spec, instances))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Recipe {
    pub name: String,
    pub seed: u64,
    pub suite: String,
    #[serde(default)]
    pub base: Option<String>,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub finetune: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub train: Vec<TaskRef>,
    #[serde(default)]
    pub evaluate: Vec<TaskRef>,
    #[serde(default)]
    pub holdouts: Vec<String>,
}

impl Recipe {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Recipe(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Recipe(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_toml(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn bundled(name: &str) -> Result<Self> {
        let (_, text) = BUNDLED_RECIPES
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| Error::Recipe(format!("no bundled recipe `{name}`")))?;
        Self::from_toml(text)
    }

    /// Loads the referenced suite; `base_dir` anchors relative paths.
    pub fn load_suite(&self, base_dir: &Path) -> Result<SuiteConfig> {
        match self.suite.strip_prefix("bundled:") {
            Some(name) => bundled::suite(name),
            None => load_suite(base_dir.join(&self.suite)),
        }
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.finetune.clone()
        }
    }
}

/// Mean metrics of one task under one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub label: String,
    pub task: String,
    pub instances: usize,
    pub mean_entropy: Option<f64>,
    pub mean_coverage: f64,
    pub mean_kl: Option<f64>,
    pub mean_modal_frequency: Option<f64>,
}

impl SummaryRow {
    fn new(label: &str, task: &str, evals: &[InstanceEval]) -> Self {
        let mean = |xs: Vec<f64>| (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64);
        SummaryRow {
            label: label.to_string(),
            task: task.to_string(),
            instances: evals.len(),
            mean_entropy: mean_entropy(evals),
            mean_coverage: mean(evals.iter().map(|e| e.report.coverage as f64).collect()).unwrap_or(0.0),
            mean_kl: mean(evals.iter().filter_map(|e| e.report.kl).collect()),
            mean_modal_frequency: mean(evals.iter().filter_map(|e| e.report.modal_frequency).collect()),
        }
    }
}

/// Entropy of one held-out task under the base, the all-task (ID) model, and the leave-it-out (OOD) model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LooRow {
    pub task: String,
    pub baseline_entropy: Option<f64>,
    pub id_entropy: Option<f64>,
    pub ood_entropy: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunSummary {
    pub rows: Vec<SummaryRow>,
    pub loo: Vec<LooRow>,
    /// `(run label, trace)` per fine-tuning run.
    pub traces: Vec<(String, TrainReport)>,
    pub base_sha256: String,
    /// Every per-instance evaluation, in report order.
    pub evals: Vec<(String, InstanceEval)>,
}

impl RunSummary {
    pub fn row(&self, label: &str, task: &str) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.label == label && r.task == task)
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    recipe: &'a Recipe,
    format_version: u32,
    seed: u64,
    streams: [(&'static str, &'static str); 5],
    suite_tasks: Vec<&'a str>,
    base_sha256: Option<&'a str>,
    stages_completed: &'a [String],
}

struct Run<'a> {
    recipe: &'a Recipe,
    suite: SuiteConfig,
    out: PathBuf,
    metrics: File,
    stages: Vec<String>,
    summary: RunSummary,
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn slug(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect()
}

fn csv_string<R: Serialize>(rows: &[R]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Numeric(format!("csv: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Numeric(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

impl<'a> Run<'a> {
    fn write_manifest(&self) -> Result<()> {
        let manifest = Manifest {
            recipe: self.recipe,
            format_version: 1,
            seed: self.recipe.seed,
            streams: [
                ("model init", "Init"),
                ("adapter init", "Init fork 1"),
                ("pretraining batches", "Data fork 0"),
                ("fine-tuning batches", "Data"),
                ("evaluation samples", "Sampling fork <task> fork <instance>"),
            ],
            suite_tasks: self.suite.task_names(),
            base_sha256: (!self.summary.base_sha256.is_empty()).then_some(self.summary.base_sha256.as_str()),
            stages_completed: &self.stages,
        };
        write(&self.out.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")
    }

    fn stage<R>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> Result<R>) -> Result<R> {
        let out = f(self).map_err(|e| Error::stage(name, e))?;
        self.stages.push(name.to_string());
        self.write_manifest().map_err(|e| Error::stage(name, e))?;
        Ok(out)
    }

    fn base(&mut self, base_dir: &Path) -> Result<TransformerLm<f64>> {
        let recipe = self.recipe;
        let model = match &recipe.base {
            Some(path) => self.stage("load-base", |_| Checkpoint::load(base_dir.join(path))?.into_model())?,
            None => self.stage("pretrain", |run| {
                let corpus = run.suite.pretraining_corpus()?;
                let mut model = TransformerLm::new(recipe.model, &mut Rng::new(recipe.seed, Stream::Init))?;
                let report = pretrain(&mut model, &corpus, &recipe.pretrain, &mut Rng::new(recipe.seed, Stream::Data).fork(0))?;
                let meta = TrainingMeta {
                    seed: recipe.seed,
                    step: report.losses.len(),
                    final_loss: report.losses.last().copied(),
                };
                Checkpoint::from_model(&model, Some(meta)).save(run.out.join("base.ckpt"))?;
                let trace: Vec<(usize, f64)> = report.losses.iter().copied().enumerate().collect();
                write(&run.out.join("pretrain_loss.csv"), csv_string(&trace)?)?;
                Ok(model)
            })?,
        };
        self.summary.base_sha256 = model_digest(&model);
        Ok(model)
    }

    /// Evaluates `refs` under `label`; `refs[k]` samples from `Sampling` fork `fork_base + k`.
    fn evaluate<M: CausalLm<f64>>(&mut self, model: &M, label: &str, refs: &[TaskRef], fork_base: u32) -> Result<()> {
        let sampling = Rng::new(self.recipe.seed, Stream::Sampling);
        let plots = self.out.join("plots");
        std::fs::create_dir_all(&plots).map_err(|e| Error::io(&plots, e))?;
        for (k, r) in refs.iter().enumerate() {
            let (spec, instances) = r.resolve(&self.suite)?;
            let evals = evaluate_instances(model, &spec, &instances, label, &self.recipe.eval, &sampling.fork(fork_base + k as u32))?;
            for (i, e) in evals.iter().enumerate() {
                writeln!(self.metrics, "{}", e.report.to_json_line()?).map_err(|err| Error::io(self.out.join("metrics.jsonl"), err))?;
                let stem = format!("{}-{}-{i}", slug(label), slug(&spec.name));
                write(&plots.join(format!("{stem}.csv")), plot_table(&e.dist)?)?;
                for (name, d) in spec.field_names().iter().zip(&e.fields) {
                    write(&plots.join(format!("{stem}-{}.csv", slug(name))), plot_table(d)?)?;
                }
            }
            self.summary.rows.push(SummaryRow::new(label, &spec.name, &evals));
            self.summary.evals.extend(evals.into_iter().map(|e| (label.to_string(), e)));
        }
        write(&self.out.join("summary.csv"), csv_string(&self.summary.rows)?)
    }

    fn finetune(&mut self, base: &TransformerLm<f64>, run_label: &str, refs: &[TaskRef]) -> Result<AdaptedModel<f64>> {
        let cfg = self.recipe.train_config();
        let mut train = Vec::new();
        for r in refs {
            train.extend(r.resolve(&self.suite)?.1);
        }
        let mut model = prepare(base.clone(), &cfg)?;
        let report = finetune(&mut model, &train, &cfg)?;
        let stem = slug(run_label);
        write(&self.out.join(format!("loss-{stem}.csv")), report.trace_csv()?)?;
        let meta = TrainingMeta {
            seed: cfg.seed,
            step: report.steps,
            final_loss: report.final_loss(),
        };
        Checkpoint::from_adapters(&model, Some(meta)).save(self.out.join(format!("adapters-{stem}.ckpt")))?;
        self.summary.traces.push((run_label.to_string(), report));
        Ok(model)
    }
}

/// Runs `recipe`, writing every artifact under `out`. `base_dir` anchors the
/// recipe's relative paths. A failing stage aborts with its name; files
/// written by earlier stages stay in place.
pub fn run_recipe(recipe: &Recipe, base_dir: &Path, out: &Path) -> Result<RunSummary> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let suite = recipe.load_suite(base_dir).map_err(|e| Error::stage("load-suite", e))?;
    let metrics_path = out.join("metrics.jsonl");
    let metrics = OpenOptions::new()
        .create(true)
        .write(true)
        .truncate(true)
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;
    let mut run = Run {
        recipe,
        suite,
        out: out.to_path_buf(),
        metrics,
        stages: vec!["load-suite".into()],
        summary: RunSummary::default(),
    };
    run.write_manifest()?;
    let base = run.base(base_dir)?;
    match recipe.mode {
        Mode::Standard => {
            if recipe.train.is_empty() {
                return Err(Error::stage("finetune", Error::Recipe("standard mode needs at least one [[train]] entry".into())));
            }
            let evaluate = if recipe.evaluate.is_empty() { recipe.train.clone() } else { recipe.evaluate.clone() };
            run.stage("baseline-eval", |run| run.evaluate(&base, "baseline", &evaluate, 0))?;
            let tuned = run.stage("finetune", |run| run.finetune(&base, "tuned", &recipe.train))?;
            run.stage("tuned-eval", |run| run.evaluate(&tuned, "tuned", &evaluate, 0))?;
        }
        Mode::LeaveOneOut => {
            let holdouts: Vec<String> = if recipe.holdouts.is_empty() {
                run.suite.task_names().iter().map(|s| s.to_string()).collect()
            } else {
                recipe.holdouts.clone()
            };
            let all: Vec<TaskRef> = run.suite.task_names().into_iter().map(TaskRef::new).collect();
            run.stage("baseline-eval", |run| run.evaluate(&base, "baseline", &all, 0))?;
            let id_model = run.stage("finetune-id", |run| run.finetune(&base, "id", &all))?;
            run.stage("id-eval", |run| run.evaluate(&id_model, "id", &all, 0))?;
            drop(id_model);
            for held in &holdouts {
                let fork = run.suite.task_names().iter().position(|t| t == held).unwrap_or(0) as u32;
                let (train, _) = leave_one_out(&run.suite, Some(held)).map_err(|e| Error::stage("split", e))?;
                let train_refs: Vec<TaskRef> = train.task_names().into_iter().map(TaskRef::new).collect();
                let label = format!("ood-{held}");
                let model = run.stage(&format!("finetune-{label}"), |run| run.finetune(&base, &label, &train_refs))?;
                run.stage(&format!("eval-{label}"), |run| run.evaluate(&model, "ood", &[TaskRef::new(held.clone())], fork))?;
            }
            let rows: Vec<LooRow> = holdouts
                .iter()
                .map(|t| {
                    let e = |label: &str| run.summary.row(label, t).and_then(|r| r.mean_entropy);
                    LooRow {
                        task: t.clone(),
                        baseline_entropy: e("baseline"),
                        id_entropy: e("id"),
                        ood_entropy: e("ood"),
                    }
                })
                .collect();
            write(&out.join("loo.csv"), csv_string(&rows)?)?;
            run.summary.loo = rows;
        }
    }
    run.stage("report", |_| Ok(()))?;
    Ok(run.summary)
}

/// Loads the recipe at `config` and runs it with relative paths anchored at its directory.
pub fn run_experiment(config: impl AsRef<Path>, out: impl AsRef<Path>) -> Result<RunSummary> {
    let config = config.as_ref();
    let recipe = Recipe::load(config)?;
    run_recipe(&recipe, config.parent().unwrap_or(Path::new(".")), out.as_ref())
}
