use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use diffuse_core::harness::experiment::TaskRef;
use diffuse_core::harness::{
    evaluate_instances, finetune, prepare, run_recipe, sample_completions, Checkpoint, Recipe, TrainingMeta,
};
use diffuse_core::lora::AdaptedModel;
use diffuse_core::metrics::plot_table;
use diffuse_core::model::{pretrain, CausalLm, TransformerLm};
use diffuse_core::numerics::{Rng, Stream};
use diffuse_core::tasks::load_suite;

#[derive(Parser)]
#[command(name = "diffuse", version, about = "Distribution-matching fine-tuning on a toy character LM")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct RecipeArgs {
    /// Recipe TOML file.
    #[arg(long, short = 'c', conflicts_with = "recipe")]
    config: Option<PathBuf>,
    /// Bundled recipe name (rng-uniform, range-generalization, leave-one-out, bios).
    #[arg(long)]
    recipe: Option<String>,
    /// Overrides the recipe seed.
    #[arg(long, short = 's')]
    seed: Option<u64>,
}

impl RecipeArgs {
    fn load(&self) -> Result<(Recipe, PathBuf)> {
        let (mut recipe, dir) = match (&self.config, &self.recipe) {
            (Some(path), _) => {
                let recipe = Recipe::load(path).with_context(|| format!("loading {}", path.display()))?;
                (recipe, path.parent().unwrap_or(Path::new(".")).to_path_buf())
            }
            (None, Some(name)) => (Recipe::bundled(name)?, PathBuf::from(".")),
            (None, None) => bail!("pass --config FILE or --recipe NAME"),
        };
        if let Some(seed) = self.seed {
            recipe.seed = seed;
        }
        Ok((recipe, dir))
    }
}

#[derive(Args)]
struct ModelArgs {
    /// Base model checkpoint.
    #[arg(long)]
    base: PathBuf,
    /// Adapter checkpoint trained on `--base`.
    #[arg(long)]
    adapters: Option<PathBuf>,
}

enum Loaded {
    Base(TransformerLm<f64>),
    Adapted(AdaptedModel<f64>),
}

impl ModelArgs {
    fn load(&self) -> Result<Loaded> {
        let base = Checkpoint::load(&self.base)?.into_model()?;
        Ok(match &self.adapters {
            Some(path) => Loaded::Adapted(Checkpoint::load(path)?.into_adapted(base)?),
            None => Loaded::Base(base),
        })
    }
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the biased base model on a recipe's suite.
    Pretrain {
        #[command(flatten)]
        recipe: RecipeArgs,
        #[arg(long, short = 'o')]
        output: PathBuf,
    },
    /// Fine-tune LoRA adapters on the recipe's train tasks.
    Finetune {
        #[command(flatten)]
        recipe: RecipeArgs,
        #[arg(long)]
        base: PathBuf,
        /// Task names; defaults to the recipe's `train` list.
        #[arg(long = "task")]
        tasks: Vec<String>,
        #[arg(long, short = 'o')]
        output: PathBuf,
    },
    /// Print N completions of a prompt.
    Sample {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, short = 'p')]
        prompt: String,
        #[arg(short = 'n', default_value_t = 10)]
        n: usize,
        #[arg(long, short = 't', default_value_t = 1.0)]
        temperature: f64,
        #[arg(long, default_value_t = 40)]
        max_new_tokens: usize,
        #[arg(long, short = 's', default_value_t = 0)]
        seed: u64,
    },
    /// Evaluate a model on the recipe's evaluation tasks.
    Eval {
        #[command(flatten)]
        recipe: RecipeArgs,
        #[command(flatten)]
        model: ModelArgs,
        /// Overrides the sample count N.
        #[arg(short = 'n')]
        n: Option<usize>,
        #[arg(long, short = 't')]
        temperature: Option<f64>,
        #[arg(long, default_value = "eval")]
        label: String,
        /// Directory for plot tables; metrics always go to stdout.
        #[arg(long, short = 'o')]
        output: Option<PathBuf>,
    },
    /// Run a full recipe.
    Run {
        #[command(flatten)]
        recipe: RecipeArgs,
        #[arg(short = 'n')]
        n: Option<usize>,
        #[arg(long, short = 't')]
        temperature: Option<f64>,
        #[arg(long, short = 'o')]
        output: PathBuf,
    },
    /// Parse and validate suite files.
    Validate {
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
}

fn eval_with<M: CausalLm<f64>>(
    model: &M,
    recipe: &Recipe,
    dir: &Path,
    label: &str,
    output: Option<&Path>,
) -> Result<()> {
    let suite = recipe.load_suite(dir)?;
    let mut refs = if recipe.evaluate.is_empty() { recipe.train.clone() } else { recipe.evaluate.clone() };
    if refs.is_empty() {
        refs = suite.task_names().into_iter().map(TaskRef::new).collect();
    }
    let sampling = Rng::new(recipe.seed, Stream::Sampling);
    for (k, r) in refs.iter().enumerate() {
        let (spec, instances) = r.resolve(&suite)?;
        let evals = evaluate_instances(model, &spec, &instances, label, &recipe.eval, &sampling.fork(k as u32))?;
        for (i, e) in evals.iter().enumerate() {
            println!("{}", e.report.to_json_line()?);
            if let Some(out) = output {
                std::fs::create_dir_all(out)?;
                std::fs::write(out.join(format!("{label}-{}-{i}.csv", spec.name)), plot_table(&e.dist)?)?;
            }
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Pretrain { recipe, output } => {
            let (recipe, dir) = recipe.load()?;
            let corpus = recipe.load_suite(&dir)?.pretraining_corpus()?;
            let mut model = TransformerLm::<f64>::new(recipe.model, &mut Rng::new(recipe.seed, Stream::Init))?;
            let report = pretrain(&mut model, &corpus, &recipe.pretrain, &mut Rng::new(recipe.seed, Stream::Data).fork(0))?;
            let meta = TrainingMeta {
                seed: recipe.seed,
                step: report.losses.len(),
                final_loss: report.losses.last().copied(),
            };
            Checkpoint::from_model(&model, Some(meta)).save(&output)?;
            eprintln!(
                "pretrained {} steps on {} pairs, final loss {:.4} -> {}",
                report.losses.len(),
                corpus.len(),
                report.losses.last().copied().unwrap_or(f64::NAN),
                output.display()
            );
        }
        Command::Finetune { recipe, base, tasks, output } => {
            let (recipe, dir) = recipe.load()?;
            let suite = recipe.load_suite(&dir)?;
            let refs: Vec<TaskRef> = if tasks.is_empty() {
                recipe.train.clone()
            } else {
                tasks.into_iter().map(TaskRef::new).collect()
            };
            if refs.is_empty() {
                bail!("no train tasks: pass --task or add [[train]] to the recipe");
            }
            let mut train = Vec::new();
            for r in &refs {
                train.extend(r.resolve(&suite)?.1);
            }
            let cfg = diffuse_core::harness::TrainConfig {
                seed: recipe.seed,
                ..recipe.finetune.clone()
            };
            let base: TransformerLm<f64> = Checkpoint::load(&base)?.into_model()?;
            let mut model = prepare(base, &cfg)?;
            let report = finetune(&mut model, &train, &cfg)?;
            let meta = TrainingMeta {
                seed: cfg.seed,
                step: report.steps,
                final_loss: report.final_loss(),
            };
            Checkpoint::from_adapters(&model, Some(meta)).save(&output)?;
            print!("{}", report.trace_csv()?);
            eprintln!(
                "{} steps{}, final loss {:.4} -> {}",
                report.steps,
                if report.stopped_early { " (early stop)" } else { "" },
                report.final_loss().unwrap_or(f64::NAN),
                output.display()
            );
        }
        Command::Sample { model, prompt, n, temperature, max_new_tokens, seed } => {
            let mut rng = Rng::new(seed, Stream::Sampling);
            let samples = match model.load()? {
                Loaded::Base(m) => sample_completions(&m, &prompt, n, temperature, max_new_tokens, &mut rng)?,
                Loaded::Adapted(m) => sample_completions(&m, &prompt, n, temperature, max_new_tokens, &mut rng)?,
            };
            for s in samples {
                println!("{s}");
            }
        }
        Command::Eval { recipe, model, n, temperature, label, output } => {
            let (mut recipe, dir) = recipe.load()?;
            recipe.eval.samples = n.or(recipe.eval.samples);
            recipe.eval.temperature = temperature.unwrap_or(recipe.eval.temperature);
            match model.load()? {
                Loaded::Base(m) => eval_with(&m, &recipe, &dir, &label, output.as_deref())?,
                Loaded::Adapted(m) => eval_with(&m, &recipe, &dir, &label, output.as_deref())?,
            }
        }
        Command::Run { recipe, n, temperature, output } => {
            let (mut recipe, dir) = recipe.load()?;
            recipe.eval.samples = n.or(recipe.eval.samples);
            recipe.eval.temperature = temperature.unwrap_or(recipe.eval.temperature);
            let summary = run_recipe(&recipe, &dir, &output)?;
            for row in &summary.rows {
                println!(
                    "{:<10} {:<14} entropy {:>7} coverage {:>7.1} kl {:>9}",
                    row.label,
                    row.task,
                    row.mean_entropy.map_or("-".into(), |v| format!("{v:.4}")),
                    row.mean_coverage,
                    row.mean_kl.map_or("-".into(), |v| format!("{v:.4}")),
                );
            }
            eprintln!("artifacts in {}", output.display());
        }
        Command::Validate { files } => {
            let mut failed = false;
            for f in &files {
                match load_suite(f) {
                    Ok(suite) => println!("{}: ok ({} tasks: {})", f.display(), suite.tasks.len(), suite.task_names().join(", ")),
                    Err(e) => {
                        failed = true;
                        println!("{}: {e}", f.display());
                    }
                }
            }
            if failed {
                bail!("validation failed");
            }
        }
    }
    Ok(())
}
