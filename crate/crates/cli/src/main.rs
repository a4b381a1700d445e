use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fan_core::checkpoint;
use fan_core::config::{apply_overrides, load_toml, write_frozen};
use fan_core::data::{load_idx, DomainTag};
use fan_core::experiments::{
    self, ablation_recipes, data_root, export_embeddings, export_reconstructions, load_domain, FeatureKind,
    ReconMode, Recipe,
};
use fan_core::trainer::{adapt_target, derive_seed, evaluate, train_source, SeedStream};
use fan_core::{ErrorCategory, FanError, Result};

#[derive(Parser)]
#[command(name = "fan", version, about = "Factorized adversarial domain adaptation for digit images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Recipe file (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in recipe, used when no --config is given.
    #[arg(long)]
    recipe: Option<String>,
    /// Root seed; replaces the recipe's seed list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Override a recipe key, e.g. `train.batch_size=64`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a source model on the recipe's source domain.
    TrainSource(Common),
    /// Adapt a trained source model to the recipe's target domain.
    Adapt {
        #[command(flatten)]
        common: Common,
        /// Source-stage checkpoint.
        #[arg(long)]
        source_model: PathBuf,
    },
    /// Report top-1 accuracy of a model checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Model checkpoint to evaluate.
        #[arg(long)]
        checkpoint: PathBuf,
        /// IDX image file; otherwise the recipe's test split of --domain.
        #[arg(long)]
        images: Option<PathBuf>,
        /// IDX label file for --images.
        #[arg(long, requires = "images")]
        labels: Option<PathBuf>,
        #[arg(long, default_value = "target", value_parser = ["source", "target"])]
        domain: String,
    },
    /// Run every seed of a recipe and append its result record.
    RunRecipe {
        /// Built-in recipe name.
        name: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Run a recipe once per architecture variant.
    Ablate {
        /// Built-in recipe name.
        name: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Write per-sample features of source and target test images as CSV.
    ExportEmbeddings {
        #[command(flatten)]
        common: Common,
        /// Source-stage checkpoint.
        #[arg(long)]
        source_model: PathBuf,
        /// Adapted target checkpoint.
        #[arg(long)]
        target_model: PathBuf,
        /// Feature space: `logits` or `dss` (domain-specific code).
        #[arg(long, default_value = "logits")]
        which: FeatureKind,
        /// Test images per domain.
        #[arg(long, default_value_t = 1000)]
        n: usize,
    },
    /// Decode target test images in self or logit-swap mode.
    ExportReconstructions {
        #[command(flatten)]
        common: Common,
        /// Source-stage checkpoint.
        #[arg(long)]
        source_model: PathBuf,
        /// Adapted target checkpoint.
        #[arg(long)]
        target_model: PathBuf,
        /// `self` or `logit-swap`.
        #[arg(long, default_value = "self")]
        mode: ReconMode,
        /// Target test images to decode.
        #[arg(long, default_value_t = 100)]
        n: usize,
    },
    /// Finite-difference check of every differentiable tensor op.
    Gradcheck {
        #[arg(long, default_value_t = 2024)]
        seed: u64,
    },
}

/// Loads, overrides and seeds the recipe named by the common flags.
fn resolve(common: &Common, positional: Option<&str>) -> Result<Recipe> {
    let base = match (&common.config, positional.or(common.recipe.as_deref())) {
        (Some(path), _) => load_toml::<Recipe>(path)?,
        (None, Some(name)) => Recipe::builtin(name)?,
        (None, None) => return Err(FanError::Config("no recipe: pass --config <file> or a recipe name".into())),
    };
    let mut recipe = apply_overrides(&base, &common.set)?;
    if let Some(seed) = common.seed {
        recipe.seeds = vec![seed];
    }
    recipe.train.seed = recipe.seeds.first().copied().unwrap_or(0);
    recipe.validate()?;
    Ok(recipe)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| FanError::io(dir, e))
}

fn run(cli: Cli) -> Result<()> {
    let root = data_root(None);
    let root = root.as_deref();
    match cli.command {
        Command::TrainSource(common) => {
            let r = resolve_seed(resolve(&common, None)?, &common);
            create_dir(&common.out)?;
            write_frozen(&r, &common.out.join("config.toml"))?;
            let source = load_domain(&r.data.source, DomainTag::Source, root, r.train.seed)?;
            let (model, log) = train_source(&source.train, &r.model, &r.train, Some(&source.test))?;
            checkpoint::save_model(common.out.join("source.ckpt"), &model)?;
            log.write_jsonl(&common.out.join("source-log.jsonl"))?;
            println!("source test accuracy {:.6}", evaluate(&model, &source.test)?);
        }
        Command::Adapt { common, source_model } => {
            let r = resolve_seed(resolve(&common, None)?, &common);
            create_dir(&common.out)?;
            write_frozen(&r, &common.out.join("config.toml"))?;
            let model = checkpoint::load_model(&source_model)?;
            if model.variant() != r.model.variant || model.split() != r.model.split {
                return Err(FanError::Config(format!(
                    "checkpoint is a {} model with split {:?}; the recipe asks for {} with {:?}",
                    model.variant(),
                    model.split(),
                    r.model.variant,
                    r.model.split
                )));
            }
            let source = load_domain(&r.data.source, DomainTag::Source, root, r.train.seed)?;
            let target = load_domain(&r.data.target, DomainTag::Target, root, r.train.seed)?;
            let baseline = evaluate(&model, &target.test)?;
            let out = adapt_target(&model, &source.train, &target.train, &r.train, Some(&target.test))?;
            checkpoint::save_model(common.out.join("target.ckpt"), &out.model)?;
            checkpoint::save_discriminator(common.out.join("discriminator.ckpt"), &out.discriminator)?;
            out.log.write_jsonl(&common.out.join("adapt-log.jsonl"))?;
            let inv = serde_json::to_string_pretty(&out.invariants).map_err(|e| FanError::Format(e.to_string()))?;
            let inv_path = common.out.join("invariants.json");
            fs::write(&inv_path, inv + "\n").map_err(|e| FanError::io(&inv_path, e))?;
            println!("baseline target accuracy {baseline:.6}");
            println!("adapted target accuracy {:.6}", evaluate(&out.model, &target.test)?);
        }
        Command::Eval {
            common,
            checkpoint: ckpt,
            images,
            labels,
            domain,
        } => {
            let model = checkpoint::load_model(&ckpt)?;
            let test = match images {
                Some(images) => {
                    let labels = labels.ok_or_else(|| FanError::Argument("--images needs --labels".into()))?;
                    load_idx(&images, Some(&labels), DomainTag::Target)?
                }
                None => {
                    let r = resolve_seed(resolve(&common, None)?, &common);
                    let (spec, tag) = match domain.as_str() {
                        "source" => (&r.data.source, DomainTag::Source),
                        _ => (&r.data.target, DomainTag::Target),
                    };
                    load_domain(spec, tag, root, r.train.seed)?.test
                }
            };
            println!("accuracy {:.6}", evaluate(&model, &test)?);
        }
        Command::RunRecipe { name, common } => {
            let r = resolve(&common, name.as_deref())?;
            let record = experiments::run_recipe(&r, &common.out, root)?;
            println!("{}", serde_json::to_string(&record).map_err(|e| FanError::Format(e.to_string()))?);
        }
        Command::Ablate { name, common } => {
            let r = resolve(&common, name.as_deref())?;
            for variant in ablation_recipes(&r) {
                let record = experiments::run_recipe(&variant, &common.out, root)?;
                println!("{}", serde_json::to_string(&record).map_err(|e| FanError::Format(e.to_string()))?);
            }
        }
        Command::ExportEmbeddings {
            common,
            source_model,
            target_model,
            which,
            n,
        } => {
            let r = resolve_seed(resolve(&common, None)?, &common);
            create_dir(&common.out)?;
            write_frozen(&r, &common.out.join("config.toml"))?;
            let ms = checkpoint::load_model(&source_model)?;
            let mt = checkpoint::load_model(&target_model)?;
            let source = load_domain(&r.data.source, DomainTag::Source, root, r.train.seed)?;
            let target = load_domain(&r.data.target, DomainTag::Target, root, r.train.seed)?;
            let seed = derive_seed(r.train.seed, SeedStream::Export, 0);
            let table = export_embeddings(&ms, &mt, &source.test, &target.test, n, which, seed)?;
            let name = match which {
                FeatureKind::Logits => "embeddings-logits.csv",
                FeatureKind::Dss => "embeddings-dss.csv",
            };
            table.write_csv(&common.out.join(name))?;
            println!("wrote {} rows of width {} to {}", table.rows.len(), table.width(), common.out.join(name).display());
        }
        Command::ExportReconstructions {
            common,
            source_model,
            target_model,
            mode,
            n,
        } => {
            let r = resolve_seed(resolve(&common, None)?, &common);
            create_dir(&common.out)?;
            write_frozen(&r, &common.out.join("config.toml"))?;
            let ms = checkpoint::load_model(&source_model)?;
            let mt = checkpoint::load_model(&target_model)?;
            let source = load_domain(&r.data.source, DomainTag::Source, root, r.train.seed)?;
            let target = load_domain(&r.data.target, DomainTag::Target, root, r.train.seed)?;
            let seed = derive_seed(r.train.seed, SeedStream::Export, 1);
            let idx: Vec<usize> = fan_core::data::shuffled_indices(target.test.len(), seed)
                .into_iter()
                .take(n.max(1))
                .collect();
            let x = target.test.images().select_rows(&idx)?;
            let rec = export_reconstructions(&mt, &ms, &x, &source.test, mode, seed)?;
            let stem = match mode {
                ReconMode::SelfMode => "recon-self",
                ReconMode::LogitSwap => "recon-logit-swap",
            };
            rec.write(&common.out, stem)?;
            println!("mean pixel error {:.6}", rec.pixel_error()?);
            println!("source-model class retention {:.6}", rec.class_retention(&ms)?);
        }
        Command::Gradcheck { seed } => {
            let results = fan_tensor::gradcheck::run_suite(seed)?;
            let failed: Vec<_> = results.iter().filter(|r| !r.passed()).collect();
            for f in &failed {
                println!(
                    "FAIL {} {:?}: relative error {:.3e} > {:.1e}",
                    f.op, f.shapes, f.rel_error, f.tolerance
                );
            }
            println!("gradcheck: {} passed, {} failed", results.len() - failed.len(), failed.len());
            if !failed.is_empty() {
                return Err(FanError::Invariant(format!("{} gradient checks failed", failed.len())));
            }
        }
    }
    Ok(())
}

/// Single-run commands use the first listed seed.
fn resolve_seed(r: Recipe, common: &Common) -> Recipe {
    let seed = common.seed.unwrap_or_else(|| r.seeds.first().copied().unwrap_or(0));
    r.for_seed(seed)
}

fn exit_code(e: &FanError) -> u8 {
    match e.category() {
        ErrorCategory::Config => 2,
        ErrorCategory::Data => 3,
        ErrorCategory::Numeric => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = match e.category() {
                ErrorCategory::Config => "config error",
                ErrorCategory::Data => "data error",
                ErrorCategory::Numeric => "numeric failure",
            };
            let msg = e.to_string();
            if msg.starts_with(kind) {
                eprintln!("fan: {msg}");
            } else {
                eprintln!("fan: {kind}: {msg}");
            }
            ExitCode::from(exit_code(&e))
        }
    }
}
