//! Seeded experiment recipes, the factorization ablation, and feature and
//! reconstruction exports.

mod datasets;
mod export;
mod recipes;

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::write_frozen;
use crate::data::DomainTag;
use crate::error::{FanError, Result};
use crate::model::{FanModel, Variant};
use crate::trainer::{adapt_target, evaluate, train_source, Adaptation};

pub use datasets::{data_root, idx_available, idx_paths, load_domain, DomainData, DomainSpec, DATA_ROOT_ENV};
pub use export::{
    export_embeddings, export_reconstructions, write_npy, write_png_grid, FeatureKind, FeatureTable, ReconMode,
    Reconstructions,
};
pub use recipes::{DataConfig, Recipe, BUILTIN};

/// Aggregate outcome of a recipe over its seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub recipe: String,
    pub variant: Variant,
    pub source_domain: String,
    pub target_domain: String,
    pub seeds: Vec<u64>,
    /// Target test accuracy after adaptation, per seed.
    pub adapted: Vec<f64>,
    /// Target test accuracy of the source model, per seed.
    pub baseline: Vec<f64>,
    /// Source test accuracy of the source model, per seed.
    pub source_accuracy: Vec<f64>,
    pub mean: f64,
    pub std: Option<f64>,
    pub baseline_mean: f64,
    pub baseline_std: Option<f64>,
    /// Frozen-source and initialization hashes matched for every seed.
    pub invariants_hold: bool,
    pub runtime_secs: f64,
}

/// Mean and sample standard deviation (absent below two values).
pub fn mean_std(v: &[f64]) -> (f64, Option<f64>) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = (v.len() >= 2).then(|| (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    (mean, std)
}

/// Everything produced for one seed.
#[derive(Clone, Debug)]
pub struct SeedRun {
    pub seed: u64,
    pub source: DomainData,
    pub target: DomainData,
    pub source_model: FanModel,
    pub adaptation: Adaptation,
    pub source_accuracy: f64,
    pub baseline: f64,
    pub adapted: f64,
    pub dir: PathBuf,
}

#[derive(Serialize)]
struct SeedSummary<'a> {
    recipe: &'a str,
    seed: u64,
    source_accuracy: f64,
    baseline: f64,
    adapted: f64,
    invariants: &'a crate::trainer::InvariantReport,
}

/// Run directory of one seed: `<out>/runs/<recipe>/<seed>`.
pub fn seed_dir(out: &Path, recipe: &str, seed: u64) -> PathBuf {
    out.join("runs").join(recipe).join(seed.to_string())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| FanError::Format(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| FanError::io(path, e))
}

/// Trains and adapts one seed of `recipe`, writing config, checkpoints,
/// log and summary into its run directory.
pub fn run_seed(recipe: &Recipe, seed: u64, out: &Path, root: Option<&Path>) -> Result<SeedRun> {
    let r = recipe.for_seed(seed);
    r.validate()?;
    let dir = seed_dir(out, &r.name, seed);
    fs::create_dir_all(&dir).map_err(|e| FanError::io(&dir, e))?;
    write_frozen(&r, &dir.join("config.toml"))?;
    let source = load_domain(&r.data.source, DomainTag::Source, root, seed)?;
    let target = load_domain(&r.data.target, DomainTag::Target, root, seed)?;

    let (source_model, source_log) = train_source(&source.train, &r.model, &r.train, Some(&source.test))?;
    let source_accuracy = evaluate(&source_model, &source.test)?;
    let baseline = evaluate(&source_model, &target.test)?;
    checkpoint::save_model(dir.join("source.ckpt"), &source_model)?;

    let adaptation = adapt_target(&source_model, &source.train, &target.train, &r.train, Some(&target.test))?;
    let adapted = evaluate(&adaptation.model, &target.test)?;
    checkpoint::save_model(dir.join("target.ckpt"), &adaptation.model)?;
    checkpoint::save_discriminator(dir.join("discriminator.ckpt"), &adaptation.discriminator)?;

    let mut log = source_log;
    log.extend(&adaptation.log)?;
    log.write_jsonl(&dir.join("log.jsonl"))?;
    write_json(
        &dir.join("summary.json"),
        &SeedSummary {
            recipe: &r.name,
            seed,
            source_accuracy,
            baseline,
            adapted,
            invariants: &adaptation.invariants,
        },
    )?;
    Ok(SeedRun {
        seed,
        source,
        target,
        source_model,
        adaptation,
        source_accuracy,
        baseline,
        adapted,
        dir,
    })
}

/// Builds the aggregate record for a set of seed runs.
pub fn summarize(recipe: &Recipe, runs: &[SeedRun], runtime_secs: f64) -> ResultRecord {
    let adapted: Vec<f64> = runs.iter().map(|r| r.adapted).collect();
    let baseline: Vec<f64> = runs.iter().map(|r| r.baseline).collect();
    let (mean, std) = mean_std(&adapted);
    let (baseline_mean, baseline_std) = mean_std(&baseline);
    ResultRecord {
        recipe: recipe.name.clone(),
        variant: recipe.model.variant,
        source_domain: recipe.data.source.describe(),
        target_domain: recipe.data.target.describe(),
        seeds: runs.iter().map(|r| r.seed).collect(),
        adapted,
        baseline,
        source_accuracy: runs.iter().map(|r| r.source_accuracy).collect(),
        mean,
        std,
        baseline_mean,
        baseline_std,
        invariants_hold: runs.iter().all(|r| {
            r.adaptation.invariants.source_unchanged() && r.adaptation.invariants.target_started_from_source()
        }),
        runtime_secs,
    }
}

/// Appends a record to `<out>/results.jsonl`.
pub fn append_result(out: &Path, record: &ResultRecord) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| FanError::io(out, e))?;
    let path = out.join("results.jsonl");
    let line = serde_json::to_string(record).map_err(|e| FanError::Format(e.to_string()))?;
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| FanError::io(&path, e))?;
    writeln!(f, "{line}").map_err(|e| FanError::io(&path, e))
}

/// Runs every seed of `recipe`, appends the aggregate to the results file
/// and returns it.
pub fn run_recipe(recipe: &Recipe, out: &Path, root: Option<&Path>) -> Result<ResultRecord> {
    recipe.validate()?;
    let start = Instant::now();
    let runs = recipe
        .seeds
        .iter()
        .map(|&s| run_seed(recipe, s, out, root))
        .collect::<Result<Vec<_>>>()?;
    let record = summarize(recipe, &runs, start.elapsed().as_secs_f64());
    append_result(out, &record)?;
    Ok(record)
}

/// The recipe rerun once per architecture variant, in the order
/// joint, separation, concatenation, full.
pub fn ablation_recipes(base: &Recipe) -> Vec<Recipe> {
    Variant::ALL
        .iter()
        .map(|&v| {
            let mut r = base.clone();
            r.model.variant = v;
            r.name = format!("{}-{}", base.name, v);
            r
        })
        .collect()
}

pub fn run_ablation(base: &Recipe, out: &Path, root: Option<&Path>) -> Result<Vec<ResultRecord>> {
    ablation_recipes(base)
        .iter()
        .map(|r| run_recipe(r, out, root))
        .collect()
}
