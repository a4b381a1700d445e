//! Two-stage training: a supervised source stage, then adversarial
//! adaptation of a copy of the source model to the unlabeled target domain.

mod log;

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use fan_tensor::{ops, Adam, Graph, Tensor};

use crate::checkpoint::{self, fingerprint};
use crate::config::{ModelConfig, TrainConfig};
use crate::data::{shuffled_indices, DomainDataset};
use crate::error::{FanError, Result};
use crate::losses;
use crate::model::{Discriminator, FanModel, Mode};

pub use log::{LogRecord, Stage, TrainLog};

/// Independent sub-streams of the root seed.
#[derive(Clone, Copy, Debug)]
#[repr(u64)]
pub enum SeedStream {
    ModelInit = 1,
    SourceBatches = 2,
    DiscriminatorInit = 3,
    TargetBatches = 4,
    AdaptSourceBatches = 5,
    EvalSubset = 6,
    DataSampling = 7,
    Export = 8,
}

/// SplitMix64 of `root` mixed with a stream tag.
pub fn derive_seed(root: u64, stream: SeedStream, index: u64) -> u64 {
    let mut z = root
        .wrapping_add((stream as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Endless sequence of minibatch index lists, reshuffled every pass.
struct Batches {
    n: usize,
    batch: usize,
    seed: u64,
    stream: SeedStream,
    pass: u64,
    order: Vec<usize>,
    pos: usize,
}

impl Batches {
    fn new(n: usize, batch: usize, seed: u64, stream: SeedStream) -> Self {
        Batches {
            n,
            batch: batch.min(n),
            seed,
            stream,
            pass: 0,
            order: Vec::new(),
            pos: 0,
        }
    }

    /// Full batches per pass over the data.
    fn per_pass(&self) -> usize {
        self.n / self.batch
    }

    fn next(&mut self) -> Vec<usize> {
        if self.order.is_empty() || self.pos + self.batch > self.n {
            self.order = shuffled_indices(self.n, derive_seed(self.seed, self.stream, self.pass));
            self.pass += 1;
            self.pos = 0;
        }
        let out = self.order[self.pos..self.pos + self.batch].to_vec();
        self.pos += self.batch;
        out
    }
}

/// Deterministic held-out subset used for periodic evaluation.
fn eval_subset(eval: Option<&DomainDataset>, cfg: &TrainConfig) -> Result<Option<DomainDataset>> {
    let Some(ds) = eval else { return Ok(None) };
    if ds.evaluation_labels().is_none() {
        return Err(FanError::Argument(format!("evaluation set {} has no labels", ds.provenance)));
    }
    match cfg.eval_samples {
        Some(k) if k < ds.len() => {
            let mut idx = shuffled_indices(ds.len(), derive_seed(cfg.seed, SeedStream::EvalSubset, 0));
            idx.truncate(k);
            Ok(Some(ds.select(&idx)?))
        }
        _ => Ok(Some(ds.clone())),
    }
}

fn checkpoint_due(cfg: &TrainConfig, epoch: usize) -> Option<&Path> {
    let dir = cfg.checkpoint_dir.as_deref()?;
    (cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0).then_some(dir)
}

fn losses_map(stage: Stage, step: usize, pairs: &[(&str, f32)]) -> Result<BTreeMap<String, f32>> {
    if let Some((k, v)) = pairs.iter().find(|(_, v)| !v.is_finite()) {
        return Err(FanError::Numeric(format!("{stage} step {step}: {k} loss is {v}")));
    }
    Ok(pairs.iter().map(|&(k, v)| (k.to_string(), v)).collect())
}

/// Stage 1: minimizes `alpha·L_c + beta·L_m + L_r` on the labeled source set.
/// `eval`, when given, is scored at the configured cadence.
pub fn train_source(
    source: &DomainDataset,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    eval: Option<&DomainDataset>,
) -> Result<(FanModel, TrainLog)> {
    cfg.validate()?;
    let labels = source
        .labels()
        .ok_or_else(|| FanError::Argument(format!("source set {} is unlabeled", source.provenance)))?;
    if source.len() < 2 {
        return Err(FanError::Argument("source set needs at least 2 images".into()));
    }
    let eval = eval_subset(eval, cfg)?;
    let mut model = FanModel::new(
        model_cfg.variant,
        model_cfg.split,
        derive_seed(cfg.seed, SeedStream::ModelInit, 0),
    )?;
    let mut adam = Adam::new(cfg.source_optim.to_adam(), model.store());
    let mut batches = Batches::new(source.len(), cfg.batch_size, cfg.seed, SeedStream::SourceBatches);
    let mut log = TrainLog::new();
    let start = Instant::now();
    let per_epoch = batches.per_pass();
    let mut step = 0;
    for epoch in 0..cfg.source_epochs {
        for i in 0..per_epoch {
            let idx = batches.next();
            let x = source.images().select_rows(&idx)?;
            let y: Vec<usize> = idx.iter().map(|&j| labels[j]).collect();
            let mut g = Graph::new();
            let bound = model.store().bind(&mut g);
            let xv = g.input(x);
            let vars = model.encode_vars(&mut g, &bound, xv, Mode::Train)?;
            let recon = model.decode_vars(&mut g, &bound, vars, Mode::Train)?;
            let loss = losses::source_total(&mut g, model.variant(), vars, recon, xv, &y, &cfg.weights)?;
            let grads = g.backward(loss.total)?;
            let store = model.store_mut();
            store.zero_grad();
            store.accumulate(&grads, &bound);
            adam.step(store);

            let v = loss.values(&g);
            let mut terms = vec![
                ("total", v.total),
                ("classification", v.classification),
                ("reconstruction", v.reconstruction),
            ];
            if let Some(m) = v.mutual {
                terms.push(("mutual", m));
            }
            let last = epoch + 1 == cfg.source_epochs && i + 1 == per_epoch;
            let eval_accuracy = match &eval {
                Some(ds) if last || (cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0) => {
                    Some(evaluate(&model, ds)?)
                }
                _ => None,
            };
            log.push(LogRecord {
                step,
                stage: Stage::Source,
                epoch,
                losses: losses_map(Stage::Source, step, &terms)?,
                disc_accuracy: None,
                eval_accuracy,
                elapsed_secs: start.elapsed().as_secs_f64(),
            })?;
            step += 1;
        }
        if let Some(dir) = checkpoint_due(cfg, epoch) {
            checkpoint::save_model(dir.join(format!("source-epoch{:03}.ckpt", epoch + 1)), &model)?;
        }
    }
    Ok((model, log))
}

/// Outcome of [`adapt_target`].
#[derive(Clone, Debug)]
pub struct Adaptation {
    pub model: FanModel,
    pub discriminator: Discriminator,
    pub log: TrainLog,
    pub invariants: InvariantReport,
}

/// Parameter hashes taken around an adaptation run.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct InvariantReport {
    pub source_before: String,
    pub source_after: String,
    pub target_initial: String,
}

impl InvariantReport {
    pub fn source_unchanged(&self) -> bool {
        self.source_before == self.source_after
    }

    pub fn target_started_from_source(&self) -> bool {
        self.target_initial == self.source_before
    }
}

/// Fraction of source scores above 0 and target scores below 0.
fn disc_accuracy(scores: &Tensor, n_src: usize) -> f32 {
    let hits = scores
        .data()
        .iter()
        .enumerate()
        .filter(|&(i, &s)| if i < n_src { s > 0.0 } else { s < 0.0 })
        .count();
    hits as f32 / scores.numel() as f32
}

/// Stage 2: adapts a copy of `source_model` to the unlabeled `target` set.
///
/// Each generator step is preceded by `disc_steps` discriminator steps on
/// fresh source/target batches. The discriminator always sees the source
/// and target logits of a step together as one batch. The target model is
/// updated with `nu·L_adv_M + L_r`; the discriminator with `mu·L_adv_D`.
pub fn adapt_target(
    source_model: &FanModel,
    source: &DomainDataset,
    target: &DomainDataset,
    cfg: &TrainConfig,
    eval: Option<&DomainDataset>,
) -> Result<Adaptation> {
    cfg.validate()?;
    if target.labels().is_some() {
        return Err(FanError::Argument(format!(
            "target set {} must not expose labels during adaptation",
            target.provenance
        )));
    }
    if source.len() < 2 || target.len() < 2 {
        return Err(FanError::Argument("adaptation needs at least 2 images per domain".into()));
    }
    let eval = eval_subset(eval, cfg)?;
    let source_before = fingerprint(source_model.store());
    let mut model = source_model.clone();
    let target_initial = fingerprint(model.store());
    if target_initial != source_before {
        return Err(FanError::Invariant("target model does not start from the source weights".into()));
    }
    let mut disc = Discriminator::new(derive_seed(cfg.seed, SeedStream::DiscriminatorInit, 0));
    let mut adam_t = Adam::new(cfg.target_optim.to_adam(), model.store());
    let mut adam_d = Adam::new(cfg.discriminator_optim.to_adam(), disc.store());
    let batch = cfg.batch_size.min(source.len()).min(target.len());
    let mut src_batches = Batches::new(source.len(), batch, cfg.seed, SeedStream::AdaptSourceBatches);
    let mut tgt_batches = Batches::new(target.len(), batch, cfg.seed, SeedStream::TargetBatches);
    let per_epoch = tgt_batches.per_pass();
    let w = cfg.weights;
    let mut log = TrainLog::new();
    let start = Instant::now();
    let mut step = 0;
    for epoch in 0..cfg.target_epochs {
        for i in 0..per_epoch {
            let mut last = None;
            let mut d_loss = 0.0;
            let mut d_acc = 0.0;
            for _ in 0..cfg.disc_steps {
                let xs = source.images().select_rows(&src_batches.next())?;
                let xt = target.images().select_rows(&tgt_batches.next())?;
                let src_logits = source_model.logits_batch(&xs)?;
                let mut g = Graph::new();
                let tb = model.store().bind_frozen(&mut g);
                let xtv = g.input(xt.clone());
                let tvars = model.encode_vars_frozen(&mut g, &tb, xtv, Mode::BatchStats)?;
                let sl = g.input(src_logits.clone());
                let both = g.concat(&[sl, tvars.logits], 0)?;
                let db = disc.store().bind(&mut g);
                let scores = disc.forward_vars(&mut g, &db, both, Mode::Train)?;
                let parts = g.split(scores, &[xs.dim(0), xt.dim(0)], 0)?;
                let l = losses::discriminator(&mut g, parts[0], parts[1])?;
                let scaled = g.scale(l, w.mu)?;
                let grads = g.backward(scaled)?;
                let store = disc.store_mut();
                store.zero_grad();
                store.accumulate(&grads, &db);
                adam_d.step(store);
                d_loss = g.value(l).item();
                d_acc = disc_accuracy(g.value(scores), xs.dim(0));
                last = Some((src_logits, xt));
            }
            let (src_logits, xt) = last.expect("at least one discriminator step");

            let mut g = Graph::new();
            let tb = model.store().bind(&mut g);
            let xtv = g.input(xt);
            let vars = model.encode_vars(&mut g, &tb, xtv, Mode::Train)?;
            let recon = model.decode_vars(&mut g, &tb, vars, Mode::Train)?;
            let l_r = losses::reconstruction(&mut g, recon, xtv)?;
            let mut adv_value = None;
            let total = if w.nu > 0.0 {
                let db = disc.store().bind_frozen(&mut g);
                let sl = g.input(src_logits);
                let n_src = g.shape(sl)[0];
                let both = g.concat(&[sl, vars.logits], 0)?;
                let scores = disc.forward_vars_frozen(&mut g, &db, both, Mode::BatchStats)?;
                let n_tgt = g.shape(scores)[0] - n_src;
                let tgt_scores = g.slice(scores, 0, n_src, n_tgt)?;
                let adv = losses::mapper_adversarial(&mut g, tgt_scores)?;
                adv_value = Some(adv);
                let scaled = g.scale(adv, w.nu)?;
                g.add(scaled, l_r)?
            } else {
                l_r
            };
            let grads = g.backward(total)?;
            let store = model.store_mut();
            store.zero_grad();
            store.accumulate(&grads, &tb);
            adam_t.step(store);

            let mut terms = vec![
                ("discriminator", d_loss),
                ("reconstruction", g.value(l_r).item()),
                ("total", g.value(total).item()),
            ];
            if let Some(a) = adv_value {
                terms.push(("adversarial", g.value(a).item()));
            }
            let last = epoch + 1 == cfg.target_epochs && i + 1 == per_epoch;
            let eval_accuracy = match &eval {
                Some(ds) if last || (cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0) => {
                    Some(evaluate(&model, ds)?)
                }
                _ => None,
            };
            log.push(LogRecord {
                step,
                stage: Stage::Target,
                epoch,
                losses: losses_map(Stage::Target, step, &terms)?,
                disc_accuracy: Some(d_acc),
                eval_accuracy,
                elapsed_secs: start.elapsed().as_secs_f64(),
            })?;
            step += 1;
        }
        if let Some(dir) = checkpoint_due(cfg, epoch) {
            checkpoint::save_model(dir.join(format!("target-epoch{:03}.ckpt", epoch + 1)), &model)?;
            checkpoint::save_discriminator(dir.join(format!("discriminator-epoch{:03}.ckpt", epoch + 1)), &disc)?;
        }
    }
    let source_after = fingerprint(source_model.store());
    let invariants = InvariantReport {
        source_before,
        source_after,
        target_initial,
    };
    if !invariants.source_unchanged() {
        return Err(FanError::Invariant("source model parameters changed during adaptation".into()));
    }
    Ok(Adaptation {
        model,
        discriminator: disc,
        log,
        invariants,
    })
}

/// Class probabilities under running statistics; rows sum to 1.
pub fn predict(model: &FanModel, x: &Tensor) -> Result<Tensor> {
    Ok(ops::softmax(&model.logits(x)?)?)
}

/// Top-1 accuracy against the set's labels (visible or withheld).
pub fn evaluate(model: &FanModel, test: &DomainDataset) -> Result<f64> {
    let labels = test
        .evaluation_labels()
        .ok_or_else(|| FanError::Argument(format!("test set {} has no labels", test.provenance)))?;
    let pred = model.logits(test.images())?.argmax_rows();
    let hits = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / labels.len() as f64)
}
