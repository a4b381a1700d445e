use fan_tensor::{Bound, Graph, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::fan::check_layout;
use super::layers::{relu_bn, BatchNorm, Ctx, Linear, Mode, Stats};
use super::EVAL_CHUNK;
use crate::data::NUM_CLASSES;
use crate::error::{FanError, Result};

const HIDDEN: usize = 500;

#[derive(Clone, Copy, Debug)]
struct Arch {
    fc1: Linear,
    bn1: BatchNorm,
    fc2: Linear,
    bn2: BatchNorm,
    fc3: Linear,
}

impl Arch {
    fn forward(&self, ctx: &mut Ctx<'_>, logits: Var) -> Result<Var> {
        let shape = ctx.g.shape(logits);
        if shape.len() != 2 || shape[1] != NUM_CLASSES {
            return Err(FanError::Argument(format!(
                "discriminator expects [B,{NUM_CLASSES}] logits, got {shape:?}"
            )));
        }
        let mut h = self.fc1.forward(ctx, logits)?;
        h = relu_bn(ctx, &self.bn1, h)?;
        h = self.fc2.forward(ctx, h)?;
        h = relu_bn(ctx, &self.bn2, h)?;
        self.fc3.forward(ctx, h)
    }
}

/// Scores class-logit vectors: positive for source-like, negative for
/// target-like. Outputs are pre-sigmoid.
#[derive(Clone, Debug)]
pub struct Discriminator {
    arch: Arch,
    store: ParamStore,
}

impl Discriminator {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = &mut rng;
        let mut store = ParamStore::new();
        let arch = Arch {
            fc1: Linear::new(&mut store, "discriminator.fc1", NUM_CLASSES, HIDDEN, r),
            bn1: BatchNorm::new(&mut store, "discriminator.bn1", HIDDEN),
            fc2: Linear::new(&mut store, "discriminator.fc2", HIDDEN, HIDDEN, r),
            bn2: BatchNorm::new(&mut store, "discriminator.bn2", HIDDEN),
            fc3: Linear::new(&mut store, "discriminator.fc3", HIDDEN, 1, r),
        };
        Discriminator { arch, store }
    }

    pub fn from_store(store: ParamStore) -> Result<Self> {
        let fresh = Discriminator::new(0);
        check_layout(&fresh.store, &store)?;
        Ok(Discriminator {
            arch: fresh.arch,
            store,
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Scores on an existing graph. `Mode::Train` updates running statistics.
    pub fn forward_vars(&mut self, g: &mut Graph, bound: &Bound, logits: Var, mode: Mode) -> Result<Var> {
        let arch = self.arch;
        let mut ctx = Ctx {
            g,
            bound,
            stats: Stats::Update(&mut self.store),
            mode,
        };
        arch.forward(&mut ctx, logits)
    }

    /// Scores on an existing graph without touching the discriminator.
    pub fn forward_vars_frozen(&self, g: &mut Graph, bound: &Bound, logits: Var, mode: Mode) -> Result<Var> {
        let mut ctx = Ctx {
            g,
            bound,
            stats: Stats::Read(&self.store),
            mode,
        };
        self.arch.forward(&mut ctx, logits)
    }

    /// Pre-sigmoid scores `[B,1]` for a batch of logit vectors.
    pub fn score(&self, logits: &Tensor, mode: Mode) -> Result<Tensor> {
        let n = logits.dim(0);
        let chunk = if mode == Mode::Eval { EVAL_CHUNK } else { n };
        let mut parts = Vec::new();
        for start in (0..n).step_by(chunk.max(1)) {
            let rows = logits.slice_rows(start, (start + chunk).min(n))?;
            let mut g = Graph::new();
            let bound = self.store.bind_frozen(&mut g);
            let x = g.input(rows);
            let s = self.forward_vars_frozen(&mut g, &bound, x, mode)?;
            parts.push(g.value(s).clone());
        }
        let refs: Vec<&Tensor> = parts.iter().collect();
        Ok(Tensor::stack_rows(&refs)?)
    }

    /// Probability that each logit vector came from the source domain.
    pub fn probability(&self, logits: &Tensor, mode: Mode) -> Result<Tensor> {
        Ok(self.score(logits, mode)?.map(|s| 1.0 / (1.0 + (-s).exp())))
    }

    /// Sets the output layer to zero so every score is 0.
    pub fn zero_output(&mut self) {
        for id in [self.arch.fc3.w, self.arch.fc3.b] {
            self.store.value_mut(id).data_mut().fill(0.0);
        }
    }
}
