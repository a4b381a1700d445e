use fan_tensor::{BnMode, Bound, BufferId, Graph, ParamId, ParamStore, Tensor, TensorError, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;

/// How batch-norm layers behave during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Batch statistics; running statistics are left alone.
    BatchStats,
    /// Running statistics.
    Eval,
}

impl Mode {
    fn bn(self) -> BnMode {
        match self {
            Mode::Train => BnMode::TRAIN,
            Mode::BatchStats => BnMode::Train {
                update_running: false,
            },
            Mode::Eval => BnMode::Eval,
        }
    }
}

pub(crate) enum Stats<'a> {
    Update(&'a mut ParamStore),
    Read(&'a ParamStore),
}

/// Everything a layer needs to emit ops for one forward pass.
pub(crate) struct Ctx<'a> {
    pub g: &'a mut Graph,
    pub bound: &'a Bound,
    pub stats: Stats<'a>,
    pub mode: Mode,
}

fn uniform_init(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = 1.0 / (fan_in as f32).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let w = store.add(format!("{name}.w"), uniform_init(&[fan_in, fan_out], fan_in, rng));
        let b = store.add(format!("{name}.b"), uniform_init(&[fan_out], fan_in, rng));
        Linear { w, b }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        Ok(ctx.g.linear(x, ctx.bound[self.w], ctx.bound[self.b])?)
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub padding: usize,
}

impl Conv {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let w = store.add(
            format!("{name}.w"),
            uniform_init(&[out_ch, in_ch, kernel, kernel], fan_in, rng),
        );
        let b = store.add(format!("{name}.b"), uniform_init(&[out_ch], fan_in, rng));
        Conv { w, b, padding }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        Ok(ctx
            .g
            .conv2d(x, ctx.bound[self.w], Some(ctx.bound[self.b]), 1, self.padding)?)
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running: BufferId,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::ones(&[channels]));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[channels]));
        let mut stats = Tensor::zeros(&[2, channels]);
        stats.data_mut()[channels..].fill(1.0);
        let running = store.add_buffer(format!("{name}.running"), stats);
        BatchNorm { gamma, beta, running }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let (gamma, beta) = (ctx.bound[self.gamma], ctx.bound[self.beta]);
        let mode = ctx.mode.bn();
        let out = match &mut ctx.stats {
            Stats::Update(store) => ctx.g.batch_norm(x, gamma, beta, store.buffer_mut(self.running), mode)?,
            Stats::Read(store) => {
                if mode == BnMode::TRAIN {
                    return Err(TensorError::Config {
                        op: "batchnorm",
                        detail: "updating running statistics needs a mutable model".into(),
                    }
                    .into());
                }
                let mut running = store.buffer(self.running).clone();
                ctx.g.batch_norm(x, gamma, beta, &mut running, mode)?
            }
        };
        Ok(out)
    }
}

/// `x → relu → batch norm`, the order the architecture lists them in.
pub(crate) fn relu_bn(ctx: &mut Ctx<'_>, bn: &BatchNorm, x: Var) -> Result<Var> {
    let r = ctx.g.relu(x)?;
    bn.forward(ctx, r)
}
