use std::fmt;
use std::str::FromStr;

use fan_tensor::{Bound, Graph, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{relu_bn, BatchNorm, Conv, Ctx, Linear, Mode, Stats};
use super::EVAL_CHUNK;
use crate::data::{IMAGE_SIDE, NUM_CLASSES};
use crate::error::{FanError, Result};

/// Width of the encoder's latent code.
pub const LATENT_DIM: usize = 100;

const CONV1: usize = 20;
const CONV2: usize = 50;
const HIDDEN: usize = 500;
const DEC_HIDDEN: usize = 300;
const DEC_CH: usize = 16;
const DEC_SIDE: usize = 14;

/// Which parts of the latent code the decoder and the classifier see.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// One undivided code feeds both the decoder and the classifier.
    Joint,
    /// The decoder sees only the domain-specific half.
    Separation,
    /// The decoder sees the domain-specific half and the class logits.
    Concatenation,
    /// Concatenation plus the mutual-orthogonality penalty.
    Full,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Joint,
        Variant::Separation,
        Variant::Concatenation,
        Variant::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Joint => "joint",
            Variant::Separation => "separation",
            Variant::Concatenation => "concatenation",
            Variant::Full => "full",
        }
    }

    pub fn uses_mutual_loss(self) -> bool {
        self == Variant::Full
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Variant::Joint => 0,
            Variant::Separation => 1,
            Variant::Concatenation => 2,
            Variant::Full => 3,
        }
    }

    pub(crate) fn from_code(c: u8) -> Option<Self> {
        Variant::ALL.get(c as usize).copied()
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = FanError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| FanError::Config(format!("unknown variant `{s}`")))
    }
}

/// Widths of the domain-specific and task-specific halves of the code.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentSplit {
    pub domain: usize,
    pub task: usize,
}

impl Default for LatentSplit {
    fn default() -> Self {
        LatentSplit {
            domain: LATENT_DIM / 2,
            task: LATENT_DIM / 2,
        }
    }
}

impl LatentSplit {
    pub fn validate(&self, variant: Variant) -> Result<()> {
        if self.domain == 0 || self.task == 0 || self.domain + self.task != LATENT_DIM {
            return Err(FanError::Config(format!(
                "latent split {}+{} must be two positive widths summing to {LATENT_DIM}",
                self.domain, self.task
            )));
        }
        if variant.uses_mutual_loss() && self.domain != self.task {
            return Err(FanError::Config(format!(
                "the mutual loss needs equal halves, got {}+{}",
                self.domain, self.task
            )));
        }
        Ok(())
    }
}

/// Graph handles produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct FanVars {
    pub h_d: Var,
    pub h_t: Var,
    pub logits: Var,
}

/// Concrete encoder outputs for a batch of images.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    pub h_d: Tensor,
    pub h_t: Tensor,
    pub logits: Tensor,
}

#[derive(Clone, Copy, Debug)]
struct Arch {
    variant: Variant,
    split: LatentSplit,
    conv1: Conv,
    bn1: BatchNorm,
    conv2: Conv,
    bn2: BatchNorm,
    fc1: Linear,
    bn3: BatchNorm,
    fc2: Linear,
    mapper: Linear,
    dfc1: Linear,
    dbn1: BatchNorm,
    dfc2: Linear,
    dbn2: BatchNorm,
    dconv1: Conv,
    dbn3: BatchNorm,
    dconv2: Conv,
    dbn4: BatchNorm,
    dconv3: Conv,
    dbn5: BatchNorm,
    dconv4: Conv,
}

fn decoder_width(variant: Variant, split: LatentSplit) -> usize {
    match variant {
        Variant::Joint => LATENT_DIM,
        Variant::Separation => split.domain,
        Variant::Concatenation | Variant::Full => split.domain + NUM_CLASSES,
    }
}

fn task_width(variant: Variant, split: LatentSplit) -> usize {
    match variant {
        Variant::Joint => LATENT_DIM,
        _ => split.task,
    }
}

impl Arch {
    fn decoder_width(&self) -> usize {
        decoder_width(self.variant, self.split)
    }

    fn build(variant: Variant, split: LatentSplit, store: &mut ParamStore, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = &mut rng;
        let flat = CONV2 * 4 * 4;
        Arch {
            variant,
            split,
            conv1: Conv::new(store, "encoder.conv1", 1, CONV1, 5, 0, r),
            bn1: BatchNorm::new(store, "encoder.bn1", CONV1),
            conv2: Conv::new(store, "encoder.conv2", CONV1, CONV2, 5, 0, r),
            bn2: BatchNorm::new(store, "encoder.bn2", CONV2),
            fc1: Linear::new(store, "encoder.fc1", flat, HIDDEN, r),
            bn3: BatchNorm::new(store, "encoder.bn3", HIDDEN),
            fc2: Linear::new(store, "encoder.fc2", HIDDEN, LATENT_DIM, r),
            mapper: Linear::new(store, "mapper.fc", task_width(variant, split), NUM_CLASSES, r),
            dfc1: Linear::new(store, "decoder.fc1", decoder_width(variant, split), DEC_HIDDEN, r),
            dbn1: BatchNorm::new(store, "decoder.bn1", DEC_HIDDEN),
            dfc2: Linear::new(store, "decoder.fc2", DEC_HIDDEN, DEC_CH * DEC_SIDE * DEC_SIDE, r),
            dbn2: BatchNorm::new(store, "decoder.bn2", DEC_CH * DEC_SIDE * DEC_SIDE),
            dconv1: Conv::new(store, "decoder.conv1", DEC_CH, DEC_CH, 5, 2, r),
            dbn3: BatchNorm::new(store, "decoder.bn3", DEC_CH),
            dconv2: Conv::new(store, "decoder.conv2", DEC_CH, DEC_CH, 5, 2, r),
            dbn4: BatchNorm::new(store, "decoder.bn4", DEC_CH),
            dconv3: Conv::new(store, "decoder.conv3", DEC_CH, DEC_CH, 3, 1, r),
            dbn5: BatchNorm::new(store, "decoder.bn5", DEC_CH),
            dconv4: Conv::new(store, "decoder.conv4", DEC_CH, 1, 3, 1, r),
        }
    }

    fn encode(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<FanVars> {
        let shape = ctx.g.shape(x).to_vec();
        if shape.len() != 4 || shape[1..] != [1, IMAGE_SIDE, IMAGE_SIDE] {
            return Err(FanError::Argument(format!(
                "encoder expects [B,1,{IMAGE_SIDE},{IMAGE_SIDE}] images, got {shape:?}"
            )));
        }
        let b = shape[0];
        let mut h = self.conv1.forward(ctx, x)?;
        h = relu_bn(ctx, &self.bn1, h)?;
        h = ctx.g.maxpool2x2(h)?;
        h = self.conv2.forward(ctx, h)?;
        h = relu_bn(ctx, &self.bn2, h)?;
        h = ctx.g.maxpool2x2(h)?;
        h = ctx.g.reshape(h, &[b, CONV2 * 4 * 4])?;
        h = self.fc1.forward(ctx, h)?;
        h = relu_bn(ctx, &self.bn3, h)?;
        let code = self.fc2.forward(ctx, h)?;
        let (h_d, h_t) = match self.variant {
            Variant::Joint => (code, code),
            _ => {
                let parts = ctx.g.split(code, &[self.split.domain, self.split.task], 1)?;
                (parts[0], parts[1])
            }
        };
        let logits = self.mapper.forward(ctx, h_t)?;
        Ok(FanVars { h_d, h_t, logits })
    }

    fn decoder_input(&self, g: &mut Graph, h_d: Var, logits: Var) -> Result<Var> {
        Ok(match self.variant {
            Variant::Joint | Variant::Separation => h_d,
            Variant::Concatenation | Variant::Full => g.concat(&[h_d, logits], 1)?,
        })
    }

    fn decode(&self, ctx: &mut Ctx<'_>, z: Var) -> Result<Var> {
        let shape = ctx.g.shape(z).to_vec();
        if shape.len() != 2 || shape[1] != self.decoder_width() {
            return Err(FanError::Argument(format!(
                "{} decoder expects [B,{}] input, got {shape:?}",
                self.variant,
                self.decoder_width()
            )));
        }
        let b = shape[0];
        let mut h = self.dfc1.forward(ctx, z)?;
        h = relu_bn(ctx, &self.dbn1, h)?;
        h = self.dfc2.forward(ctx, h)?;
        h = relu_bn(ctx, &self.dbn2, h)?;
        h = ctx.g.reshape(h, &[b, DEC_CH, DEC_SIDE, DEC_SIDE])?;
        h = self.dconv1.forward(ctx, h)?;
        h = relu_bn(ctx, &self.dbn3, h)?;
        h = self.dconv2.forward(ctx, h)?;
        h = relu_bn(ctx, &self.dbn4, h)?;
        h = ctx.g.upsample_nearest(h, IMAGE_SIDE, IMAGE_SIDE)?;
        h = self.dconv3.forward(ctx, h)?;
        h = relu_bn(ctx, &self.dbn5, h)?;
        self.dconv4.forward(ctx, h)
    }
}

/// Encoder, class mapper and decoder with their parameters and batch-norm
/// statistics.
#[derive(Clone, Debug)]
pub struct FanModel {
    arch: Arch,
    store: ParamStore,
}

impl FanModel {
    pub fn new(variant: Variant, split: LatentSplit, seed: u64) -> Result<Self> {
        split.validate(variant)?;
        let mut store = ParamStore::new();
        let arch = Arch::build(variant, split, &mut store, seed);
        Ok(FanModel { arch, store })
    }

    /// Rebuilds a model around parameters loaded from elsewhere. Names and
    /// shapes must match a freshly built model exactly.
    pub fn from_store(variant: Variant, split: LatentSplit, store: ParamStore) -> Result<Self> {
        let fresh = FanModel::new(variant, split, 0)?;
        check_layout(&fresh.store, &store)?;
        Ok(FanModel {
            arch: fresh.arch,
            store,
        })
    }

    pub fn variant(&self) -> Variant {
        self.arch.variant
    }

    pub fn split(&self) -> LatentSplit {
        self.arch.split
    }

    /// Width of the vector the decoder consumes.
    pub fn decoder_width(&self) -> usize {
        self.arch.decoder_width()
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Encoder and mapper on an existing graph. `Mode::Train` updates the
    /// running statistics.
    pub fn encode_vars(&mut self, g: &mut Graph, bound: &Bound, x: Var, mode: Mode) -> Result<FanVars> {
        let arch = self.arch;
        let mut ctx = Ctx {
            g,
            bound,
            stats: Stats::Update(&mut self.store),
            mode,
        };
        arch.encode(&mut ctx, x)
    }

    /// Like [`encode_vars`](Self::encode_vars) without touching the model.
    pub fn encode_vars_frozen(&self, g: &mut Graph, bound: &Bound, x: Var, mode: Mode) -> Result<FanVars> {
        let mut ctx = Ctx {
            g,
            bound,
            stats: Stats::Read(&self.store),
            mode,
        };
        self.arch.encode(&mut ctx, x)
    }

    /// Decoder on an existing graph, fed according to the variant.
    pub fn decode_vars(&mut self, g: &mut Graph, bound: &Bound, vars: FanVars, mode: Mode) -> Result<Var> {
        let arch = self.arch;
        let z = arch.decoder_input(g, vars.h_d, vars.logits)?;
        let mut ctx = Ctx {
            g,
            bound,
            stats: Stats::Update(&mut self.store),
            mode,
        };
        arch.decode(&mut ctx, z)
    }

    /// Like [`decode_vars`](Self::decode_vars) without touching the model.
    pub fn decode_vars_frozen(&self, g: &mut Graph, bound: &Bound, vars: FanVars, mode: Mode) -> Result<Var> {
        let z = self.arch.decoder_input(g, vars.h_d, vars.logits)?;
        let mut ctx = Ctx {
            g,
            bound,
            stats: Stats::Read(&self.store),
            mode,
        };
        self.arch.decode(&mut ctx, z)
    }

    /// Encodes images with running statistics (`Mode::Eval`) or per-call batch
    /// statistics (`Mode::BatchStats`). Eval runs in bounded chunks.
    pub fn encode(&self, x: &Tensor, mode: Mode) -> Result<EncoderOutput> {
        let chunk = if mode == Mode::Eval { EVAL_CHUNK } else { x.dim(0) };
        let mut parts = Vec::new();
        for start in (0..x.dim(0)).step_by(chunk.max(1)) {
            let rows = x.slice_rows(start, (start + chunk).min(x.dim(0)))?;
            let mut g = Graph::new();
            let bound = self.store.bind_frozen(&mut g);
            let xv = g.input(rows);
            let v = self.encode_vars_frozen(&mut g, &bound, xv, mode)?;
            parts.push(EncoderOutput {
                h_d: g.value(v.h_d).clone(),
                h_t: g.value(v.h_t).clone(),
                logits: g.value(v.logits).clone(),
            });
        }
        if parts.len() == 1 {
            return Ok(parts.pop().expect("one part"));
        }
        let cat = |f: fn(&EncoderOutput) -> &Tensor| -> Result<Tensor> {
            let refs: Vec<&Tensor> = parts.iter().map(f).collect();
            Ok(Tensor::stack_rows(&refs)?)
        };
        Ok(EncoderOutput {
            h_d: cat(|o| &o.h_d)?,
            h_t: cat(|o| &o.h_t)?,
            logits: cat(|o| &o.logits)?,
        })
    }

    /// Class logits for a set of images under running statistics.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.encode(x, Mode::Eval)?.logits)
    }

    /// Class logits for one batch under running statistics, without chunking.
    pub fn logits_batch(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.store.bind_frozen(&mut g);
        let xv = g.input(x.clone());
        let v = self.encode_vars_frozen(&mut g, &bound, xv, Mode::Eval)?;
        Ok(g.value(v.logits).clone())
    }

    /// Reconstructs images from a domain code and class logits. The logits
    /// are ignored by variants whose decoder does not consume them; for
    /// `joint`, `h_d` is the whole code.
    pub fn decode(&self, h_d: &Tensor, logits: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.store.bind_frozen(&mut g);
        let hv = g.input(h_d.clone());
        let lv = g.input(logits.clone());
        let z = self.arch.decoder_input(&mut g, hv, lv)?;
        let mut ctx = Ctx {
            g: &mut g,
            bound: &bound,
            stats: Stats::Read(&self.store),
            mode,
        };
        let out = self.arch.decode(&mut ctx, z)?;
        Ok(g.value(out).clone())
    }

    /// Encode then decode each image.
    pub fn reconstruct(&self, x: &Tensor) -> Result<Tensor> {
        let enc = self.encode(x, Mode::Eval)?;
        self.decode(&enc.h_d, &enc.logits, Mode::Eval)
    }

    /// Sets the final decoder layer to zero.
    pub fn zero_decoder_output(&mut self) {
        for id in [self.arch.dconv4.w, self.arch.dconv4.b] {
            self.store.value_mut(id).data_mut().fill(0.0);
        }
    }
}

pub(crate) fn check_layout(expected: &ParamStore, got: &ParamStore) -> Result<()> {
    let a: Vec<_> = expected.params().map(|p| (p.name.as_str(), p.value.shape())).collect();
    let b: Vec<_> = got.params().map(|p| (p.name.as_str(), p.value.shape())).collect();
    let ab: Vec<_> = expected.buffers().map(|(n, t)| (n, t.shape())).collect();
    let bb: Vec<_> = got.buffers().map(|(n, t)| (n, t.shape())).collect();
    if a != b || ab != bb {
        return Err(FanError::Format(
            "parameter names or shapes do not match the architecture".into(),
        ));
    }
    Ok(())
}
