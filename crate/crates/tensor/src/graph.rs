//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every op as it is evaluated. Nodes are appended in
//! evaluation order, so the tape is already a topological order and
//! [`Graph::backward`] is a single reverse sweep that visits each node once.

use crate::error::{Result, TensorError};
use crate::kernels::{self, BnLayout, ConvGeom, Trans};
use crate::tensor::Tensor;

/// Batch-norm variance floor.
pub const BN_EPS: f32 = 1e-5;
/// Fraction of the running statistics kept at each train-mode update.
pub const BN_MOMENTUM: f32 = 0.9;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics, optionally folding them into the
    /// running statistics.
    Train { update_running: bool },
    /// Normalize with the running statistics.
    Eval,
}

impl BnMode {
    pub const TRAIN: BnMode = BnMode::Train {
        update_running: true,
    };
}

enum Op {
    Input,
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    Square(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    ConvTranspose {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Upsample {
        x: Var,
        sh: usize,
        sw: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        layout: BnLayout,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
        train: bool,
    },
    Reshape(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Sum(Var),
    Mean(Var),
    RowDot(Var, Var),
    CrossEntropy {
        logits: Var,
        probs: Vec<f32>,
        labels: Vec<usize>,
    },
    BceWithLogits {
        scores: Var,
        target: f32,
    },
    Mse(Var, Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::AddBias(..) => "add_bias",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Softmax(..) => "softmax",
            Op::Square(..) => "square",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose { .. } => "conv2d_transpose",
            Op::MaxPool { .. } => "maxpool2x2",
            Op::Upsample { .. } => "upsample_nearest",
            Op::BatchNorm { .. } => "batchnorm",
            Op::Reshape(..) => "reshape",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::RowDot(..) => "row_dot",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::BceWithLogits { .. } => "bce_with_logits",
            Op::Mse(..) => "mse",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`; `None` when `v` does not
    /// influence the root or does not require gradients.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// `outer × axis × inner` decomposition of a shape around `axis`.
fn around(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid64(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Result<Var> {
        value.ensure_finite(op.name())?;
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A constant: no gradient flows into it.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Input,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable leaf.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copies the current value of `v` into a new constant node.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.input(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            Trans::N,
            Trans::N,
            m,
            n,
            k,
            self.value(a).data(),
            self.value(b).data(),
            0.0,
            &mut out,
        );
        let ng = self.needs(&[a, b]);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), ng)
    }

    /// Adds a per-feature bias: `[B, D] + [D]` or `[N, C, H, W] + [C]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(b));
        if sx.len() < 2 || sb != [sx[1]] {
            return Err(TensorError::shape("add_bias", format!("{sx:?} + {sb:?}")));
        }
        let (_, c, inner) = around(&sx, 1);
        let bias = self.value(b).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for (i, v) in out.iter_mut().enumerate() {
            *v += bias[(i / inner) % c];
        }
        let ng = self.needs(&[x, b]);
        self.push(Tensor::from_parts(sx, out), Op::AddBias(x, b), ng)
    }

    /// `x · w + b` with `x: [B, in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    fn zip_same(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f32, f32) -> f32) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::shape(
                op.name(),
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::from_parts(self.shape(a).to_vec(), data);
        let ng = self.needs(&[a, b]);
        self.push(t, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Result<Var> {
        let t = self.value(x).map(|v| v * c);
        let ng = self.needs(&[x]);
        self.push(t, Op::Scale(x, c), ng)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| v.max(0.0));
        let ng = self.needs(&[x]);
        self.push(t, Op::Relu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| sigmoid64(v as f64) as f32);
        let ng = self.needs(&[x]);
        self.push(t, Op::Sigmoid(x), ng)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| v * v);
        let ng = self.needs(&[x]);
        self.push(t, Op::Square(x), ng)
    }

    /// Row-wise softmax of a `[B, K]` tensor, stabilized by max-subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(TensorError::shape("softmax", format!("expected [B, K], got {s:?}")));
        }
        let data = softmax_rows(self.value(x).data(), s[1]);
        let ng = self.needs(&[x]);
        self.push(Tensor::from_parts(s, data), Op::Softmax(x), ng)
    }

    /// Cross-correlation of `x: [N, C, H, W]` with `w: [F, C, k, k]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let geom = conv_geom("conv2d", &sx, &sw, stride, padding)?;
        if let Some(b) = b {
            if self.shape(b) != [sw[0]] {
                return Err(TensorError::shape("conv2d", "bias must be [F]"));
            }
        }
        let bias = b.map(|b| self.value(b).data());
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            sx[0],
            &geom,
            self.value(w).data(),
            sw[0],
            bias,
        );
        let shape = vec![sx[0], sw[0], geom.out_h(), geom.out_w()];
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.needs(&deps);
        self.push(
            Tensor::from_parts(shape, out),
            Op::Conv2d { x, w, b, geom },
            ng,
        )
    }

    /// Transposed convolution of `x: [N, Cin, H, W]` with `w: [Cin, Cout, k, k]`;
    /// output side is `(H − 1)·stride − 2·padding + k`.
    pub fn conv2d_transpose(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let geom = conv_transpose_geom(&sx, &sw, stride, padding)?;
        if let Some(b) = b {
            if self.shape(b) != [sw[1]] {
                return Err(TensorError::shape("conv2d_transpose", "bias must be [Cout]"));
            }
        }
        let bias = b.map(|b| self.value(b).data());
        let out = kernels::conv_transpose_forward(
            self.value(x).data(),
            sx[0],
            sx[1],
            &geom,
            self.value(w).data(),
            bias,
        );
        let shape = vec![sx[0], geom.channels, geom.height, geom.width];
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.needs(&deps);
        self.push(
            Tensor::from_parts(shape, out),
            Op::ConvTranspose { x, w, b, geom },
            ng,
        )
    }

    /// 2×2 stride-2 max pooling over `[N, C, H, W]`.
    pub fn maxpool2x2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(TensorError::shape("maxpool2x2", format!("expected rank 4, got {s:?}")));
        }
        let (out, argmax) = kernels::maxpool2x2_forward(self.value(x).data(), s[0] * s[1], s[2], s[3]);
        let shape = vec![s[0], s[1], s[2].div_ceil(2), s[3].div_ceil(2)];
        let ng = self.needs(&[x]);
        self.push(Tensor::from_parts(shape, out), Op::MaxPool { x, argmax }, ng)
    }

    /// Flat input index chosen for each output of a pooling node.
    pub fn pool_indices(&self, v: Var) -> Option<&[usize]> {
        match &self.nodes[v.0].op {
            Op::MaxPool { argmax, .. } => Some(argmax),
            _ => None,
        }
    }

    /// Nearest-neighbour upsampling of `[N, C, h, w]` to an integer multiple.
    pub fn upsample_nearest(&mut self, x: Var, target_h: usize, target_w: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4
            || target_h < s[2]
            || target_w < s[3]
            || target_h % s[2] != 0
            || target_w % s[3] != 0
        {
            return Err(TensorError::shape(
                "upsample_nearest",
                format!("{s:?} to {target_h}x{target_w} is not an integer upscale"),
            ));
        }
        let (sh, sw) = (target_h / s[2], target_w / s[3]);
        let src = self.value(x).data();
        let mut out = vec![0.0; s[0] * s[1] * target_h * target_w];
        for p in 0..s[0] * s[1] {
            for y in 0..target_h {
                for xx in 0..target_w {
                    out[(p * target_h + y) * target_w + xx] =
                        src[(p * s[2] + y / sh) * s[3] + xx / sw];
                }
            }
        }
        let ng = self.needs(&[x]);
        self.push(
            Tensor::from_parts(vec![s[0], s[1], target_h, target_w], out),
            Op::Upsample { x, sh, sw },
            ng,
        )
    }

    /// Per-channel batch normalization over `[B, C]` or `[N, C, H, W]`.
    ///
    /// `running` is a `[2, C]` buffer holding the running mean (row 0) and
    /// running variance (row 1).
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: &mut Tensor,
        mode: BnMode,
    ) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 && s.len() != 4 {
            return Err(TensorError::shape("batchnorm", format!("rank {} input", s.len())));
        }
        let c = s[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] || running.shape() != [2, c] {
            return Err(TensorError::shape("batchnorm", "parameter width mismatch"));
        }
        let layout = BnLayout {
            batch: s[0],
            channels: c,
            spatial: s[2..].iter().product(),
        };
        let x_data = self.value(x).data();
        let (xhat, inv_std, train) = match mode {
            BnMode::Train { update_running } => {
                if s[0] < 2 {
                    return Err(TensorError::config(
                        "batchnorm",
                        "train mode needs a batch of at least 2",
                    ));
                }
                let (xhat, inv_std, mean, var) = kernels::batch_stats(x_data, &layout, BN_EPS);
                if update_running {
                    let r = running.data_mut();
                    for ch in 0..c {
                        r[ch] = BN_MOMENTUM * r[ch] + (1.0 - BN_MOMENTUM) * mean[ch];
                        r[c + ch] = BN_MOMENTUM * r[c + ch] + (1.0 - BN_MOMENTUM) * var[ch];
                    }
                }
                (xhat, inv_std, true)
            }
            BnMode::Eval => {
                let r = running.data();
                let inv_std: Vec<f32> = (0..c)
                    .map(|ch| 1.0 / (r[c + ch] + BN_EPS).sqrt())
                    .collect();
                let mut xhat = vec![0.0; x_data.len()];
                for (i, v) in xhat.iter_mut().enumerate() {
                    let ch = (i / layout.spatial) % c;
                    *v = (x_data[i] - r[ch]) * inv_std[ch];
                }
                (xhat, inv_std, false)
            }
        };
        let out = kernels::bn_affine(&xhat, &layout, self.value(gamma).data(), self.value(beta).data());
        let ng = self.needs(&[x, gamma, beta]);
        self.push(
            Tensor::from_parts(s, out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                layout,
                xhat,
                inv_std,
                train,
            },
            ng,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        let ng = self.needs(&[x]);
        self.push(t, Op::Reshape(x), ng)
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::shape("concat", format!("axis {axis} of rank {}", base.len())));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::shape("concat", format!("{s:?} vs {base:?}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = around(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let ng = self.needs(parts);
        self.push(
            Tensor::from_parts(shape, out),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            ng,
        )
    }

    /// Entries `[start, start + len)` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(TensorError::shape(
                "slice",
                format!("{start}+{len} along axis {axis} of {s:?}"),
            ));
        }
        let (outer, n, inner) = around(&s, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * n + start) * inner;
            out.extend_from_slice(&src[from..from + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let ng = self.needs(&[x]);
        self.push(Tensor::from_parts(shape, out), Op::Slice { x, axis, start }, ng)
    }

    /// Splits `x` along `axis` into consecutive pieces of the given sizes.
    pub fn split(&mut self, x: Var, sizes: &[usize], axis: usize) -> Result<Vec<Var>> {
        let s = self.shape(x);
        if axis >= s.len() || sizes.iter().sum::<usize>() != s[axis] {
            return Err(TensorError::shape(
                "split",
                format!("sizes {sizes:?} along axis {axis} of {s:?}"),
            ));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &n in sizes {
            out.push(self.slice(x, axis, start, n)?);
            start += n;
        }
        Ok(out)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let t = Tensor::scalar(self.value(x).sum_f64() as f32);
        let ng = self.needs(&[x]);
        self.push(t, Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let t = Tensor::scalar((v.sum_f64() / v.numel() as f64) as f32);
        let ng = self.needs(&[x]);
        self.push(t, Op::Mean(x), ng)
    }

    /// Per-row inner product of two `[B, D]` tensors, giving `[B, 1]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b));
        if sa.len() != 2 || sa != sb {
            return Err(TensorError::shape("row_dot", format!("{sa:?} vs {sb:?}")));
        }
        let d = sa[1];
        let out: Vec<f32> = self
            .value(a)
            .data()
            .chunks(d)
            .zip(self.value(b).data().chunks(d))
            .map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p * q) as f64).sum::<f64>() as f32)
            .collect();
        let ng = self.needs(&[a, b]);
        self.push(Tensor::from_parts(vec![sa[0], 1], out), Op::RowDot(a, b), ng)
    }

    /// Mean over the batch of `−log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(TensorError::shape(
                "cross_entropy",
                format!("{s:?} logits for {} labels", labels.len()),
            ));
        }
        let k = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(TensorError::shape("cross_entropy", format!("label {bad} with {k} classes")));
        }
        let x = self.value(logits).data();
        let mut total = 0.0f64;
        for (row, &l) in x.chunks(k).zip(labels) {
            let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
            let lse = m + row.iter().map(|&v| (v as f64 - m).exp()).sum::<f64>().ln();
            total += lse - row[l] as f64;
        }
        let probs = softmax_rows(x, k);
        let loss = Tensor::scalar((total / labels.len() as f64) as f32);
        let ng = self.needs(&[logits]);
        self.push(
            loss,
            Op::CrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            ng,
        )
    }

    /// Mean binary cross-entropy of pre-sigmoid `scores` against a constant
    /// target probability, evaluated in logit space.
    pub fn bce_with_logits(&mut self, scores: Var, target: f32) -> Result<Var> {
        if !(0.0..=1.0).contains(&target) {
            return Err(TensorError::config("bce_with_logits", format!("target {target}")));
        }
        let v = self.value(scores);
        let t = target as f64;
        let total: f64 = v
            .data()
            .iter()
            .map(|&z| {
                let z = z as f64;
                t * softplus(-z) + (1.0 - t) * softplus(z)
            })
            .sum();
        let loss = Tensor::scalar((total / v.numel() as f64) as f32);
        let ng = self.needs(&[scores]);
        self.push(loss, Op::BceWithLogits { scores, target }, ng)
    }

    /// Mean squared error over every element.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        if self.shape(pred) != self.shape(target) {
            return Err(TensorError::shape(
                "mse",
                format!("{:?} vs {:?}", self.shape(pred), self.shape(target)),
            ));
        }
        let (p, t) = (self.value(pred), self.value(target));
        let total: f64 = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(&a, &b)| {
                let d = a as f64 - b as f64;
                d * d
            })
            .sum();
        let loss = Tensor::scalar((total / p.numel() as f64) as f32);
        let ng = self.needs(&[pred, target]);
        self.push(loss, Op::Mse(pred, target), ng)
    }

    /// Reverse sweep from a one-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).numel() != 1 {
            return Err(TensorError::shape(
                "backward",
                format!("root must be scalar, got {:?}", self.shape(root)),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::ones(self.shape(root)));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let (lower, upper) = grads.split_at_mut(i);
            let Some(g) = upper[0].as_ref() else {
                continue;
            };
            self.backward_node(i, g, lower);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        let mut acc = |v: Var, data: Vec<f32>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let t = Tensor::from_parts(self.shape(v).to_vec(), data);
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Input | Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.nodes[a.0].needs_grad {
                    let mut da = vec![0.0; m * k];
                    kernels::gemm(Trans::N, Trans::T, m, k, n, gd, self.value(*b).data(), 0.0, &mut da);
                    acc(*a, da);
                }
                if self.nodes[b.0].needs_grad {
                    let mut db = vec![0.0; k * n];
                    kernels::gemm(Trans::T, Trans::N, k, n, m, self.value(*a).data(), gd, 0.0, &mut db);
                    acc(*b, db);
                }
            }
            Op::AddBias(x, b) => {
                let s = node.value.shape();
                let (_, c, inner) = around(s, 1);
                let mut db = vec![0.0f32; c];
                for (j, v) in gd.iter().enumerate() {
                    db[(j / inner) % c] += v;
                }
                acc(*x, gd.to_vec());
                acc(*b, db);
            }
            Op::Add(a, b) => {
                acc(*a, gd.to_vec());
                acc(*b, gd.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, gd.to_vec());
                acc(*b, gd.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, gd.iter().zip(bv).map(|(g, y)| g * y).collect());
                acc(*b, gd.iter().zip(av).map(|(g, x)| g * x).collect());
            }
            Op::Scale(x, c) => acc(*x, gd.iter().map(|v| v * c).collect()),
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                acc(*x, gd.iter().zip(xv).map(|(g, &v)| if v > 0.0 { *g } else { 0.0 }).collect());
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                acc(*x, gd.iter().zip(y).map(|(g, &s)| g * s * (1.0 - s)).collect());
            }
            Op::Square(x) => {
                let xv = self.value(*x).data();
                acc(*x, gd.iter().zip(xv).map(|(g, &v)| 2.0 * v * g).collect());
            }
            Op::Softmax(x) => {
                let k = node.value.shape()[1];
                let y = node.value.data();
                let mut dx = vec![0.0; y.len()];
                for ((dr, yr), gr) in dx.chunks_mut(k).zip(y.chunks(k)).zip(gd.chunks(k)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| (a * b) as f64).sum();
                    for j in 0..k {
                        dr[j] = yr[j] * (gr[j] - dot as f32);
                    }
                }
                acc(*x, dx);
            }
            Op::Conv2d { x, w, b, geom } => {
                let sw = self.shape(*w);
                let (dx, dw, db) = kernels::conv2d_backward(
                    gd,
                    self.value(*x).data(),
                    self.shape(*x)[0],
                    geom,
                    self.value(*w).data(),
                    sw[0],
                    self.nodes[x.0].needs_grad,
                );
                if let Some(dx) = dx {
                    acc(*x, dx);
                }
                acc(*w, dw);
                if let Some(b) = b {
                    acc(*b, db);
                }
            }
            Op::ConvTranspose { x, w, b, geom } => {
                let sx = self.shape(*x);
                let (dx, dw, db) = kernels::conv_transpose_backward(
                    gd,
                    self.value(*x).data(),
                    sx[0],
                    sx[1],
                    geom,
                    self.value(*w).data(),
                    self.nodes[x.0].needs_grad,
                );
                if let Some(dx) = dx {
                    acc(*x, dx);
                }
                acc(*w, dw);
                if let Some(b) = b {
                    acc(*b, db);
                }
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![0.0; self.value(*x).numel()];
                for (gv, &src) in gd.iter().zip(argmax) {
                    dx[src] += gv;
                }
                acc(*x, dx);
            }
            Op::Upsample { x, sh, sw } => {
                let s = self.shape(*x);
                let (h, w) = (s[2], s[3]);
                let (th, tw) = (h * sh, w * sw);
                let mut dx = vec![0.0; self.value(*x).numel()];
                for p in 0..s[0] * s[1] {
                    for y in 0..th {
                        for xx in 0..tw {
                            dx[(p * h + y / sh) * w + xx / sw] += gd[(p * th + y) * tw + xx];
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                layout,
                xhat,
                inv_std,
                train,
            } => {
                let (dx, dgamma, dbeta) = kernels::bn_backward(
                    gd,
                    xhat,
                    inv_std,
                    self.value(*gamma).data(),
                    layout,
                    *train,
                );
                acc(*x, dx);
                acc(*gamma, dgamma);
                acc(*beta, dbeta);
            }
            Op::Reshape(x) => acc(*x, gd.to_vec()),
            Op::Concat { parts, axis } => {
                let s = node.value.shape();
                let (outer, total, inner) = around(s, *axis);
                let mut offset = 0;
                for &p in parts {
                    let n = self.shape(p)[*axis];
                    let mut d = Vec::with_capacity(outer * n * inner);
                    for o in 0..outer {
                        let from = (o * total + offset) * inner;
                        d.extend_from_slice(&gd[from..from + n * inner]);
                    }
                    acc(p, d);
                    offset += n;
                }
            }
            Op::Slice { x, axis, start } => {
                let sx = self.shape(*x);
                let (outer, n, inner) = around(sx, *axis);
                let len = node.value.shape()[*axis];
                let mut dx = vec![0.0; self.value(*x).numel()];
                for o in 0..outer {
                    let to = (o * n + start) * inner;
                    dx[to..to + len * inner].copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                }
                acc(*x, dx);
            }
            Op::Sum(x) => acc(*x, vec![gd[0]; self.value(*x).numel()]),
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                acc(*x, vec![gd[0] / n as f32; n]);
            }
            Op::RowDot(a, b) => {
                let d = self.shape(*a)[1];
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, bv.iter().enumerate().map(|(j, y)| gd[j / d] * y).collect());
                acc(*b, av.iter().enumerate().map(|(j, x)| gd[j / d] * x).collect());
            }
            Op::CrossEntropy {
                logits,
                probs,
                labels,
            } => {
                let k = self.shape(*logits)[1];
                let scale = gd[0] / labels.len() as f32;
                let mut dx = probs.clone();
                for (r, &l) in labels.iter().enumerate() {
                    dx[r * k + l] -= 1.0;
                }
                dx.iter_mut().for_each(|v| *v *= scale);
                acc(*logits, dx);
            }
            Op::BceWithLogits { scores, target } => {
                let v = self.value(*scores).data();
                let scale = gd[0] as f64 / v.len() as f64;
                let dx = v
                    .iter()
                    .map(|&z| ((sigmoid64(z as f64) - *target as f64) * scale) as f32)
                    .collect();
                acc(*scores, dx);
            }
            Op::Mse(p, t) => {
                let (pv, tv) = (self.value(*p).data(), self.value(*t).data());
                let scale = 2.0 * gd[0] / pv.len() as f32;
                let d: Vec<f32> = pv.iter().zip(tv).map(|(a, b)| scale * (a - b)).collect();
                if self.nodes[t.0].needs_grad {
                    acc(*t, d.iter().map(|v| -v).collect());
                }
                acc(*p, d);
            }
        }
    }
}

pub(crate) fn softmax_rows(x: &[f32], k: usize) -> Vec<f32> {
    let mut out = vec![0.0; x.len()];
    for (o, row) in out.chunks_mut(k).zip(x.chunks(k)) {
        let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
        let z: f64 = row.iter().map(|&v| (v as f64 - m).exp()).sum();
        for (dst, &v) in o.iter_mut().zip(row) {
            *dst = ((v as f64 - m).exp() / z) as f32;
        }
    }
    out
}

fn conv_geom(op: &'static str, sx: &[usize], sw: &[usize], stride: usize, padding: usize) -> Result<ConvGeom> {
    if sx.len() != 4 || sw.len() != 4 || sw[1] != sx[1] || sw[2] != sw[3] {
        return Err(TensorError::shape(op, format!("input {sx:?} with kernel {sw:?}")));
    }
    if stride == 0 || sw[2] > sx[2] + 2 * padding || sw[3] > sx[3] + 2 * padding {
        return Err(TensorError::shape(
            op,
            format!("kernel {} exceeds padded input {:?} (pad {padding}, stride {stride})", sw[2], &sx[2..]),
        ));
    }
    Ok(ConvGeom {
        channels: sx[1],
        height: sx[2],
        width: sx[3],
        kernel: sw[2],
        stride,
        padding,
    })
}

fn conv_transpose_geom(sx: &[usize], sw: &[usize], stride: usize, padding: usize) -> Result<ConvGeom> {
    if sx.len() != 4 || sw.len() != 4 || sw[0] != sx[1] || sw[2] != sw[3] || stride == 0 {
        return Err(TensorError::shape(
            "conv2d_transpose",
            format!("input {sx:?} with kernel {sw:?}"),
        ));
    }
    let k = sw[2];
    let side = |n: usize| ((n - 1) * stride + k).checked_sub(2 * padding).filter(|&v| v > 0);
    match (side(sx[2]), side(sx[3])) {
        (Some(h), Some(w)) => Ok(ConvGeom {
            channels: sw[1],
            height: h,
            width: w,
            kernel: k,
            stride,
            padding,
        }),
        _ => Err(TensorError::shape(
            "conv2d_transpose",
            format!("padding {padding} leaves no output for {sx:?}"),
        )),
    }
}
