//! Central finite-difference checks for every differentiable op.
//!
//! Each check projects the op's output onto a fixed random direction `r`
//! (so the scalar is `Σ rᵢ·yᵢ`, accumulated in f64), differentiates that
//! scalar on the tape, and compares against `(f(x + h) − f(x − h)) / 2h`
//! evaluated element by element. The error reported is
//! `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)` over all inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{BnMode, Graph, Var};
use crate::tensor::Tensor;

pub const FD_STEP: f32 = 1e-3;
pub const DEFAULT_TOL: f64 = 1e-3;
pub const BATCHNORM_TOL: f64 = 1e-2;

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub op: &'static str,
    pub shapes: String,
    pub rel_error: f64,
    pub tolerance: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.rel_error.is_finite() && self.rel_error <= self.tolerance
    }
}

type Forward<'a> = dyn Fn(&mut Graph, &[Var]) -> Result<Var> + 'a;

fn project(y: &Tensor, r: &[f32]) -> f64 {
    y.data().iter().zip(r).map(|(&a, &b)| a as f64 * b as f64).sum()
}

fn eval(f: &Forward<'_>, inputs: &[Tensor]) -> Result<Tensor> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let y = f(&mut g, &vars)?;
    Ok(g.value(y).clone())
}

/// Relative error between analytic and numeric gradients of `f` at `inputs`.
pub fn check(f: &Forward<'_>, inputs: &[Tensor], rng: &mut impl Rng) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let y = f(&mut g, &vars)?;
    let r = Tensor::uniform(g.shape(y), -1.0, 1.0, rng);
    let rv = g.input(r.clone());
    let p = g.mul(y, rv)?;
    let s = g.sum(p)?;
    let grads = g.backward(s)?;

    let (mut diff, mut na, mut nn) = (0.0f64, 0.0f64, 0.0f64);
    let mut probe = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let zeros = Tensor::zeros(inputs[k].shape());
        let analytic = grads.get(*v).unwrap_or(&zeros);
        for i in 0..inputs[k].numel() {
            let x0 = inputs[k].data()[i];
            probe[k].data_mut()[i] = x0 + FD_STEP;
            let plus = project(&eval(f, &probe)?, r.data());
            probe[k].data_mut()[i] = x0 - FD_STEP;
            let minus = project(&eval(f, &probe)?, r.data());
            probe[k].data_mut()[i] = x0;
            // The perturbation actually applied, after f32 rounding.
            let h2 = ((x0 + FD_STEP) as f64) - ((x0 - FD_STEP) as f64);
            let numeric = (plus - minus) / h2;
            let a = analytic.data()[i] as f64;
            diff += (a - numeric).powi(2);
            na += a * a;
            nn += numeric * numeric;
        }
    }
    let denom = na.sqrt().max(nn.sqrt());
    Ok(if denom == 0.0 { 0.0 } else { diff.sqrt() / denom })
}

fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

/// Random values bounded away from zero, for ops with a kink at 0.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    rand_t(shape, rng).map(|v| if v.abs() < 0.02 { v.signum() * 0.02 + v } else { v })
}

/// Values spaced 0.05 apart in random order, so no pooling window holds
/// two entries within a finite-difference step of each other.
fn distinct(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f32> = (0..n).map(|i| i as f32 * 0.05 - n as f32 * 0.025).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        vals.swap(i, j);
    }
    Tensor::new(shape, vals).expect("shape from caller")
}

fn labels(batch: usize, classes: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    (0..batch).map(|_| rng.random_range(0..classes)).collect()
}

struct Case {
    op: &'static str,
    inputs: Vec<Tensor>,
    forward: Box<Forward<'static>>,
    tol: f64,
}

fn case(op: &'static str, inputs: Vec<Tensor>, forward: Box<Forward<'static>>) -> Case {
    Case {
        op,
        inputs,
        forward,
        tol: DEFAULT_TOL,
    }
}

fn cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let mut out = Vec::new();
    for (m, k, n) in [(3, 4, 2), (1, 5, 3), (4, 2, 4), (2, 7, 1), (5, 3, 3)] {
        out.push(case(
            "matmul",
            vec![rand_t(&[m, k], rng), rand_t(&[k, n], rng)],
            Box::new(|g, v| g.matmul(v[0], v[1])),
        ));
    }
    for shape in [vec![3, 4], vec![2, 3, 3, 2], vec![5, 1], vec![1, 2, 4, 4], vec![4, 6]] {
        let c = shape[1];
        out.push(case(
            "add_bias",
            vec![rand_t(&shape, rng), rand_t(&[c], rng)],
            Box::new(|g, v| g.add_bias(v[0], v[1])),
        ));
    }
    // (batch, channels, h, w, filters, k, stride, pad)
    let conv_shapes = [
        (2, 3, 8, 8, 4, 3, 1, 0),
        (1, 1, 6, 6, 2, 5, 1, 2),
        (2, 2, 7, 5, 3, 3, 2, 1),
        (1, 3, 5, 5, 2, 1, 1, 0),
        (3, 1, 6, 7, 2, 3, 1, 1),
    ];
    for (b, c, h, w, f, k, s, p) in conv_shapes {
        out.push(case(
            "conv2d",
            vec![rand_t(&[b, c, h, w], rng), rand_t(&[f, c, k, k], rng), rand_t(&[f], rng)],
            Box::new(move |g, v| g.conv2d(v[0], v[1], Some(v[2]), s, p)),
        ));
    }
    for (b, c, h, w, f, k, s, p) in conv_shapes {
        out.push(case(
            "conv2d_transpose",
            vec![rand_t(&[b, c, h, w], rng), rand_t(&[c, f, k, k], rng), rand_t(&[f], rng)],
            Box::new(move |g, v| g.conv2d_transpose(v[0], v[1], Some(v[2]), s, p)),
        ));
    }
    for shape in [[1, 1, 6, 6], [2, 3, 4, 4], [1, 2, 5, 5], [2, 1, 3, 6], [1, 1, 2, 2]] {
        out.push(case(
            "maxpool2x2",
            vec![distinct(&shape, rng)],
            Box::new(|g, v| g.maxpool2x2(v[0])),
        ));
    }
    for (shape, th, tw) in [
        ([1, 1, 2, 2], 4, 4),
        ([2, 2, 3, 3], 6, 9),
        ([1, 3, 2, 4], 6, 8),
        ([1, 1, 7, 7], 14, 14),
        ([2, 1, 1, 2], 3, 2),
    ] {
        out.push(case(
            "upsample_nearest",
            vec![rand_t(&shape, rng)],
            Box::new(move |g, v| g.upsample_nearest(v[0], th, tw)),
        ));
    }
    for shape in [vec![4, 3], vec![2, 2, 3, 3], vec![6, 1], vec![3, 3, 2, 2], vec![5, 4]] {
        let c = shape[1];
        let gamma = Tensor::uniform(&[c], 0.5, 1.5, rng);
        let mut bn = case(
            "batchnorm",
            vec![rand_t(&shape, rng), gamma, rand_t(&[c], rng)],
            Box::new(move |g, v| {
                let mut running = Tensor::zeros(&[2, c]);
                g.batch_norm(
                    v[0],
                    v[1],
                    v[2],
                    &mut running,
                    BnMode::Train {
                        update_running: false,
                    },
                )
            }),
        );
        bn.tol = BATCHNORM_TOL;
        out.push(bn);
    }
    for shape in [vec![3, 4], vec![2, 2, 2, 2]] {
        let c = shape[1];
        let gamma = Tensor::uniform(&[c], 0.5, 1.5, rng);
        let mut stats = Tensor::uniform(&[2, c], 0.5, 1.5, rng);
        stats.data_mut()[..c].iter_mut().for_each(|m| *m -= 1.0);
        let mut bn = case(
            "batchnorm",
            vec![rand_t(&shape, rng), gamma, rand_t(&[c], rng)],
            Box::new(move |g, v| {
                let mut running = stats.clone();
                g.batch_norm(v[0], v[1], v[2], &mut running, BnMode::Eval)
            }),
        );
        bn.tol = BATCHNORM_TOL;
        out.push(bn);
    }
    let plain_shapes = [vec![3, 4], vec![2, 10], vec![1, 3, 2, 2], vec![5, 1], vec![4, 7]];
    for s in &plain_shapes {
        out.push(case("relu", vec![away_from_zero(s, rng)], Box::new(|g, v| g.relu(v[0]))));
        out.push(case("sigmoid", vec![rand_t(s, rng).map(|x| 3.0 * x)], Box::new(|g, v| g.sigmoid(v[0]))));
        out.push(case("square", vec![rand_t(s, rng)], Box::new(|g, v| g.square(v[0]))));
        out.push(case("scale", vec![rand_t(s, rng)], Box::new(|g, v| g.scale(v[0], -1.7))));
        out.push(case(
            "mul",
            vec![rand_t(s, rng), rand_t(s, rng)],
            Box::new(|g, v| g.mul(v[0], v[1])),
        ));
        out.push(case(
            "sub",
            vec![rand_t(s, rng), rand_t(s, rng)],
            Box::new(|g, v| g.sub(v[0], v[1])),
        ));
        out.push(case("sum", vec![rand_t(s, rng)], Box::new(|g, v| g.sum(v[0]))));
        out.push(case("mean", vec![rand_t(s, rng)], Box::new(|g, v| g.mean(v[0]))));
        out.push(case(
            "mse",
            vec![rand_t(s, rng), rand_t(s, rng)],
            Box::new(|g, v| g.mse(v[0], v[1])),
        ));
        let flat: usize = s.iter().product();
        out.push(case(
            "reshape",
            vec![rand_t(s, rng)],
            Box::new(move |g, v| g.reshape(v[0], &[flat])),
        ));
    }
    for (b, k) in [(3, 4), (2, 10), (1, 3), (5, 2), (4, 6)] {
        out.push(case("softmax", vec![rand_t(&[b, k], rng).map(|x| 2.0 * x)], Box::new(|g, v| g.softmax(v[0]))));
        out.push(case(
            "row_dot",
            vec![rand_t(&[b, k], rng), rand_t(&[b, k], rng)],
            Box::new(|g, v| g.row_dot(v[0], v[1])),
        ));
        let l = labels(b, k, rng);
        out.push(case(
            "cross_entropy",
            vec![rand_t(&[b, k], rng).map(|x| 3.0 * x)],
            Box::new(move |g, v| g.cross_entropy(v[0], &l)),
        ));
        let target = if b % 2 == 0 { 1.0 } else { 0.0 };
        out.push(case(
            "bce_with_logits",
            vec![rand_t(&[b, 1], rng).map(|x| 4.0 * x)],
            Box::new(move |g, v| g.bce_with_logits(v[0], target)),
        ));
    }
    for (a, b, axis) in [
        (vec![2], vec![3], 0),
        (vec![2, 3], vec![2, 5], 1),
        (vec![1, 2, 3], vec![2, 2, 3], 0),
        (vec![3, 1, 2, 2], vec![3, 2, 2, 2], 1),
        (vec![2, 4], vec![2, 1], 1),
    ] {
        out.push(case(
            "concat",
            vec![rand_t(&a, rng), rand_t(&b, rng)],
            Box::new(move |g, v| g.concat(&[v[0], v[1]], axis)),
        ));
        let mut joined = a.clone();
        joined[axis] += b[axis];
        let sizes = [a[axis], b[axis]];
        // Weight the pieces differently so each branch's gradient is distinct.
        out.push(case(
            "split",
            vec![rand_t(&joined, rng)],
            Box::new(move |g, v| {
                let parts = g.split(v[0], &sizes, axis)?;
                let first = g.scale(parts[0], 2.0)?;
                let second = g.scale(parts[1], -0.5)?;
                let (s1, s2) = (g.sum(first)?, g.sum(second)?);
                g.add(s1, s2)
            }),
        ));
    }
    out
}

/// Runs the full suite deterministically from `seed`.
pub fn run_suite(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results = Vec::new();
    for c in cases(&mut rng) {
        let rel_error = check(c.forward.as_ref(), &c.inputs, &mut rng)?;
        let shapes = c
            .inputs
            .iter()
            .map(|t| format!("{:?}", t.shape()))
            .collect::<Vec<_>>()
            .join(" ");
        results.push(CheckOutcome {
            op: c.op,
            shapes,
            rel_error,
            tolerance: c.tol,
        });
    }
    Ok(results)
}
