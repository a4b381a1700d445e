//! Tensor-in, tensor-out forms of the differentiable ops, for callers that
//! do not need a tape.

use crate::error::Result;
use crate::graph::{BnMode, Graph};
use crate::tensor::Tensor;

fn unary(x: &Tensor, f: impl FnOnce(&mut Graph, crate::Var) -> Result<crate::Var>) -> Result<Tensor> {
    let mut g = Graph::new();
    let v = g.input(x.clone());
    let y = f(&mut g, v)?;
    Ok(g.value(y).clone())
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let (a, b) = (g.input(a.clone()), g.input(b.clone()));
    let y = g.matmul(a, b)?;
    Ok(g.value(y).clone())
}

pub fn conv2d(x: &Tensor, w: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let mut g = Graph::new();
    let (x, w) = (g.input(x.clone()), g.input(w.clone()));
    let y = g.conv2d(x, w, None, stride, padding)?;
    Ok(g.value(y).clone())
}

pub fn conv2d_transpose(x: &Tensor, w: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let mut g = Graph::new();
    let (x, w) = (g.input(x.clone()), g.input(w.clone()));
    let y = g.conv2d_transpose(x, w, None, stride, padding)?;
    Ok(g.value(y).clone())
}

/// Pooled output together with the flat input index each output came from.
pub fn maxpool2x2(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let mut g = Graph::new();
    let v = g.input(x.clone());
    let y = g.maxpool2x2(v)?;
    let idx = g.pool_indices(y).map(<[usize]>::to_vec).unwrap_or_default();
    Ok((g.value(y).clone(), idx))
}

pub fn upsample_nearest(x: &Tensor, target_h: usize, target_w: usize) -> Result<Tensor> {
    unary(x, |g, v| g.upsample_nearest(v, target_h, target_w))
}

/// Batch norm with an externally owned `[2, C]` running-statistics buffer.
pub fn batchnorm(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running: &mut Tensor,
    mode: BnMode,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let (x, gm, bt) = (g.input(x.clone()), g.input(gamma.clone()), g.input(beta.clone()));
    let y = g.batch_norm(x, gm, bt, running, mode)?;
    Ok(g.value(y).clone())
}

pub fn relu(x: &Tensor) -> Result<Tensor> {
    unary(x, |g, v| g.relu(v))
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    unary(x, |g, v| g.sigmoid(v))
}

pub fn softmax(x: &Tensor) -> Result<Tensor> {
    unary(x, |g, v| g.softmax(v))
}

pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let mut g = Graph::new();
    let vars: Vec<_> = parts.iter().map(|t| g.input((*t).clone())).collect();
    let y = g.concat(&vars, axis)?;
    Ok(g.value(y).clone())
}

pub fn split(x: &Tensor, sizes: &[usize], axis: usize) -> Result<Vec<Tensor>> {
    let mut g = Graph::new();
    let v = g.input(x.clone());
    let parts = g.split(v, sizes, axis)?;
    Ok(parts.into_iter().map(|p| g.value(p).clone()).collect())
}
