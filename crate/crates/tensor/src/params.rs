use std::ops::Index;

use crate::graph::{Gradients, Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(usize);

/// A named trainable tensor with its gradient accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
}

impl Param {
    /// Group label: the name up to its first `.` (`encoder`, `mapper`, ...).
    pub fn group(&self) -> &str {
        self.name.split('.').next().unwrap_or(&self.name)
    }
}

/// Named parameters plus non-trainable buffers (e.g. batch-norm running
/// statistics). Gradients always match their parameter's shape.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    buffers: Vec<(String, Tensor)>,
}

/// Graph handles for every parameter of a store, indexed by [`ParamId`].
pub struct Bound {
    vars: Vec<Var>,
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a trainable parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        let grad = Tensor::zeros(value.shape());
        self.params.push(Param {
            name,
            value,
            grad,
            trainable: true,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor) -> BufferId {
        let name = name.into();
        assert!(
            self.buffers.iter().all(|(n, _)| *n != name),
            "duplicate buffer {name}"
        );
        self.buffers.push((name, value));
        BufferId(self.buffers.len() - 1)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor {
        &self.buffers[id.0].1
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor {
        &mut self.buffers[id.0].1
    }

    pub fn params(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.buffers.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn buffers_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.buffers.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    /// Sets the flag on every parameter whose group is `group`.
    pub fn set_group_trainable(&mut self, group: &str, trainable: bool) {
        for p in &mut self.params {
            if p.group() == group {
                p.trainable = trainable;
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Places every parameter on `g`: trainable ones as differentiable
    /// leaves, frozen ones as constants.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if p.trainable {
                    g.leaf(p.value.clone())
                } else {
                    g.input(p.value.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    /// Places every parameter on `g` as a constant.
    pub fn bind_frozen(&self, g: &mut Graph) -> Bound {
        let vars = self.params.iter().map(|p| g.input(p.value.clone())).collect();
        Bound { vars }
    }

    /// Adds the gradients found for `bound` into the stored accumulators.
    pub fn accumulate(&mut self, grads: &Gradients, bound: &Bound) {
        for (p, &v) in self.params.iter_mut().zip(&bound.vars) {
            if let Some(g) = grads.get(v) {
                p.grad.add_assign(g);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frozen_params_receive_no_gradient() {
        let mut store = ParamStore::new();
        let a = store.add("encoder.w", Tensor::scalar(2.0));
        let b = store.add("decoder.w", Tensor::scalar(3.0));
        store.set_group_trainable("decoder", false);
        let mut g = Graph::new();
        let bound = store.bind(&mut g);
        let y = g.mul(bound[a], bound[b]).unwrap();
        let grads = g.backward(y).unwrap();
        store.accumulate(&grads, &bound);
        assert_eq!(store.grad(a).item(), 3.0);
        assert_eq!(store.grad(b).item(), 0.0);
        assert_eq!(store.param(b).group(), "decoder");
    }
}
