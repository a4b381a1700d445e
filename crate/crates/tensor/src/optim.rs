use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers are laid out to match the
/// store the optimizer was created for.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    steps: u32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let m: Vec<Tensor> = store.params().map(|p| Tensor::zeros(p.value.shape())).collect();
        Adam {
            config,
            steps: 0,
            v: m.clone(),
            m,
        }
    }

    pub fn steps(&self) -> u32 {
        self.steps
    }

    /// One update of every trainable parameter from its accumulated gradient.
    /// Frozen parameters and their moments are left untouched.
    pub fn step(&mut self, store: &mut ParamStore) {
        assert_eq!(self.m.len(), store.len(), "optimizer bound to a different store");
        self.steps += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.steps as i32;
        let c1 = 1.0 - (beta1 as f64).powi(t);
        let c2 = 1.0 - (beta2 as f64).powi(t);
        for ((p, m), v) in store.params_mut().zip(&mut self.m).zip(&mut self.v) {
            if !p.trainable {
                continue;
            }
            let grad = p.grad.data();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                let g = grad[i];
                md[i] = beta1 * md[i] + (1.0 - beta1) * g;
                vd[i] = beta2 * vd[i] + (1.0 - beta2) * g * g;
                let mhat = md[i] as f64 / c1;
                let vhat = vd[i] as f64 / c2;
                *w -= (lr as f64 * mhat / (vhat.sqrt() + eps as f64)) as f32;
            }
        }
    }
}
