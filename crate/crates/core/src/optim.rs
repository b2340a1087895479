//! Optimizers over a [`ParamSet`]. Only trainable weights with a gradient are
//! touched; buffers and frozen weights are never written.

use crate::params::ParamSet;
use crate::tensor::{Scalar, Tensor};

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Option<Vec<f64>>>,
    v: Vec<Option<Vec<f64>>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Adam { lr, beta1, beta2, eps: 1e-8, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step<T: Scalar>(&mut self, params: &mut ParamSet<T>, grads: &[Option<Tensor<T>>]) {
        assert_eq!(params.len(), grads.len(), "adam: gradient count");
        self.m.resize(params.len(), None);
        self.v.resize(params.len(), None);
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            if !params.is_trainable(i) {
                continue;
            }
            let n = g.numel();
            let m = self.m[i].get_or_insert_with(|| vec![0.0; n]);
            let v = self.v[i].get_or_insert_with(|| vec![0.0; n]);
            let w = params.value_mut(i).data_mut();
            for k in 0..n {
                let gk = g.data()[k].as_f64();
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let update = self.lr * (m[k] / bc1) / ((v[k] / bc2).sqrt() + self.eps);
                w[k] = T::of(w[k].as_f64() - update);
            }
        }
    }
}

/// SGD with heavy-ball momentum and L2 weight decay folded into the gradient.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Option<Vec<f64>>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd { momentum, weight_decay, velocity: Vec::new() }
    }

    pub fn step<T: Scalar>(&mut self, params: &mut ParamSet<T>, grads: &[Option<Tensor<T>>], lr: f64) {
        assert_eq!(params.len(), grads.len(), "sgd: gradient count");
        self.velocity.resize(params.len(), None);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            if !params.is_trainable(i) {
                continue;
            }
            let n = g.numel();
            let vel = self.velocity[i].get_or_insert_with(|| vec![0.0; n]);
            let w = params.value_mut(i).data_mut();
            for k in 0..n {
                let wk = w[k].as_f64();
                let d = g.data()[k].as_f64() + self.weight_decay * wk;
                vel[k] = self.momentum * vel[k] + d;
                w[k] = T::of(wk - lr * vel[k]);
            }
        }
    }
}

/// `base_lr * (1 - iter / max_iter)^power`, clamped to 0 once `iter >= max_iter`.
pub fn poly_lr(base_lr: f64, iter: usize, max_iter: usize, power: f64) -> f64 {
    if iter >= max_iter {
        return 0.0;
    }
    base_lr * (1.0 - iter as f64 / max_iter as f64).powf(power)
}
