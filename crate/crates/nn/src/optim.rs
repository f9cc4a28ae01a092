use crate::params::{Grads, ParamStore};
use crate::Tensor;

/// SGD with heavy-ball momentum: `v = mu * v + g; p -= lr * v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f32,
    pub momentum: f32,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(store: &ParamStore, lr: f32, momentum: f32) -> Self {
        let velocity = store.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self { lr, momentum, velocity }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads) {
        for ((p, g), v) in store.params_mut().iter_mut().zip(grads.as_slice()).zip(&mut self.velocity) {
            for ((p, g), v) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *v = self.momentum * *v + g;
                *p -= self.lr * *v;
            }
        }
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f32, beta1: f32, beta2: f32) -> Self {
        let zeros = || store.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self { lr, beta1, beta2, eps: 1e-8, step: 0, m: zeros(), v: zeros() }
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        let params = store.params_mut().iter_mut();
        for (((p, g), m), v) in params.zip(grads.as_slice()).zip(&mut self.m).zip(&mut self.v) {
            let it = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut());
            for (((p, &g), m), v) in it {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}
