//! Adaptive-moment optimizer with decoupled weight decay.

use super::params::ParamStore;
use super::tensor::{Real, Tensor};

pub struct AdamW<E> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Tensor<E>>,
    v: Vec<Tensor<E>>,
    lr_scale: Vec<f64>,
}

impl<E: Real> AdamW<E> {
    pub fn new(store: &ParamStore<E>, lr: f64, weight_decay: f64) -> Self {
        let m = (0..store.len())
            .map(|i| {
                let (_, t) = store.at(i);
                Tensor::zeros(t.rows, t.cols)
            })
            .collect::<Vec<_>>();
        let v = m.clone();
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m,
            v,
            lr_scale: vec![1.0; store.len()],
        }
    }

    /// Per-parameter learning-rate multiplier (e.g. a faster codebook).
    pub fn set_lr_scale(&mut self, store: &ParamStore<E>, name: &str, scale: f64) {
        self.lr_scale[store.position(name)] = scale;
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update. `grads[i]` pairs with store entry i; None means zero
    /// gradient (weight decay still applies).
    pub fn step(&mut self, store: &mut ParamStore<E>, grads: &[Option<Tensor<E>>]) {
        assert_eq!(grads.len(), store.len());
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..grads.len() {
            let lr = self.lr * self.lr_scale[i];
            let p = store.at_mut(i);
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for j in 0..p.data.len() {
                let g = grads[i].as_ref().map_or(0.0, |t| t.data[j].to_f64());
                let mj = self.beta1 * m.data[j].to_f64() + (1.0 - self.beta1) * g;
                let vj = self.beta2 * v.data[j].to_f64() + (1.0 - self.beta2) * g * g;
                m.data[j] = E::from_f64(mj);
                v.data[j] = E::from_f64(vj);
                let mhat = mj / bc1;
                let vhat = vj / bc2;
                let w = p.data[j].to_f64();
                let new = w - lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * w);
                p.data[j] = E::from_f64(new);
            }
        }
    }

    /// Reset first/second moments of specific rows of one parameter
    /// (used when reseeding dead codebook entries).
    pub fn reset_rows(&mut self, param_index: usize, rows: &[usize]) {
        for &r in rows {
            let cols = self.m[param_index].cols;
            for c in 0..cols {
                self.m[param_index].data[r * cols + c] = E::ZERO;
                self.v[param_index].data[r * cols + c] = E::ZERO;
            }
        }
    }

    pub fn state(&self) -> (u64, &[Tensor<E>], &[Tensor<E>]) {
        (self.step, &self.m, &self.v)
    }

    pub fn restore_state(&mut self, step: u64, m: Vec<Tensor<E>>, v: Vec<Tensor<E>>) {
        assert_eq!(m.len(), self.m.len());
        assert_eq!(v.len(), self.v.len());
        self.step = step;
        self.m = m;
        self.v = v;
    }
}
