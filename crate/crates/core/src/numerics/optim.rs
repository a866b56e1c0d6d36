use serde::{Deserialize, Serialize};

use super::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

pub trait Optimizer {
    /// Applies the accumulated gradients. Does not reset them.
    fn step(&mut self, store: &mut ParamStore);
}

#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
}

impl Optimizer for Sgd {
    fn step(&mut self, store: &mut ParamStore) {
        for p in store.iter_mut() {
            let grad = p.grad.data().to_vec();
            for (v, g) in p.value.data_mut().iter_mut().zip(grad) {
                *v -= self.lr * g;
            }
        }
    }
}

/// Adaptive moment estimation with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

impl Optimizer for Adam {
    fn step(&mut self, store: &mut ParamStore) {
        if self.m.is_empty() {
            self.m = store.iter().map(|p| vec![0.0; p.value.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (i, p) in store.iter_mut().enumerate() {
            let grad = p.grad.data().to_vec();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, val) in p.value.data_mut().iter_mut().enumerate() {
                let g = grad[k];
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g * g;
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                *val -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}
