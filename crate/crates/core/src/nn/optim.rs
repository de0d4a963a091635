use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::Gradients;
use crate::nn::params::{Binding, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: BTreeMap<String, Tensor<T>>,
    v: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Applies one update to every bound parameter that received a gradient.
    /// `pinned_rows` lists `(param, row)` pairs kept at zero (padding rows of
    /// embedding tables).
    pub fn update(
        &mut self,
        store: &mut ParamStore<T>,
        binding: &Binding,
        grads: &Gradients<T>,
        pinned_rows: &[(&str, usize)],
    ) {
        self.step += 1;
        let t = self.step as i32;
        let b1 = T::lit(self.beta1);
        let b2 = T::lit(self.beta2);
        let c1 = T::lit(1.0 - self.beta1.powi(t));
        let c2 = T::lit(1.0 - self.beta2.powi(t));
        let lr = T::lit(self.lr);
        let eps = T::lit(self.eps);
        for (name, var) in binding.iter() {
            let Some(grad) = grads.get(var) else { continue };
            let param = store.get_mut(name).expect("bound parameter exists");
            let m = self
                .m
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(param.shape()));
            let v = self
                .v
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(param.shape()));
            for (((w, &gr), mi), vi) in param
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (T::one() - b1) * gr;
                *vi = b2 * *vi + (T::one() - b2) * gr * gr;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        for &(name, row) in pinned_rows {
            if let Some(p) = store.get_mut(name) {
                let d = p.last_dim();
                p.data_mut()[row * d..(row + 1) * d].iter_mut().for_each(|x| *x = T::zero());
            }
        }
    }

    /// First and second moment tensors keyed `m/<param>` and `v/<param>`.
    pub fn moments(&self) -> impl Iterator<Item = (String, &Tensor<T>)> {
        self.m
            .iter()
            .map(|(k, t)| (format!("m/{k}"), t))
            .chain(self.v.iter().map(|(k, t)| (format!("v/{k}"), t)))
    }

    /// Restores a moment tensor written by [`Adam::moments`].
    pub fn set_moment(&mut self, key: &str, value: Tensor<T>) -> bool {
        if let Some(name) = key.strip_prefix("m/") {
            self.m.insert(name.to_string(), value);
            true
        } else if let Some(name) = key.strip_prefix("v/") {
            self.v.insert(name.to_string(), value);
            true
        } else {
            false
        }
    }
}

/// Multiplies the learning rate by `factor` once the monitored loss has
/// not improved for `patience` consecutive epochs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReduceLrOnPlateau {
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
    pub best: Option<f64>,
    pub wait: usize,
}

impl ReduceLrOnPlateau {
    pub fn new(factor: f64, patience: usize) -> Self {
        ReduceLrOnPlateau {
            factor,
            patience,
            min_lr: 0.0,
            best: None,
            wait: 0,
        }
    }

    /// Records an epoch's loss and returns the learning rate to use next.
    pub fn step(&mut self, loss: f64, lr: f64) -> f64 {
        match self.best {
            Some(b) if loss >= b => {
                self.wait += 1;
                if self.wait >= self.patience {
                    self.wait = 0;
                    return (lr * self.factor).max(self.min_lr);
                }
                lr
            }
            _ => {
                self.best = Some(loss);
                self.wait = 0;
                lr
            }
        }
    }
}
