//! AdamW with decoupled weight decay and a cosine learning-rate schedule.

use std::collections::BTreeMap;

use ndarray::ArrayD;

use crate::nn::ParamStore;
use crate::tensor::Scalar;

pub struct AdamW<S: Scalar> {
    pub lr: f64,
    pub weight_decay: f64,
    pub total_steps: usize,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: usize,
    m: BTreeMap<String, ArrayD<S>>,
    v: BTreeMap<String, ArrayD<S>>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(lr: f64, weight_decay: f64, total_steps: usize) -> Self {
        AdamW {
            lr,
            weight_decay,
            total_steps,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Cosine decay from the base rate to zero over `total_steps`.
    pub fn current_lr(&self) -> f64 {
        let t = (self.step as f64 / self.total_steps as f64).min(1.0);
        self.lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }

    /// Apply one update. Only parameters present in `grads` are touched;
    /// weight decay applies to matrices and higher-rank tensors, not to
    /// biases, norm scales, or other vectors.
    pub fn step(&mut self, params: &mut ParamStore<S>, grads: &BTreeMap<String, ArrayD<S>>) {
        let lr = self.current_lr();
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        let (b1, b2) = (S::from_f64(self.beta1), S::from_f64(self.beta2));
        let (ob1, ob2) = (S::from_f64(1.0 - self.beta1), S::from_f64(1.0 - self.beta2));
        let eps = S::from_f64(self.eps);
        let scale = S::from_f64(lr / bc1);
        let vscale = S::from_f64(1.0 / bc2);
        for (name, grad) in grads {
            let p = params.get_mut(name);
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            ndarray::Zip::from(&mut *m).and(grad).for_each(|m, &g| {
                *m = *m * b1 + g * ob1;
            });
            ndarray::Zip::from(&mut *v).and(grad).for_each(|v, &g| {
                *v = *v * b2 + g * g * ob2;
            });
            let decay = if p.ndim() >= 2 {
                S::from_f64(lr * self.weight_decay)
            } else {
                S::zero()
            };
            ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                let vhat = (v * vscale).sqrt() + eps;
                *p = *p - scale * m / vhat - decay * *p;
            });
        }
    }
}
