//! Optimizers over named parameter collections.

use std::collections::BTreeMap;

use crate::tensor::{NamedTensors, Tensor};

/// Plain SGD. `theta -= lr * g`.
pub struct Sgd {
    pub lr: f32,
}

impl Sgd {
    pub fn new(lr: f32) -> Self {
        Sgd { lr }
    }

    pub fn step(&mut self, params: &mut NamedTensors, grads: &NamedTensors) {
        for (name, p) in params.iter_mut() {
            let g = grads.get(name).unwrap_or_else(|| panic!("missing grad `{name}`"));
            p.add_scaled(g, -self.lr);
        }
    }
}

/// Adam with bias correction. Moments are kept per parameter name and
/// created lazily on the first step, in f32 to keep optimizer state and
/// checkpoints compact; the update arithmetic runs in f64.
pub struct Adam {
    pub lr: f32,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut NamedTensors, grads: &NamedTensors) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, p) in params.iter_mut() {
            let g = grads.get(name).unwrap_or_else(|| panic!("missing grad `{name}`"));
            assert_eq!(g.shape(), p.shape(), "grad shape for `{name}`");
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            for i in 0..p.numel() {
                let gi = g.data()[i] as f64;
                let mi = self.beta1 * m.data()[i] as f64 + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v.data()[i] as f64 + (1.0 - self.beta2) * gi * gi;
                m.data_mut()[i] = mi as f32;
                v.data_mut()[i] = vi as f32;
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                let upd = self.lr as f64 * mhat / (vhat.sqrt() + self.eps);
                p.data_mut()[i] = (p.data()[i] as f64 - upd) as f32;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(name: &str, vals: Vec<f32>) -> NamedTensors {
        let mut t = NamedTensors::new();
        t.insert(name.to_string(), Tensor::from_vec(&[vals.len()], vals).unwrap());
        t
    }

    #[test]
    fn sgd_step_is_exact() {
        let mut params = single("w", vec![1.0, -2.0]);
        let grads = single("w", vec![0.5, 0.25]);
        Sgd::new(0.1).step(&mut params, &grads);
        let w = params.get("w").unwrap();
        assert!((w.data()[0] - 0.95).abs() < 1e-7);
        assert!((w.data()[1] + 2.025).abs() < 1e-7);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // after one step mhat = g, vhat = g^2, so the update is
        // lr * g / (|g| + eps) = lr * sign(g) up to eps
        let mut params = single("w", vec![1.0, 1.0, 1.0]);
        let grads = single("w", vec![0.3, -2.0, 1e-3]);
        let mut adam = Adam::new(0.01);
        adam.step(&mut params, &grads);
        let w = params.get("w").unwrap();
        assert!((w.data()[0] - 0.99).abs() < 1e-5);
        assert!((w.data()[1] - 1.01).abs() < 1e-5);
        assert!((w.data()[2] - 0.99).abs() < 1e-4);
    }

    #[test]
    fn adam_two_steps_hand_computed() {
        // g = 1 both steps, lr = 0.1
        // t1: m=0.1, v=0.001, mhat=1, vhat=1, upd=0.1/(1+1e-8)
        // t2: m=0.19, v=0.001999, mhat=0.19/0.19=1, vhat=0.001999/0.001999=1
        let mut params = single("w", vec![0.0]);
        let grads = single("w", vec![1.0]);
        let mut adam = Adam::new(0.1);
        adam.step(&mut params, &grads);
        assert!((params.get("w").unwrap().data()[0] as f64 + 0.1).abs() < 1e-6);
        adam.step(&mut params, &grads);
        assert!((params.get("w").unwrap().data()[0] as f64 + 0.2).abs() < 1e-6);
    }

    #[test]
    fn adam_converges_on_quadratic() {
        // minimize (w - 3)^2
        let mut params = single("w", vec![0.0]);
        let mut adam = Adam::new(0.05);
        for _ in 0..2000 {
            let w = params.get("w").unwrap().data()[0];
            let grads = single("w", vec![2.0 * (w - 3.0)]);
            adam.step(&mut params, &grads);
        }
        assert!((params.get("w").unwrap().data()[0] - 3.0).abs() < 1e-3);
    }
}
