//! Adam optimizer over a flat list of parameter tensors.

use crate::autodiff::Tensor;

pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, param_sizes: &[usize]) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One update. `grads[i]` must align with `params[i]`; parameters are
    /// re-quantized to the f32 lattice after the update so checkpoints stay
    /// bit-exact.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Vec<f64>]) {
        assert_eq!(params.len(), grads.len());
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, g) in grads[i].iter().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p.data[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
            p.quantize_f32();
        }
    }
}
