use alloc::vec::Vec;

use crate::tensor::Tensor;

/// Adam with bias correction (beta1 = 0.9, beta2 = 0.999, eps = 1e-8 by default).
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: u32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u32 {
        self.step
    }

    /// Applies one update. `grads[i]` belongs to `params[i]`; a missing
    /// gradient counts as zero.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Option<&Tensor>]) {
        debug_assert_eq!(params.len(), grads.len());
        if self.m.is_empty() {
            self.m = params.iter().map(|p| alloc::vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - libm::powf(self.beta1, t as f32);
        let bc2 = 1.0 - libm::powf(self.beta2, t as f32);
        for (i, p) in params.iter_mut().enumerate() {
            let Some(g) = grads[i] else {
                // Moments still decay so the schedule matches a zero gradient.
                for (m, v) in self.m[i].iter_mut().zip(self.v[i].iter_mut()) {
                    *m *= self.beta1;
                    *v *= self.beta2;
                }
                if self.lr != 0.0 {
                    for ((x, m), v) in p.data_mut().iter_mut().zip(&self.m[i]).zip(&self.v[i]) {
                        *x -= self.lr * (m / bc1) / (libm::sqrtf(v / bc2) + self.eps);
                    }
                }
                continue;
            };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((x, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *x -= self.lr * (*m / bc1) / (libm::sqrtf(*v / bc2) + self.eps);
            }
        }
    }
}
