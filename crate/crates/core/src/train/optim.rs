use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::tensor::Tensor;

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Adam {
        Adam {
            beta1,
            beta2,
            eps,
            steps: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// `params` must be passed in the same order on every call.
    pub fn step(&mut self, params: &[Tensor], lr: f64) {
        if self.m.len() != params.len() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        }
        self.steps += 1;
        let c1 = 1.0 - math::powf(self.beta1, self.steps as f64);
        let c2 = 1.0 - math::powf(self.beta2, self.steps as f64);
        for (i, p) in params.iter().enumerate() {
            if !p.has_grad() {
                continue;
            }
            let g = p.grad();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let mut data = p.data_mut();
            for j in 0..g.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                data[j] -= lr * mhat / (math::sqrt(vhat) + self.eps);
            }
        }
    }
}

impl Default for Adam {
    /// `betas = (0.9, 0.98)`, `eps = 1e-9`.
    fn default() -> Self {
        Adam::new(0.9, 0.98, 1e-9)
    }
}

/// Linear warmup then inverse square-root decay:
/// `lr(s) = peak * min(s / warmup, sqrt(warmup / s))`, peaking at `s = warmup`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoamSchedule {
    pub peak_lr: f64,
    pub warmup_steps: u64,
}

impl NoamSchedule {
    /// `step` counts from 1.
    pub fn lr(&self, step: u64) -> f64 {
        let s = step.max(1) as f64;
        let w = self.warmup_steps.max(1) as f64;
        self.peak_lr * (s / w).min(math::sqrt(w / s))
    }
}

pub fn global_grad_norm(params: &[Tensor]) -> f64 {
    let sq: f64 = params
        .iter()
        .filter(|p| p.has_grad())
        .map(|p| p.grad().iter().map(|g| g * g).sum::<f64>())
        .sum();
    math::sqrt(sq)
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(params: &[Tensor], max_norm: f64) -> f64 {
    let norm = global_grad_norm(params);
    if norm.is_finite() && norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for p in params.iter().filter(|p| p.has_grad()) {
            p.set_grad(p.grad().iter().map(|g| g * s).collect());
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noam_shape() {
        let s = NoamSchedule {
            peak_lr: 1e-3,
            warmup_steps: 100,
        };
        assert!((s.lr(100) - 1e-3).abs() < 1e-18);
        assert!((s.lr(50) - 5e-4).abs() < 1e-18);
        assert!((s.lr(400) - 5e-4).abs() < 1e-18);
        assert!(s.lr(1) < s.lr(2));
    }

    #[test]
    fn clipping() {
        let p = Tensor::parameter(vec![0.0, 0.0], &[2]).unwrap();
        p.set_grad(vec![3.0, 4.0]);
        assert_eq!(clip_grad_norm(&[p.clone()], 1.0), 5.0);
        let g = p.grad();
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
        assert_eq!(clip_grad_norm(&[p.clone()], 10.0), 1.0);
    }

    #[test]
    fn adam_moves_against_gradient() {
        let p = Tensor::parameter(vec![1.0, -1.0], &[2]).unwrap();
        p.set_grad(vec![2.0, -0.5]);
        let mut opt = Adam::default();
        opt.step(&[p.clone()], 0.1);
        // first bias-corrected step has magnitude lr
        let d = p.to_vec();
        assert!((d[0] - 0.9).abs() < 1e-9 && (d[1] + 0.9).abs() < 1e-9);
    }
}
