use serde::{Deserialize, Serialize};

use crate::tensor::Tensor2D;

/// Adam with bias correction. A nonzero `weight_decay` adds `λ·θ` to each
/// gradient before the moment updates (plain L2 penalty).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    m: Vec<Tensor2D>,
    v: Vec<Tensor2D>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }

    pub fn update(&mut self, params: Vec<&mut Tensor2D>, grads: &[Tensor2D]) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter tensor");
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| Tensor2D::zeros(g.rows, g.cols)).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let step_size = self.lr / bc1;
        let wd = self.weight_decay;
        for (k, (p, g)) in params.into_iter().zip(grads).enumerate() {
            assert_eq!(p.shape(), g.shape(), "gradient shape for tensor {k}");
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.data.len() {
                let gi = g.data[i] + wd * p.data[i];
                m.data[i] = b1 * m.data[i] + (1.0 - b1) * gi;
                v.data[i] = b2 * v.data[i] + (1.0 - b2) * gi * gi;
                p.data[i] -= step_size * m.data[i] / ((v.data[i] / bc2).sqrt() + self.eps);
            }
        }
    }
}

/// Step decay: `lr0 · rate^⌊epoch / period⌋`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLr {
    pub lr0: f64,
    pub period: usize,
    pub rate: f64,
}

impl StepLr {
    pub fn new(lr0: f64, period: usize, rate: f64) -> Self {
        Self { lr0, period, rate }
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        self.lr0 * self.rate.powi((epoch / self.period.max(1)) as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = Tensor2D::scalar(0.5);
        let mut opt = Adam::new(1e-3);
        opt.update(vec![&mut p], &[Tensor2D::scalar(1.0)]);
        assert!((p.data[0] - (0.5 - 1e-3)).abs() < 1e-10);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = Tensor2D::from_vec(1, 3, vec![1.0, -2.0, 3.0]).unwrap();
        let before = p.clone();
        let mut opt = Adam::new(1e-2);
        for _ in 0..5 {
            opt.update(vec![&mut p], &[Tensor2D::zeros(1, 3)]);
        }
        assert_eq!(p, before);
    }

    #[test]
    fn schedule_steps() {
        let s = StepLr::new(1e-3, 100, 0.5);
        assert_eq!(s.lr(0), 1e-3);
        assert_eq!(s.lr(99), 1e-3);
        assert_eq!(s.lr(100), 5e-4);
        assert_eq!(s.lr(250), 2.5e-4);
    }
}
