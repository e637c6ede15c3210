use serde::{Deserialize, Serialize};

use super::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5.0e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected ADAM with one moment pair per parameter tensor.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn with_lr(lr: f32) -> Self {
        Self::new(AdamConfig {
            lr,
            ..AdamConfig::default()
        })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Vec<f32>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Vec<f32>] {
        &self.v
    }

    /// Applies one update using each parameter's accumulated gradient and
    /// clears those gradients. Frozen tensors are left untouched; a trainable
    /// tensor without a gradient is treated as having a zero gradient.
    pub fn step(&mut self, params: &mut [&mut Tensor]) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        }
        assert_eq!(self.m.len(), params.len(), "adam: parameter list changed between steps");
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if !p.requires_grad() {
                continue;
            }
            assert_eq!(m.len(), p.numel(), "adam: parameter shape changed");
            let grad = p.grad().map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; p.numel()]);
            let data = p.data_mut();
            for i in 0..data.len() {
                let g = grad[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
            p.clear_grad();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(vals: &[f32], grad: &[f32]) -> Tensor {
        let mut t = Tensor::new(&[vals.len()], vals.to_vec()).unwrap().with_grad();
        t.accumulate_grad(grad).unwrap();
        t
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = param(&[1.0, -2.0], &[0.0, 0.0]);
        let mut opt = Adam::with_lr(0.1);
        opt.step(&mut [&mut p]);
        assert_eq!(p.data(), &[1.0, -2.0]);
        assert_eq!(opt.steps(), 1);
        assert_eq!(opt.first_moments()[0], vec![0.0, 0.0]);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let lr = 1e-3;
        let mut opt = Adam::new(AdamConfig {
            lr,
            eps: 0.0,
            ..AdamConfig::default()
        });
        let mut p = param(&[0.5, 0.5, 0.5], &[3.0, -0.01, 250.0]);
        opt.step(&mut [&mut p]);
        let want = [0.5 - lr, 0.5 + lr, 0.5 - lr];
        for (got, want) in p.data().iter().zip(want) {
            assert!((got - want).abs() < 1e-7, "{got} vs {want}");
        }
        assert!(p.grad().is_none());
    }

    #[test]
    fn moments_decay_under_zero_gradient() {
        let mut opt = Adam::with_lr(1e-2);
        let mut p = param(&[0.0], &[1.0]);
        opt.step(&mut [&mut p]);
        let m1 = opt.first_moments()[0][0];
        let v1 = opt.second_moments()[0][0];
        p.accumulate_grad(&[0.0]).unwrap();
        opt.step(&mut [&mut p]);
        assert!(opt.first_moments()[0][0].abs() < m1.abs());
        assert!(opt.second_moments()[0][0] < v1);
        assert_eq!(opt.steps(), 2);
    }

    #[test]
    fn zero_lr_is_a_no_op() {
        let mut opt = Adam::with_lr(0.0);
        let mut p = param(&[0.25, 4.0], &[1.0, -1.0]);
        opt.step(&mut [&mut p]);
        assert_eq!(p.data(), &[0.25, 4.0]);
    }

    #[test]
    fn frozen_tensors_are_skipped() {
        let mut opt = Adam::with_lr(0.1);
        let mut frozen = Tensor::new(&[1], vec![1.0]).unwrap();
        let mut live = param(&[1.0], &[1.0]);
        opt.step(&mut [&mut frozen, &mut live]);
        assert_eq!(frozen.data(), &[1.0]);
        assert!(live.data()[0] < 1.0);
    }
}
