use serde::{Deserialize, Serialize};

use crate::error::{NumError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub weight_decay: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl AdamConfig {
    pub fn new(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay: 0.0,
        }
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }
}

/// Adam with decoupled weight decay.
///
/// Each update first shrinks the parameter by `lr * weight_decay * param`,
/// then applies the bias-corrected moment step.
#[derive(Clone, Debug)]
pub struct Adam<T: Scalar = f32> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Vec<T>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Vec<T>] {
        &self.v
    }

    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[&Tensor<T>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(NumError::shape("adam_step", &[params.len()], &[grads.len()]));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(NumError::shape("adam_step", p.shape(), g.shape()));
            }
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
            self.v = self.m.clone();
        } else if self.m.len() != params.len() || self.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.numel()) {
            return Err(NumError::invalid(
                "adam_step",
                "parameter set changed since the first step",
            ));
        }
        self.step += 1;
        let c = &self.config;
        let f = T::from_f64_lossy;
        let (b1, b2) = (f(c.beta1), f(c.beta2));
        let bc1 = f(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = f(1.0 - c.beta2.powi(self.step as i32));
        let lr = f(c.lr);
        let eps = f(c.eps);
        let decay = f(1.0 - c.lr * c.weight_decay);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *pi = *pi * decay;
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi = *pi - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = Tensor::<f64>::scalar(1.0);
        let g = Tensor::<f64>::scalar(1.0);
        let mut opt = Adam::new(AdamConfig::new(0.001));
        opt.step(&mut [&mut p], &[&g]).unwrap();
        let expected = 1.0 - 0.001 * 1.0 / (1.0 + 1e-8);
        assert!((p.item() - expected).abs() < 1e-12);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = Tensor::<f32>::from_f64(&[3], &[0.5, -2.0, 7.0]).unwrap();
        let before = p.clone();
        let g = Tensor::<f32>::zeros(&[3]);
        let mut opt = Adam::new(AdamConfig::new(0.1));
        for k in 1..=4 {
            opt.step(&mut [&mut p], &[&g]).unwrap();
            assert_eq!(opt.step_count(), k);
        }
        assert_eq!(p, before);
    }

    #[test]
    fn decoupled_decay_shrinks_without_gradient() {
        let mut p = Tensor::<f64>::scalar(2.0);
        let g = Tensor::<f64>::scalar(0.0);
        let mut opt = Adam::new(AdamConfig::new(0.01).with_weight_decay(0.5));
        opt.step(&mut [&mut p], &[&g]).unwrap();
        assert!((p.item() - 2.0 * (1.0 - 0.005)).abs() < 1e-12);
    }

    #[test]
    fn descends_a_parabola() {
        let mut x = Tensor::<f64>::scalar(1.0);
        let mut opt = Adam::new(AdamConfig::new(0.1));
        let mut prev = x.item() * x.item();
        for _ in 0..5 {
            let g = Tensor::scalar(2.0 * x.item());
            opt.step(&mut [&mut x], &[&g]).unwrap();
            let f = x.item() * x.item();
            assert!(f < prev);
            prev = f;
        }
    }

    #[test]
    fn rejects_misaligned_shapes() {
        let mut p = Tensor::<f32>::zeros(&[2]);
        let g = Tensor::<f32>::zeros(&[3]);
        let mut opt = Adam::new(AdamConfig::new(0.1));
        assert!(matches!(
            opt.step(&mut [&mut p], &[&g]),
            Err(NumError::ShapeMismatch { op: "adam_step", .. })
        ));
    }
}
