use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Param, Real};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let beta_ok = |b: f64| (0.0..1.0).contains(&b);
        if !(self.learning_rate > 0.0) || !beta_ok(self.beta1) || !beta_ok(self.beta2) || !(self.eps > 0.0) {
            return Err(Error::invalid(format!("invalid Adam settings {self:?}")));
        }
        Ok(())
    }
}

/// Adam with bias correction. Moment buffers are created on the first step
/// and must then always be given the same parameter list.
#[derive(Debug, Clone)]
pub struct Adam<T = f32> {
    config: AdamConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Result<Self> {
        config.validate()?;
        Ok(Adam {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: Vec<&mut Param<T>>) -> Result<()> {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![T::zero(); p.value.len()]).collect();
            self.v = self.m.clone();
        }
        if params.len() != self.m.len() || params.iter().zip(&self.m).any(|(p, m)| p.value.len() != m.len()) {
            return Err(Error::shape("optimizer called with a different parameter list"));
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let lr_t = T::of(c.learning_rate * (1.0 - c.beta2.powi(t)).sqrt() / (1.0 - c.beta1.powi(t)));
        // eps is applied to the bias-corrected second moment, as in the
        // original formulation
        let eps_t = T::of(c.eps * (1.0 - c.beta2.powi(t)).sqrt());
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        for ((p, m), v) in params.into_iter().zip(&mut self.m).zip(&mut self.v) {
            let (value, grad) = (p.value.data_mut(), p.grad.data());
            for i in 0..value.len() {
                let g = grad[i];
                m[i] = b1 * m[i] + one_b1 * g;
                v[i] = b2 * v[i] + one_b2 * g * g;
                value[i] = value[i] - lr_t * m[i] / (v[i].sqrt() + eps_t);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn first_step_moves_by_learning_rate() {
        // with bias correction the first update is lr·g/(|g| + eps) ≈ ±lr
        let mut p = Param::new(Tensor::from_vec(&[3], vec![1.0f64, -2.0, 0.5]).unwrap());
        p.grad = Tensor::from_vec(&[3], vec![4.0, -0.01, 0.0]).unwrap();
        let mut opt = Adam::new(AdamConfig::default()).unwrap();
        opt.step(vec![&mut p]).unwrap();
        let v = p.value.data();
        assert!((v[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((v[1] - (-2.0 + 1e-3)).abs() < 1e-6);
        assert_eq!(v[2], 0.5);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = Param::new(Tensor::from_vec(&[2], vec![3.0f64, -4.0]).unwrap());
        let mut opt = Adam::new(AdamConfig {
            learning_rate: 0.05,
            ..AdamConfig::default()
        })
        .unwrap();
        for _ in 0..2000 {
            let g: Vec<f64> = p.value.data().iter().map(|x| 2.0 * x).collect();
            p.grad = Tensor::from_vec(&[2], g).unwrap();
            opt.step(vec![&mut p]).unwrap();
        }
        assert!(p.value.data().iter().all(|x| x.abs() < 1e-2));
    }

    #[test]
    fn deterministic_and_validated() {
        let run = || {
            let mut p = Param::new(Tensor::from_vec(&[2], vec![0.3f32, 0.7]).unwrap());
            let mut opt = Adam::new(AdamConfig::default()).unwrap();
            for k in 0..5 {
                p.grad = Tensor::from_vec(&[2], vec![k as f32 * 0.1, -0.2]).unwrap();
                opt.step(vec![&mut p]).unwrap();
            }
            p.value
        };
        assert_eq!(run(), run());
        assert!(Adam::<f32>::new(AdamConfig { beta1: 1.0, ..AdamConfig::default() }).is_err());
    }
}
