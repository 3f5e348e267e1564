//! Dense layers, the Adam optimizer and named parameter collections.

use rand::Rng;

use crate::autodiff::{Param, Var};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// `y = x W + b` with `W: [in, out]`.
#[derive(Debug, Clone)]
pub struct Linear<T: Float> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Float> Linear<T> {
    /// Uniform init in `±1/sqrt(in)` for weight and bias.
    pub fn new(name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Linear {
            weight: Param::new(
                format!("{name}.weight"),
                Tensor::uniform(&[fan_in, fan_out], -bound, bound, rng),
            ),
            bias: Param::new(
                format!("{name}.bias"),
                Tensor::uniform(&[fan_out], -bound, bound, rng),
            ),
        }
    }

    pub fn zeros(name: &str, fan_in: usize, fan_out: usize) -> Self {
        Linear {
            weight: Param::new(format!("{name}.weight"), Tensor::zeros(&[fan_in, fan_out])),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[fan_out])),
        }
    }

    pub fn forward<'t>(&self, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let tape = x.tape();
        x.matmul(&tape.param(&self.weight))?
            .add_row(&tape.param(&self.bias))
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn params(&self) -> Vec<Param<T>> {
        vec![self.weight.clone(), self.bias.clone()]
    }
}

/// A network whose parameters can be listed in a fixed order.
pub trait Module<T: Float> {
    fn params(&self) -> Vec<Param<T>>;

    fn set_requires_grad(&self, on: bool) {
        for p in self.params() {
            p.set_requires_grad(on);
        }
    }

    fn zero_grad(&self) {
        for p in self.params() {
            p.zero_grad();
        }
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.value().len()).sum()
    }

    /// CRC32 over every parameter's name and bits.
    fn checksum(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for p in self.params() {
            h.update(p.name().as_bytes());
            p.value().checksum(&mut h);
        }
        h.finalize()
    }

    /// `(name, value)` pairs for serialization.
    fn state(&self) -> Vec<(String, Tensor<T>)> {
        self.params()
            .iter()
            .map(|p| (p.name().to_string(), (*p.value()).clone()))
            .collect()
    }

    /// Overwrite parameters from `(name, value)` pairs; every parameter must
    /// be present with its current shape.
    fn load_state(&self, state: &[(String, Tensor<T>)]) -> Result<()> {
        for p in self.params() {
            let (_, v) = state
                .iter()
                .find(|(n, _)| n == p.name())
                .ok_or_else(|| Error::MissingTensor(p.name().to_string()))?;
            p.set_value(v.clone())?;
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Debug)]
pub struct Adam<T: Float> {
    params: Vec<Param<T>>,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    steps: u32,
}

impl<T: Float> Adam<T> {
    /// Defaults `beta1 = 0.9`, `beta2 = 0.999`, `eps = 1e-8`.
    pub fn new(params: Vec<Param<T>>, lr: f64) -> Self {
        let m = params.iter().map(|p| vec![T::zero(); p.value().len()]).collect();
        let v = params.iter().map(|p| vec![T::zero(); p.value().len()]).collect();
        Adam {
            params,
            m,
            v,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 0,
        }
    }

    pub fn steps(&self) -> u32 {
        self.steps
    }

    /// Apply one update from the accumulated gradients, then clear them.
    /// Parameters without a gradient are treated as having a zero gradient.
    pub fn step(&mut self) {
        self.steps += 1;
        let (b1, b2) = (T::from_f64(self.beta1), T::from_f64(self.beta2));
        let c1 = T::from_f64(1.0 - self.beta1.powi(self.steps as i32));
        let c2 = T::from_f64(1.0 - self.beta2.powi(self.steps as i32));
        let lr = T::from_f64(self.lr);
        let eps = T::from_f64(self.eps);
        let one = T::one();
        for ((p, m), v) in self.params.iter().zip(&mut self.m).zip(&mut self.v) {
            let g = p.grad_or_zeros();
            p.update(|w| {
                for (((w, m), v), &g) in w.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    let m_hat = *m / c1;
                    let v_hat = *v / c2;
                    *w -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            });
            p.zero_grad();
        }
    }

    pub fn zero_grad(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }
}
