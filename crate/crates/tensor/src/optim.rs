//! Bias-corrected Adam.

use crate::error::{Result, TensorError};
use crate::float::Float;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, beta1: f64) -> Self {
        AdamConfig { lr, beta1, beta2: 0.999, eps: 1e-8 }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig::new(1e-3, 0.9)
    }
}

/// Optimizer state for one parameter list; moments are kept in parameter order.
#[derive(Debug, Clone)]
pub struct AdamState<T: Float = f32> {
    pub step: u64,
    pub first_moment: Vec<Vec<T>>,
    pub second_moment: Vec<Vec<T>>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Float> AdamState<T> {
    pub fn new(params: &[Tensor<T>], cfg: AdamConfig) -> Result<Self> {
        if cfg.lr <= 0.0 || !cfg.lr.is_finite() {
            return Err(TensorError::Contract(format!("Adam lr must be positive, got {}", cfg.lr)));
        }
        for (name, b) in [("beta1", cfg.beta1), ("beta2", cfg.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(TensorError::Contract(format!("Adam {name} must lie in [0, 1), got {b}")));
            }
        }
        Ok(AdamState {
            step: 0,
            first_moment: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
            second_moment: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
        })
    }

    /// One update of every parameter from its current gradient. Gradients
    /// are left in place.
    pub fn step(&mut self, params: &[Tensor<T>]) -> Result<()> {
        if params.len() != self.first_moment.len() {
            return Err(TensorError::Contract(format!(
                "Adam state tracks {} parameters, got {}",
                self.first_moment.len(),
                params.len()
            )));
        }
        let grads: Vec<Vec<T>> = params
            .iter()
            .enumerate()
            .map(|(i, p)| {
                p.grad().ok_or_else(|| {
                    TensorError::Contract(format!("parameter {i} (shape {:?}) has no gradient", p.shape()))
                })
            })
            .collect::<Result<_>>()?;

        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::from_f64(self.beta1), T::from_f64(self.beta2));
        let (one_b1, one_b2) = (T::from_f64(1.0 - self.beta1), T::from_f64(1.0 - self.beta2));
        let (lr, eps) = (T::from_f64(self.lr), T::from_f64(self.eps));
        let (inv_bc1, inv_bc2) = (T::from_f64(1.0 / bc1), T::from_f64(1.0 / bc2));

        for ((p, g), (m, v)) in
            params.iter().zip(&grads).zip(self.first_moment.iter_mut().zip(self.second_moment.iter_mut()))
        {
            if m.len() != g.len() {
                return Err(TensorError::Contract(format!(
                    "moment of length {} does not match parameter of length {}",
                    m.len(),
                    g.len()
                )));
            }
            p.update_data(|data| {
                for i in 0..data.len() {
                    m[i] = b1 * m[i] + one_b1 * g[i];
                    v[i] = b2 * v[i] + one_b2 * g[i] * g[i];
                    let mhat = m[i] * inv_bc1;
                    let vhat = v[i] * inv_bc2;
                    data[i] = data[i] - lr * mhat / (vhat.sqrt() + eps);
                }
            });
        }
        Ok(())
    }
}

/// Functional form of [`AdamState::step`].
pub fn adam_step<T: Float>(params: &[Tensor<T>], state: &mut AdamState<T>) -> Result<()> {
    state.step(params)
}

pub fn zero_grads<T: Float>(params: &[Tensor<T>]) {
    params.iter().for_each(Tensor::zero_grad);
}
