use std::collections::BTreeMap;

use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tensor::Tensor;

/// Adam hyperparameters other than the learning rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Moments<T> {
    first: Vec<T>,
    second: Vec<T>,
}

/// Named trainable tensors plus their Adam state. Iteration order is the
/// lexicographic order of parameter paths.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Tensor<T>>,
    moments: BTreeMap<String, Moments<T>>,
    step: u64,
    pub adam: AdamConfig,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: BTreeMap::new(), moments: BTreeMap::new(), step: 0, adam: AdamConfig::default() }
    }

    /// Inserts or replaces a parameter; its optimizer state is reset.
    pub fn insert(&mut self, name: impl Into<String>, mut tensor: Tensor<T>) {
        let name = name.into();
        tensor.requires_grad = true;
        let n = tensor.numel();
        self.moments.insert(name.clone(), Moments { first: vec![T::zero(); n], second: vec![T::zero(); n] });
        self.params.insert(name, tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn zero_grad(&mut self) {
        self.params.values_mut().for_each(Tensor::zero_grad);
    }

    /// Copies parameter values (not optimizer state) from `other`.
    pub fn load_values(&mut self, other: &ParamStore<T>) -> Result<()> {
        for (name, t) in &other.params {
            let dst = self.params.get_mut(name).ok_or_else(|| TensorError::UnknownParam(name.clone()))?;
            if dst.shape() != t.shape() {
                return Err(TensorError::shape("load_values", format!("{name}: {:?} vs {:?}", dst.shape(), t.shape())));
            }
            dst.data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }

    /// One bias-corrected Adam step over every parameter; gradients are
    /// cleared afterwards. A parameter without a gradient is treated as
    /// having a zero gradient.
    pub fn adam_update(&mut self, lr: f64) -> Result<()> {
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(TensorError::invalid("adam_update", format!("learning rate must be positive, got {lr}")));
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.adam;
        let t = self.step as i32;
        let bc1 = T::from_f64(1.0 - beta1.powi(t));
        let bc2 = T::from_f64(1.0 - beta2.powi(t));
        let (b1, b2) = (T::from_f64(beta1), T::from_f64(beta2));
        let (one_b1, one_b2) = (T::from_f64(1.0 - beta1), T::from_f64(1.0 - beta2));
        let (lr, eps) = (T::from_f64(lr), T::from_f64(eps));
        for (name, param) in self.params.iter_mut() {
            let m = self.moments.get_mut(name).expect("moments track params");
            if let Some(grad) = param.grad().map(<[T]>::to_vec) {
                let data = param.data_mut();
                for i in 0..data.len() {
                    let g = grad[i];
                    m.first[i] = b1 * m.first[i] + one_b1 * g;
                    m.second[i] = b2 * m.second[i] + one_b2 * g * g;
                    let mhat = m.first[i] / bc1;
                    let vhat = m.second[i] / bc2;
                    data[i] = data[i] - lr * mhat / (vhat.sqrt() + eps);
                }
            } else {
                // zero gradient: moments still decay
                let data = param.data_mut();
                for i in 0..data.len() {
                    m.first[i] = b1 * m.first[i];
                    m.second[i] = b2 * m.second[i];
                    let mhat = m.first[i] / bc1;
                    let vhat = m.second[i] / bc2;
                    data[i] = data[i] - lr * mhat / (vhat.sqrt() + eps);
                }
            }
            param.clear_grad();
        }
        Ok(())
    }
}
