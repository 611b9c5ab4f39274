//! Named parameter storage, initializers and the AdamW optimizer.

use crate::error::{ensure, Error, Result};
use crate::tensor::{Scalar, Tensor};
use rand::Rng;
use std::collections::HashMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named collection of trainable tensors.
#[derive(Clone, Debug)]
pub struct ParamStore<T: Scalar = f32> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        ensure!(
            !self.index.contains_key(&name),
            Error::invalid("ParamStore::add", format!("duplicate parameter {name}"))
        );
        self.index.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        Ok(ParamId(self.values.len() - 1))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    /// Replace a value, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        value.expect_same_shape("ParamStore::set", &self.values[id.0])?;
        self.values[id.0] = value;
        Ok(())
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Total number of scalar entries.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Copy values for every name present in `other`; shapes must agree.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        for (name, &i) in &self.index {
            let j = other.index.get(name).ok_or_else(|| {
                Error::Format(format!("missing parameter {name}"))
            })?;
            other.values[*j].expect_same_shape("ParamStore::load_from", &self.values[i])?;
            self.values[i] = other.values[*j].clone();
        }
        Ok(())
    }
}

/// Uniform fan-in initialization `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn init_fan_in<T: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let a = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::uniform(shape, -a, a, rng)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-3,
        }
    }
}

/// Adam moments with decoupled weight decay scaled by the learning rate.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(store: &ParamStore, config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            m: store.values.iter().map(|t| Tensor::zeros(t.shape())).collect(),
            v: store.values.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)], lr: f64) -> Result<()> {
        ensure!(
            self.m.len() == store.len(),
            Error::invalid("AdamW::step", "optimizer state does not match the parameter store")
        );
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (id, g) in grads {
            let p = &mut store.values[id.0];
            g.expect_same_shape("AdamW::step", p)?;
            let m = self.m[id.0].data_mut();
            let v = self.v[id.0].data_mut();
            for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                let gi = gi as f64;
                *mi = (c.beta1 * *mi as f64 + (1.0 - c.beta1) * gi) as f32;
                *vi = (c.beta2 * *vi as f64 + (1.0 - c.beta2) * gi * gi) as f32;
                let mh = *mi as f64 / bc1;
                let vh = *vi as f64 / bc2;
                let pv = *pi as f64;
                *pi = (pv - lr * (mh / (vh.sqrt() + c.eps) + c.weight_decay * pv)) as f32;
            }
        }
        Ok(())
    }

    /// `(step, first moments, second moments)` for checkpointing.
    pub fn state(&self) -> (u64, &[Tensor], &[Tensor]) {
        (self.step, &self.m, &self.v)
    }

    pub fn from_state(config: AdamWConfig, step: u64, m: Vec<Tensor>, v: Vec<Tensor>) -> Self {
        Self { config, step, m, v }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_lr_leaves_params_unchanged() {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::full(&[3], 0.7)).unwrap();
        let before = s.clone();
        let mut opt = AdamW::new(&s, AdamWConfig::default());
        opt.step(&mut s, &[(id, Tensor::ones(&[3]))], 0.0).unwrap();
        assert_eq!(s.get(id), before.get(id));
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::zeros(&[2])).unwrap();
        let mut opt = AdamW::new(&s, AdamWConfig { weight_decay: 0.0, ..Default::default() });
        let g = Tensor::new(vec![2], vec![3.0, -0.5]).unwrap();
        opt.step(&mut s, &[(id, g)], 0.01).unwrap();
        let d = s.get(id).data();
        assert!((d[0] + 0.01).abs() < 1e-6 && (d[1] - 0.01).abs() < 1e-6);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.add("a", Tensor::zeros(&[1])).unwrap();
        assert!(s.add("a", Tensor::zeros(&[1])).is_err());
    }
}
