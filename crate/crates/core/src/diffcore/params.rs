use std::collections::BTreeMap;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// One trainable tensor with its accumulated gradient and Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub value: Tensor,
    pub grad: Tensor,
    pub m: Tensor,
    pub v: Tensor,
}

impl Parameter {
    fn new(value: Tensor) -> Self {
        let shape = value.shape().to_vec();
        Parameter {
            value,
            grad: Tensor::zeros(&shape),
            m: Tensor::zeros(&shape),
            v: Tensor::zeros(&shape),
        }
    }
}

/// Named parameters in lexicographic name order, plus the optimizer step count.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    params: BTreeMap<String, Parameter>,
    step: u64,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter {name}")));
        }
        self.params.insert(name, Parameter::new(value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name).map(|p| &mut p.value)
    }

    pub fn parameter(&self, name: &str) -> Option<&Parameter> {
        self.params.get(name)
    }

    pub fn parameter_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.params.get_mut(name)
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|p| &p.grad)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Parameter)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Parameter)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub(crate) fn accumulate_grad(&mut self, name: &str, g: &[f64]) {
        let p = self
            .params
            .get_mut(name)
            .unwrap_or_else(|| panic!("gradient for unknown parameter {name}"));
        for (d, s) in p.grad.data_mut().iter_mut().zip(g) {
            *d += s;
        }
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Overwrites every value whose name starts with `prefix` with zeros.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for (name, p) in self.params.iter_mut() {
            if name.starts_with(prefix) {
                p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
}

/// Adam hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update over all parameters in name order; gradients
/// are zeroed afterwards.
pub fn adam_step(store: &mut ParameterStore, cfg: &AdamConfig) {
    store.step += 1;
    let t = store.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for p in store.params.values_mut() {
        let Parameter { value, grad, m, v } = p;
        let it = value
            .data_mut()
            .iter_mut()
            .zip(grad.data_mut())
            .zip(m.data_mut().iter_mut().zip(v.data_mut()));
        for ((x, g), (mi, vi)) in it {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * *g;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * *g * *g;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *x -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            *g = 0.0;
        }
    }
}

/// Central-difference gradient of `f` for every parameter coordinate.
pub fn finite_diff_grad<F>(mut f: F, store: &ParameterStore, h: f64) -> BTreeMap<String, Tensor>
where
    F: FnMut(&ParameterStore) -> f64,
{
    let mut probe = store.clone();
    let mut out = BTreeMap::new();
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for name in names {
        let n = store.get(&name).map_or(0, Tensor::numel);
        let mut g = Tensor::zeros(store.get(&name).expect("listed").shape());
        for i in 0..n {
            let orig = probe.get(&name).expect("listed").data()[i];
            probe.get_mut(&name).expect("listed").data_mut()[i] = orig + h;
            let up = f(&probe);
            probe.get_mut(&name).expect("listed").data_mut()[i] = orig - h;
            let down = f(&probe);
            probe.get_mut(&name).expect("listed").data_mut()[i] = orig;
            g.data_mut()[i] = (up - down) / (2.0 * h);
        }
        out.insert(name, g);
    }
    out
}

/// Norm-wise relative error `‖a − b‖ / max(‖a‖, ‖b‖, floor)`.
pub fn relative_error(a: &Tensor, b: &Tensor, floor: f64) -> f64 {
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    diff / a.norm().max(b.norm()).max(floor)
}
