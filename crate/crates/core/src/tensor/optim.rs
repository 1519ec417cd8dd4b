//! Named parameters and the Adam + lookahead + gradient-centralization optimizer.

use std::collections::HashMap;
use std::sync::Arc;

use super::autograd::{Gradients, Tape, Var};
use super::dense::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Inner steps between slow-weight synchronisations.
    pub lookahead_k: u64,
    /// Slow-weight interpolation factor.
    pub lookahead_alpha: f64,
    pub gradient_centralization: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 3e-5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            lookahead_k: 6,
            lookahead_alpha: 0.5,
            gradient_centralization: true,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lookahead_alpha > 0.0 && self.lookahead_alpha <= 1.0) {
            return Err(Error::contract(format!(
                "lookahead_alpha {} not in (0, 1]",
                self.lookahead_alpha
            )));
        }
        if self.lookahead_k == 0 {
            return Err(Error::contract("lookahead_k must be at least 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::contract("learning rate must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    name: String,
    value: Arc<Tensor>,
    grad: Option<Tensor>,
    first_moment: Tensor,
    second_moment: Tensor,
    slow: Tensor,
}

impl Param {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn grad(&self) -> Option<&Tensor> {
        self.grad.as_ref()
    }

    pub fn slow(&self) -> &Tensor {
        &self.slow
    }
}

/// The parameters of one model together with their optimizer state.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    params: Vec<Param>,
    index: HashMap<String, usize>,
    steps: u64,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter and returns its position.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter name {name}")));
        }
        let shape = value.shape().to_vec();
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Param {
            name,
            slow: value.clone(),
            value: Arc::new(value),
            grad: None,
            first_moment: Tensor::zeros(shape.clone()),
            second_moment: Tensor::zeros(shape),
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn value(&self, id: usize) -> &Tensor {
        &self.params[id].value
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Records every parameter on `tape` as a differentiable leaf, in registration order.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.params
            .iter()
            .map(|p| tape.param(Arc::clone(&p.value)))
            .collect()
    }

    /// Stores the gradients of the leaves returned by [`ParamSet::bind`].
    pub fn capture_grads(&mut self, grads: &Gradients, bound: &[Var<'_>]) -> Result<()> {
        if bound.len() != self.params.len() {
            return Err(Error::contract("bound variables do not match the parameter set"));
        }
        for (p, v) in self.params.iter_mut().zip(bound) {
            p.grad = Some(grads.get_or_zeros(*v));
        }
        Ok(())
    }

    pub fn set_grad(&mut self, id: usize, grad: Tensor) -> Result<()> {
        let p = &mut self.params[id];
        if grad.shape() != p.value.shape() {
            return Err(Error::shape("set_grad", p.value.shape(), grad.shape()));
        }
        p.grad = Some(grad);
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Rescales all gradients so their global norm is at most `max_norm`;
    /// returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let total: f64 = self
            .params
            .iter()
            .filter_map(|p| p.grad.as_ref())
            .map(|g| g.data().iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        if total > max_norm {
            let s = max_norm / total;
            for g in self.params.iter_mut().filter_map(|p| p.grad.as_mut()) {
                g.data_mut().iter_mut().for_each(|x| *x *= s);
            }
        }
        total
    }

    /// `(name, value)` pairs in registration order.
    pub fn records(&self) -> Vec<(String, Tensor)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), (*p.value).clone()))
            .collect()
    }

    /// Overwrites values (and resets optimizer state) from named records.
    pub fn load_records(&mut self, records: &[(String, Tensor)]) -> Result<()> {
        for (name, t) in records {
            let Some(&id) = self.index.get(name) else {
                continue;
            };
            let p = &mut self.params[id];
            if p.value.shape() != t.shape() {
                return Err(Error::shape("load_records", p.value.shape(), t.shape()));
            }
            p.value = Arc::new(t.clone());
            p.slow = t.clone();
            p.first_moment = Tensor::zeros(t.shape().to_vec());
            p.second_moment = Tensor::zeros(t.shape().to_vec());
            p.grad = None;
        }
        for p in &self.params {
            if !records.iter().any(|(n, _)| n == &p.name) {
                return Err(Error::Format(format!("missing parameter record {}", p.name)));
            }
        }
        Ok(())
    }
}

/// Shifts a gradient of rank >= 2 to zero mean over all axes but the first.
pub fn centralize(grad: &mut Tensor) {
    if grad.rank() < 2 {
        return;
    }
    let rows = grad.shape()[0];
    let width = grad.numel() / rows.max(1);
    if width == 0 {
        return;
    }
    for row in grad.data_mut().chunks_mut(width) {
        let mean = row.iter().sum::<f64>() / width as f64;
        row.iter_mut().for_each(|x| *x -= mean);
    }
}

/// One optimizer step over every parameter; consumes the stored gradients.
pub fn ranger_step(params: &mut ParamSet, config: &OptimizerConfig) -> Result<()> {
    config.validate()?;
    if let Some(p) = params.params.iter().find(|p| p.grad.is_none()) {
        return Err(Error::contract(format!("parameter {} has no gradient", p.name)));
    }
    let t = (params.steps + 1) as i32;
    let bc1 = 1.0 - config.beta1.powi(t);
    let bc2 = 1.0 - config.beta2.powi(t);
    let sync = (params.steps + 1).is_multiple_of(config.lookahead_k);

    for p in &mut params.params {
        let mut g = p.grad.take().expect("checked above");
        if config.gradient_centralization {
            centralize(&mut g);
        }
        let value = Arc::make_mut(&mut p.value);
        let m = p.first_moment.data_mut();
        let v = p.second_moment.data_mut();
        for (i, (x, gi)) in value.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * gi;
            v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            *x -= config.learning_rate * m_hat / (v_hat.sqrt() + config.epsilon);
        }
        if sync {
            for (s, x) in p.slow.data_mut().iter_mut().zip(value.data_mut()) {
                *s += config.lookahead_alpha * (*x - *s);
                *x = *s;
            }
        }
    }
    params.steps += 1;
    Ok(())
}
