use std::collections::HashMap;

use rand::Rng;

use super::tape::Gradients;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// A learnable tensor with its gradient accumulator and Adam moments.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub gradient: Tensor,
    pub adam_m: Tensor,
    pub adam_v: Tensor,
    pub step_count: u64,
}

impl Parameter {
    fn new(name: String, tensor: Tensor) -> Self {
        let zeros = Tensor::zeros(tensor.shape());
        Parameter {
            name,
            gradient: zeros.clone(),
            adam_m: zeros.clone(),
            adam_v: zeros,
            tensor,
            step_count: 0,
        }
    }
}

/// Ordered, named collection of parameters. Registration order is the
/// serialization order and must be reproducible from a model config.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::InvalidInput(format!("duplicate parameter `{name}`")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter::new(name, tensor));
        Ok(id)
    }

    /// Registers a `rows x cols` matrix drawn from uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    pub fn register_uniform<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        fan_in: usize,
        rng: &mut R,
    ) -> Result<ParamId> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        self.register(name, Tensor::matrix(rows, cols, data)?)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn set_tensor(&mut self, id: ParamId, tensor: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.tensor.shape() != tensor.shape() {
            return Err(Error::shape(
                "set_tensor",
                format!(
                    "{}: expected {:?}, got {:?}",
                    p.name,
                    p.tensor.shape(),
                    tensor.shape()
                ),
            ));
        }
        p.tensor = tensor;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.gradient = Tensor::zeros(p.tensor.shape());
        }
    }

    /// Adds `grads` into each parameter's accumulator. Parameters absent
    /// from `grads` were unreached and keep their current gradient.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (id, g) in grads.params() {
            let acc = self.params[id.0].gradient.data_mut();
            for (a, &x) in acc.iter_mut().zip(g.data()) {
                *a += x;
            }
        }
    }

    /// Snapshot of all parameter values (used for best-epoch restore).
    pub fn snapshot(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.tensor.clone()).collect()
    }

    pub fn restore(&mut self, snapshot: &[Tensor]) {
        for (p, t) in self.params.iter_mut().zip(snapshot) {
            p.tensor = t.clone();
        }
    }
}
