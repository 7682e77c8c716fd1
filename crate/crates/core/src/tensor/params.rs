use rand::Rng;

use super::{Gradients, Result, Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in `±sqrt(6 / fan_in)`, fan-in taken as the row count.
    KaimingUniform,
    Zeros,
    Ones,
    Constant(f64),
}

/// Named trainable tensors, in registration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        init: Init,
        rng: &mut R,
    ) -> ParamId {
        let mut t = Tensor::zeros(shape);
        match init {
            Init::KaimingUniform => {
                let fan_in = shape.first().copied().unwrap_or(1).max(1) as f64;
                let bound = (6.0 / fan_in).sqrt();
                for v in t.data_mut() {
                    *v = rng.random_range(-bound..bound);
                }
            }
            Init::Zeros => {}
            Init::Ones => t.data_mut().fill(1.0),
            Init::Constant(c) => t.data_mut().fill(c),
        }
        self.insert(name.into(), t)
    }

    pub fn insert(&mut self, name: String, t: Tensor) -> ParamId {
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(t.with_requires_grad(true));
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total scalar count over all parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Replaces values by name; shapes and the name set must match exactly.
    pub fn load_from(&mut self, entries: &[(String, Tensor)]) -> Result<()> {
        if entries.len() != self.values.len() {
            return Err(TensorError::Checkpoint(format!(
                "expected {} parameters, found {}",
                self.values.len(),
                entries.len()
            )));
        }
        for (name, t) in entries {
            let id = self
                .id(name)
                .ok_or_else(|| TensorError::UnknownParam(name.clone()))?;
            if self.values[id.0].shape() != t.shape() {
                return Err(TensorError::Checkpoint(format!(
                    "{name}: shape {:?} != {:?}",
                    t.shape(),
                    self.values[id.0].shape()
                )));
            }
            self.values[id.0] = t.clone().with_requires_grad(true);
        }
        Ok(())
    }

    /// Records every parameter as a gradient-carrying leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Binding {
        Binding {
            vars: self.values.iter().map(|t| tape.leaf(t.clone())).collect(),
        }
    }
}

/// Parameter handles for one tape.
#[derive(Debug, Clone)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Per-parameter gradients in store order.
    pub fn collect(&self, grads: &Gradients) -> Vec<Vec<f64>> {
        self.vars.iter().map(|&v| grads.wrt(v)).collect()
    }
}
